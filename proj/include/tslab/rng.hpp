#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tslab/error.hpp"

namespace tslab {

// FNV-1a over an arbitrary byte string, used to derive child seeds.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Deterministic random stream. mt19937_64 output is fully specified by the
// standard, and all derived draws below use only exactly-rounded IEEE
// operations, so identical seeds give identical sequences on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes exactly two uniforms per call.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double z = std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.141592653589793238462643 * u2);
    return mean + stddev * z;
  }

  // Unbiased integer in [0, n) by rejection.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw UsageError("uniform_index: n must be positive");
    std::uint64_t bound = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = gen_();
    while (x >= bound) x = gen_();
    return static_cast<std::size_t>(x % n);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream named by `tag`. Children of the same parent
  // with distinct tags are decorrelated; the mapping is pure.
  Rng derive(std::string_view tag) const {
    std::string key(reinterpret_cast<const char*>(&seed_), sizeof(seed_));
    key.append(tag);
    return Rng(fnv1a64(key));
  }

  std::string serialize() const {
    std::ostringstream os;
    os << seed_ << ' ' << gen_;
    return os.str();
  }

  static Rng deserialize(const std::string& s) {
    std::istringstream is(s);
    std::uint64_t seed = 0;
    is >> seed;
    Rng r(seed);
    is >> r.gen_;
    if (!is) throw UsageError("Rng::deserialize: malformed state string");
    return r;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

// Seed for a named component of an experiment.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
  std::string key(reinterpret_cast<const char*>(&root), sizeof(root));
  key.append(tag);
  return fnv1a64(key);
}

}  // namespace tslab
