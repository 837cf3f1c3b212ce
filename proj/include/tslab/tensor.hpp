#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tslab/error.hpp"

namespace tslab {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// Tape node. `backprop` reads this node's grad and accumulates into the
// parents' grads; it is only recorded while grad mode is on and at least
// one input requires grad.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void accumulate(const std::vector<double>& g) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool mode = true;
  return mode;
}

// Raw row-major kernels. ikj order so the inner loop is contiguous; the
// summation order is fixed, which the determinism contract relies on.
inline void mm(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×n] += a[k×m]^T · b[k×n]
inline void mm_at_b_acc(const double* a, const double* b, double* c,
                        std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[p * m + i];
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×k] += a[m×n] · b[k×n]^T
inline void mm_a_bt_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = a + i * n;
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      c[i * k + p] += s;
    }
  }
}

}  // namespace detail

// Suppresses graph recording in its scope; evaluation-only code paths use
// this to avoid building tapes they never differentiate.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

// N-dimensional row-major double tensor with reverse-mode autodiff.
// Handles share the underlying node; copying a Tensor is cheap.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data.assign(numel(t.node_->shape), 0.0);
    return t;
  }

  static Tensor full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor scalar(double value) { return full({1}, value); }

  static Tensor from_vector(std::vector<double> data, Shape shape) {
    if (numel(shape) != data.size())
      throw ShapeError("from_vector: " + std::to_string(data.size()) +
                       " values do not fill shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.empty() ? 0 : node_->shape[0]; }
  std::size_t cols() const {
    return node_->shape.size() < 2 ? 1 : node_->shape[1];
  }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& vec() { return node_->data; }
  const std::vector<double>& vec() const { return node_->data; }

  double at(std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->data[r * cols() + c];
  }

  double value() const {
    if (size() != 1) throw UsageError("value(): tensor is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (node_->grad.empty())
      throw UsageError("grad(): no gradient has been populated");
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Deep copy of values only; the copy is a detached leaf.
  Tensor clone_detached() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
  }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op_result(Shape shape, std::vector<double> data,
                               std::vector<Tensor> inputs,
                               std::function<void(detail::TensorNode&)> back);
};

inline Tensor make_op_result(Shape shape, std::vector<double> data,
                             std::vector<Tensor> inputs,
                             std::function<void(detail::TensorNode&)> back) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (detail::grad_mode()) {
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backprop = std::move(back);
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [](detail::TensorNode& n) {
                          if (n.parents[0]->requires_grad)
                            n.parents[0]->accumulate(n.grad);
                          if (n.parents[1]->requires_grad)
                            n.parents[1]->accumulate(n.grad);
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make_op_result(a.shape(), std::move(out), {a, b},
                        [](detail::TensorNode& n) {
                          if (n.parents[0]->requires_grad)
                            n.parents[0]->accumulate(n.grad);
                          if (n.parents[1]->requires_grad) {
                            auto& g = n.parents[1]->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] -= n.grad[i];
                          }
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make_op_result(
      a.shape(), std::move(out), {a, b}, [](detail::TensorNode& n) {
        if (n.parents[0]->requires_grad) {
          auto& g = n.parents[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += n.grad[i] * n.parents[1]->data[i];
        }
        if (n.parents[1]->requires_grad) {
          auto& g = n.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += n.grad[i] * n.parents[0]->data[i];
        }
      });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
  return make_op_result(a.shape(), std::move(out), {a},
                        [s](detail::TensorNode& n) {
                          if (!n.parents[0]->requires_grad) return;
                          auto& g = n.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += n.grad[i] * s;
                        });
}

// m[r×c] + row-broadcast bias[c]
inline Tensor add_row_bias(const Tensor& m, const Tensor& bias) {
  if (m.shape().size() != 2 || bias.size() != m.cols())
    throw ShapeError("add_row_bias: shapes " + shape_str(m.shape()) + " and " +
                     shape_str(bias.shape()) + " are incompatible");
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = m.at(i, j) + bias.at(j);
  return make_op_result(
      m.shape(), std::move(out), {m, bias}, [r, c](detail::TensorNode& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
          auto& g = n.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += n.grad[i * c + j];
        }
      });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions of " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " do not agree");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  detail::mm(a.data(), b.data(), out.data(), m, k, n);
  return make_op_result(
      {m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorNode& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pa.requires_grad)
          detail::mm_a_bt_acc(nd.grad.data(), pb.data.data(),
                              pa.grad_buffer().data(), m, n, k);
        if (pb.requires_grad)
          detail::mm_at_b_acc(pa.data.data(), nd.grad.data(),
                              pb.grad_buffer().data(), m, k, n);
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw ShapeError("transpose: expected rank 2, got " +
                     shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
  return make_op_result({c, r}, std::move(out), {a},
                        [r, c](detail::TensorNode& n) {
                          if (!n.parents[0]->requires_grad) return;
                          auto& g = n.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              g[i * c + j] += n.grad[j * r + i];
                        });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  std::vector<double> out(a.vec());
  return make_op_result(std::move(shape), std::move(out), {a},
                        [](detail::TensorNode& n) {
                          if (n.parents[0]->requires_grad)
                            n.parents[0]->accumulate(n.grad);
                        });
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (a.shape().size() != 2 || r1 > a.rows() || r0 >= r1)
    throw ShapeError("slice_rows: rows [" + std::to_string(r0) + ", " +
                     std::to_string(r1) + ") out of range for " +
                     shape_str(a.shape()));
  const std::size_t c = a.cols();
  std::vector<double> out(a.data() + r0 * c, a.data() + r1 * c);
  return make_op_result(
      {r1 - r0, c}, std::move(out), {a}, [r0, c](detail::TensorNode& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          g[r0 * c + i] += n.grad[i];
      });
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.shape().size() != 2 || c1 > a.cols() || c0 >= c1)
    throw ShapeError("slice_cols: cols [" + std::to_string(c0) + ", " +
                     std::to_string(c1) + ") out of range for " +
                     shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols(), w = c1 - c0;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.at(i, c0 + j);
  return make_op_result(
      {r, w}, std::move(out), {a}, [r, c, c0, w](detail::TensorNode& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j)
            g[i * c + c0 + j] += n.grad[i * w + j];
      });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.shape().size() != 2 || p.rows() != r)
      throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    widths.push_back(w);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[i * total + off + j] = p.at(i, j);
    off += w;
  }
  return make_op_result(
      {r, total}, std::move(out), parts,
      [r, total, widths](detail::TensorNode& n) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          const std::size_t w = widths[k];
          if (n.parents[k]->requires_grad) {
            auto& g = n.parents[k]->grad_buffer();
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j)
                g[i * w + j] += n.grad[i * total + off + j];
          }
          off += w;
        }
      });
}

// Row-wise softmax, stabilized by row-max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.shape().size() != 2)
    throw ShapeError("softmax_rows: expected rank 2, got " +
                     shape_str(x.shape()));
  for (std::size_t i = 0; i < x.size(); ++i)
    if (std::isnan(x.at(i)))
      throw NumericError("softmax_rows: NaN in input");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] - m);
      s += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
  }
  // dx_j = y_j * (dy_j - sum_k dy_k y_k), per row; y is this node's output
  return make_op_result(
      x.shape(), std::move(out), {x}, [r, c](detail::TensorNode& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_buffer();
        const auto& y = n.data;
        for (std::size_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j)
            dot += n.grad[i * c + j] * y[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += y[i * c + j] * (n.grad[i * c + j] - dot);
        }
      });
}

// Per-vector layer normalization over the last dimension, then affine.
inline Tensor layernorm(const Tensor& x, const Tensor& gain,
                        const Tensor& bias, double eps = 1e-5) {
  if (x.shape().empty())
    throw ShapeError("layernorm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("layernorm: gain/bias " + shape_str(gain.shape()) +
                     " do not match feature dim " + std::to_string(d));
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = x.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double t = row[j] - mean;
      var += t * t;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gain.at(j) + bias.at(j);
    }
  }
  return make_op_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat, inv_std](detail::TensorNode& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        for (std::size_t i = 0; i < rows; ++i) {
          const double* go = n.grad.data() + i * d;
          const double* h = xhat->data() + i * d;
          if (pg.requires_grad) {
            auto& gg = pg.grad_buffer();
            for (std::size_t j = 0; j < d; ++j) gg[j] += go[j] * h[j];
          }
          if (pb.requires_grad) {
            auto& gb = pb.grad_buffer();
            for (std::size_t j = 0; j < d; ++j) gb[j] += go[j];
          }
          if (px.requires_grad) {
            // dL/dxhat_j = go_j * gain_j; standard layernorm input grad
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = go[j] * pg.data[j];
              sum_dh += dh;
              sum_dh_h += dh * h[j];
            }
            auto& gx = px.grad_buffer();
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = go[j] * pg.data[j];
              gx[i * d + j] += (*inv_std)[i] *
                               (dh - sum_dh * inv_d - h[j] * sum_dh_h * inv_d);
            }
          }
        }
      });
}

// Tanh-approximation GELU (GPT-2 convention).
inline Tensor gelu(const Tensor& x) {
  constexpr double kCoef = 0.044715;
  const double kRoot = std::sqrt(2.0 / 3.141592653589793238462643);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.at(i);
    const double u = kRoot * (v + kCoef * v * v * v);
    out[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  return make_op_result(
      x.shape(), std::move(out), {x}, [kRoot](detail::TensorNode& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_buffer();
        const auto& xv = n.parents[0]->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = xv[i];
          const double u = kRoot * (v + 0.044715 * v * v * v);
          const double t = std::tanh(u);
          const double du = kRoot * (1.0 + 3.0 * 0.044715 * v * v);
          const double dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
          g[i] += n.grad[i] * dy;
        }
      });
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
  return make_op_result({1}, {s}, {x}, [](detail::TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->grad_buffer();
    for (double& v : g) v += n.grad[0];
  });
}

inline Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) throw UsageError("mean_all: empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
  const double inv = 1.0 / static_cast<double>(x.size());
  return make_op_result({1}, {s * inv}, {x}, [inv](detail::TensorNode& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->grad_buffer();
    for (double& v : g) v += n.grad[0] * inv;
  });
}

// Mean squared error against a (typically constant) target.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mse_loss");
  const std::size_t n = pred.size();
  if (n == 0) throw UsageError("mse_loss: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred.at(i) - target.at(i);
    s += d * d;
  }
  const double inv = 1.0 / static_cast<double>(n);
  return make_op_result(
      {1}, {s * inv}, {pred, target}, [inv](detail::TensorNode& nd) {
        const auto& p = nd.parents[0]->data;
        const auto& t = nd.parents[1]->data;
        if (nd.parents[0]->requires_grad) {
          auto& g = nd.parents[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += nd.grad[0] * 2.0 * (p[i] - t[i]) * inv;
        }
        if (nd.parents[1]->requires_grad) {
          auto& g = nd.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] -= nd.grad[0] * 2.0 * (p[i] - t[i]) * inv;
        }
      });
}

// Mean cross entropy of row-wise softmax(logits) against integer targets.
inline Tensor cross_entropy_rows(const Tensor& logits,
                                 const std::vector<std::size_t>& targets) {
  if (logits.shape().size() != 2 || logits.rows() != targets.size())
    throw ShapeError("cross_entropy_rows: logits " +
                     shape_str(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  const std::size_t r = logits.rows(), c = logits.cols();
  auto probs = std::make_shared<std::vector<double>>(r * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = logits.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      (*probs)[i * c + j] = std::exp(row[j] - m);
      s += (*probs)[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= s;
    if (targets[i] >= c)
      throw UsageError("cross_entropy_rows: target index out of range");
    loss -= std::log((*probs)[i * c + targets[i]]);
  }
  loss /= static_cast<double>(r);
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets);
  return make_op_result(
      {1}, {loss}, {logits}, [r, c, probs, tgt](detail::TensorNode& n) {
        if (!n.parents[0]->requires_grad) return;
        auto& g = n.parents[0]->grad_buffer();
        const double inv = n.grad[0] / static_cast<double>(r);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            double p = (*probs)[i * c + j];
            g[i * c + j] += inv * (p - ((*tgt)[i] == j ? 1.0 : 0.0));
          }
      });
}

// Gathers rows of `table` by index; backward scatter-adds.
inline Tensor embedding_rows(const Tensor& table,
                             const std::vector<std::size_t>& indices) {
  if (table.shape().size() != 2)
    throw ShapeError("embedding_rows: table must be rank 2");
  const std::size_t c = table.cols();
  std::vector<double> out(indices.size() * c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= table.rows())
      throw UsageError("embedding_rows: index out of range");
    std::copy(table.data() + indices[i] * c,
              table.data() + (indices[i] + 1) * c, out.begin() + i * c);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices);
  return make_op_result({indices.size(), c}, std::move(out), {table},
                        [c, idx](detail::TensorNode& n) {
                          if (!n.parents[0]->requires_grad) return;
                          auto& g = n.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < idx->size(); ++i)
                            for (std::size_t j = 0; j < c; ++j)
                              g[(*idx)[i] * c + j] += n.grad[i * c + j];
                        });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Populates grads on every requires_grad ancestor of `loss`. Accumulating:
// a second backward (or a backward of another loss) adds on top; call
// zero_grad on the parameters between steps.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw UsageError("backward: loss must be scalar, got " +
                     shape_str(loss.shape()));
  using Node = detail::TensorNode;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; recursion would overflow on long chains.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* child = node->parents[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->accumulate({1.0});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace tslab
