#pragma once

#include <stdexcept>
#include <string>

namespace tslab {

// Root of all library errors. Subclasses exist so callers can tell a bad
// tensor shape from a bad experiment spec from a corrupt checkpoint.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor dimension mismatch (matmul inner dims, grad shape, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar backward, empty grid, all groups frozen, ...
class UsageError : public Error {
 public:
  using Error::Error;
};

// Invalid model/data configuration (L % P != 0, H % P != 0, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Token sequence exceeds the positional table.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Mathematical domain violation (Lambert W below -1/e, alpha_Z == 1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Checkpoint errors, each distinct per the file-format contract.
class CheckpointFormatError : public Error {
 public:
  using Error::Error;
};
class CheckpointConfigMismatch : public Error {
 public:
  using Error::Error;
};
class CheckpointTruncated : public Error {
 public:
  using Error::Error;
};

// CSV ingestion.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Text-proxy pretraining did not beat the unigram baseline.
class PretrainingFailed : public Error {
 public:
  using Error::Error;
};

// Underdetermined least-squares problem.
class UnderdeterminedError : public Error {
 public:
  using Error::Error;
};

}  // namespace tslab
