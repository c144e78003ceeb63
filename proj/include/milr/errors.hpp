#pragma once

#include <stdexcept>
#include <string>

namespace milr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree (matmul inner dims, dtype mix, rank).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A layer's shape chain or an output-size formula is inconsistent.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Linear system is numerically rank deficient and an exact solve was requested.
class SingularSystemError : public Error {
 public:
  using Error::Error;
};

/// Malformed weights, sidecar or dataset file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain (probability > 1, availability == 1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Recovery plan does not match the network (e.g. pooling layer crossed without a checkpoint).
class PlanError : public Error {
 public:
  using Error::Error;
};

}  // namespace milr
