#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace sparsedict {

// Rows are activation vectors; row-major keeps a row contiguous so that
// the on-disk payload maps onto a matrix without reshuffling.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXf;
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

using Index = Eigen::Index;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes disagree (ragged rows, d_in mismatch, out-of-range index).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input values violate a contract (NaN/Inf, empty inputs).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Caller supplied an invalid argument or configuration value.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// File header does not describe a format we understand.
class FormatError : public Error {
 public:
  using Error::Error;
};

// File header is fine but the payload does not match it.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(std::int64_t step, const std::string& what)
      : Error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace sparsedict
