#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace ensa {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = RowMatrix<double>;
using Index = Eigen::Index;
using Mask = Eigen::Array<bool, Eigen::Dynamic, 1>;
using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ValueError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// Malformed file content. offset is a byte offset for binary inputs and a
// 1-based line number for text inputs.
class ParseError : public std::runtime_error {
public:
  ParseError(const std::string& msg, std::size_t offset)
      : std::runtime_error(msg), offset_(offset) {}
  std::size_t offset() const { return offset_; }

private:
  std::size_t offset_;
};

std::string shape_str(Index rows, Index cols);

template <typename Derived>
std::string shape_str(const Eigen::DenseBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

// High-water mark of bytes held by live Tensor2 buffers. Process-wide.
class MemoryTracker {
public:
  static void add(std::size_t bytes);
  static void remove(std::size_t bytes);
  static std::size_t current();
  static std::size_t peak();
  // Sets the peak to the current live byte count.
  static void reset_peak();
};

// Dense 2-D array of doubles whose storage is counted by MemoryTracker.
class Tensor2 {
public:
  Tensor2() = default;
  Tensor2(Index rows, Index cols);
  explicit Tensor2(Matrix value);
  Tensor2(const Tensor2& other);
  Tensor2(Tensor2&& other) noexcept;
  Tensor2& operator=(const Tensor2& other);
  Tensor2& operator=(Tensor2&& other) noexcept;
  ~Tensor2();

  Index rows() const { return data_.rows(); }
  Index cols() const { return data_.cols(); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  const Matrix& mat() const { return data_; }
  // Entries may be written; the shape must not change through this reference.
  Matrix& mat() { return data_; }

  double operator()(Index r, Index c) const { return data_(r, c); }
  double& operator()(Index r, Index c) { return data_(r, c); }

  bool is_finite() const { return all_finite(data_); }

private:
  void track();
  void untrack();

  Matrix data_;
  std::size_t tracked_ = 0;
};

}  // namespace ensa
