#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sentnet {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct TapeReuseError : Error { using Error::Error; };

/// Extents of a dense tensor. An empty shape denotes a rank-0 scalar.
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor of floating-point values. The shape is fixed at
/// construction; reshaped() returns a new tensor over the same flat data.
template <class T = double>
class TensorT {
 public:
  using value_type = T;

  TensorT() : shape_{}, data_(1, T(0)) {}

  explicit TensorT(Shape shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

  TensorT(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static TensorT scalar(T v) {
    TensorT t;
    t.data_[0] = v;
    return t;
  }

  static TensorT full(Shape shape, T v) {
    TensorT t(std::move(shape));
    for (T& x : t.data_) x = v;
    return t;
  }

  static TensorT row_vector(std::initializer_list<T> vs) {
    return TensorT({vs.size()}, std::vector<T>(vs));
  }

  /// Rank-2 tensor from nested braces, e.g. {{1,2},{3,4}}.
  static TensorT matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix initializer");
      data.insert(data.end(), row.begin(), row.end());
    }
    return TensorT({r, c}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const {
    assert(axis < shape_.size());
    return shape_[axis];
  }

  bool is_scalar() const { return data_.size() == 1; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& buffer() { return data_; }
  const std::vector<T>& buffer() const { return data_; }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  T& operator()(std::size_t i) { return data_[i]; }
  const T& operator()(std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }

  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  std::size_t rows() const {
    assert(rank() == 2);
    return shape_[0];
  }
  std::size_t cols() const {
    assert(rank() == 2);
    return shape_[1];
  }

  T* row(std::size_t i) {
    assert(rank() == 2);
    return data_.data() + i * shape_[1];
  }
  const T* row(std::size_t i) const {
    assert(rank() == 2);
    return data_.data() + i * shape_[1];
  }

  /// Same flat data in the same order under a new shape of equal element count.
  TensorT reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(new_shape) + ": element counts differ");
    }
    return TensorT(std::move(new_shape), data_);
  }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  void fill(T v) {
    for (T& x : data_) x = v;
  }

  TensorT& operator+=(const TensorT& other) {
    assert(same_shape(other));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

 private:
  static std::size_t checked_numel(const Shape& shape) {
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
    }
    return shape_numel(shape);
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<double>;

/// Token-id matrix, one row per sentence.
struct IntMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> data;

  IntMatrix() = default;
  IntMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::int32_t& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  std::int32_t at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// 0/1 matrix marking real (1) vs padded (0) positions.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, std::uint8_t v = 0)
      : rows(r), cols(c), data(r * c, v) {}

  static Mask all_real(std::size_t r, std::size_t c) { return Mask(r, c, 1); }

  std::uint8_t& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  bool at(std::size_t i, std::size_t j) const { return data[i * cols + j] != 0; }

  std::size_t real_count(std::size_t i) const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < cols; ++j) n += data[i * cols + j] != 0;
    return n;
  }
};

}  // namespace sentnet
