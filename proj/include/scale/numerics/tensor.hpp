// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace scale {

// Every real-valued quantity in the library uses this width.
using real = double;

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream oss;
  oss << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << "x";
    oss << shape[i];
  }
  oss << "]";
  return oss.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

// Dense row-major tensor. Rank 0 is not used; scalars are shape {1}.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, real fill = 0.0) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<real> values) : shape_(std::move(shape)), data_(std::move(values)) {
    validate_extents();
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(real v) { return Tensor({1}, std::vector<real>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<real> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  // 2-D view helpers. Higher ranks collapse leading axes into rows.
  std::size_t rows() const { return shape_.empty() ? 0 : data_.size() / cols(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  real* data() noexcept { return data_.data(); }
  const real* data() const noexcept { return data_.data(); }
  std::span<real> values() noexcept { return data_; }
  std::span<const real> values() const noexcept { return data_; }
  std::vector<real>& storage() noexcept { return data_; }
  const std::vector<real>& storage() const noexcept { return data_; }

  real& operator[](std::size_t i) noexcept { return data_[i]; }
  real operator[](std::size_t i) const noexcept { return data_[i]; }

  real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<real> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const real> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  real item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool all_finite() const noexcept {
    for (real v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<real> data_;
};

inline void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError("non-finite value in " + what);
}

// Trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

}  // namespace scale
