#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dualfuse/error.hpp"
#include "dualfuse/rng.hpp"

namespace dualfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Scalars have an empty shape.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(numel(shape_) == data_.size(), ErrorCode::kShapeMismatch,
            "data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  /// 2-D tensor from nested rows; convenient in tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
      require(r.size() == n, ErrorCode::kShapeMismatch, "ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  T item() const {
    require(data_.size() == 1, ErrorCode::kShapeMismatch, "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const& {
    require(numel(shape) == data_.size(), ErrorCode::kShapeMismatch,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  Tensor reshaped(Shape shape) && {
    require(numel(shape) == data_.size(), ErrorCode::kShapeMismatch,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), std::move(data_));
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
Tensor<T> normal_tensor(Rng& rng, Shape shape, double mean, double std) {
  require(std >= 0.0, ErrorCode::kNegativeStd, "std must be non-negative");
  Tensor<T> out(std::move(shape));
  for (auto& v : out.data()) v = static_cast<T>(mean + std * rng.normal());
  return out;
}

template <class T>
Tensor<T> uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<T> out(std::move(shape));
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return out;
}

/// Gathers the listed indices along axis 0.
template <class T>
Tensor<T> take_rows(const Tensor<T>& t, std::span<const std::size_t> rows) {
  Shape shape = t.shape();
  const std::size_t stride = t.size() / std::max<std::size_t>(shape.at(0), 1);
  shape[0] = rows.size();
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < t.dim(0), ErrorCode::kShapeMismatch, "row index out of range");
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
  }
  return out;
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::kShapeMismatch, "max_abs_diff shapes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace dualfuse
