#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cnf/errors.hpp"

namespace cnf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Activations are laid out (batch, channel, height,
/// width); conv kernels (out-channel, in-channel, kh, kw).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_volume(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_volume(shape_))
      throw StructuralError("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_, T{0}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-d accessor (n, c, h, w).
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_volume(shape) != data_.size())
      throw StructuralError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// A trainable tensor with its gradient and an optional binary mask. Masked
/// positions hold exactly zero and are never changed by the optimizer.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  std::optional<Tensor<T>> mask;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(Tensor<T>::zeros_like(value)) {}

  void zero_grad() { grad.fill(T{0}); }

  // Creates an all-ones mask on first use.
  Tensor<T>& ensure_mask() {
    if (!mask) mask = Tensor<T>(value.shape(), T{1});
    return *mask;
  }

  void apply_mask() {
    if (!mask) return;
    for (std::size_t i = 0; i < value.size(); ++i)
      if ((*mask)[i] == T{0}) value[i] = T{0};
  }

  bool is_masked(std::size_t i) const { return mask && (*mask)[i] == T{0}; }

  std::size_t unmasked_count() const {
    if (!mask) return value.size();
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask->size(); ++i) n += (*mask)[i] != T{0};
    return n;
  }
};

/// Batch-norm running statistics.
template <typename T>
struct BnStats {
  Tensor<T> mean;
  Tensor<T> var;

  BnStats() = default;
  explicit BnStats(std::size_t channels)
      : mean(Shape{channels}, T{0}), var(Shape{channels}, T{1}) {}
};

}  // namespace cnf
