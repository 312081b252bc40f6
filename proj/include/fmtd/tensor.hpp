#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmtd/error.hpp"

namespace fmtd {

inline std::size_t element_count(const std::vector<std::size_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string dims_to_string(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

/// Dense row-major tensor.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, T fill = T{0})
      : dims_(std::move(dims)), data_(element_count(dims_), fill) {}
  Tensor(std::vector<std::size_t> dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (element_count(dims_) != data_.size())
      throw shape_error("tensor dims " + dims_to_string(dims_) + " do not match " +
                        std::to_string(data_.size()) + " elements");
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Elements of the i-th slice along the leading dimension.
  std::span<const T> row(std::size_t i) const {
    const std::size_t stride = row_size();
    return std::span<const T>(data_).subspan(i * stride, stride);
  }
  std::span<T> row(std::size_t i) {
    const std::size_t stride = row_size();
    return std::span<T>(data_).subspan(i * stride, stride);
  }
  std::size_t row_size() const { return dims_.empty() || dims_[0] == 0 ? 0 : data_.size() / dims_[0]; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

using TensorF32 = Tensor<float>;

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

}  // namespace fmtd
