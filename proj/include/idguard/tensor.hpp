#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "idguard/aligned.hpp"

namespace idguard {

/// Dense row-major tensor. Images are stored NCHW.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(std::vector<int> shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) throw std::invalid_argument("tensor data does not match shape");
  }
  Tensor(std::vector<int> shape, const std::vector<T>& data)
      : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}
  Tensor(std::vector<int> shape, std::initializer_list<T> data)
      : Tensor(std::move(shape), AlignedVector<T>(data)) {}

  static Tensor scalar(T v) { return Tensor({1}, v); }

  [[nodiscard]] const std::vector<int>& shape() const { return shape_; }
  [[nodiscard]] int dim(std::size_t i) const { return shape_.at(i); }
  [[nodiscard]] std::size_t rank() const { return shape_.size(); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  AlignedVector<T>& vec() { return data_; }
  const AlignedVector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Elements per leading-axis slice (one sample of a batch).
  [[nodiscard]] std::size_t stride0() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  T item() const {
    if (data_.size() != 1) throw std::logic_error("item() on non-scalar tensor");
    return data_[0];
  }

  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != data_.size()) throw std::invalid_argument("reshape changes element count");
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, AlignedVector<U>(data_.begin(), data_.end()));
  }

  /// Copy of samples [begin, end) along the leading axis.
  Tensor slice0(int begin, int end) const {
    auto shape = shape_;
    shape[0] = end - begin;
    const auto s = stride0();
    return Tensor(std::move(shape),
                  AlignedVector<T>(data_.begin() + begin * s, data_.begin() + end * s));
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  AlignedVector<T> data_;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace idguard
