#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "eqlm/errors.hpp"

namespace eqlm {

struct Shape4 {
  int n = 0, h = 0, w = 0, c = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + "," + std::to_string(s.c) + ")";
}

// Dense NHWC array.
template <typename T>
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, T fill = T(0))
      : shape_(shape), data_(shape.size(), fill) {
    if (shape.n < 0 || shape.h < 0 || shape.w < 0 || shape.c < 0)
      throw ConfigError("negative tensor dimension " + to_string(shape));
  }
  Tensor4(int n, int h, int w, int c, T fill = T(0))
      : Tensor4(Shape4{n, h, w, c}, fill) {}

  const Shape4& shape() const { return shape_; }
  int batch() const { return shape_.n; }
  int height() const { return shape_.h; }
  int width() const { return shape_.w; }
  int channels() const { return shape_.c; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t index(int n, int y, int x, int c) const {
    return ((static_cast<std::size_t>(n) * shape_.h + y) * shape_.w + x) *
               shape_.c + c;
  }
  T& operator()(int n, int y, int x, int c) { return data_[index(n, y, x, c)]; }
  T operator()(int n, int y, int x, int c) const {
    return data_[index(n, y, x, c)];
  }

  // Pointer to the first element of batch item n.
  T* item(int n) { return data_.data() + index(n, 0, 0, 0); }
  const T* item(int n) const { return data_.data() + index(n, 0, 0, 0); }
  std::size_t item_size() const {
    return static_cast<std::size_t>(shape_.h) * shape_.w * shape_.c;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  // Copies batch items [first, first + count).
  Tensor4 slice(int first, int count) const {
    Tensor4 out(Shape4{count, shape_.h, shape_.w, shape_.c});
    std::copy_n(item(first), out.size(), out.data());
    return out;
  }

 private:
  Shape4 shape_;
  std::vector<T> data_;
};

// Stacks equally shaped tensors along the batch axis.
template <typename T>
Tensor4<T> concat_batch(std::span<const Tensor4<T>> parts) {
  if (parts.empty()) return {};
  Shape4 s = parts.front().shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.height() != s.h || p.width() != s.w || p.channels() != s.c)
      throw UsageError("concat_batch: shape mismatch " + to_string(p.shape()) +
                       " vs " + to_string(s));
    total += p.batch();
  }
  s.n = total;
  Tensor4<T> out(s);
  T* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.vec().begin(), p.vec().end(), dst);
  return out;
}

template <typename T>
Tensor4<T> concat_batch(const Tensor4<T>& a, const Tensor4<T>& b) {
  const std::array<Tensor4<T>, 2> parts{a, b};
  return concat_batch<T>(parts);
}

}  // namespace eqlm
