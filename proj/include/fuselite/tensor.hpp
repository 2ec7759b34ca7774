#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fuselite/error.hpp"

namespace fuselite {

// NCHW extent. Dense vectors are stored as (n, features, 1, 1).
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const noexcept {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  std::size_t per_sample() const noexcept { return static_cast<std::size_t>(c) * h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    require(data_.size() == shape_.numel(), ErrorCode::ShapeMismatch,
            "tensor data size does not match shape " + shape_.str());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T* sample(int n) noexcept { return data_.data() + n * shape_.per_sample(); }
  const T* sample(int n) const noexcept { return data_.data() + n * shape_.per_sample(); }

  T* channel(int n, int c) noexcept { return sample(n) + c * shape_.plane(); }
  const T* channel(int n, int c) const noexcept { return sample(n) + c * shape_.plane(); }

  T& operator()(int n, int c, int y, int x) noexcept {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  T operator()(int n, int c, int y, int x) const noexcept {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  T operator[](std::size_t i) const noexcept { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Same storage, new extent; element count must agree.
  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape(shape);
    return out;
  }
  void reshape(Shape shape) {
    require(shape.numel() == data_.size(), ErrorCode::ShapeMismatch,
            "cannot reshape " + shape_.str() + " to " + shape.str());
    shape_ = shape;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

}  // namespace fuselite
