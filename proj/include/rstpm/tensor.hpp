// Copyright 2026 The rstpm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rstpm/errors.hpp"

namespace rstpm {

/// (batch, channels, height, width). Every dimension is at least 1.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  constexpr std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  constexpr std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  constexpr bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

/// Dense 4-D tensor, row-major over (n, c, h, w).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape) {
    RSTPM_REQUIRE(shape.valid(), ShapeError, "tensor dims must be >= 1, got " + shape.str());
    data_.assign(shape.numel(), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    RSTPM_REQUIRE(shape.valid(), ShapeError, "tensor dims must be >= 1, got " + shape.str());
    RSTPM_REQUIRE(data_.size() == shape.numel(), ShapeError,
                  "data length " + std::to_string(data_.size()) + " does not match " + shape.str());
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  const T& operator()(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the (h, w) plane of sample n, channel c.
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  Tensor reshaped(Shape s) const {
    RSTPM_REQUIRE(s.numel() == size(), ShapeError,
                  "cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }

  /// Sample n as a 1xCxHxW tensor.
  Tensor sample(int n) const {
    Shape s{1, shape_.c, shape_.h, shape_.w};
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(index(n, 0, 0, 0));
    return Tensor(s, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(s.numel())));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T max() const { return *std::max_element(data_.begin(), data_.end()); }
  T min() const { return *std::min_element(data_.begin(), data_.end()); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

/// Concatenate along the batch dimension.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>* const> parts) {
  RSTPM_REQUIRE(!parts.empty(), ShapeError, "stack of zero tensors");
  Shape s = parts.front()->shape();
  int total = 0;
  for (const auto* p : parts) {
    const Shape& q = p->shape();
    RSTPM_REQUIRE(q.c == s.c && q.h == s.h && q.w == s.w, ShapeError,
                  "stack: " + q.str() + " vs " + s.str());
    total += q.n;
  }
  s.n = total;
  std::vector<T> out;
  out.reserve(s.numel());
  for (const auto* p : parts) out.insert(out.end(), p->vec().begin(), p->vec().end());
  return Tensor<T>(s, std::move(out));
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  std::vector<const Tensor<T>*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(&p);
  return stack<T>(std::span<const Tensor<T>* const>(ptrs));
}

template <typename T, typename Rng>
Tensor<T> random_normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor<T> t(shape);
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T, typename Rng>
Tensor<T> random_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<T> t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  RSTPM_REQUIRE(a.shape() == b.shape(), ShapeError, "max_abs_diff: shape mismatch");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max<T>(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace rstpm
