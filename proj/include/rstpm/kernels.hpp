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

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "rstpm/tensor.hpp"

// Tape-free numeric kernels shared by the differentiable ops and by
// inference-only code paths (anomaly maps, image preprocessing).
namespace rstpm::kernels {

/// Channel vectors with an l2 norm below this value normalize to zero.
inline constexpr double kNormEpsilon = 1e-12;

template <typename T>
inline T logistic(T v) {
  // Branching keeps exp() from overflowing for large |v|.
  if (v >= T(0)) {
    const T e = std::exp(-v);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

struct ConvGeometry {
  int n = 0, c_in = 0, h = 0, w = 0;
  int c_out = 0, k = 0;
  int stride = 1, pad = 0;
  int h_out = 0, w_out = 0;

  int rows() const { return c_in * k * k; }
  int cols() const { return n * h_out * w_out; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& weight, int stride, int padding) {
  RSTPM_REQUIRE(stride == 1 || stride == 2, ShapeError, "conv2d: stride must be 1 or 2");
  RSTPM_REQUIRE(padding >= 0, ShapeError, "conv2d: negative padding");
  RSTPM_REQUIRE(weight.h == weight.w, ShapeError, "conv2d: kernel must be square, got " + weight.str());
  RSTPM_REQUIRE(weight.c == in.c, ShapeError,
                "conv2d: weight expects " + std::to_string(weight.c) + " input channels, input " + in.str());
  ConvGeometry g;
  g.n = in.n;
  g.c_in = in.c;
  g.h = in.h;
  g.w = in.w;
  g.c_out = weight.n;
  g.k = weight.h;
  g.stride = stride;
  g.pad = padding;
  const int num_h = in.h + 2 * padding - g.k;
  const int num_w = in.w + 2 * padding - g.k;
  RSTPM_REQUIRE(num_h >= 0 && num_w >= 0, ShapeError,
                "conv2d: non-positive output dims for input " + in.str() + " and kernel " + weight.str());
  g.h_out = num_h / stride + 1;
  g.w_out = num_w / stride + 1;
  return g;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Unfolds x into a (C_in*k*k) x (N*H_out*W_out) row-major matrix.
template <typename T>
void im2col(const Tensor<T>& x, const ConvGeometry& g, T* col) {
  const std::size_t P = static_cast<std::size_t>(g.cols());
  for (int c = 0; c < g.c_in; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * P;
        for (int n = 0; n < g.n; ++n) {
          const T* src = x.plane(n, c);
          for (int oy = 0; oy < g.h_out; ++oy) {
            T* dst = row + (static_cast<std::size_t>(n) * g.h_out + oy) * g.w_out;
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) {
              std::fill(dst, dst + g.w_out, T(0));
              continue;
            }
            const T* line = src + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.w_out; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[ox] = (ix >= 0 && ix < g.w) ? line[ix] : T(0);
            }
          }
        }
      }
}

/// Adjoint of im2col: accumulates the column matrix back into dx.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, Tensor<T>& dx) {
  const std::size_t P = static_cast<std::size_t>(g.cols());
  for (int c = 0; c < g.c_in; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * P;
        for (int n = 0; n < g.n; ++n) {
          T* dst = dx.plane(n, c);
          for (int oy = 0; oy < g.h_out; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* src = row + (static_cast<std::size_t>(n) * g.h_out + oy) * g.w_out;
            T* line = dst + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.w_out; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) line[ix] += src[ox];
            }
          }
        }
      }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const ConvGeometry& g) {
  const int K = g.rows(), P = g.cols();
  RowMat<T> col(K, P);
  im2col(x, g, col.data());
  Eigen::Map<const RowMat<T>> W(weight.data(), g.c_out, K);
  RowMat<T> Y(g.c_out, P);
  Y.noalias() = W * col;
  Tensor<T> out(Shape{g.n, g.c_out, g.h_out, g.w_out});
  const std::size_t plane = static_cast<std::size_t>(g.h_out) * g.w_out;
  for (int n = 0; n < g.n; ++n)
    for (int co = 0; co < g.c_out; ++co) {
      const T* src = Y.data() + static_cast<std::size_t>(co) * P + n * plane;
      std::copy(src, src + plane, out.plane(n, co));
    }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy, const ConvGeometry& g,
                     Tensor<T>* dx, Tensor<T>* dweight) {
  const int K = g.rows(), P = g.cols();
  const std::size_t plane = static_cast<std::size_t>(g.h_out) * g.w_out;
  RowMat<T> dY(g.c_out, P);
  for (int n = 0; n < g.n; ++n)
    for (int co = 0; co < g.c_out; ++co) {
      const T* src = dy.plane(n, co);
      std::copy(src, src + plane, dY.data() + static_cast<std::size_t>(co) * P + n * plane);
    }
  if (dweight != nullptr) {
    RowMat<T> col(K, P);
    im2col(x, g, col.data());
    Eigen::Map<RowMat<T>> dW(dweight->data(), g.c_out, K);
    dW.noalias() += dY * col.transpose();
  }
  if (dx != nullptr) {
    Eigen::Map<const RowMat<T>> W(weight.data(), g.c_out, K);
    RowMat<T> dcol(K, P);
    dcol.noalias() = W.transpose() * dY;
    col2im(dcol.data(), g, *dx);
  }
}

/// Source sampling table for one axis of a half-pixel-center bilinear resize.
struct AxisTable {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

inline AxisTable axis_table(int in, int out) {
  AxisTable t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    t.lo[o] = lo;
    t.hi[o] = hi;
    t.frac[o] = src - lo;
  }
  return t;
}

/// Bilinear resize of every (n, c) plane, half-pixel centers, any target size.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& in, int out_h, int out_w) {
  RSTPM_REQUIRE(out_h >= 1 && out_w >= 1, ShapeError, "resize: target dims must be >= 1");
  const AxisTable ty = axis_table(in.h(), out_h);
  const AxisTable tx = axis_table(in.w(), out_w);
  Tensor<T> out(Shape{in.n(), in.c(), out_h, out_w});
  for (int n = 0; n < in.n(); ++n)
    for (int c = 0; c < in.c(); ++c) {
      const T* src = in.plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < out_h; ++y) {
        const T* r0 = src + static_cast<std::size_t>(ty.lo[y]) * in.w();
        const T* r1 = src + static_cast<std::size_t>(ty.hi[y]) * in.w();
        const double fy = ty.frac[y];
        for (int x = 0; x < out_w; ++x) {
          const double fx = tx.frac[x];
          const double top = r0[tx.lo[x]] + (r0[tx.hi[x]] - r0[tx.lo[x]]) * fx;
          const double bot = r1[tx.lo[x]] + (r1[tx.hi[x]] - r1[tx.lo[x]]) * fx;
          dst[static_cast<std::size_t>(y) * out_w + x] = static_cast<T>(top + (bot - top) * fy);
        }
      }
    }
  return out;
}

/// Adjoint of resize_bilinear; accumulates into dx (which fixes the source size).
template <typename T>
void resize_bilinear_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  const AxisTable ty = axis_table(dx.h(), dy.h());
  const AxisTable tx = axis_table(dx.w(), dy.w());
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < dy.c(); ++c) {
      const T* g = dy.plane(n, c);
      T* d = dx.plane(n, c);
      for (int y = 0; y < dy.h(); ++y) {
        T* r0 = d + static_cast<std::size_t>(ty.lo[y]) * dx.w();
        T* r1 = d + static_cast<std::size_t>(ty.hi[y]) * dx.w();
        const double fy = ty.frac[y];
        for (int x = 0; x < dy.w(); ++x) {
          const double v = g[static_cast<std::size_t>(y) * dy.w() + x];
          const double fx = tx.frac[x];
          r0[tx.lo[x]] += static_cast<T>(v * (1 - fy) * (1 - fx));
          r0[tx.hi[x]] += static_cast<T>(v * (1 - fy) * fx);
          r1[tx.lo[x]] += static_cast<T>(v * fy * (1 - fx));
          r1[tx.hi[x]] += static_cast<T>(v * fy * fx);
        }
      }
    }
}

/// Unit-norm channel vectors. Writes 1/norm per position (0 for degenerate
/// positions) into inv_norm when given.
template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& x, std::vector<T>* inv_norm = nullptr) {
  Tensor<T> out(x.shape());
  const std::size_t plane = x.shape().plane();
  if (inv_norm) inv_norm->assign(static_cast<std::size_t>(x.n()) * plane, T(0));
  std::vector<double> sq(plane);
  for (int n = 0; n < x.n(); ++n) {
    std::fill(sq.begin(), sq.end(), 0.0);
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) sq[i] += static_cast<double>(p[i]) * p[i];
    }
    for (std::size_t i = 0; i < plane; ++i) {
      const double norm = std::sqrt(sq[i]);
      sq[i] = norm < kNormEpsilon ? 0.0 : 1.0 / norm;
      if (inv_norm) (*inv_norm)[n * plane + i] = static_cast<T>(sq[i]);
    }
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) o[i] = static_cast<T>(p[i] * sq[i]);
    }
  }
  return out;
}

/// 0.5 * ||a_ij - b_ij||^2 at every position -> (N, 1, H, W).
template <typename T>
Tensor<T> position_loss_map(const Tensor<T>& a, const Tensor<T>& b) {
  RSTPM_REQUIRE(a.shape() == b.shape(), ShapeError,
                "position loss: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(Shape{a.n(), 1, a.h(), a.w()});
  const std::size_t plane = a.shape().plane();
  std::vector<double> acc(plane);
  for (int n = 0; n < a.n(); ++n) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int c = 0; c < a.c(); ++c) {
      const T* pa = a.plane(n, c);
      const T* pb = b.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(pa[i]) - pb[i];
        acc[i] += d * d;
      }
    }
    T* o = out.plane(n, 0);
    for (std::size_t i = 0; i < plane; ++i) o[i] = static_cast<T>(0.5 * acc[i]);
  }
  return out;
}

}  // namespace rstpm::kernels
