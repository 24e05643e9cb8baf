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
#include <algorithm>
#include <cmath>
#include <vector>

#include "rstpm/autograd.hpp"
#include "rstpm/kernels.hpp"
#include "rstpm/tensor.hpp"

// Differentiable operations over Var<T>. Each op computes its forward value
// eagerly and records a closure that scatters the output gradient into the
// inputs that require it.
namespace rstpm::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto& d = dst.vec();
  const auto& s = src.vec();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline void same_tape(const void* a, const void* b) {
  RSTPM_REQUIRE(a == b, StateError, "operands recorded on different tapes");
}

}  // namespace detail

/// 2-D convolution over NCHW with weights (C_out, C_in, k, k). No bias; see add_channel_bias.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, int stride, int padding) {
  const Tensor<T>& in = x.value();
  const Tensor<T>& w = weight.value();
  const auto geo = kernels::conv_geometry(in.shape(), w.shape(), stride, padding);
  Tensor<T> out = kernels::conv2d_forward(in, w, geo);
  Tape<T>& tape = *x.tape;
  detail::same_tape(x.tape, weight.tape);
  const bool needs = x.requires_grad() || weight.requires_grad();
  return tape.record(std::move(out), needs, [xi = x.id, wi = weight.id, geo](Tape<T>& t, std::size_t self) {
    kernels::conv2d_backward(t.value(xi), t.value(wi), t.grad(self), geo,
                             t.requires_grad(xi) ? &t.grad(xi) : nullptr,
                             t.requires_grad(wi) ? &t.grad(wi) : nullptr);
  });
}

/// Adds a per-channel bias of shape (1, C, 1, 1).
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  const Tensor<T>& in = x.value();
  const Tensor<T>& b = bias.value();
  RSTPM_REQUIRE(b.size() == static_cast<std::size_t>(in.c()), ShapeError,
                "bias has " + std::to_string(b.size()) + " entries for " + std::to_string(in.c()) +
                    " channels");
  Tensor<T> out = in;
  const std::size_t plane = in.shape().plane();
  for (int n = 0; n < in.n(); ++n)
    for (int c = 0; c < in.c(); ++c) {
      T* p = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
    }
  const bool needs = x.requires_grad() || bias.requires_grad();
  return x.tape->record(std::move(out), needs, [xi = x.id, bi = bias.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(xi)) detail::accumulate(t.grad(xi), g);
    if (t.requires_grad(bi)) {
      Tensor<T>& gb = t.grad(bi);
      const std::size_t plane = g.shape().plane();
      for (int n = 0; n < g.n(); ++n)
        for (int c = 0; c < g.c(); ++c) {
          const T* p = g.plane(n, c);
          T s = 0;
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
          gb[c] += s;
        }
    }
  });
}

/// Running statistics of a batch-normalization layer.
template <typename T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
  bool ready = false;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormStats() = default;
  explicit BatchNormStats(int channels, bool populated = true)
      : mean(Shape{1, channels, 1, 1}, T(0)), var(Shape{1, channels, 1, 1}, T(1)), ready(populated) {}
};

/// Batch normalization. Train mode normalizes with biased batch statistics and
/// folds the unbiased variance into the running estimate; eval mode uses the
/// running estimate only.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, bool train,
                  bool update_stats = true) {
  const Tensor<T>& in = x.value();
  const int C = in.c();
  RSTPM_REQUIRE(gamma.value().size() == static_cast<std::size_t>(C) &&
                    beta.value().size() == static_cast<std::size_t>(C),
                ShapeError, "batch_norm: scale/shift size does not match " + in.shape().str());
  const std::size_t plane = in.shape().plane();
  const double count = static_cast<double>(in.n()) * plane;
  std::vector<T> mean(C), invstd(C);
  if (train) {
    for (int c = 0; c < C; ++c) {
      double s = 0, s2 = 0;
      for (int n = 0; n < in.n(); ++n) {
        const T* p = in.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / count;
      for (int n = 0; n < in.n(); ++n) {
        const T* p = in.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - m;
          s2 += d * d;
        }
      }
      const double v = s2 / count;
      mean[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(v + stats.eps));
      if (update_stats) {
        RSTPM_REQUIRE(stats.mean.size() == static_cast<std::size_t>(C), ShapeError,
                      "batch_norm: running stats size mismatch");
        const double unbiased = count > 1 ? s2 / (count - 1) : v;
        stats.mean[c] = static_cast<T>((1 - stats.momentum) * stats.mean[c] + stats.momentum * m);
        stats.var[c] = static_cast<T>((1 - stats.momentum) * stats.var[c] + stats.momentum * unbiased);
      }
    }
    if (update_stats) stats.ready = true;
  } else {
    RSTPM_REQUIRE(stats.ready, StateError, "batch_norm: eval mode with uninitialized running statistics");
    RSTPM_REQUIRE(stats.mean.size() == static_cast<std::size_t>(C), ShapeError,
                  "batch_norm: running stats size mismatch");
    for (int c = 0; c < C; ++c) {
      mean[c] = stats.mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[c]) + stats.eps));
    }
  }
  Tensor<T> xhat(in.shape());
  Tensor<T> out(in.shape());
  const Tensor<T>& g = gamma.value();
  const Tensor<T>& b = beta.value();
  for (int n = 0; n < in.n(); ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = in.plane(n, c);
      T* xh = xhat.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean[c]) * invstd[c];
        o[i] = xh[i] * g[c] + b[c];
      }
    }
  const bool needs = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return x.tape->record(
      std::move(out), needs,
      [xi = x.id, gi = gamma.id, bi = beta.id, xhat = std::move(xhat), invstd = std::move(invstd), train](
          Tape<T>& t, std::size_t self) {
        const Tensor<T>& dy = t.grad(self);
        const Tensor<T>& gam = t.value(gi);
        const int C = dy.c();
        const std::size_t plane = dy.shape().plane();
        const double count = static_cast<double>(dy.n()) * plane;
        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
        for (int n = 0; n < dy.n(); ++n)
          for (int c = 0; c < C; ++c) {
            const T* d = dy.plane(n, c);
            const T* xh = xhat.plane(n, c);
            double s = 0, sx = 0;
            for (std::size_t i = 0; i < plane; ++i) {
              s += d[i];
              sx += d[i] * xh[i];
            }
            sum_dy[c] += s;
            sum_dy_xhat[c] += sx;
          }
        if (t.requires_grad(gi)) {
          Tensor<T>& gg = t.grad(gi);
          for (int c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_dy_xhat[c]);
        }
        if (t.requires_grad(bi)) {
          Tensor<T>& gb = t.grad(bi);
          for (int c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_dy[c]);
        }
        if (t.requires_grad(xi)) {
          Tensor<T>& dx = t.grad(xi);
          for (int n = 0; n < dy.n(); ++n)
            for (int c = 0; c < C; ++c) {
              const T* d = dy.plane(n, c);
              const T* xh = xhat.plane(n, c);
              T* o = dx.plane(n, c);
              const T scale = gam[c] * invstd[c];
              if (train) {
                const T mdy = static_cast<T>(sum_dy[c] / count);
                const T mdx = static_cast<T>(sum_dy_xhat[c] / count);
                for (std::size_t i = 0; i < plane; ++i) o[i] += scale * (d[i] - mdy - xh[i] * mdx);
              } else {
                for (std::size_t i = 0; i < plane; ++i) o[i] += scale * d[i];
              }
            }
        }
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
  return x.tape->record(std::move(out), x.requires_grad(), [xi = x.id](Tape<T>& t, std::size_t self) {
    const auto& in = t.value(xi).vec();
    const auto& g = t.grad(self).vec();
    auto& dx = t.grad(xi).vec();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (in[i] > T(0)) dx[i] += g[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = kernels::logistic(v);
  return x.tape->record(std::move(out), x.requires_grad(), [xi = x.id](Tape<T>& t, std::size_t self) {
    const auto& y = t.value(self).vec();
    const auto& g = t.grad(self).vec();
    auto& dx = t.grad(xi).vec();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  RSTPM_REQUIRE(a.shape() == b.shape(), ShapeError,
                "add: " + a.shape().str() + " vs " + b.shape().str());
  detail::same_tape(a.tape, b.tape);
  Tensor<T> out = a.value();
  detail::accumulate(out, b.value());
  const bool needs = a.requires_grad() || b.requires_grad();
  return a.tape->record(std::move(out), needs, [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    if (t.requires_grad(ai)) detail::accumulate(t.grad(ai), g);
    if (t.requires_grad(bi)) detail::accumulate(t.grad(bi), g);
  });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v *= s;
  return x.tape->record(std::move(out), x.requires_grad(), [xi = x.id, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& dx = t.grad(xi).vec();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * g[i];
  });
}

/// x[n, c, i, j] * map[n, 0, i, j]; the single-channel map is broadcast over channels.
template <typename T>
Var<T> mul_map(Var<T> x, Var<T> map) {
  const Tensor<T>& in = x.value();
  const Tensor<T>& m = map.value();
  RSTPM_REQUIRE(m.c() == 1 && m.n() == in.n() && m.h() == in.h() && m.w() == in.w(), ShapeError,
                "mul_map: map " + m.shape().str() + " does not match features " + in.shape().str());
  detail::same_tape(x.tape, map.tape);
  Tensor<T> out(in.shape());
  const std::size_t plane = in.shape().plane();
  for (int n = 0; n < in.n(); ++n) {
    const T* mp = m.plane(n, 0);
    for (int c = 0; c < in.c(); ++c) {
      const T* p = in.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) o[i] = p[i] * mp[i];
    }
  }
  const bool needs = x.requires_grad() || map.requires_grad();
  return x.tape->record(std::move(out), needs, [xi = x.id, mi = map.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& in = t.value(xi);
    const Tensor<T>& m = t.value(mi);
    const std::size_t plane = g.shape().plane();
    const bool gx = t.requires_grad(xi), gm = t.requires_grad(mi);
    for (int n = 0; n < g.n(); ++n) {
      const T* mp = m.plane(n, 0);
      for (int c = 0; c < g.c(); ++c) {
        const T* gp = g.plane(n, c);
        if (gx) {
          T* dx = t.grad(xi).plane(n, c);
          for (std::size_t i = 0; i < plane; ++i) dx[i] += gp[i] * mp[i];
        }
        if (gm) {
          const T* p = in.plane(n, c);
          T* dm = t.grad(mi).plane(n, 0);
          for (std::size_t i = 0; i < plane; ++i) dm[i] += gp[i] * p[i];
        }
      }
    }
  });
}

/// Bilinear resize with half-pixel centers. Target dims must not be smaller
/// than the source dims.
template <typename T>
Var<T> upsample_bilinear(Var<T> x, int target_h, int target_w) {
  const Tensor<T>& in = x.value();
  RSTPM_REQUIRE(target_h >= in.h() && target_w >= in.w(), ShapeError,
                "upsample_bilinear: target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                    " smaller than source " + in.shape().str());
  Tensor<T> out = kernels::resize_bilinear(in, target_h, target_w);
  return x.tape->record(std::move(out), x.requires_grad(), [xi = x.id](Tape<T>& t, std::size_t self) {
    kernels::resize_bilinear_backward(t.grad(self), t.grad(xi));
  });
}

/// (N, C, H, W) -> (N, C, 1, 1)
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const Tensor<T>& in = x.value();
  Tensor<T> out(Shape{in.n(), in.c(), 1, 1});
  const std::size_t plane = in.shape().plane();
  for (int n = 0; n < in.n(); ++n)
    for (int c = 0; c < in.c(); ++c) {
      const T* p = in.plane(n, c);
      T s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      out(n, c, 0, 0) = s / static_cast<T>(plane);
    }
  return x.tape->record(std::move(out), x.requires_grad(), [xi = x.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& dx = t.grad(xi);
    const std::size_t plane = dx.shape().plane();
    for (int n = 0; n < dx.n(); ++n)
      for (int c = 0; c < dx.c(); ++c) {
        const T v = g(n, c, 0, 0) / static_cast<T>(plane);
        T* p = dx.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) p[i] += v;
      }
  });
}

/// Mean softmax cross-entropy of logits (N, K, 1, 1) against class labels.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  const Tensor<T>& z = logits.value();
  const int N = z.n(), K = z.c();
  RSTPM_REQUIRE(z.h() == 1 && z.w() == 1 && labels.size() == static_cast<std::size_t>(N), ShapeError,
                "softmax_cross_entropy: logits " + z.shape().str() + " with " +
                    std::to_string(labels.size()) + " labels");
  Tensor<T> prob(z.shape());
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    RSTPM_REQUIRE(labels[n] >= 0 && labels[n] < K, ShapeError, "softmax_cross_entropy: label out of range");
    T m = z(n, 0, 0, 0);
    for (int k = 1; k < K; ++k) m = std::max(m, z(n, k, 0, 0));
    double s = 0;
    for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(z(n, k, 0, 0) - m));
    for (int k = 0; k < K; ++k) prob(n, k, 0, 0) = static_cast<T>(std::exp(static_cast<double>(z(n, k, 0, 0) - m)) / s);
    loss += -(static_cast<double>(z(n, labels[n], 0, 0) - m) - std::log(s));
  }
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(loss / N));
  return logits.tape->record(
      std::move(out), logits.requires_grad(),
      [zi = logits.id, labels, prob = std::move(prob)](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0];
        Tensor<T>& dz = t.grad(zi);
        const int N = dz.n();
        for (int n = 0; n < N; ++n)
          for (int k = 0; k < dz.c(); ++k) {
            const T target = k == labels[n] ? T(1) : T(0);
            dz(n, k, 0, 0) += g * (prob(n, k, 0, 0) - target) / static_cast<T>(N);
          }
      });
}

/// Per-position l2 normalization of the channel vector. Vectors with norm
/// below kernels::kNormEpsilon map to zero.
template <typename T>
Var<T> normalize_channels(Var<T> x) {
  std::vector<T> inv_norm;
  Tensor<T> out = kernels::normalize_channels(x.value(), &inv_norm);
  return x.tape->record(std::move(out), x.requires_grad(),
                        [xi = x.id, inv_norm = std::move(inv_norm)](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& y = t.value(self);
                          const Tensor<T>& g = t.grad(self);
                          Tensor<T>& dx = t.grad(xi);
                          const int C = y.c();
                          const std::size_t plane = y.shape().plane();
                          for (int n = 0; n < y.n(); ++n)
                            for (std::size_t i = 0; i < plane; ++i) {
                              const T inv = inv_norm[n * plane + i];
                              if (inv == T(0)) continue;
                              T dot = 0;
                              for (int c = 0; c < C; ++c) dot += y.plane(n, c)[i] * g.plane(n, c)[i];
                              for (int c = 0; c < C; ++c)
                                dx.plane(n, c)[i] += inv * (g.plane(n, c)[i] - y.plane(n, c)[i] * dot);
                            }
                        });
}

/// Half squared distance between the channel vectors at every position:
/// (N, C, H, W) x 2 -> (N, 1, H, W).
template <typename T>
Var<T> position_loss_map(Var<T> a, Var<T> b) {
  detail::same_tape(a.tape, b.tape);
  Tensor<T> out = kernels::position_loss_map(a.value(), b.value());
  const bool needs = a.requires_grad() || b.requires_grad();
  return a.tape->record(std::move(out), needs, [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const Tensor<T>& va = t.value(ai);
    const Tensor<T>& vb = t.value(bi);
    const Tensor<T>& g = t.grad(self);
    const bool ga = t.requires_grad(ai), gb = t.requires_grad(bi);
    const std::size_t plane = va.shape().plane();
    for (int n = 0; n < va.n(); ++n) {
      const T* gp = g.plane(n, 0);
      for (int c = 0; c < va.c(); ++c) {
        const T* pa = va.plane(n, c);
        const T* pb = vb.plane(n, c);
        T* da = ga ? t.grad(ai).plane(n, c) : nullptr;
        T* db = gb ? t.grad(bi).plane(n, c) : nullptr;
        for (std::size_t i = 0; i < plane; ++i) {
          const T d = (pa[i] - pb[i]) * gp[i];
          if (da) da[i] += d;
          if (db) db[i] -= d;
        }
      }
    }
  });
}

/// Mean over all elements -> (1, 1, 1, 1).
template <typename T>
Var<T> mean(Var<T> x) {
  const auto& v = x.value().vec();
  double s = 0;
  for (T e : v) s += e;
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(s / static_cast<double>(v.size())));
  return x.tape->record(std::move(out), x.requires_grad(), [xi = x.id](Tape<T>& t, std::size_t self) {
    auto& dx = t.grad(xi).vec();
    const T g = t.grad(self)[0] / static_cast<T>(dx.size());
    for (auto& d : dx) d += g;
  });
}

/// Sum over all elements -> (1, 1, 1, 1).
template <typename T>
Var<T> sum(Var<T> x) {
  const auto& v = x.value().vec();
  double s = 0;
  for (T e : v) s += e;
  Tensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(s));
  return x.tape->record(std::move(out), x.requires_grad(), [xi = x.id](Tape<T>& t, std::size_t self) {
    auto& dx = t.grad(xi).vec();
    const T g = t.grad(self)[0];
    for (auto& d : dx) d += g;
  });
}

}  // namespace rstpm::ops
