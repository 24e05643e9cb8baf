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

#include <cmath>
#include <span>
#include <vector>

#include "rstpm/parameter.hpp"

namespace rstpm {

struct SgdOptions {
  double lr = 0.4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Heavy-ball SGD with L2 weight decay folded into the gradient:
///   g = grad + wd * value;  buf = momentum * buf + g;  value -= lr * buf.
/// Non-trainable parameters are skipped. Gradients are zeroed afterwards.
/// A non-finite gradient aborts the step before any parameter is touched.
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, const SgdOptions& opt) {
  for (const Parameter<T>* p : params) {
    if (!p->trainable) continue;
    for (T g : p->grad.vec())
      RSTPM_REQUIRE(std::isfinite(g), NumericError, "sgd_step: non-finite gradient in parameter '" + p->name + "'");
  }
  const T lr = static_cast<T>(opt.lr);
  const T mom = static_cast<T>(opt.momentum);
  const T wd = static_cast<T>(opt.weight_decay);
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    auto& v = p->value.vec();
    auto& g = p->grad.vec();
    auto& b = p->momentum.vec();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T d = g[i] + wd * v[i];
      b[i] = mom * b[i] + d;
      v[i] -= lr * b[i];
      g[i] = T(0);
    }
  }
}

template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, const SgdOptions& opt) {
  sgd_step<T>(std::span<Parameter<T>* const>(params.data(), params.size()), opt);
}

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace rstpm
