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
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rstpm/autograd.hpp"
#include "rstpm/ops.hpp"
#include "rstpm/parameter.hpp"

namespace rstpm {

using Rng = std::mt19937_64;

/// Visits every persisted tensor of a module (parameters and running stats).
template <typename T>
using TensorVisitor = std::function<void(const std::string&, Tensor<T>&)>;

enum class LayerKind { Conv, BatchNorm, Relu, ResidualBlock, Upsample, Linear, GlobalAvgPool };

/// Shape-level description of one layer; used for parameter accounting.
struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  bool bias = false;
  int upsample_factor = 1;

  std::size_t parameter_count() const {
    switch (kind) {
      case LayerKind::Conv:
        return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel + (bias ? out_channels : 0);
      case LayerKind::BatchNorm:
        return 2u * static_cast<std::size_t>(out_channels);
      case LayerKind::Linear:
        return static_cast<std::size_t>(out_channels) * in_channels + out_channels;
      default:
        return 0;
    }
  }
};

template <typename T>
class ConvLayer {
 public:
  ConvLayer() = default;
  ConvLayer(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int padding, bool bias, Rng& rng)
      : stride_(stride), padding_(padding) {
    RSTPM_REQUIRE(stride == 1 || stride == 2, ConfigError, name + ": conv stride must be 1 or 2");
    RSTPM_REQUIRE(in_ch >= 1 && out_ch >= 1 && kernel >= 1, ConfigError, name + ": bad conv dims");
    const double fan_in = static_cast<double>(in_ch) * kernel * kernel;
    weight_ = Parameter<T>(name + ".weight",
                           random_normal<T>(Shape{out_ch, in_ch, kernel, kernel}, rng, 0.0, std::sqrt(2.0 / fan_in)));
    if (bias) bias_ = Parameter<T>(name + ".bias", Tensor<T>(Shape{1, out_ch, 1, 1}));
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    Var<T> y = ops::conv2d(x, tape.param(weight_), stride_, padding_);
    if (bias_) y = ops::add_channel_bias(y, tape.param(*bias_));
    return y;
  }

  LayerSpec spec() const {
    const Shape& s = weight_.value.shape();
    return LayerSpec{LayerKind::Conv, s.c, s.n, s.h, stride_, padding_, bias_.has_value(), 1};
  }

  void parameters(std::vector<Parameter<T>*>& out) {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
  }
  void visit(const TensorVisitor<T>& fn) {
    fn(weight_.name, weight_.value);
    if (bias_) fn(bias_->name, bias_->value);
  }

  Parameter<T>& weight() { return weight_; }
  std::optional<Parameter<T>>& bias() { return bias_; }

 private:
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
  int stride_ = 1;
  int padding_ = 0;
};

template <typename T>
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(const std::string& name, int channels)
      : name_(name),
        gamma_(name + ".weight", Tensor<T>(Shape{1, channels, 1, 1}, T(1))),
        beta_(name + ".bias", Tensor<T>(Shape{1, channels, 1, 1}, T(0))),
        stats_(channels) {}

  Var<T> forward(Tape<T>& tape, Var<T> x, bool train) {
    return ops::batch_norm(x, tape.param(gamma_), tape.param(beta_), stats_, train);
  }

  void parameters(std::vector<Parameter<T>*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void visit(const TensorVisitor<T>& fn) {
    fn(gamma_.name, gamma_.value);
    fn(beta_.name, beta_.value);
    fn(name_ + ".running_mean", stats_.mean);
    fn(name_ + ".running_var", stats_.var);
  }

  ops::BatchNormStats<T>& stats() { return stats_; }
  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }
  int channels() const { return gamma_.value.c(); }

 private:
  std::string name_;
  Parameter<T> gamma_;
  Parameter<T> beta_;
  ops::BatchNormStats<T> stats_;
};

/// conv3x3(stride) -> BN -> ReLU -> conv3x3 -> BN, plus an identity skip or a
/// 1x1 conv + BN projection when the stride or width changes.
/// out = ReLU(skip + gate * branch); without a gate the branch enters unscaled.
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, int in_ch, int out_ch, int stride, Rng& rng)
      : conv1_(name + ".conv1", in_ch, out_ch, 3, stride, 1, false, rng),
        bn1_(name + ".bn1", out_ch),
        conv2_(name + ".conv2", out_ch, out_ch, 3, 1, 1, false, rng),
        bn2_(name + ".bn2", out_ch) {
    if (stride != 1 || in_ch != out_ch) {
      proj_.emplace(name + ".proj", in_ch, out_ch, 1, stride, 0, false, rng);
      proj_bn_.emplace(name + ".proj_bn", out_ch);
    }
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, bool train, const Var<T>* gate = nullptr) {
    Var<T> branch = ops::relu(bn1_.forward(tape, conv1_.forward(tape, x), train));
    branch = bn2_.forward(tape, conv2_.forward(tape, branch), train);
    if (gate != nullptr) branch = ops::mul_map(branch, *gate);
    Var<T> skip = x;
    if (proj_) skip = proj_bn_->forward(tape, proj_->forward(tape, x), train);
    return ops::relu(ops::add(branch, skip));
  }

  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> out{conv1_.spec(), bn_spec(bn1_), conv2_.spec(), bn_spec(bn2_)};
    if (proj_) {
      out.push_back(proj_->spec());
      out.push_back(bn_spec(*proj_bn_));
    }
    return out;
  }

  void parameters(std::vector<Parameter<T>*>& out) {
    conv1_.parameters(out);
    bn1_.parameters(out);
    conv2_.parameters(out);
    bn2_.parameters(out);
    if (proj_) {
      proj_->parameters(out);
      proj_bn_->parameters(out);
    }
  }
  void visit(const TensorVisitor<T>& fn) {
    conv1_.visit(fn);
    bn1_.visit(fn);
    conv2_.visit(fn);
    bn2_.visit(fn);
    if (proj_) {
      proj_->visit(fn);
      proj_bn_->visit(fn);
    }
  }

  ConvLayer<T>& conv1() { return conv1_; }
  ConvLayer<T>& conv2() { return conv2_; }
  BatchNormLayer<T>& bn1() { return bn1_; }
  BatchNormLayer<T>& bn2() { return bn2_; }
  std::optional<ConvLayer<T>>& proj() { return proj_; }
  std::optional<BatchNormLayer<T>>& proj_bn() { return proj_bn_; }

 private:
  static LayerSpec bn_spec(const BatchNormLayer<T>& bn) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.in_channels = s.out_channels = bn.channels();
    return s;
  }

  ConvLayer<T> conv1_;
  BatchNormLayer<T> bn1_;
  ConvLayer<T> conv2_;
  BatchNormLayer<T> bn2_;
  std::optional<ConvLayer<T>> proj_;
  std::optional<BatchNormLayer<T>> proj_bn_;
};

/// Fully connected layer over (N, C, 1, 1) inputs, stored as a 1x1 conv.
template <typename T>
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(const std::string& name, int in_features, int out_features, Rng& rng)
      : conv_(name, in_features, out_features, 1, 1, 0, true, rng) {}

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    RSTPM_REQUIRE(x.shape().h == 1 && x.shape().w == 1, ShapeError, "linear expects (N, C, 1, 1) input");
    return conv_.forward(tape, x);
  }
  void parameters(std::vector<Parameter<T>*>& out) { conv_.parameters(out); }

 private:
  ConvLayer<T> conv_;
};

}  // namespace rstpm
