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

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rstpm/backbones.hpp"
#include "rstpm/data.hpp"
#include "rstpm/sgd.hpp"

namespace rstpm {

struct PretrainConfig {
  int classes = 8;
  int per_class = 40;
  int held_out_per_class = 10;
  int image_size = 64;
  int epochs = 12;
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  /// Held-out accuracy; empty when pretraining was skipped.
  std::optional<double> accuracy;
  std::vector<double> epoch_loss;
  bool uninformative = false;
};

/// Classification head used only during pretraining.
template <typename T>
struct PretextHead {
  LinearLayer<T> linear;

  PretextHead(int in_features, int classes, std::uint64_t seed) {
    Rng rng(seed);
    linear = LinearLayer<T>("head", in_features, classes, rng);
  }

  Var<T> logits(Tape<T>& tape, PyramidNet<T>& net, Var<T> input, Mode mode) {
    FeaturePyramid<T> p = net.forward(tape, input, mode, nullptr, true);
    return linear.forward(tape, ops::global_avg_pool(p.at(Level::ThirtySecond)));
  }
};

template <typename T>
double classification_accuracy(PyramidNet<T>& net, PretextHead<T>& head, const LabeledCorpus& corpus, int batch_size) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < corpus.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(corpus.size(), i + static_cast<std::size_t>(batch_size)); ++j) idx.push_back(j);
    Tape<T> tape(false);
    const Tensor<T> z = head.logits(tape, net, tape.constant(gather_images<T>(corpus, idx)), Mode::Eval).value();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      int best = 0;
      for (int c = 1; c < z.c(); ++c)
        if (z(static_cast<int>(k), c, 0, 0) > z(static_cast<int>(k), best, 0, 0)) best = c;
      correct += best == corpus.items[idx[k]].class_id;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

/// Trains the backbone on a texture-classification pretext with a temporary
/// pooled linear head, discards the head and freezes the network.
template <typename T>
PretrainResult pretrain_teacher(PyramidNet<T>& net, const LabeledCorpus& train, const LabeledCorpus& held_out,
                                const PretrainConfig& cfg,
                                const std::function<void(int, double)>& on_epoch = {}) {
  RSTPM_REQUIRE(!train.empty() && !held_out.empty(), InputError, "pretrain: empty pretext corpus");
  int classes = 0;
  for (const auto& item : train.items) {
    RSTPM_REQUIRE(item.class_id >= 0, InputError, "pretrain: corpus item without class label");
    classes = std::max(classes, item.class_id + 1);
  }
  RSTPM_REQUIRE(classes >= 2, InputError, "pretrain: need at least 2 classes");
  net.unfreeze();
  PretextHead<T> head(net.spec().channels(Level::ThirtySecond), classes, detail::mix_seed(cfg.seed, 0x4EAD));
  std::vector<Parameter<T>*> params = net.parameters();
  head.linear.parameters(params);
  zero_grads(params);
  const SgdOptions opt{cfg.lr, cfg.momentum, cfg.weight_decay};
  PretrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0;
    for (const auto& idx : batch_order(train.size(), cfg.batch_size, cfg.seed, epoch)) {
      Tape<T> tape;
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train.items[i].class_id);
      Var<T> loss = ops::softmax_cross_entropy(
          head.logits(tape, net, tape.constant(gather_images<T>(train, idx)), Mode::Train), labels);
      RSTPM_REQUIRE(std::isfinite(static_cast<double>(loss.value()[0])), NumericError,
                    "pretrain: non-finite loss at epoch " + std::to_string(epoch + 1));
      tape.backward(loss);
      sgd_step(params, opt);
      total += loss.value()[0] * idx.size();
    }
    result.epoch_loss.push_back(total / static_cast<double>(train.size()));
    if (on_epoch) on_epoch(epoch + 1, result.epoch_loss.back());
  }
  net.freeze();
  result.accuracy = classification_accuracy(net, head, held_out, cfg.batch_size);
  result.uninformative = *result.accuracy <= 1.0 / classes + 0.05;
  return result;
}

/// Generates the pretext corpora from the config and pretrains.
template <typename T>
PretrainResult pretrain_teacher(PyramidNet<T>& net, const PretrainConfig& cfg,
                                const std::function<void(int, double)>& on_epoch = {}) {
  const LabeledCorpus train = gen_pretext(cfg.classes, cfg.per_class, cfg.image_size, cfg.seed);
  const LabeledCorpus held = gen_pretext(cfg.classes, cfg.held_out_per_class, cfg.image_size,
                                         detail::mix_seed(cfg.seed, 0x4E1D));
  return pretrain_teacher(net, train, held, cfg, on_epoch);
}

/// Degenerate path: freeze an untrained network; accuracy stays empty.
template <typename T>
PretrainResult freeze_untrained(PyramidNet<T>& net) {
  net.freeze();
  return PretrainResult{};
}

}  // namespace rstpm
