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

#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rstpm/backbones.hpp"
#include "rstpm/data.hpp"
#include "rstpm/sgd.hpp"

namespace rstpm {

// ---------------------------------------------------------------------------
// Feature matching losses
//
// Teacher and student features are l2-normalized along channels at every
// position; the per-position loss is half the squared distance of the unit
// vectors (= 1 - cosine similarity), averaged over the grid of a level and
// summed over the distillation levels with equal weight.

/// Per-position channel normalization of a concrete feature map.
template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& f) {
  return kernels::normalize_channels(f);
}

/// 0.5 * ||a - b||^2 for two channel vectors (expected unit length).
template <typename T>
T position_loss(std::span<const T> a, std::span<const T> b) {
  RSTPM_REQUIRE(a.size() == b.size(), ShapeError,
                "position_loss: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " channels");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return static_cast<T>(0.5 * s);
}

/// Mean of the per-position loss over the grid (and the batch) of one level.
template <typename T>
Var<T> level_loss(Var<T> teacher, Var<T> student) {
  RSTPM_REQUIRE(teacher.shape() == student.shape(), ShapeError,
                "level_loss: teacher " + teacher.shape().str() + " vs student " + student.shape().str());
  Var<T> t = ops::normalize_channels(teacher.tape->detach(teacher));
  Var<T> s = ops::normalize_channels(student);
  return ops::mean(ops::position_loss_map(t, s));
}

template <typename T>
T level_loss(const Tensor<T>& teacher, const Tensor<T>& student) {
  Tape<T> tape(false);
  return level_loss(tape.constant(teacher), tape.constant(student)).value()[0];
}

struct LevelLosses {
  std::array<double, 3> per_level{};  // 1/4, 1/8, 1/16
  double total = 0;
};

/// Unweighted sum of level losses. The teacher side is always detached.
template <typename T>
Var<T> total_loss(const FeaturePyramid<T>& teacher, const FeaturePyramid<T>& student, LevelLosses* parts = nullptr,
                  std::span<const Level> levels = kDistillLevels) {
  RSTPM_REQUIRE(!levels.empty(), ShapeError, "total_loss: no levels");
  std::optional<Var<T>> acc;
  for (Level l : levels) {
    Var<T> ll = level_loss(teacher.at(l), student.at(l));
    if (parts) parts->per_level[static_cast<std::size_t>(level_index(l))] = ll.value()[0];
    acc = acc ? ops::add(*acc, ll) : ll;
  }
  if (parts) parts->total = acc->value()[0];
  return *acc;
}

// ---------------------------------------------------------------------------
// Attention gates

enum class Pair { A, B };

inline std::string pair_name(Pair p) { return p == Pair::A ? "a" : "b"; }

/// One-channel gate: sigmoid(1x1 conv(teacher features)). The teacher features
/// are detached before the gate sees them.
template <typename T>
class AttentionGate {
 public:
  AttentionGate() = default;
  AttentionGate(Pair pair, Level level, int channels, Rng& rng)
      : pair_(pair),
        level_(level),
        conv_("gate_" + pair_name(pair) + "." + std::to_string(denominator(level)), channels, 1, 1, 1, 0, true, rng) {}

  Var<T> forward(Var<T> teacher_features) {
    Tape<T>& tape = *teacher_features.tape;
    RSTPM_REQUIRE(teacher_features.shape().c == channels(), ShapeError,
                  "attention gate expects " + std::to_string(channels()) + " channels, got " +
                      teacher_features.shape().str());
    return ops::sigmoid(conv_.forward(tape, tape.detach(teacher_features)));
  }

  Pair pair() const { return pair_; }
  Level level() const { return level_; }
  int channels() const { return conv_.spec().in_channels; }
  Parameter<T>& weight() { return conv_.weight(); }
  Parameter<T>& bias() { return *conv_.bias(); }
  void parameters(std::vector<Parameter<T>*>& out) { conv_.parameters(out); }
  void visit(const TensorVisitor<T>& fn) { conv_.visit(fn); }

 private:
  Pair pair_ = Pair::A;
  Level level_ = Level::Quarter;
  ConvLayer<T> conv_;
};

/// The three gates of one student-teacher pair, indexed like kDistillLevels.
template <typename T>
struct AttentionGates {
  Pair pair = Pair::A;
  std::array<AttentionGate<T>, 3> gates;

  AttentionGates() = default;
  /// `channels` are the teacher channel counts at 1/4, 1/8, 1/16.
  AttentionGates(Pair p, std::array<int, 3> channels, std::uint64_t seed) : pair(p) {
    Rng rng(seed);
    for (std::size_t i = 0; i < 3; ++i) gates[i] = AttentionGate<T>(p, kDistillLevels[i], channels[i], rng);
  }

  static AttentionGates for_teacher(Pair p, const PyramidSpec& teacher, std::uint64_t seed) {
    return AttentionGates(p, {teacher.channels(Level::Quarter), teacher.channels(Level::Eighth),
                              teacher.channels(Level::Sixteenth)},
                          seed);
  }

  AttentionGate<T>& at(Level l) { return gates[static_cast<std::size_t>(level_index(l))]; }

  GateMaps<T> compute(const FeaturePyramid<T>& teacher) {
    GateMaps<T> maps;
    for (auto& g : gates) maps.emplace(g.level(), g.forward(teacher.at(g.level())));
    return maps;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& g : gates) g.parameters(out);
    return out;
  }
  void visit(const TensorVisitor<T>& fn) {
    for (auto& g : gates) g.visit(fn);
  }
};

/// A = sigmoid(1x1 conv) on concrete teacher features.
template <typename T>
Tensor<T> attention_forward(AttentionGate<T>& gate, const Tensor<T>& teacher_features) {
  Tape<T> tape(false);
  return gate.forward(tape.constant(teacher_features)).value();
}

/// Fs'[c, i, j] = Fs[c, i, j] * A[i, j].
template <typename T>
Var<T> apply_attention(Var<T> features, Var<T> attention) {
  return ops::mul_map(features, attention);
}

template <typename T>
Tensor<T> apply_attention(const Tensor<T>& features, const Tensor<T>& attention) {
  Tape<T> tape(false);
  return ops::mul_map(tape.constant(features), tape.constant(attention)).value();
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 0.4;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 32;
  int epochs = 30;
  std::uint64_t seed = 0;
  int image_size = 64;
  bool attention_enabled = true;

  /// Full-scale operating point.
  static TrainConfig full_scale() {
    TrainConfig c;
    c.epochs = 100;
    c.image_size = 256;
    return c;
  }

  void validate() const {
    RSTPM_REQUIRE(lr > 0, ConfigError, "train config: lr must be > 0");
    RSTPM_REQUIRE(batch_size >= 1, ConfigError, "train config: batch size must be >= 1");
    RSTPM_REQUIRE(epochs >= 1, ConfigError, "train config: epochs must be >= 1");
    RSTPM_REQUIRE(image_size >= 32 && image_size % 32 == 0, ConfigError,
                  "train config: image size must be a positive multiple of 32");
  }

  SgdOptions sgd() const { return SgdOptions{lr, momentum, weight_decay}; }
};

struct EpochLoss {
  int epoch = 0;
  std::array<double, 3> level{};
  double total = 0;
  double seconds = 0;
};

struct LossReport {
  std::string student;
  std::vector<EpochLoss> epochs;

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    RSTPM_REQUIRE(os.good(), InputError, "cannot write loss report '" + path + "'");
    os << "epoch,loss_1/4,loss_1/8,loss_1/16,total,seconds\n";
    os.precision(9);
    for (const auto& e : epochs)
      os << e.epoch << ',' << e.level[0] << ',' << e.level[1] << ',' << e.level[2] << ',' << e.total << ','
         << e.seconds << '\n';
  }
};

/// Frozen-teacher outputs computed once per training image.
template <typename T>
struct TeacherCache {
  std::vector<PyramidTensors<T>> items;

  /// Stacks the cached levels of the given items into batch tensors.
  PyramidTensors<T> gather(const std::vector<std::size_t>& idx) const {
    PyramidTensors<T> out;
    for (const auto& [level, _] : items.at(idx.front())) {
      std::vector<const Tensor<T>*> parts;
      for (std::size_t i : idx) parts.push_back(&items[i].at(level));
      out.emplace(level, stack<T>(std::span<const Tensor<T>* const>(parts)));
    }
    return out;
  }
};

template <typename T>
TeacherCache<T> cache_teacher(PyramidNet<T>& teacher, const LabeledCorpus& corpus, int batch_size,
                              bool with_bottleneck = false) {
  RSTPM_REQUIRE(teacher.frozen(), StateError, role_name(teacher.role()) + " must be frozen before distillation");
  TeacherCache<T> cache;
  cache.items.resize(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(corpus.size(), i + static_cast<std::size_t>(batch_size)); ++j) idx.push_back(j);
    PyramidTensors<T> p = forward_pyramid(teacher, gather_images<T>(corpus, idx), with_bottleneck);
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (const auto& [level, t] : p) cache.items[idx[k]].emplace(level, t.sample(static_cast<int>(k)));
  }
  return cache;
}

template <typename T>
FeaturePyramid<T> as_constants(Tape<T>& tape, const PyramidTensors<T>& p, Role source) {
  FeaturePyramid<T> out;
  out.source = source;
  for (const auto& [l, t] : p) out.levels.emplace(l, tape.constant(t));
  return out;
}

/// Distillation loss of pair A on one batch. Gates (optional) read the teacher pyramid.
template <typename T>
Var<T> student_a_loss(Tape<T>& tape, const FeaturePyramid<T>& teacher, PyramidNet<T>& student, Var<T> input,
                      AttentionGates<T>* gates, Mode mode, LevelLosses* parts = nullptr) {
  GateMaps<T> maps;
  if (gates) maps = gates->compute(teacher);
  FeaturePyramid<T> s = student.forward(tape, input, mode, gates ? &maps : nullptr);
  return total_loss(teacher, s, parts);
}

/// Distillation loss of pair B on one batch: the decoder reconstructs the
/// teacher-B pyramid from the (detached) teacher-A bottleneck.
template <typename T>
Var<T> student_b_loss(Tape<T>& tape, Var<T> bottleneck, const FeaturePyramid<T>& teacher_b, Decoder<T>& decoder,
                      AttentionGates<T>* gates, Mode mode, LevelLosses* parts = nullptr) {
  GateMaps<T> maps;
  if (gates) maps = gates->compute(teacher_b);
  FeaturePyramid<T> s = decoder.forward(tape, bottleneck, mode, gates ? &maps : nullptr);
  return total_loss(teacher_b, s, parts);
}

namespace detail {

/// Shared epoch loop: `step` records one batch's loss on a fresh tape.
template <typename T, typename StepFn>
LossReport run_epochs(const std::string& name, const LabeledCorpus& corpus, const TrainConfig& cfg,
                      const std::vector<Parameter<T>*>& params, StepFn&& step,
                      const std::function<void(const EpochLoss&)>& on_epoch) {
  LossReport report{name, {}};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLoss el;
    el.epoch = epoch + 1;
    std::size_t seen = 0;
    for (const auto& idx : batch_order(corpus.size(), cfg.batch_size, cfg.seed, epoch)) {
      Tape<T> tape;
      LevelLosses parts;
      Var<T> loss = step(tape, idx, parts);
      RSTPM_REQUIRE(std::isfinite(static_cast<double>(loss.value()[0])), NumericError,
                    name + ": non-finite loss at epoch " + std::to_string(epoch + 1));
      tape.backward(loss);
      sgd_step(params, cfg.sgd());
      for (std::size_t l = 0; l < 3; ++l) el.level[l] += parts.per_level[l] * idx.size();
      el.total += parts.total * idx.size();
      seen += idx.size();
    }
    for (auto& v : el.level) v /= static_cast<double>(seen);
    el.total /= static_cast<double>(seen);
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(el);
    if (on_epoch) on_epoch(el);
  }
  return report;
}

}  // namespace detail

/// Distills frozen teacher-A into student-A (plus gates A when enabled).
template <typename T>
LossReport train_student_a(PyramidNet<T>& teacher_a, PyramidNet<T>& student_a, AttentionGates<T>* gates_a,
                           const LabeledCorpus& corpus, const TrainConfig& cfg,
                           const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  cfg.validate();
  require_normal_only(corpus);
  RSTPM_REQUIRE(!student_a.frozen(), StateError, "student-A must be trainable");
  RSTPM_REQUIRE(teacher_a.spec() == student_a.spec(), ConfigError, "student-A must share teacher-A's architecture");
  AttentionGates<T>* gates = cfg.attention_enabled ? gates_a : nullptr;
  RSTPM_REQUIRE(!cfg.attention_enabled || gates_a != nullptr, ConfigError, "attention enabled but no gates given");
  const TeacherCache<T> cache = cache_teacher(teacher_a, corpus, cfg.batch_size);
  std::vector<Parameter<T>*> params = student_a.parameters();
  if (gates)
    for (auto* p : gates->parameters()) params.push_back(p);
  zero_grads(params);
  return detail::run_epochs<T>(
      "student_a", corpus, cfg, params,
      [&](Tape<T>& tape, const std::vector<std::size_t>& idx, LevelLosses& parts) {
        FeaturePyramid<T> t = as_constants(tape, cache.gather(idx), Role::TeacherA);
        Var<T> input = tape.constant(gather_images<T>(corpus, idx));
        return student_a_loss(tape, t, student_a, input, gates, Mode::Train, &parts);
      },
      on_epoch);
}

/// Distills frozen teacher-B into the decoder fed by frozen teacher-A's bottleneck.
template <typename T>
LossReport train_student_b(PyramidNet<T>& teacher_a, PyramidNet<T>& teacher_b, Decoder<T>& student_b,
                           AttentionGates<T>* gates_b, const LabeledCorpus& corpus, const TrainConfig& cfg,
                           const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  cfg.validate();
  require_normal_only(corpus);
  RSTPM_REQUIRE(!student_b.frozen(), StateError, "student-B must be trainable");
  AttentionGates<T>* gates = cfg.attention_enabled ? gates_b : nullptr;
  RSTPM_REQUIRE(!cfg.attention_enabled || gates_b != nullptr, ConfigError, "attention enabled but no gates given");
  const TeacherCache<T> cache_a = cache_teacher(teacher_a, corpus, cfg.batch_size, true);
  const TeacherCache<T> cache_b = cache_teacher(teacher_b, corpus, cfg.batch_size);
  std::vector<Parameter<T>*> params = student_b.parameters();
  if (gates)
    for (auto* p : gates->parameters()) params.push_back(p);
  zero_grads(params);
  return detail::run_epochs<T>(
      "student_b", corpus, cfg, params,
      [&](Tape<T>& tape, const std::vector<std::size_t>& idx, LevelLosses& parts) {
        const PyramidTensors<T> a = cache_a.gather(idx);
        Var<T> bottleneck = tape.constant(a.at(Level::ThirtySecond));
        FeaturePyramid<T> tb = as_constants(tape, cache_b.gather(idx), teacher_b.role());
        return student_b_loss(tape, bottleneck, tb, student_b, gates, Mode::Train, &parts);
      },
      on_epoch);
}

}  // namespace rstpm
