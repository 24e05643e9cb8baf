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
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rstpm/layers.hpp"

namespace rstpm {

/// Pyramid scale, stored as the denominator of the input size (1/4 -> 4).
enum class Level : int { Quarter = 4, Eighth = 8, Sixteenth = 16, ThirtySecond = 32 };

/// Levels where the students are distilled, finest first.
inline constexpr std::array<Level, 3> kDistillLevels{Level::Quarter, Level::Eighth, Level::Sixteenth};

inline int denominator(Level l) { return static_cast<int>(l); }

inline std::string level_name(Level l) { return "1/" + std::to_string(denominator(l)); }

inline int level_index(Level l) {
  switch (l) {
    case Level::Quarter: return 0;
    case Level::Eighth: return 1;
    case Level::Sixteenth: return 2;
    case Level::ThirtySecond: return 3;
  }
  return -1;
}

enum class Role { TeacherA, StudentA, TeacherB, StudentB };

inline std::string role_name(Role r) {
  switch (r) {
    case Role::TeacherA: return "teacher_a";
    case Role::StudentA: return "student_a";
    case Role::TeacherB: return "teacher_b";
    case Role::StudentB: return "student_b";
  }
  return "?";
}

inline Role role_from_name(const std::string& s) {
  if (s == "teacher_a") return Role::TeacherA;
  if (s == "student_a") return Role::StudentA;
  if (s == "teacher_b") return Role::TeacherB;
  if (s == "student_b") return Role::StudentB;
  throw FormatError("unknown network role '" + s + "'");
}

enum class Mode { Train, Eval };

struct StageSpec {
  int blocks = 1;
  int channels = 16;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Residual pyramid backbone: a stride-2 stem followed by four stride-2
/// stages that land on scales 1/4, 1/8, 1/16 and 1/32.
struct PyramidSpec {
  int stem_channels = 16;
  int stem_stride = 2;
  std::vector<StageSpec> stages{{1, 16}, {1, 32}, {1, 64}, {1, 128}};

  friend bool operator==(const PyramidSpec&, const PyramidSpec&) = default;

  /// Teacher-A / student-A desk default.
  static PyramidSpec desk_a() { return {}; }
  /// Deeper and wider teacher-B desk default.
  static PyramidSpec desk_b() { return PyramidSpec{16, 2, {{2, 24}, {2, 48}, {2, 96}, {2, 192}}}; }

  void validate() const {
    RSTPM_REQUIRE(stages.size() == 4, ConfigError, "pyramid spec needs exactly 4 stages");
    RSTPM_REQUIRE(stem_channels >= 1, ConfigError, "pyramid spec: stem channels must be >= 1");
    RSTPM_REQUIRE(stem_stride == 2, ConfigError, "pyramid spec: stem stride must be 2");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      RSTPM_REQUIRE(stages[i].blocks >= 1 && stages[i].channels >= 1, ConfigError,
                    "pyramid spec: stage " + std::to_string(i + 1) + " needs >= 1 block and channel");
      if (i > 0)
        RSTPM_REQUIRE(stages[i].channels >= stages[i - 1].channels, ConfigError,
                      "pyramid spec: stage channels must be non-decreasing");
    }
  }

  int channels(Level l) const { return stages.at(static_cast<std::size_t>(level_index(l))).channels; }
};

/// Reconstruction decoder: 1/32 bottleneck -> three (upsample x2, conv, residual
/// block, 1x1 head) steps producing 1/16, 1/8 and 1/4 features.
struct DecoderSpec {
  int input_channels = 128;
  /// Working width of each up block, ordered 1/16, 1/8, 1/4.
  std::array<int, 3> widths{96, 48, 24};
  /// Head output channels, ordered 1/16, 1/8, 1/4; must equal the target teacher's.
  std::array<int, 3> out_channels{96, 48, 24};

  friend bool operator==(const DecoderSpec&, const DecoderSpec&) = default;

  /// Decoder that maps `source`'s bottleneck onto `target`'s distillation levels.
  static DecoderSpec for_teachers(const PyramidSpec& source, const PyramidSpec& target) {
    DecoderSpec d;
    d.input_channels = source.channels(Level::ThirtySecond);
    d.out_channels = {target.channels(Level::Sixteenth), target.channels(Level::Eighth),
                      target.channels(Level::Quarter)};
    d.widths = d.out_channels;
    return d;
  }

  void validate() const {
    RSTPM_REQUIRE(input_channels >= 1, ConfigError, "decoder spec: input channels must be >= 1");
    for (int i = 0; i < 3; ++i)
      RSTPM_REQUIRE(widths[i] >= 1 && out_channels[i] >= 1, ConfigError, "decoder spec: widths must be >= 1");
  }
};

/// Decoder output levels in execution order.
inline constexpr std::array<Level, 3> kDecoderLevels{Level::Sixteenth, Level::Eighth, Level::Quarter};

template <typename T>
struct FeaturePyramid {
  Role source = Role::TeacherA;
  std::map<Level, Var<T>> levels;

  const Var<T>& at(Level l) const {
    auto it = levels.find(l);
    RSTPM_REQUIRE(it != levels.end(), ShapeError, "pyramid has no level " + level_name(l));
    return it->second;
  }
};

/// Concrete per-level tensors (pyramid values detached from any tape).
template <typename T>
using PyramidTensors = std::map<Level, Tensor<T>>;

template <typename T>
PyramidTensors<T> values(const FeaturePyramid<T>& p) {
  PyramidTensors<T> out;
  for (const auto& [l, v] : p.levels) out.emplace(l, v.value());
  return out;
}

/// Per-level single-channel gate maps fed into a network's forward pass.
template <typename T>
using GateMaps = std::map<Level, Var<T>>;

inline void check_input_shape(const Shape& s) {
  RSTPM_REQUIRE(s.c == 3, ShapeError, "network input needs 3 channels, got " + s.str());
  RSTPM_REQUIRE(s.h % 32 == 0 && s.w % 32 == 0, ShapeError,
                "network input dims must be divisible by 32, got " + s.str());
}

/// Teacher-A, student-A and teacher-B.
template <typename T>
class PyramidNet {
 public:
  PyramidNet() = default;
  PyramidNet(Role role, PyramidSpec spec, std::uint64_t seed) : role_(role), spec_(std::move(spec)), seed_(seed) {
    spec_.validate();
    Rng rng(seed);
    stem_ = ConvLayer<T>("stem.conv", 3, spec_.stem_channels, 3, spec_.stem_stride, 1, false, rng);
    stem_bn_ = BatchNormLayer<T>("stem.bn", spec_.stem_channels);
    int in_ch = spec_.stem_channels;
    for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
      std::vector<ResidualBlock<T>> blocks;
      for (int b = 0; b < spec_.stages[s].blocks; ++b) {
        const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        blocks.emplace_back(name, in_ch, spec_.stages[s].channels, b == 0 ? 2 : 1, rng);
        in_ch = spec_.stages[s].channels;
      }
      stages_.push_back(std::move(blocks));
    }
  }

  Role role() const { return role_; }
  const PyramidSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  bool frozen() const { return frozen_; }

  /// Runs the backbone. The 1/32 tap is computed only when `with_bottleneck`
  /// is set (always for teacher-A). A gate map for a level scales the residual
  /// branch of that stage's last block. Frozen networks always run in eval mode.
  FeaturePyramid<T> forward(Tape<T>& tape, Var<T> input, Mode mode, const GateMaps<T>* gates = nullptr,
                            bool with_bottleneck = false) {
    check_input_shape(input.shape());
    const bool train = mode == Mode::Train && !frozen_;
    FeaturePyramid<T> out;
    out.source = role_;
    Var<T> x = ops::relu(stem_bn_.forward(tape, stem_.forward(tape, input), train));
    const std::size_t last = (with_bottleneck || role_ == Role::TeacherA) ? 4 : 3;
    for (std::size_t s = 0; s < last; ++s) {
      const Level level = static_cast<Level>(4 << s);
      const Var<T>* gate = nullptr;
      if (gates != nullptr) {
        auto it = gates->find(level);
        if (it != gates->end()) gate = &it->second;
      }
      auto& blocks = stages_[s];
      for (std::size_t b = 0; b < blocks.size(); ++b)
        x = blocks[b].forward(tape, x, train, b + 1 == blocks.size() ? gate : nullptr);
      out.levels.emplace(level, x);
    }
    return out;
  }

  void parameters(std::vector<Parameter<T>*>& out) {
    stem_.parameters(out);
    stem_bn_.parameters(out);
    for (auto& st : stages_)
      for (auto& b : st) b.parameters(out);
  }
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    parameters(out);
    return out;
  }

  void visit(const TensorVisitor<T>& fn) {
    stem_.visit(fn);
    stem_bn_.visit(fn);
    for (auto& st : stages_)
      for (auto& b : st) b.visit(fn);
  }

  std::vector<LayerSpec> layer_specs() const {
    std::vector<LayerSpec> out{stem_.spec()};
    LayerSpec bn;
    bn.kind = LayerKind::BatchNorm;
    bn.in_channels = bn.out_channels = spec_.stem_channels;
    out.push_back(bn);
    for (const auto& st : stages_)
      for (const auto& b : st) {
        auto s = b.specs();
        out.insert(out.end(), s.begin(), s.end());
      }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  /// Marks every parameter non-trainable and pins BN to eval mode.
  void freeze() {
    for (auto* p : parameters()) p->trainable = false;
    frozen_ = true;
  }

  /// Restores trainability (used only when loading unfrozen students).
  void unfreeze() {
    for (auto* p : parameters()) p->trainable = true;
    frozen_ = false;
  }

 private:
  Role role_ = Role::TeacherA;
  PyramidSpec spec_;
  std::uint64_t seed_ = 0;
  bool frozen_ = false;
  ConvLayer<T> stem_;
  BatchNormLayer<T> stem_bn_;
  std::vector<std::vector<ResidualBlock<T>>> stages_;
};

/// Student-B: reconstructs teacher-B features from teacher-A's bottleneck.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(DecoderSpec spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
    spec_.validate();
    Rng rng(seed);
    int in_ch = spec_.input_channels;
    for (int i = 0; i < 3; ++i) {
      const std::string name = "up" + std::to_string(i);
      UpBlock ub{ConvLayer<T>(name + ".conv", in_ch, spec_.widths[i], 3, 1, 1, false, rng),
                 BatchNormLayer<T>(name + ".bn", spec_.widths[i]),
                 ResidualBlock<T>(name + ".res", spec_.widths[i], spec_.widths[i], 1, rng),
                 ConvLayer<T>(name + ".head", spec_.widths[i], spec_.out_channels[i], 1, 1, 0, true, rng)};
      blocks_.push_back(std::move(ub));
      in_ch = spec_.widths[i];
    }
  }

  Role role() const { return Role::StudentB; }
  const DecoderSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  bool frozen() const { return frozen_; }

  /// The bottleneck is cut from the graph here regardless of how it was produced.
  FeaturePyramid<T> forward(Tape<T>& tape, Var<T> bottleneck, Mode mode, const GateMaps<T>* gates = nullptr) {
    RSTPM_REQUIRE(bottleneck.shape().c == spec_.input_channels, ShapeError,
                  "decoder expects " + std::to_string(spec_.input_channels) + " bottleneck channels, got " +
                      bottleneck.shape().str());
    const bool train = mode == Mode::Train && !frozen_;
    FeaturePyramid<T> out;
    out.source = Role::StudentB;
    Var<T> x = tape.detach(bottleneck);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const Level level = kDecoderLevels[i];
      const Var<T>* gate = nullptr;
      if (gates != nullptr) {
        auto it = gates->find(level);
        if (it != gates->end()) gate = &it->second;
      }
      auto& ub = blocks_[i];
      const Shape s = x.shape();
      x = ops::upsample_bilinear(x, s.h * 2, s.w * 2);
      x = ops::relu(ub.bn.forward(tape, ub.conv.forward(tape, x), train));
      x = ub.res.forward(tape, x, train, gate);
      out.levels.emplace(level, ub.head.forward(tape, x));
    }
    return out;
  }

  void parameters(std::vector<Parameter<T>*>& out) {
    for (auto& ub : blocks_) {
      ub.conv.parameters(out);
      ub.bn.parameters(out);
      ub.res.parameters(out);
      ub.head.parameters(out);
    }
  }
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    parameters(out);
    return out;
  }
  void visit(const TensorVisitor<T>& fn) {
    for (auto& ub : blocks_) {
      ub.conv.visit(fn);
      ub.bn.visit(fn);
      ub.res.visit(fn);
      ub.head.visit(fn);
    }
  }
  void freeze() {
    for (auto* p : parameters()) p->trainable = false;
    frozen_ = true;
  }

 private:
  struct UpBlock {
    ConvLayer<T> conv;
    BatchNormLayer<T> bn;
    ResidualBlock<T> res;
    ConvLayer<T> head;
  };

  DecoderSpec spec_;
  std::uint64_t seed_ = 0;
  bool frozen_ = false;
  std::vector<UpBlock> blocks_;
};

/// Builds a backbone for the given role. Deterministic given the seed.
template <typename T = float>
PyramidNet<T> build_network(Role role, const PyramidSpec& spec, std::uint64_t seed) {
  RSTPM_REQUIRE(role != Role::StudentB, ConfigError, "student-B is a decoder; use build_decoder");
  return PyramidNet<T>(role, spec, seed);
}

template <typename T = float>
Decoder<T> build_decoder(const DecoderSpec& spec, std::uint64_t seed) {
  return Decoder<T>(spec, seed);
}

/// Eval-mode forward without gradient recording; returns concrete tensors.
template <typename T>
PyramidTensors<T> forward_pyramid(PyramidNet<T>& net, const Tensor<T>& batch, bool with_bottleneck = false) {
  Tape<T> tape(false);
  auto p = net.forward(tape, tape.constant(batch), Mode::Eval, nullptr, with_bottleneck);
  return values(p);
}

template <typename T>
PyramidTensors<T> forward_decoder(Decoder<T>& dec, const Tensor<T>& bottleneck) {
  Tape<T> tape(false);
  auto p = dec.forward(tape, tape.constant(bottleneck), Mode::Eval);
  return values(p);
}

}  // namespace rstpm
