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
#include <array>
#include <span>
#include <string>
#include <vector>

#include "rstpm/bundle.hpp"
#include "rstpm/kernels.hpp"

namespace rstpm {

/// Nonnegative H x W field stored as (1, 1, H, W).
struct AnomalyMap {
  Tensor<float> values;
  std::string source;

  int height() const { return values.h(); }
  int width() const { return values.w(); }
  float at(int y, int x) const { return values(0, 0, y, x); }
};

/// Per-position 0.5 * ||norm(Ft) - norm(Fs)||^2, shape (N, 1, h, w). Same
/// kernels as the training loss, so a map averages to the level loss.
template <typename T>
Tensor<T> level_anomaly_map(const Tensor<T>& teacher, const Tensor<T>& student) {
  RSTPM_REQUIRE(teacher.shape() == student.shape(), ShapeError,
                "level_anomaly_map: teacher " + teacher.shape().str() + " vs student " + student.shape().str());
  return kernels::position_loss_map(kernels::normalize_channels(teacher), kernels::normalize_channels(student));
}

/// Bilinear resize of a single-image (1, 1, h, w) map to H x W.
inline AnomalyMap lift_to_input(const Tensor<float>& low, int height, int width, std::string source = {}) {
  RSTPM_REQUIRE(low.n() == 1 && low.c() == 1, ShapeError, "lift_to_input expects (1,1,h,w), got " + low.shape().str());
  return AnomalyMap{kernels::resize_bilinear(low, height, width), std::move(source)};
}

namespace detail {

inline void require_same_dims(const AnomalyMap& a, const AnomalyMap& b, const char* what) {
  RSTPM_REQUIRE(a.values.shape() == b.values.shape(), ShapeError,
                std::string(what) + ": map '" + a.source + "' is " + a.values.shape().str() + " but '" + b.source +
                    "' is " + b.values.shape().str());
}

}  // namespace detail

/// Elementwise product of the three per-level maps.
inline AnomalyMap fuse_product(std::span<const AnomalyMap> maps) {
  RSTPM_REQUIRE(maps.size() == 3, ShapeError, "fuse_product needs 3 maps, got " + std::to_string(maps.size()));
  for (const auto& m : maps) detail::require_same_dims(maps[0], m, "fuse_product");
  AnomalyMap out{maps[0].values, "final"};
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = maps[0].values[i] * maps[1].values[i] * maps[2].values[i];
  return out;
}

/// Same-level maps are added across the pairs, then multiplied across levels.
inline AnomalyMap fuse_dual(std::span<const AnomalyMap> maps_a, std::span<const AnomalyMap> maps_b) {
  RSTPM_REQUIRE(maps_a.size() == 3 && maps_b.size() == 3, ShapeError,
                "fuse_dual needs 3 maps per pair, got " + std::to_string(maps_a.size()) + " and " +
                    std::to_string(maps_b.size()));
  for (std::size_t l = 0; l < 3; ++l) {
    detail::require_same_dims(maps_a[0], maps_a[l], "fuse_dual");
    detail::require_same_dims(maps_a[0], maps_b[l], "fuse_dual");
  }
  AnomalyMap out{maps_a[0].values, "final"};
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    float v = 1.0f;
    for (std::size_t l = 0; l < 3; ++l) v *= maps_a[l].values[i] + maps_b[l].values[i];
    out.values[i] = v;
  }
  return out;
}

/// Maximum pixel of the map.
inline float image_score(const AnomalyMap& m) {
  RSTPM_REQUIRE(m.values.size() > 0, ShapeError, "image_score of an empty map");
  return *std::max_element(m.values.data(), m.values.data() + m.values.size());
}

/// Rescales a map to [0, 1]; a constant map becomes all zeros.
inline AnomalyMap minmax_scaled(const AnomalyMap& m) {
  AnomalyMap out = m;
  const float lo = m.values.min();
  const float range = m.values.max() - lo;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = range > 0 ? (m.values[i] - lo) / range : 0.0f;
  return out;
}

enum class Fusion { Baseline, Dual };

inline std::string fusion_name(Fusion f) { return f == Fusion::Baseline ? "baseline" : "dual"; }

struct InferenceOptions {
  Fusion fusion = Fusion::Dual;
  /// Modulate students with the trained gates at test time (no-op without gates).
  bool attention = true;
  /// Per-map min-max scaling before fusion. Breaks loss/score consistency; off by default.
  bool minmax_before_fusion = false;
  int batch_size = 16;
};

struct InferenceResult {
  std::vector<AnomalyMap> maps_a;  // 1/4, 1/8, 1/16
  std::vector<AnomalyMap> maps_b;  // empty in baseline mode
  AnomalyMap final;
  float score = 0;
  std::vector<AnomalyMap> attention_a;  // lifted gate maps, empty when not applied
  std::vector<AnomalyMap> attention_b;
};

namespace detail {

inline std::string map_tag(Pair p, Level l) { return "map_" + pair_name(p) + "_" + std::to_string(denominator(l)); }
inline std::string attention_tag(Pair p, Level l) {
  return "attention_" + pair_name(p) + "_" + std::to_string(denominator(l));
}

/// Lifts sample k of a (N, 1, h, w) tensor.
inline AnomalyMap lift_sample(const Tensor<float>& maps, int k, int height, int width, std::string source) {
  return lift_to_input(maps.sample(k), height, width, std::move(source));
}

}  // namespace detail

/// Runs the networks over a batch of images (N, 3, H, W) and builds the maps.
inline std::vector<InferenceResult> infer_batch(ModelBundle& bundle, const Tensor<float>& images,
                                                const InferenceOptions& opt = {}) {
  RSTPM_REQUIRE(bundle.has_pair_a(), StateError, "bundle has no teacher-A/student-A pair");
  const bool dual = opt.fusion == Fusion::Dual;
  RSTPM_REQUIRE(!dual || bundle.has_pair_b(), StateError,
                "dual inference needs teacher-B and student-B; bundle is baseline-only");
  check_input_shape(images.shape());
  const int n = images.n(), height = images.h(), width = images.w();

  Tape<float> tape(false);
  Var<float> input = tape.constant(images);
  FeaturePyramid<float> ta = bundle.teacher_a->forward(tape, input, Mode::Eval, nullptr, true);
  const bool gate_a = opt.attention && bundle.gates_a.has_value();
  GateMaps<float> ga;
  if (gate_a) ga = bundle.gates_a->compute(ta);
  FeaturePyramid<float> sa = bundle.student_a->forward(tape, input, Mode::Eval, gate_a ? &ga : nullptr);

  std::vector<InferenceResult> results(static_cast<std::size_t>(n));
  for (Level l : kDistillLevels) {
    const Tensor<float> m = level_anomaly_map(ta.at(l).value(), sa.at(l).value());
    for (int k = 0; k < n; ++k)
      results[k].maps_a.push_back(detail::lift_sample(m, k, height, width, detail::map_tag(Pair::A, l)));
    if (gate_a)
      for (int k = 0; k < n; ++k)
        results[k].attention_a.push_back(
            detail::lift_sample(ga.at(l).value(), k, height, width, detail::attention_tag(Pair::A, l)));
  }

  if (dual) {
    FeaturePyramid<float> tb = bundle.teacher_b->forward(tape, input, Mode::Eval);
    const bool gate_b = opt.attention && bundle.gates_b.has_value();
    GateMaps<float> gb;
    if (gate_b) gb = bundle.gates_b->compute(tb);
    FeaturePyramid<float> sb =
        bundle.student_b->forward(tape, ta.at(Level::ThirtySecond), Mode::Eval, gate_b ? &gb : nullptr);
    for (Level l : kDistillLevels) {
      const Tensor<float> m = level_anomaly_map(tb.at(l).value(), sb.at(l).value());
      for (int k = 0; k < n; ++k)
        results[k].maps_b.push_back(detail::lift_sample(m, k, height, width, detail::map_tag(Pair::B, l)));
      if (gate_b)
        for (int k = 0; k < n; ++k)
          results[k].attention_b.push_back(
              detail::lift_sample(gb.at(l).value(), k, height, width, detail::attention_tag(Pair::B, l)));
    }
  }

  for (auto& r : results) {
    std::vector<AnomalyMap> a = r.maps_a, b = r.maps_b;
    if (opt.minmax_before_fusion) {
      for (auto& m : a) m = minmax_scaled(m);
      for (auto& m : b) m = minmax_scaled(m);
    }
    r.final = dual ? fuse_dual(a, b) : fuse_product(a);
    r.score = image_score(r.final);
  }
  return results;
}

inline InferenceResult infer(ModelBundle& bundle, const Tensor<float>& image, const InferenceOptions& opt = {}) {
  RSTPM_REQUIRE(image.n() == 1, ShapeError, "infer takes a single image, got " + image.shape().str());
  return std::move(infer_batch(bundle, image, opt).front());
}

/// Infers every image of a corpus, in corpus order.
inline std::vector<InferenceResult> infer_corpus(ModelBundle& bundle, const LabeledCorpus& corpus,
                                                 const InferenceOptions& opt = {}) {
  std::vector<InferenceResult> out;
  out.reserve(corpus.size());
  const auto step = static_cast<std::size_t>(std::max(1, opt.batch_size));
  for (std::size_t i = 0; i < corpus.size(); i += step) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(corpus.size(), i + step); ++j) idx.push_back(j);
    for (auto& r : infer_batch(bundle, gather_images<float>(corpus, idx), opt)) out.push_back(std::move(r));
  }
  return out;
}

/// All maps of one result as a tensor archive (raw float32 values).
inline TensorArchive result_archive(const InferenceResult& r) {
  TensorArchive ar;
  ar.metadata = {{"kind", "anomaly_maps"}, {"score", r.score}};
  for (const auto* group : {&r.maps_a, &r.maps_b, &r.attention_a, &r.attention_b})
    for (const auto& m : *group) ar.tensors.push_back(NamedTensor{m.source, m.values});
  ar.tensors.push_back(NamedTensor{"final", r.final.values});
  return ar;
}

}  // namespace rstpm
