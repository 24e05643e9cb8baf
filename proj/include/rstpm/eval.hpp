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
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rstpm/anomaly.hpp"

namespace rstpm {

/// Area under the ROC curve via the Mann-Whitney U statistic with midranks:
/// P(pos > neg) + 0.5 * P(pos == neg).
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  RSTPM_REQUIRE(scores.size() == labels.size(), ShapeError,
                "roc_auc: " + std::to_string(scores.size()) + " scores vs " + std::to_string(labels.size()) + " labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    // ranks i+1 .. j share their mean
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      const int y = labels[order[k]];
      RSTPM_REQUIRE(y == 0 || y == 1, MetricError, "roc_auc: labels must be 0 or 1");
      if (y == 1) {
        rank_sum += midrank;
        pos += 1;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  RSTPM_REQUIRE(pos > 0 && neg > 0, MetricError, "roc_auc: need at least one positive and one negative label");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return roc_auc(std::span<const double>(scores), std::span<const int>(labels));
}

enum class PixelPooling { Global, PerImage };

/// Pixel-level AUC. Global pooling ranks every pixel of every image together;
/// per-image pooling averages the AUC of images that contain defect pixels.
/// An absent mask means an all-normal image.
inline double pixel_auc(std::span<const AnomalyMap> maps, std::span<const std::optional<Tensor<float>>> masks,
                        PixelPooling pooling = PixelPooling::Global) {
  RSTPM_REQUIRE(maps.size() == masks.size(), ShapeError, "pixel_auc: maps and masks differ in count");
  std::vector<double> scores;
  std::vector<int> labels;
  double per_image_sum = 0;
  int per_image_count = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const Tensor<float>& v = maps[i].values;
    if (masks[i])
      RSTPM_REQUIRE(masks[i]->h() == v.h() && masks[i]->w() == v.w(), ShapeError,
                    "pixel_auc: mask " + masks[i]->shape().str() + " vs map " + v.shape().str());
    if (pooling == PixelPooling::PerImage) {
      scores.clear();
      labels.clear();
    }
    bool any_defect = false;
    for (std::size_t p = 0; p < v.size(); ++p) {
      const int y = masks[i] && (*masks[i])[p] > 0.5f ? 1 : 0;
      any_defect |= y == 1;
      scores.push_back(v[p]);
      labels.push_back(y);
    }
    if (pooling == PixelPooling::PerImage && any_defect &&
        std::find(labels.begin(), labels.end(), 0) != labels.end()) {
      per_image_sum += roc_auc(scores, labels);
      ++per_image_count;
    }
  }
  if (pooling == PixelPooling::PerImage) {
    RSTPM_REQUIRE(per_image_count > 0, MetricError, "pixel_auc: no image contains both defect and normal pixels");
    return per_image_sum / per_image_count;
  }
  RSTPM_REQUIRE(std::find(labels.begin(), labels.end(), 1) != labels.end(), MetricError,
                "pixel_auc: no defect pixels in the whole set");
  return roc_auc(scores, labels);
}

/// Image-level AUC of per-image scores; label 1 = defect.
inline double image_auc(std::span<const double> scores, std::span<const int> labels) { return roc_auc(scores, labels); }

// ---------------------------------------------------------------------------
// Reports

/// Per-resolution map variants. Baseline uses A only; dual reports the summed
/// pair map alongside each network's own map.
enum class LevelVariant { Summed, OnlyA, OnlyB };

inline std::string variant_name(LevelVariant v) {
  switch (v) {
    case LevelVariant::Summed: return "a+b";
    case LevelVariant::OnlyA: return "a";
    case LevelVariant::OnlyB: return "b";
  }
  return "?";
}

enum class TeacherB { SameAsA, Deeper };

inline std::string teacher_b_name(TeacherB t) { return t == TeacherB::SameAsA ? "same_as_a" : "deeper"; }

struct AucPair {
  double pixel = 0;
  double image = 0;
};

struct EvalReport {
  std::string category;
  Fusion fusion = Fusion::Dual;
  bool attention = true;
  TeacherB teacher_b = TeacherB::Deeper;
  AucPair multi_scale;
  /// Keyed by variant; entries ordered 1/4, 1/8, 1/16.
  std::map<LevelVariant, std::array<AucPair, 3>> per_level;

  std::string mode() const {
    return fusion_name(fusion) + "/attention_" + (attention ? "on" : "off") + "/teacher_b_" + teacher_b_name(teacher_b);
  }
};

struct EvalOptions {
  InferenceOptions inference;
  PixelPooling pooling = PixelPooling::Global;
  bool per_level = true;
};

namespace detail {

inline AucPair auc_of(std::span<const AnomalyMap> maps, const LabeledCorpus& test, PixelPooling pooling) {
  std::vector<std::optional<Tensor<float>>> masks;
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t i = 0; i < test.size(); ++i) {
    masks.push_back(test.items[i].mask);
    scores.push_back(image_score(maps[i]));
    labels.push_back(test.items[i].normal() ? 0 : 1);
  }
  return AucPair{pixel_auc(maps, masks, pooling), image_auc(scores, labels)};
}

}  // namespace detail

/// Infers the whole test split and scores the final map and each single
/// lifted map (per-resolution rows).
inline EvalReport evaluate(ModelBundle& bundle, const LabeledCorpus& test, const EvalOptions& opt = {}) {
  RSTPM_REQUIRE(!test.empty(), InputError, "evaluate: empty test corpus");
  RSTPM_REQUIRE(bundle.image_size() == 0 || (bundle.image_size() == test.height() && bundle.image_size() == test.width()),
                InputError,
                "bundle was trained at " + std::to_string(bundle.image_size()) + " px but corpus images are " +
                    std::to_string(test.height()) + "x" + std::to_string(test.width()));
  const std::vector<InferenceResult> results = infer_corpus(bundle, test, opt.inference);
  EvalReport rep;
  rep.category = test.category;
  rep.fusion = opt.inference.fusion;
  rep.attention = opt.inference.attention && bundle.attention_enabled();
  rep.teacher_b = bundle.metadata.value("teacher_b", std::string("deeper")) == "same_as_a" ? TeacherB::SameAsA
                                                                                          : TeacherB::Deeper;
  std::vector<AnomalyMap> finals;
  for (const auto& r : results) finals.push_back(r.final);
  rep.multi_scale = detail::auc_of(finals, test, opt.pooling);
  if (!opt.per_level) return rep;

  std::vector<LevelVariant> variants{LevelVariant::OnlyA};
  if (opt.inference.fusion == Fusion::Dual) variants = {LevelVariant::Summed, LevelVariant::OnlyA, LevelVariant::OnlyB};
  for (LevelVariant v : variants) {
    std::array<AucPair, 3> row;
    for (std::size_t l = 0; l < 3; ++l) {
      std::vector<AnomalyMap> maps;
      for (const auto& r : results) {
        if (v == LevelVariant::OnlyA) {
          maps.push_back(r.maps_a[l]);
        } else if (v == LevelVariant::OnlyB) {
          maps.push_back(r.maps_b[l]);
        } else {
          AnomalyMap m = r.maps_a[l];
          for (std::size_t p = 0; p < m.values.size(); ++p) m.values[p] += r.maps_b[l].values[p];
          maps.push_back(std::move(m));
        }
      }
      row[l] = detail::auc_of(maps, test, opt.pooling);
    }
    rep.per_level.emplace(v, row);
  }
  return rep;
}

/// One requested ablation configuration.
struct AblationMode {
  Fusion fusion = Fusion::Dual;
  bool attention = true;
  TeacherB teacher_b = TeacherB::Deeper;
};

/// Bundles available to the harness, keyed by (attention trained, teacher-B choice).
using BundleSet = std::map<std::pair<bool, TeacherB>, ModelBundle*>;

/// Full grid: {baseline, dual} x {attention on, off} x {same-as-A, deeper}.
inline std::vector<AblationMode> full_ablation_plan() {
  std::vector<AblationMode> plan;
  for (Fusion f : {Fusion::Baseline, Fusion::Dual})
    for (bool att : {true, false})
      for (TeacherB tb : {TeacherB::SameAsA, TeacherB::Deeper}) plan.push_back(AblationMode{f, att, tb});
  return plan;
}

/// Evaluates every mode of the plan. Baseline modes only use pair A and so
/// accept any bundle trained with the requested attention setting.
inline std::vector<EvalReport> ablate(const BundleSet& bundles, const LabeledCorpus& test,
                                      const std::vector<AblationMode>& plan, EvalOptions base = {}) {
  std::vector<EvalReport> out;
  for (const AblationMode& m : plan) {
    ModelBundle* b = nullptr;
    if (auto it = bundles.find({m.attention, m.teacher_b}); it != bundles.end()) b = it->second;
    if (!b && m.fusion == Fusion::Baseline)
      for (const auto& [key, ptr] : bundles)
        if (key.first == m.attention) {
          b = ptr;
          break;
        }
    RSTPM_REQUIRE(b != nullptr, ConfigError,
                  "ablate: no bundle for mode " + fusion_name(m.fusion) + "/attention_" + (m.attention ? "on" : "off") +
                      "/teacher_b_" + teacher_b_name(m.teacher_b));
    EvalOptions opt = base;
    opt.inference.fusion = m.fusion;
    opt.inference.attention = m.attention;
    EvalReport r = evaluate(*b, test, opt);
    r.attention = m.attention;
    r.teacher_b = m.teacher_b;
    out.push_back(std::move(r));
  }
  return out;
}

/// One row per (mode, per-resolution variant). Columns: level AUCs then the
/// multi-scale column, pixel and image.
inline void write_reports_csv(const std::string& path, std::span<const EvalReport> reports) {
  std::ofstream os(path);
  RSTPM_REQUIRE(os.good(), InputError, "cannot write report '" + path + "'");
  os << "category,fusion,attention,teacher_b,variant,"
        "pixel_1/4,pixel_1/8,pixel_1/16,pixel_multi_scale,image_1/4,image_1/8,image_1/16,image_multi_scale\n";
  os.precision(9);
  for (const auto& r : reports) {
    auto prefix = [&](const std::string& variant) {
      os << r.category << ',' << fusion_name(r.fusion) << ',' << (r.attention ? "on" : "off") << ','
         << teacher_b_name(r.teacher_b) << ',' << variant;
    };
    if (r.per_level.empty()) {
      prefix("final");
      os << ",,,," << r.multi_scale.pixel << ",,,," << r.multi_scale.image << '\n';
      continue;
    }
    for (const auto& [variant, row] : r.per_level) {
      prefix(variant_name(variant));
      for (const auto& a : row) os << ',' << a.pixel;
      os << ',' << r.multi_scale.pixel;
      for (const auto& a : row) os << ',' << a.image;
      os << ',' << r.multi_scale.image << '\n';
    }
  }
}

}  // namespace rstpm
