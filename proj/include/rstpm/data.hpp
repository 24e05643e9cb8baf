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
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rstpm/image_io.hpp"
#include "rstpm/kernels.hpp"
#include "rstpm/tensor.hpp"

namespace rstpm {

enum class Split { Train, Test };

inline constexpr const char* kNormalLabel = "good";

struct CorpusItem {
  /// (1, 3, H, W), values in [0, 1].
  Tensor<float> image;
  /// "good" for normal items, otherwise the defect type.
  std::string label = kNormalLabel;
  /// (1, 1, H, W) binary; present for every defect item.
  std::optional<Tensor<float>> mask;
  /// Class index for classification corpora (pretext); -1 otherwise.
  int class_id = -1;
  std::string name;

  bool normal() const { return label == kNormalLabel; }
};

struct LabeledCorpus {
  Split split = Split::Train;
  std::string category;
  std::vector<CorpusItem> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  int height() const { return items.empty() ? 0 : items.front().image.h(); }
  int width() const { return items.empty() ? 0 : items.front().image.w(); }
  std::size_t defect_count() const {
    return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const auto& i) { return !i.normal(); }));
  }
};

/// Training is one-class: any defect item in the corpus is a contract violation.
inline void require_normal_only(const LabeledCorpus& c) {
  for (const auto& item : c.items)
    RSTPM_REQUIRE(item.normal(), InputError,
                  "training corpus contains a defect item ('" + item.name + "', label '" + item.label +
                      "'); training uses normal images only");
}

// ---------------------------------------------------------------------------
// Procedural textures

enum class TextureKind { Noise, Stripes, Tiles, Checker };

inline std::string texture_name(TextureKind k) {
  switch (k) {
    case TextureKind::Noise: return "noise";
    case TextureKind::Stripes: return "stripes";
    case TextureKind::Tiles: return "tiles";
    case TextureKind::Checker: return "checker";
  }
  return "?";
}

/// One texture family. Per-image variation comes from random phases, offsets
/// and small colour jitter; the family parameters stay fixed.
struct TextureSpec {
  TextureKind kind = TextureKind::Noise;
  std::array<float, 3> color_a{0.55f, 0.45f, 0.35f};
  std::array<float, 3> color_b{0.80f, 0.72f, 0.60f};
  /// Cycles per 64 pixels (noise: band centre; stripes/checker: frequency; tiles: motifs per row).
  double frequency = 6.0;
  /// Radians; stripes only. Noise orientations are random.
  double orientation = 0.0;
  double grain = 0.03;
  double color_jitter = 0.03;
};

namespace detail {

inline float quantize(double v) {
  return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E5Bull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Renders one texture image (1, 3, H, W), quantized to 8 bits.
inline Tensor<float> render_texture(const TextureSpec& spec, int height, int width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  const double f = spec.frequency / 64.0;  // cycles per pixel
  std::vector<double> field(static_cast<std::size_t>(height) * width, 0.0);
  switch (spec.kind) {
    case TextureKind::Noise: {
      constexpr int kWaves = 8;
      for (int k = 0; k < kWaves; ++k) {
        const double theta = uni(rng) * std::numbers::pi;
        const double freq = f * (0.6 + 0.8 * uni(rng));
        const double phase = uni(rng) * two_pi;
        const double cx = std::cos(theta) * freq * two_pi, cy = std::sin(theta) * freq * two_pi;
        for (int y = 0; y < height; ++y)
          for (int x = 0; x < width; ++x) field[static_cast<std::size_t>(y) * width + x] += std::cos(cx * x + cy * y + phase);
      }
      for (auto& v : field) v /= std::sqrt(kWaves / 2.0) * 2.0;
      break;
    }
    case TextureKind::Stripes: {
      const double theta = spec.orientation + 0.05 * gauss(rng);
      const double phase = uni(rng) * two_pi;
      const double cx = std::cos(theta) * f * two_pi, cy = std::sin(theta) * f * two_pi;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          field[static_cast<std::size_t>(y) * width + x] = 0.5 * std::cos(cx * x + cy * y + phase);
      break;
    }
    case TextureKind::Tiles: {
      const double period = 64.0 / spec.frequency;
      const double ox = uni(rng) * period, oy = uni(rng) * period;
      const double radius = 0.3 * period;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const double u = std::fmod(x + ox, period) - period / 2;
          const double v = std::fmod(y + oy, period) - period / 2;
          const double d = std::sqrt(u * u + v * v);
          field[static_cast<std::size_t>(y) * width + x] = d < radius ? 0.5 : -0.5;
        }
      break;
    }
    case TextureKind::Checker: {
      const double period = 64.0 / spec.frequency;
      const double ox = uni(rng) * period, oy = uni(rng) * period;
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const int a = static_cast<int>(std::floor((x + ox) / (period / 2)));
          const int b = static_cast<int>(std::floor((y + oy) / (period / 2)));
          field[static_cast<std::size_t>(y) * width + x] = ((a + b) & 1) ? 0.5 : -0.5;
        }
      break;
    }
  }
  std::array<double, 3> jitter{};
  for (auto& j : jitter) j = spec.color_jitter * gauss(rng);
  Tensor<float> img(Shape{1, 3, height, width});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double t = std::clamp(field[static_cast<std::size_t>(y) * width + x] + 0.5, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const double base = spec.color_a[c] + (spec.color_b[c] - spec.color_a[c]) * t;
        img(0, c, y, x) = detail::quantize(base + jitter[c] + spec.grain * gauss(rng));
      }
    }
  return img;
}

// ---------------------------------------------------------------------------
// Defect injection

enum class DefectKind { Scratch, Blob, ColorShift, Crack };

inline std::string defect_name(DefectKind k) {
  switch (k) {
    case DefectKind::Scratch: return "scratch";
    case DefectKind::Blob: return "blob";
    case DefectKind::ColorShift: return "color_shift";
    case DefectKind::Crack: return "crack";
  }
  return "?";
}

struct DefectSpec {
  std::vector<DefectKind> kinds{DefectKind::Scratch, DefectKind::Blob, DefectKind::ColorShift, DefectKind::Crack};
  /// Extent of one defect in pixels (line length / blob diameter).
  int size_min = 8;
  int size_max = 20;
  /// Colour change magnitude in [0, 1] units.
  double intensity_min = 0.25;
  double intensity_max = 0.5;
  int count_min = 1;
  int count_max = 1;
};

namespace detail {

/// Paints a filled disc of radius r centred on (cx, cy) onto the mask.
inline void stamp_disc(std::vector<std::uint8_t>& paint, int h, int w, double cx, double cy, double r) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r))), x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r))), y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) paint[static_cast<std::size_t>(y) * w + x] = 1;
}

inline void stamp_segment(std::vector<std::uint8_t>& paint, int h, int w, double x0, double y0, double x1, double y1,
                          double half_width) {
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int steps = std::max(1, static_cast<int>(std::ceil(len * 2)));
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    stamp_disc(paint, h, w, x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, half_width);
  }
}

}  // namespace detail

/// Injects defects into a copy of `base`. Returns the defect image, its mask
/// (exactly the pixels whose stored value changed) and the label of the first
/// defect. Retries until at least one pixel changes.
inline std::tuple<Tensor<float>, Tensor<float>, std::string> inject_defects(const Tensor<float>& base,
                                                                           const DefectSpec& spec,
                                                                           std::mt19937_64& rng) {
  const int h = base.h(), w = base.w();
  RSTPM_REQUIRE(!spec.kinds.empty(), ConfigError, "defect spec: no defect kinds enabled");
  RSTPM_REQUIRE(spec.size_min >= 1 && spec.size_min <= spec.size_max, ConfigError, "defect spec: bad size range");
  RSTPM_REQUIRE(spec.size_max <= std::min(h, w), ConfigError,
                "defect size " + std::to_string(spec.size_max) + " larger than image " + std::to_string(h) + "x" +
                    std::to_string(w));
  RSTPM_REQUIRE(spec.count_min >= 1 && spec.count_min <= spec.count_max, ConfigError, "defect spec: bad count range");
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uniform_int_distribution<int> count_dist(spec.count_min, spec.count_max);
  std::uniform_int_distribution<std::size_t> kind_dist(0, spec.kinds.size() - 1);
  const double two_pi = 2.0 * std::numbers::pi;

  for (;;) {
    Tensor<float> img = base;
    std::string label;
    const int count = count_dist(rng);
    for (int d = 0; d < count; ++d) {
      const DefectKind kind = spec.kinds[kind_dist(rng)];
      if (label.empty()) label = defect_name(kind);
      const double size = spec.size_min + uni(rng) * (spec.size_max - spec.size_min);
      const double intensity = spec.intensity_min + uni(rng) * (spec.intensity_max - spec.intensity_min);
      const double cx = size / 2 + uni(rng) * (w - size), cy = size / 2 + uni(rng) * (h - size);
      std::vector<std::uint8_t> paint(static_cast<std::size_t>(h) * w, 0);
      std::array<double, 3> target{};
      bool additive = false;
      switch (kind) {
        case DefectKind::Scratch: {
          const double a = uni(rng) * two_pi;
          const double dx = std::cos(a) * size / 2, dy = std::sin(a) * size / 2;
          detail::stamp_segment(paint, h, w, cx - dx, cy - dy, cx + dx, cy + dy, 0.5 + uni(rng) * 0.7);
          const double bright = uni(rng) < 0.5 ? 1.0 : 0.0;
          target = {bright, bright, bright};
          break;
        }
        case DefectKind::Crack: {
          double x = cx, y = cy, a = uni(rng) * two_pi;
          const int segs = 4;
          for (int s = 0; s < segs; ++s) {
            a += (uni(rng) - 0.5) * 1.6;
            const double nx = x + std::cos(a) * size / segs, ny = y + std::sin(a) * size / segs;
            detail::stamp_segment(paint, h, w, x, y, nx, ny, 0.6);
            x = nx;
            y = ny;
          }
          target = {0.08, 0.06, 0.05};
          break;
        }
        case DefectKind::Blob: {
          const double r = size / 2;
          const double sx = 0.6 + 0.4 * uni(rng), sy = 0.6 + 0.4 * uni(rng);
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              const double u = (x - cx) / (r * sx), v = (y - cy) / (r * sy);
              if (u * u + v * v <= 1.0) paint[static_cast<std::size_t>(y) * w + x] = 1;
            }
          for (auto& t : target) t = uni(rng);
          break;
        }
        case DefectKind::ColorShift: {
          const double r = size / 2;
          detail::stamp_disc(paint, h, w, cx, cy, r);
          const double hue = uni(rng) * two_pi;
          target = {std::cos(hue), std::cos(hue + two_pi / 3), std::cos(hue + 2 * two_pi / 3)};
          additive = true;
          break;
        }
      }
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!paint[static_cast<std::size_t>(y) * w + x]) continue;
          for (int c = 0; c < 3; ++c) {
            const double v = img(0, c, y, x);
            const double nv = additive ? v + intensity * target[c] : v + (target[c] - v) * std::clamp(intensity * 2, 0.0, 1.0);
            img(0, c, y, x) = detail::quantize(nv);
          }
        }
    }
    Tensor<float> mask(Shape{1, 1, h, w});
    std::size_t changed = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        bool diff = false;
        for (int c = 0; c < 3; ++c) diff = diff || img(0, c, y, x) != base(0, c, y, x);
        mask(0, 0, y, x) = diff ? 1.0f : 0.0f;
        changed += diff;
      }
    if (changed > 0) return {std::move(img), std::move(mask), label};
  }
}

struct SyntheticConfig {
  int n_train = 200;
  int n_test_normal = 50;
  int n_test_defect = 50;
  int image_size = 64;
  std::string category = "synthetic";
  TextureSpec texture{};
  DefectSpec defects{};
  std::uint64_t seed = 0;
};

/// Deterministic synthetic anomaly corpus: normal textures for training and a
/// test split of fresh normals plus defect-injected images with exact masks.
inline std::pair<LabeledCorpus, LabeledCorpus> gen_synthetic(const SyntheticConfig& cfg) {
  RSTPM_REQUIRE(cfg.n_train >= 1 && cfg.n_test_normal >= 1 && cfg.n_test_defect >= 1, ConfigError,
                "synthetic corpus counts must be >= 1");
  RSTPM_REQUIRE(cfg.image_size >= 1, ConfigError, "synthetic corpus: image size must be >= 1");
  RSTPM_REQUIRE(cfg.defects.size_max <= cfg.image_size, ConfigError,
                "defect size " + std::to_string(cfg.defects.size_max) + " larger than image " +
                    std::to_string(cfg.image_size));
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0x5EED));
  const int s = cfg.image_size;
  LabeledCorpus train{Split::Train, cfg.category, {}}, test{Split::Test, cfg.category, {}};
  char buf[32];
  for (int i = 0; i < cfg.n_train; ++i) {
    std::snprintf(buf, sizeof buf, "%03d", i);
    train.items.push_back(CorpusItem{render_texture(cfg.texture, s, s, rng), kNormalLabel, std::nullopt, -1, buf});
  }
  for (int i = 0; i < cfg.n_test_normal; ++i) {
    std::snprintf(buf, sizeof buf, "%03d", i);
    test.items.push_back(CorpusItem{render_texture(cfg.texture, s, s, rng), kNormalLabel, std::nullopt, -1, buf});
  }
  std::map<std::string, int> per_label;
  for (int i = 0; i < cfg.n_test_defect; ++i) {
    Tensor<float> base = render_texture(cfg.texture, s, s, rng);
    auto [img, mask, label] = inject_defects(base, cfg.defects, rng);
    std::snprintf(buf, sizeof buf, "%03d", per_label[label]++);
    test.items.push_back(CorpusItem{std::move(img), label, std::move(mask), -1, buf});
  }
  return {std::move(train), std::move(test)};
}

/// Texture family used for class k of the pretext task.
inline TextureSpec pretext_family(int k) {
  static constexpr std::array<TextureKind, 4> kinds{TextureKind::Stripes, TextureKind::Noise, TextureKind::Checker,
                                                    TextureKind::Tiles};
  static constexpr std::array<std::array<float, 3>, 6> palette{{{0.20f, 0.30f, 0.70f},
                                                                {0.75f, 0.35f, 0.20f},
                                                                {0.30f, 0.65f, 0.30f},
                                                                {0.60f, 0.60f, 0.60f},
                                                                {0.65f, 0.30f, 0.65f},
                                                                {0.80f, 0.75f, 0.30f}}};
  TextureSpec t;
  t.kind = kinds[static_cast<std::size_t>(k) % kinds.size()];
  const int variant = k / static_cast<int>(kinds.size());
  const auto& pa = palette[static_cast<std::size_t>(k) % palette.size()];
  t.color_a = pa;
  for (int c = 0; c < 3; ++c) t.color_b[static_cast<std::size_t>(c)] = std::clamp(pa[static_cast<std::size_t>(c)] * 0.4f + 0.45f, 0.0f, 1.0f);
  t.frequency = 4.0 + 4.0 * variant + (t.kind == TextureKind::Noise ? 2.0 : 0.0);
  t.orientation = variant * std::numbers::pi / 3 + std::numbers::pi / 6 * (k % 2);
  t.grain = 0.04;
  t.color_jitter = 0.06;
  return t;
}

/// k-class texture classification corpus for teacher pretraining.
inline LabeledCorpus gen_pretext(int k_classes, int n_per_class, int image_size, std::uint64_t seed) {
  RSTPM_REQUIRE(k_classes >= 2, ConfigError, "pretext needs at least 2 classes");
  RSTPM_REQUIRE(n_per_class >= 1, ConfigError, "pretext needs at least 1 image per class");
  std::mt19937_64 rng(detail::mix_seed(seed, 0x9E7E));
  LabeledCorpus c{Split::Train, "pretext", {}};
  for (int i = 0; i < n_per_class; ++i)
    for (int k = 0; k < k_classes; ++k) {
      CorpusItem item{render_texture(pretext_family(k), image_size, image_size, rng), kNormalLabel, std::nullopt, k,
                      "class" + std::to_string(k) + "_" + std::to_string(i)};
      c.items.push_back(std::move(item));
    }
  return c;
}

// ---------------------------------------------------------------------------
// Batching

/// Seeded permutation of [0, n) for one epoch, cut into batches (last one partial).
inline std::vector<std::vector<std::size_t>> batch_order(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
  RSTPM_REQUIRE(n > 0, InputError, "batch_iter: empty corpus");
  RSTPM_REQUIRE(batch_size >= 1, ConfigError, "batch_iter: batch size must be >= 1");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(detail::mix_seed(seed, static_cast<std::uint64_t>(epoch) + 1));
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(perm[i], perm[j]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  return out;
}

template <typename T = float>
Tensor<T> gather_images(const LabeledCorpus& corpus, const std::vector<std::size_t>& idx) {
  std::vector<const Tensor<float>*> parts;
  parts.reserve(idx.size());
  for (std::size_t i : idx) parts.push_back(&corpus.items.at(i).image);
  Tensor<float> batch = stack<float>(std::span<const Tensor<float>* const>(parts));
  if constexpr (std::is_same_v<T, float>)
    return batch;
  else
    return batch.template cast<T>();
}

struct Batch {
  std::vector<std::size_t> indices;
  Tensor<float> images;
};

/// All batches of one epoch, in seeded order.
inline std::vector<Batch> batch_iter(const LabeledCorpus& corpus, int batch_size, std::uint64_t seed, int epoch) {
  std::vector<Batch> out;
  for (auto& idx : batch_order(corpus.size(), batch_size, seed, epoch)) {
    Tensor<float> imgs = gather_images(corpus, idx);
    out.push_back(Batch{std::move(idx), std::move(imgs)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing and MVTec layout

/// Nearest-neighbour resize then threshold at 0.5.
inline Tensor<float> resize_mask(const Tensor<float>& mask, int h, int w) {
  Tensor<float> out(Shape{1, 1, h, w});
  for (int y = 0; y < h; ++y) {
    const int sy = std::min(mask.h() - 1, static_cast<int>((y + 0.5) * mask.h() / h));
    for (int x = 0; x < w; ++x) {
      const int sx = std::min(mask.w() - 1, static_cast<int>((x + 0.5) * mask.w() / w));
      out(0, 0, y, x) = mask(0, 0, sy, sx) >= 0.5f ? 1.0f : 0.0f;
    }
  }
  return out;
}

inline Tensor<float> resize_image(const Tensor<float>& img, int h, int w) {
  if (img.h() == h && img.w() == w) return img;
  Tensor<float> out = kernels::resize_bilinear(img, h, w);
  for (auto& v : out.vec()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

namespace detail {

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string e = image_io::lower_ext(p);
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

inline std::vector<std::filesystem::path> sorted_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::filesystem::path find_mask(const std::filesystem::path& gt_dir, const std::string& stem) {
  for (const char* ext : {".png", ".PNG", ".jpg", ".jpeg"}) {
    auto p = gt_dir / (stem + "_mask" + ext);
    if (std::filesystem::exists(p)) return p;
  }
  return {};
}

}  // namespace detail

/// Reads category/train/good, category/test/<label> and
/// category/ground_truth/<label>/<stem>_mask.* into resized corpora.
inline std::pair<LabeledCorpus, LabeledCorpus> load_mvtec_layout(const std::filesystem::path& root,
                                                                 const std::string& category, int image_size) {
  namespace fs = std::filesystem;
  const fs::path base = root / category;
  RSTPM_REQUIRE(fs::is_directory(base), IngestionError, "category directory not found: " + base.string());
  LabeledCorpus train{Split::Train, category, {}}, test{Split::Test, category, {}};
  auto load = [&](const fs::path& p) {
    try {
      return resize_image(image_io::read_image(p.string()), image_size, image_size);
    } catch (const image_io::ImageError& e) {
      throw IngestionError(e.what());
    }
  };
  for (const auto& p : detail::sorted_images(base / "train" / kNormalLabel))
    train.items.push_back(CorpusItem{load(p), kNormalLabel, std::nullopt, -1, p.stem().string()});
  RSTPM_REQUIRE(!train.empty(), IngestionError, "empty train split: " + (base / "train" / kNormalLabel).string());
  for (const auto& e : fs::directory_iterator(base / "train"))
    RSTPM_REQUIRE(!e.is_directory() || e.path().filename() == kNormalLabel || detail::sorted_images(e.path()).empty(),
                  IngestionError, "train split contains defect images under " + e.path().string());

  std::vector<fs::path> label_dirs;
  if (fs::is_directory(base / "test"))
    for (const auto& e : fs::directory_iterator(base / "test"))
      if (e.is_directory()) label_dirs.push_back(e.path());
  std::sort(label_dirs.begin(), label_dirs.end());
  for (const auto& dir : label_dirs) {
    const std::string label = dir.filename().string();
    for (const auto& p : detail::sorted_images(dir)) {
      CorpusItem item{load(p), label, std::nullopt, -1, p.stem().string()};
      if (label != kNormalLabel) {
        const fs::path mp = detail::find_mask(base / "ground_truth" / label, p.stem().string());
        RSTPM_REQUIRE(!mp.empty(), IngestionError, "missing ground-truth mask for " + p.string());
        try {
          item.mask = resize_mask(image_io::read_gray(mp.string()), image_size, image_size);
        } catch (const image_io::ImageError& e) {
          throw IngestionError(e.what());
        }
      }
      test.items.push_back(std::move(item));
    }
  }
  return {std::move(train), std::move(test)};
}

/// Writes corpora in MVTec layout under root/category.
inline void export_mvtec_layout(const std::filesystem::path& root, const LabeledCorpus& train, const LabeledCorpus& test) {
  namespace fs = std::filesystem;
  const fs::path base = root / train.category;
  auto write_item = [&](const fs::path& dir, const CorpusItem& item) {
    fs::create_directories(dir);
    image_io::write_rgb((dir / (item.name + ".png")).string(), item.image);
  };
  for (const auto& item : train.items) write_item(base / "train" / kNormalLabel, item);
  for (const auto& item : test.items) {
    write_item(base / "test" / item.label, item);
    if (item.mask) {
      const fs::path gt = base / "ground_truth" / item.label;
      fs::create_directories(gt);
      image_io::write_gray((gt / (item.name + "_mask.png")).string(), *item.mask);
    }
  }
}

}  // namespace rstpm
