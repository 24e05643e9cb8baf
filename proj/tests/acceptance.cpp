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


// Acceptance runner. Property criteria reuse the unit suites (linked in via
// a gtest filter); the desk end-to-end, directional and reproducibility
// criteria run here. Prints one PASS/FAIL line per criterion.

#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "test_util.hpp"

namespace {

using namespace rstpm;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string f3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

// ---------------------------------------------------------------------------
// property suites

const char* kFilter =
    "Normalize.*:PositionLoss.*:LevelLoss.*:TotalLoss.*:"
    "LossGradient.*:Conv2d.*Gradient*:BatchNorm.*Gradient*:ResidualBlock.*Gradient*:Upsample.*Gradient*:"
    "Ops.*Gradient*:FrozenTeacher.*:Fusion.*:ImageScore.*:RocAuc.*";

std::string criterion_of(const std::string& suite) {
  if (suite == "Normalize" || suite == "PositionLoss" || suite == "LevelLoss" || suite == "TotalLoss") return "math-core";
  if (suite == "FrozenTeacher") return "frozen-teacher";
  if (suite == "Fusion" || suite == "ImageScore") return "fusion-score";
  if (suite == "RocAuc") return "auc";
  return "gradient";
}

struct Tally {
  int passed = 0;
  int failed = 0;
  double seconds = 0;
  std::vector<std::string> failures;
};

/// Buckets test outcomes by criterion; prints only failures.
class CriterionListener : public ::testing::EmptyTestEventListener {
 public:
  explicit CriterionListener(std::map<std::string, Tally>& t) : tally_(t) {}

  void OnTestPartResult(const ::testing::TestPartResult& r) override {
    if (r.failed())
      std::cout << (r.file_name() ? r.file_name() : "?") << ':' << r.line_number() << ": " << r.summary() << '\n';
  }
  void OnTestEnd(const ::testing::TestInfo& info) override {
    Tally& t = tally_[criterion_of(info.test_suite_name())];
    t.seconds += info.result()->elapsed_time() / 1000.0;
    if (info.result()->Passed()) {
      ++t.passed;
    } else {
      ++t.failed;
      t.failures.push_back(std::string(info.test_suite_name()) + "." + info.name());
    }
  }

 private:
  std::map<std::string, Tally>& tally_;
};

// ---------------------------------------------------------------------------
// desk runs

/// Teachers only, as archive bytes, for bit-identity checks.
std::vector<char> teacher_bytes(const PyramidNet<float>& a, const PyramidNet<float>& b) {
  ModelBundle t;
  t.teacher_a = a;
  t.teacher_b = b;
  return encode_archive(bundle_to_archive(t));
}

struct SeedRun {
  std::uint64_t seed = 0;
  EvalReport dual_on;
  EvalReport base_on;
  EvalReport dual_off;
  bool teachers_intact = true;
  double seconds = 0;
};

struct Trained {
  TrainedBundle tb;
  bool teachers_intact = true;
};

Trained train_one(const Teachers& t, const LabeledCorpus& train, RunConfig cfg, bool attention) {
  cfg.train.attention_enabled = attention;
  const std::vector<char> before = teacher_bytes(t.a, t.b);
  Trained out{train_students(t, train, cfg), true};
  out.teachers_intact = teacher_bytes(*out.tb.bundle.teacher_a, *out.tb.bundle.teacher_b) == before &&
                        teacher_bytes(t.a, t.b) == before;
  return out;
}

void write_artifacts(const fs::path& dir, ModelBundle& b, const LabeledCorpus& test,
                     const std::vector<EvalReport>& reports) {
  fs::create_directories(dir);
  save_bundle(b, (dir / "model.rstpm").string());
  write_reports_csv((dir / "eval.csv").string(), reports);
  write_map_dump((dir / "maps.rstpm").string(), test, infer_corpus(b, test));
}

/// Pretrains teachers, then trains and evaluates with attention on and off.
/// Seed-0 artifacts (bundle, report CSV, map dump) go under `artifacts`.
SeedRun desk_run(std::uint64_t seed, const fs::path* artifacts) {
  const auto t0 = Clock::now();
  SeedRun run;
  run.seed = seed;
  RunConfig cfg;
  cfg.seed = seed;
  const auto [train, test] = gen_synthetic(cfg.resolved().corpus);
  const Teachers teachers = make_teachers(cfg);
  std::cout << "  seed " << seed << " pretext accuracy a " << f3(*teachers.result_a.accuracy) << " b "
            << f3(*teachers.result_b.accuracy) << '\n';

  Trained on = train_one(teachers, train, cfg, true);
  EvalOptions dual, base;
  base.inference.fusion = Fusion::Baseline;
  run.dual_on = evaluate(on.tb.bundle, test, dual);
  run.base_on = evaluate(on.tb.bundle, test, base);
  if (artifacts) write_artifacts(*artifacts, on.tb.bundle, test, {run.dual_on, run.base_on});

  Trained off = train_one(teachers, train, cfg, false);
  run.dual_off = evaluate(off.tb.bundle, test, dual);
  run.teachers_intact = on.teachers_intact && off.teachers_intact;
  run.seconds = seconds_since(t0);
  return run;
}

/// Second attention-on run of one seed, artifacts only.
void repeat_run(std::uint64_t seed, const fs::path& dir) {
  RunConfig cfg;
  cfg.seed = seed;
  const auto [train, test] = gen_synthetic(cfg.resolved().corpus);
  const Teachers teachers = make_teachers(cfg);
  Trained on = train_one(teachers, train, cfg, true);
  EvalOptions dual, base;
  base.inference.fusion = Fusion::Baseline;
  const EvalReport d = evaluate(on.tb.bundle, test, dual);
  const EvalReport b = evaluate(on.tb.bundle, test, base);
  write_artifacts(dir, on.tb.bundle, test, {d, b});
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

double mean_of(const std::vector<SeedRun>& runs, const std::function<double(const SeedRun&)>& f) {
  double s = 0;
  for (const auto& r : runs) s += f(r);
  return s / static_cast<double>(runs.size());
}

struct Verdict {
  std::string name;
  bool pass = false;
  std::string detail;
};

}  // namespace

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  ::testing::GTEST_FLAG(filter) = kFilter;
  std::map<std::string, Tally> tally;
  auto& listeners = ::testing::UnitTest::GetInstance()->listeners();
  delete listeners.Release(listeners.default_result_printer());
  listeners.Append(new CriterionListener(tally));

  const auto t_all = Clock::now();
  std::cout << "property suites\n";
  if (RUN_ALL_TESTS() != 0) std::cout << "  some property tests failed\n";
  for (const auto& [name, t] : tally)
    std::cout << "  " << name << ": " << t.passed << " passed, " << t.failed << " failed, " << f3(t.seconds) << " s\n";

  auto suite_ok = [&](const std::string& name, double limit_s, std::string& detail) {
    const Tally& t = tally[name];
    detail = std::to_string(t.passed) + " tests, " + f3(t.seconds) + " s";
    for (const auto& f : t.failures) detail += ", failed " + f;
    if (limit_s > 0 && t.seconds >= limit_s) detail += ", over the " + f3(limit_s) + " s budget";
    return t.passed > 0 && t.failed == 0 && (limit_s <= 0 || t.seconds < limit_s);
  };

  std::cout << "desk runs (200 train, 50+50 test, 64 px, 30 epochs)\n";
  rstpm::testing::TempDir dir("acceptance");
  std::vector<SeedRun> runs;
  const fs::path first = dir.path / "run1", second = dir.path / "run2";
  for (std::uint64_t seed : {0, 1, 2}) {
    runs.push_back(desk_run(seed, seed == 0 ? &first : nullptr));
    const SeedRun& r = runs.back();
    const auto& summed = r.dual_on.per_level.at(LevelVariant::Summed);
    std::cout << "  seed " << seed << " dual pixel " << f3(r.dual_on.multi_scale.pixel) << " image "
              << f3(r.dual_on.multi_scale.image) << " | baseline image " << f3(r.base_on.multi_scale.image)
              << " | attention off pixel " << f3(r.dual_off.multi_scale.pixel) << " image "
              << f3(r.dual_off.multi_scale.image) << " | a+b levels pixel " << f3(summed[0].pixel) << ' '
              << f3(summed[1].pixel) << ' ' << f3(summed[2].pixel) << " image " << f3(summed[0].image) << ' '
              << f3(summed[1].image) << ' ' << f3(summed[2].image) << " | " << f3(r.seconds) << " s\n";
  }
  repeat_run(0, second);

  std::vector<Verdict> v;
  std::string d;
  bool ok = suite_ok("math-core", 30, d);
  v.push_back({"math-core", ok, d});
  ok = suite_ok("gradient", 120, d);
  v.push_back({"gradient", ok, d});

  ok = suite_ok("frozen-teacher", 0, d);
  for (const auto& r : runs)
    if (!r.teachers_intact) {
      ok = false;
      d += ", teachers changed during desk training (seed " + std::to_string(r.seed) + ")";
    }
  v.push_back({"frozen-teacher", ok, d + ", teachers bit-identical after desk training on all seeds"});
  ok = suite_ok("fusion-score", 0, d);
  v.push_back({"fusion-score", ok, d});
  ok = suite_ok("auc", 0, d);
  v.push_back({"auc", ok, d});

  // end to end: every seed must clear both thresholds
  ok = true;
  d.clear();
  double e2e_seconds = 0;
  for (const auto& r : runs) {
    ok = ok && r.dual_on.multi_scale.image >= 0.85 && r.dual_on.multi_scale.pixel >= 0.85;
    d += "seed " + std::to_string(r.seed) + " image " + f3(r.dual_on.multi_scale.image) + " pixel " +
         f3(r.dual_on.multi_scale.pixel) + "; ";
    e2e_seconds += r.seconds;
  }
  v.push_back({"end-to-end", ok, d + f3(e2e_seconds) + " s for 3 seeds, attention on and off"});

  // directional: seed-mean AUCs
  auto ms = [&](auto pick) {
    return mean_of(runs, [&](const SeedRun& r) { return pick(r.dual_on.multi_scale); });
  };
  auto level = [&](int l, auto pick) {
    return mean_of(runs, [&](const SeedRun& r) { return pick(r.dual_on.per_level.at(LevelVariant::Summed)[l]); });
  };
  auto px = [](const AucPair& a) { return a.pixel; };
  auto im = [](const AucPair& a) { return a.image; };
  const double ms_px = ms(px), ms_im = ms(im);
  const double best_px = std::max({level(0, px), level(1, px), level(2, px)});
  const double best_im = std::max({level(0, im), level(1, im), level(2, im)});
  const double base_im = mean_of(runs, [](const SeedRun& r) { return r.base_on.multi_scale.image; });
  const double off_px = mean_of(runs, [](const SeedRun& r) { return r.dual_off.multi_scale.pixel; });
  const double off_im = mean_of(runs, [](const SeedRun& r) { return r.dual_off.multi_scale.image; });
  const bool scale_ok = ms_px >= best_px - 0.02 && ms_im >= best_im - 0.02;
  const bool dual_ok = ms_im >= base_im - 0.02;
  const bool att_ok = ms_px >= off_px - 0.03 && ms_im >= off_im - 0.03;
  v.push_back({"directional", scale_ok && dual_ok && att_ok,
               "seed means: multi-scale pixel " + f3(ms_px) + " vs best level " + f3(best_px) + ", image " +
                   f3(ms_im) + " vs " + f3(best_im) + (scale_ok ? "" : " [miss]") + "; dual image " + f3(ms_im) +
                   " vs baseline " + f3(base_im) + (dual_ok ? "" : " [miss]") + "; attention on " + f3(ms_px) + "/" +
                   f3(ms_im) + " vs off " + f3(off_px) + "/" + f3(off_im) + (att_ok ? "" : " [miss]")});

  ok = true;
  d.clear();
  for (const char* f : {"model.rstpm", "eval.csv", "maps.rstpm"}) {
    const std::string a = slurp(first / f), b = slurp(second / f);
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    d += std::string(f) + (same ? " identical" : " DIFFERS") + " (" + std::to_string(a.size()) + " bytes); ";
  }
  v.push_back({"reproducibility", ok, d + "two full seed-0 runs"});

  std::cout << "\n";
  bool all = true;
  for (const auto& x : v) {
    std::cout << (x.pass ? "PASS " : "FAIL ") << x.name << " - " << x.detail << '\n';
    all = all && x.pass;
  }
  std::cout << "total " << f3(seconds_since(t_all)) << " s\n";
  return all ? 0 : 1;
}
