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

// Command-line front end: gen-corpus, pretrain, train, eval, ablate, infer.
//
// Exit codes: 0 success, 1 partial per-file failure, 2 usage/config/output
// error, 3 data or bundle contract violation, 4 threshold gate failure.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rstpm.hpp"

namespace fs = std::filesystem;
using namespace rstpm;

namespace {

constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kUsage = 2;
constexpr int kContract = 3;
constexpr int kGate = 4;

/// Raised for unwritable outputs and other operator errors (exit 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GateFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log(const std::string& s) { std::cerr << "[rstpm] " << s << '\n'; }

/// --out, else $RSTPM_OUT_ROOT/<command>.
fs::path output_dir(const std::string& out, const std::string& command) {
  fs::path dir;
  if (!out.empty()) {
    dir = out;
  } else if (const char* root = std::getenv("RSTPM_OUT_ROOT"); root && *root) {
    dir = fs::path(root) / command;
  } else {
    throw UsageError(command + ": --out is required (or set RSTPM_OUT_ROOT)");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory '" + dir.string() + "'");
  const fs::path probe = dir / ".rstpm_write_probe";
  {
    std::ofstream os(probe);
    if (!os.good()) throw UsageError("output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
  return dir;
}

/// Persists the fully resolved options (defaults included) of a subcommand.
void echo_config(const CLI::App& sub, const fs::path& dir) {
  std::ofstream os(dir / "config.ini");
  if (!os.good()) throw UsageError("cannot write " + (dir / "config.ini").string());
  os << "# resolved configuration of '" << sub.get_name() << "'\n" << sub.config_to_str(true, false);
}

bool parse_switch(const std::string& v) { return v == "on"; }

Fusion parse_fusion(const std::string& v) { return v == "baseline" ? Fusion::Baseline : Fusion::Dual; }

TeacherB parse_teacher_b(const std::string& v) { return v == "same-as-a" ? TeacherB::SameAsA : TeacherB::Deeper; }

std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------

struct GenCorpusArgs {
  std::string out;
  std::uint64_t seed = 0;
  int n_train = 200;
  int n_test_normal = 50;
  int n_test_defect = 50;
  int size = 64;
  std::string category = "synthetic";
  int pretext_classes = 0;
  int per_class = 40;
};

int run_gen_corpus(const CLI::App& sub, const GenCorpusArgs& a) {
  const fs::path dir = output_dir(a.out, "gen-corpus");
  SyntheticConfig cfg;
  cfg.n_train = a.n_train;
  cfg.n_test_normal = a.n_test_normal;
  cfg.n_test_defect = a.n_test_defect;
  cfg.image_size = a.size;
  cfg.category = a.category;
  cfg.seed = a.seed;
  const auto [train, test] = gen_synthetic(cfg);
  export_mvtec_layout(dir, train, test);
  log("wrote " + std::to_string(train.size()) + " train / " + std::to_string(test.size()) + " test images to " +
      (dir / cfg.category).string());
  if (a.pretext_classes > 0) {
    RSTPM_REQUIRE(a.pretext_classes >= 2, ConfigError, "--pretext-classes must be >= 2");
    const LabeledCorpus p = gen_pretext(a.pretext_classes, a.per_class, a.size, a.seed);
    for (const auto& item : p.items) {
      const fs::path cdir = dir / "pretext" / ("class_" + std::to_string(item.class_id));
      fs::create_directories(cdir);
      image_io::write_rgb((cdir / (item.name + ".png")).string(), item.image);
    }
    log("wrote " + std::to_string(p.size()) + " pretext images to " + (dir / "pretext").string());
  }
  echo_config(sub, dir);
  return kOk;
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
  std::string out;
  std::uint64_t seed = 0;
  int size = 64;
  int classes = 8;
  int per_class = 40;
  int held_out = 10;
  int epochs = 12;
  int batch = 32;
  double lr = 0.05;
  bool skip_pretext = false;
  std::string teacher_b = "deeper";
};

RunConfig pretrain_run_config(const PretrainArgs& a) {
  RunConfig cfg;
  cfg.seed = a.seed;
  cfg.image_size = a.size;
  cfg.pretrain.classes = a.classes;
  cfg.pretrain.per_class = a.per_class;
  cfg.pretrain.held_out_per_class = a.held_out;
  cfg.pretrain.epochs = a.epochs;
  cfg.pretrain.batch_size = a.batch;
  cfg.pretrain.lr = a.lr;
  cfg.skip_pretext = a.skip_pretext;
  cfg.teacher_b = parse_teacher_b(a.teacher_b);
  return cfg;
}

void save_teacher(PyramidNet<float> net, const PretrainResult& r, const RunConfig& cfg, const fs::path& path) {
  ModelBundle b;
  if (net.role() == Role::TeacherA)
    b.teacher_a = std::move(net);
  else
    b.teacher_b = std::move(net);
  b.metadata = {{"image_size", cfg.image_size}, {"seed", cfg.seed}, {"teacher_b", teacher_b_name(cfg.teacher_b)}};
  record_pretrain(b.metadata, "pretrain", r);
  save_bundle(b, path.string());
}

int run_pretrain(const CLI::App& sub, const PretrainArgs& a) {
  const fs::path dir = output_dir(a.out, "pretrain");
  const RunConfig cfg = pretrain_run_config(a);
  Teachers t = make_teachers(cfg, log);
  save_teacher(t.a, t.result_a, cfg, dir / "teacher_a.rstpm");
  save_teacher(t.b, t.result_b, cfg, dir / "teacher_b.rstpm");
  std::ofstream os(dir / "pretrain_report.csv");
  os << "teacher,pretext_accuracy,uninformative\n";
  for (auto [name, r] : {std::pair{"teacher_a", &t.result_a}, std::pair{"teacher_b", &t.result_b}})
    os << name << ',' << (r->accuracy ? fmt9(*r->accuracy) : "") << ',' << (r->uninformative ? 1 : 0) << '\n';
  echo_config(sub, dir);
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string out;
  std::string data;
  std::string category = "synthetic";
  std::string teachers;
  PretrainArgs pretrain;
  std::uint64_t seed = 0;
  int size = 64;
  double lr = 0.4;
  double momentum = 0.9;
  double wd = 1e-4;
  int batch = 32;
  int epochs = 30;
  std::string attention = "on";
  bool baseline_only = false;
};

PretrainResult pretrain_from_metadata(const json& meta) {
  PretrainResult r;
  if (!meta.contains("pretrain")) return r;
  const json& p = meta.at("pretrain");
  if (!p.at("pretext_accuracy").is_null()) r.accuracy = p.at("pretext_accuracy").get<double>();
  r.uninformative = p.value("uninformative", false);
  r.epoch_loss = p.value("epoch_loss", std::vector<double>{});
  return r;
}

int run_train(const CLI::App& sub, const TrainArgs& a) {
  RSTPM_REQUIRE(!a.data.empty(), ConfigError, "train: --data is required");
  const fs::path dir = output_dir(a.out, "train");
  RunConfig cfg = pretrain_run_config(a.pretrain);
  cfg.seed = a.seed;
  cfg.image_size = a.size;
  cfg.train.lr = a.lr;
  cfg.train.momentum = a.momentum;
  cfg.train.weight_decay = a.wd;
  cfg.train.batch_size = a.batch;
  cfg.train.epochs = a.epochs;
  cfg.train.attention_enabled = parse_switch(a.attention);
  cfg.baseline_only = a.baseline_only;
  cfg.train.validate();

  const auto [train, test] = load_mvtec_layout(a.data, a.category, a.size);
  require_normal_only(train);

  std::optional<Teachers> teachers;
  if (!a.teachers.empty()) {
    ModelBundle ta = load_bundle((fs::path(a.teachers) / "teacher_a.rstpm").string());
    ModelBundle tb = load_bundle((fs::path(a.teachers) / "teacher_b.rstpm").string());
    RSTPM_REQUIRE(ta.teacher_a && tb.teacher_b, FormatError, "teacher bundles lack teacher networks");
    teachers = Teachers{*ta.teacher_a, *tb.teacher_b, pretrain_from_metadata(ta.metadata),
                        pretrain_from_metadata(tb.metadata)};
    cfg.teacher_b = parse_teacher_b(tb.metadata.value("teacher_b", std::string("deeper")) == "same_as_a"
                                        ? "same-as-a"
                                        : "deeper");
  } else {
    teachers = make_teachers(cfg, log);
  }
  cfg.spec_a = teachers->a.spec();
  cfg.spec_b = teachers->b.spec();
  TrainedBundle tb = train_students(*teachers, train, cfg, log);
  tb.bundle.metadata["category"] = a.category;
  save_bundle(tb.bundle, (dir / "model.rstpm").string());
  tb.loss_a.write_csv((dir / "loss_student_a.csv").string());
  if (tb.loss_b) tb.loss_b->write_csv((dir / "loss_student_b.csv").string());
  log("wrote " + (dir / "model.rstpm").string());
  echo_config(sub, dir);
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string out;
  std::vector<std::string> bundles;
  std::string data;
  std::string category = "synthetic";
  int size = 0;
  std::string fusion;
  std::string attention = "on";
  std::string pooling = "global";
  bool minmax = false;
  double min_image_auc = 0;
  double min_pixel_auc = 0;
  std::vector<std::string> modes;
};

int load_size(const EvalArgs& a, const ModelBundle& b) {
  const int trained = b.image_size();
  RSTPM_REQUIRE(a.size == 0 || trained == 0 || a.size == trained, InputError,
                "bundle was trained at " + std::to_string(trained) + " px but --size is " + std::to_string(a.size));
  return a.size != 0 ? a.size : (trained != 0 ? trained : 64);
}

EvalOptions eval_options(const EvalArgs& a, const ModelBundle& b) {
  EvalOptions opt;
  opt.inference.fusion = a.fusion.empty() ? (b.has_pair_b() ? Fusion::Dual : Fusion::Baseline) : parse_fusion(a.fusion);
  opt.inference.attention = parse_switch(a.attention);
  opt.inference.minmax_before_fusion = a.minmax;
  opt.pooling = a.pooling == "per-image" ? PixelPooling::PerImage : PixelPooling::Global;
  return opt;
}

void check_gates(const std::vector<EvalReport>& reports, const EvalArgs& a) {
  for (const auto& r : reports) {
    std::string fail;
    if (r.multi_scale.image < a.min_image_auc)
      fail += " image AUC " + fmt9(r.multi_scale.image) + " < " + fmt9(a.min_image_auc);
    if (r.multi_scale.pixel < a.min_pixel_auc)
      fail += " pixel AUC " + fmt9(r.multi_scale.pixel) + " < " + fmt9(a.min_pixel_auc);
    if (!fail.empty()) throw GateFailure(r.mode() + ":" + fail);
  }
}

int run_eval(const CLI::App& sub, const EvalArgs& a) {
  RSTPM_REQUIRE(a.bundles.size() == 1, ConfigError, "eval takes exactly one --bundle");
  RSTPM_REQUIRE(!a.data.empty(), ConfigError, "eval: --data is required");
  const fs::path dir = output_dir(a.out, "eval");
  ModelBundle b = load_bundle(a.bundles.front());
  const int size = load_size(a, b);
  const auto [train, test] = load_mvtec_layout(a.data, a.category, size);
  const EvalOptions opt = eval_options(a, b);
  std::vector<EvalReport> reports{evaluate(b, test, opt)};
  reports.front().attention = opt.inference.attention && b.attention_enabled();
  write_reports_csv((dir / "eval.csv").string(), reports);
  const auto& r = reports.front();
  std::cout << r.category << ' ' << r.mode() << " pixel_auc " << fmt9(r.multi_scale.pixel) << " image_auc "
            << fmt9(r.multi_scale.image) << '\n';
  echo_config(sub, dir);
  check_gates(reports, a);
  return kOk;
}

AblationMode parse_mode(const std::string& s) {
  // fusion:attention:teacher_b, e.g. dual:on:deeper
  const auto p1 = s.find(':'), p2 = s.find(':', p1 == std::string::npos ? p1 : p1 + 1);
  RSTPM_REQUIRE(p1 != std::string::npos && p2 != std::string::npos, ConfigError,
                "bad --mode '" + s + "' (expected fusion:attention:teacher_b)");
  const std::string f = s.substr(0, p1), att = s.substr(p1 + 1, p2 - p1 - 1), tb = s.substr(p2 + 1);
  RSTPM_REQUIRE((f == "baseline" || f == "dual") && (att == "on" || att == "off") &&
                    (tb == "same-as-a" || tb == "deeper"),
                ConfigError, "bad --mode '" + s + "'");
  return AblationMode{parse_fusion(f), parse_switch(att), parse_teacher_b(tb)};
}

int run_ablate(const CLI::App& sub, const EvalArgs& a) {
  RSTPM_REQUIRE(!a.bundles.empty(), ConfigError, "ablate: at least one --bundle is required");
  RSTPM_REQUIRE(!a.data.empty(), ConfigError, "ablate: --data is required");
  const fs::path dir = output_dir(a.out, "ablate");
  std::vector<ModelBundle> loaded;
  loaded.reserve(a.bundles.size());
  for (const auto& path : a.bundles) loaded.push_back(load_bundle(path));
  BundleSet set;
  int size = 0;
  for (auto& b : loaded) {
    const int s = load_size(a, b);
    RSTPM_REQUIRE(size == 0 || s == size, InputError, "ablate: bundles were trained at different image sizes");
    size = s;
    const TeacherB tb =
        b.metadata.value("teacher_b", std::string("deeper")) == "same_as_a" ? TeacherB::SameAsA : TeacherB::Deeper;
    set[{b.attention_enabled(), tb}] = &b;
  }
  std::vector<AblationMode> plan;
  if (!a.modes.empty()) {
    for (const auto& m : a.modes) plan.push_back(parse_mode(m));
  } else {
    // every mode the bundles can serve; baseline once per attention setting
    std::set<bool> baseline_done;
    for (const auto& [key, b] : set) {
      if (baseline_done.insert(key.first).second) plan.push_back(AblationMode{Fusion::Baseline, key.first, key.second});
      if (b->has_pair_b()) plan.push_back(AblationMode{Fusion::Dual, key.first, key.second});
    }
  }
  const auto [train, test] = load_mvtec_layout(a.data, a.category, size);
  const std::vector<EvalReport> reports = ablate(set, test, plan, eval_options(a, loaded.front()));
  write_reports_csv((dir / "ablation.csv").string(), reports);
  for (const auto& r : reports)
    std::cout << r.category << ' ' << r.mode() << " pixel_auc " << fmt9(r.multi_scale.pixel) << " image_auc "
              << fmt9(r.multi_scale.image) << '\n';
  echo_config(sub, dir);
  check_gates(reports, a);
  return kOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string out;
  std::string bundle;
  std::vector<std::string> images;
  std::string fusion;
  std::string attention = "on";
  bool minmax = false;
};

int run_infer(const CLI::App& sub, const InferArgs& a) {
  const fs::path dir = output_dir(a.out, "infer");
  ModelBundle b = load_bundle(a.bundle);
  InferenceOptions opt;
  opt.fusion = a.fusion.empty() ? (b.has_pair_b() ? Fusion::Dual : Fusion::Baseline) : parse_fusion(a.fusion);
  opt.attention = parse_switch(a.attention);
  opt.minmax_before_fusion = a.minmax;
  const int size = b.image_size() != 0 ? b.image_size() : 64;
  std::ofstream scores(dir / "scores.csv");
  scores << "image,score\n";
  int failed = 0;
  for (const auto& path : a.images) {
    Tensor<float> img;
    try {
      img = resize_image(image_io::read_image(path), size, size);
    } catch (const std::exception& e) {
      std::cerr << "[rstpm] " << path << ": " << e.what() << '\n';
      ++failed;
      continue;
    }
    const InferenceResult r = infer(b, img, opt);
    const fs::path idir = dir / fs::path(path).stem();
    fs::create_directories(idir);
    image_io::write_heatmap((idir / "final.png").string(), r.final.values);
    for (const auto* group : {&r.maps_a, &r.maps_b, &r.attention_a, &r.attention_b})
      for (const auto& m : *group) image_io::write_heatmap((idir / (m.source + ".png")).string(), m.values);
    write_archive((idir / "maps.rstpm").string(), result_archive(r));
    scores << path << ',' << fmt9(r.score) << '\n';
    std::cout << path << " score " << fmt9(r.score) << '\n';
  }
  echo_config(sub, dir);
  return failed > 0 ? kPartial : kOk;
}

/// Splices `--config FILE` into the argument list: the file's key=value pairs
/// become --key=value flags placed before the command line's own, so explicit
/// flags win (options take their last value). Returns CLI11's reversed order.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<std::string> own, from_file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      own.push_back(args[i]);
      continue;
    }
    for (const CLI::ConfigItem& item : CLI::ConfigINI().from_file(path)) {
      if (item.name == "++" || item.name == "--") continue;  // section markers
      for (const auto& v : item.inputs)
        if (!v.empty()) from_file.push_back("--" + item.name + "=" + v);
    }
  }
  // subcommand first, then file values, then the explicit flags
  std::vector<std::string> out;
  if (!own.empty()) out.push_back(own.front());
  out.insert(out.end(), from_file.begin(), from_file.end());
  if (!own.empty()) out.insert(out.end(), own.begin() + 1, own.end());
  std::reverse(out.begin(), out.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual student-teacher feature pyramid matching for anomaly localization"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenCorpusArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Write a synthetic anomaly corpus in MVTec layout");
  gen_cmd->set_config("--config", "", "Flat key = value config file");
  gen_cmd->add_option("--out", gen.out, "Output root directory");
  gen_cmd->add_option("--seed", gen.seed, "Corpus seed")->capture_default_str();
  gen_cmd->add_option("--n-train", gen.n_train, "Normal training images")->capture_default_str();
  gen_cmd->add_option("--n-test-normal", gen.n_test_normal, "Normal test images")->capture_default_str();
  gen_cmd->add_option("--n-test-defect", gen.n_test_defect, "Defect test images")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  gen_cmd->add_option("--category", gen.category, "Category directory name")->capture_default_str();
  gen_cmd->add_option("--pretext-classes", gen.pretext_classes, "Also write a pretext corpus with K classes (0 = no)")
      ->capture_default_str();
  gen_cmd->add_option("--per-class", gen.per_class, "Pretext images per class")->capture_default_str();

  auto add_pretrain_options = [](CLI::App* cmd, PretrainArgs& p) {
    cmd->add_option("--pretext-classes", p.classes, "Pretext texture classes")->capture_default_str();
    cmd->add_option("--pretext-per-class", p.per_class, "Pretext training images per class")->capture_default_str();
    cmd->add_option("--pretext-held-out", p.held_out, "Held-out pretext images per class")->capture_default_str();
    cmd->add_option("--pretext-epochs", p.epochs, "Pretext epochs")->capture_default_str();
    cmd->add_option("--pretext-batch", p.batch, "Pretext batch size")->capture_default_str();
    cmd->add_option("--pretext-lr", p.lr, "Pretext learning rate")->capture_default_str();
    cmd->add_flag("--skip-pretext", p.skip_pretext, "Freeze randomly initialized teachers");
    cmd->add_option("--teacher-b", p.teacher_b, "Teacher-B architecture")
        ->check(CLI::IsMember({"deeper", "same-as-a"}))
        ->capture_default_str();
  };

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pretrain and freeze teacher-A and teacher-B");
  pre_cmd->set_config("--config", "", "Flat key = value config file");
  pre_cmd->add_option("--out", pre.out, "Output directory");
  pre_cmd->add_option("--seed", pre.seed, "Run seed")->capture_default_str();
  pre_cmd->add_option("--size", pre.size, "Image side in pixels")->capture_default_str();
  add_pretrain_options(pre_cmd, pre);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train student-A and student-B with attention gates");
  train_cmd->set_config("--config", "", "Flat key = value config file");
  train_cmd->add_option("--out", tr.out, "Output directory");
  train_cmd->add_option("--data", tr.data, "Corpus root in MVTec layout");
  train_cmd->add_option("--category", tr.category, "Category under the corpus root")->capture_default_str();
  train_cmd->add_option("--teachers", tr.teachers, "Directory with teacher_a.rstpm/teacher_b.rstpm (else pretrain now)");
  train_cmd->add_option("--seed", tr.seed, "Run seed")->capture_default_str();
  train_cmd->add_option("--size", tr.size, "Image side in pixels")->capture_default_str();
  train_cmd->add_option("--lr", tr.lr, "Learning rate")->capture_default_str();
  train_cmd->add_option("--momentum", tr.momentum, "SGD momentum")->capture_default_str();
  train_cmd->add_option("--wd", tr.wd, "Weight decay")->capture_default_str();
  train_cmd->add_option("--batch", tr.batch, "Batch size")->capture_default_str();
  train_cmd->add_option("--epochs", tr.epochs, "Epochs")->capture_default_str();
  train_cmd->add_option("--attention", tr.attention, "Attention gates")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  train_cmd->add_flag("--baseline-only", tr.baseline_only, "Train pair A only");
  add_pretrain_options(train_cmd, tr.pretrain);

  auto add_eval_options = [](CLI::App* cmd, EvalArgs& e) {
    cmd->set_config("--config", "", "Flat key = value config file");
    cmd->add_option("--out", e.out, "Output directory");
    cmd->add_option("--data", e.data, "Corpus root in MVTec layout");
    cmd->add_option("--category", e.category, "Category under the corpus root")->capture_default_str();
    cmd->add_option("--size", e.size, "Image side (0 = the bundle's)")->capture_default_str();
    cmd->add_option("--attention", e.attention, "Use gates at test time")
        ->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    cmd->add_option("--pooling", e.pooling, "Pixel AUC pooling")
        ->check(CLI::IsMember({"global", "per-image"}))
        ->capture_default_str();
    cmd->add_flag("--minmax", e.minmax, "Min-max scale each map before fusion");
    cmd->add_option("--min-image-auc", e.min_image_auc, "Exit 4 below this image AUC")->capture_default_str();
    cmd->add_option("--min-pixel-auc", e.min_pixel_auc, "Exit 4 below this pixel AUC")->capture_default_str();
  };

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Pixel and image ROC-AUC of one bundle");
  add_eval_options(eval_cmd, ev);
  eval_cmd->add_option("--bundle", ev.bundles, "Model bundle")->expected(1);
  eval_cmd->add_option("--fusion", ev.fusion, "baseline or dual (default: dual if the bundle has pair B)")
      ->check(CLI::IsMember({"baseline", "dual"}));

  EvalArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Per-resolution and mode ablation table");
  add_eval_options(ablate_cmd, ab);
  ablate_cmd->add_option("--bundle", ab.bundles, "Model bundles (repeatable)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  ablate_cmd->add_option("--mode", ab.modes, "fusion:attention:teacher_b, e.g. dual:on:deeper (repeatable)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "Anomaly maps, heatmaps and scores for images");
  infer_cmd->set_config("--config", "", "Flat key = value config file");
  infer_cmd->add_option("--out", inf.out, "Output directory");
  infer_cmd->add_option("--bundle", inf.bundle, "Model bundle")->required();
  infer_cmd->add_option("--fusion", inf.fusion, "baseline or dual")->check(CLI::IsMember({"baseline", "dual"}));
  infer_cmd->add_option("--attention", inf.attention, "Use gates at test time")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  infer_cmd->add_flag("--minmax", inf.minmax, "Min-max scale each map before fusion");
  infer_cmd->add_option("images", inf.images, "Input images")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  try {
    app.parse(expand_config(argc, argv));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return run_gen_corpus(*gen_cmd, gen);
    if (*pre_cmd) return run_pretrain(*pre_cmd, pre);
    if (*train_cmd) return run_train(*train_cmd, tr);
    if (*eval_cmd) return run_eval(*eval_cmd, ev);
    if (*ablate_cmd) return run_ablate(*ablate_cmd, ab);
    if (*infer_cmd) return run_infer(*infer_cmd, inf);
  } catch (const GateFailure& e) {
    std::cerr << "[rstpm] threshold not met: " << e.what() << '\n';
    return kGate;
  } catch (const UsageError& e) {
    std::cerr << "[rstpm] " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "[rstpm] config error: " << e.what() << '\n';
    return kUsage;
  } catch (const InputError& e) {
    std::cerr << "[rstpm] data error: " << e.what() << '\n';
    return kContract;
  } catch (const IngestionError& e) {
    std::cerr << "[rstpm] data error: " << e.what() << '\n';
    return kContract;
  } catch (const FormatError& e) {
    std::cerr << "[rstpm] bundle error: " << e.what() << '\n';
    return kContract;
  } catch (const StateError& e) {
    std::cerr << "[rstpm] bundle error: " << e.what() << '\n';
    return kContract;
  } catch (const std::exception& e) {
    std::cerr << "[rstpm] error: " << e.what() << '\n';
    return kPartial;
  }
  return kUsage;
}
