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

#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "rstpm/eval.hpp"
#include "rstpm/pretrain.hpp"

// End-to-end desk pipeline: pretext-pretrained teachers, student training,
// evaluation. Every stage derives its seed from RunConfig::seed.
namespace rstpm {

/// Seed streams of the pipeline stages.
enum class SeedStream : std::uint64_t {
  TeacherA = 1,
  TeacherB,
  StudentA,
  StudentB,
  GatesA,
  GatesB,
  Pretext,
  Corpus,
  Batches,
};

inline std::uint64_t stream_seed(std::uint64_t seed, SeedStream s) {
  return detail::mix_seed(seed, static_cast<std::uint64_t>(s));
}

struct RunConfig {
  std::uint64_t seed = 0;
  int image_size = 64;
  SyntheticConfig corpus{};
  PretrainConfig pretrain{};
  bool skip_pretext = false;
  TrainConfig train{};
  PyramidSpec spec_a = PyramidSpec::desk_a();
  PyramidSpec spec_b = PyramidSpec::desk_b();
  TeacherB teacher_b = TeacherB::Deeper;
  bool baseline_only = false;

  /// Pushes the shared seed and image size into the stage configs.
  RunConfig resolved() const {
    RunConfig c = *this;
    c.corpus.image_size = c.pretrain.image_size = c.train.image_size = image_size;
    c.corpus.seed = stream_seed(seed, SeedStream::Corpus);
    c.pretrain.seed = stream_seed(seed, SeedStream::Pretext);
    c.train.seed = stream_seed(seed, SeedStream::Batches);
    if (c.teacher_b == TeacherB::SameAsA) c.spec_b = c.spec_a;
    return c;
  }
};

using Log = std::function<void(const std::string&)>;

struct Teachers {
  PyramidNet<float> a;
  PyramidNet<float> b;
  PretrainResult result_a;
  PretrainResult result_b;
};

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

/// Builds and pretrains (or, with skip_pretext, just freezes) both teachers.
inline Teachers make_teachers(const RunConfig& raw, const Log& log = {}) {
  const RunConfig cfg = raw.resolved();
  Teachers t{build_network<float>(Role::TeacherA, cfg.spec_a, stream_seed(cfg.seed, SeedStream::TeacherA)),
             build_network<float>(Role::TeacherB, cfg.spec_b, stream_seed(cfg.seed, SeedStream::TeacherB)),
             {},
             {}};
  if (cfg.skip_pretext) {
    t.result_a = freeze_untrained(t.a);
    t.result_b = freeze_untrained(t.b);
    return t;
  }
  const LabeledCorpus train = gen_pretext(cfg.pretrain.classes, cfg.pretrain.per_class, cfg.image_size, cfg.pretrain.seed);
  const LabeledCorpus held = gen_pretext(cfg.pretrain.classes, cfg.pretrain.held_out_per_class, cfg.image_size,
                                         detail::mix_seed(cfg.pretrain.seed, 0x4E1D));
  for (auto [net, res] : {std::pair{&t.a, &t.result_a}, std::pair{&t.b, &t.result_b}}) {
    const std::string name = role_name(net->role());
    *res = pretrain_teacher(*net, train, held, cfg.pretrain, [&](int epoch, double loss) {
      if (log) log(name + " pretext epoch " + std::to_string(epoch) + " loss " + fmt("%.4f", loss));
    });
    if (log)
      log(name + " pretext accuracy " + fmt("%.3f", *res->accuracy) +
          (res->uninformative ? " (WARNING: near chance, teacher may be uninformative)" : ""));
  }
  return t;
}

/// Stores a teacher's pretraining outcome in bundle metadata.
inline void record_pretrain(json& meta, const std::string& key, const PretrainResult& r) {
  meta[key] = {{"pretext_accuracy", r.accuracy ? json(*r.accuracy) : json(nullptr)},
               {"uninformative", r.uninformative},
               {"epoch_loss", r.epoch_loss}};
}

struct TrainedBundle {
  ModelBundle bundle;
  LossReport loss_a;
  std::optional<LossReport> loss_b;
};

/// Trains student-A (and student-B unless baseline_only) against copies of the teachers.
inline TrainedBundle train_students(const Teachers& teachers, const LabeledCorpus& train, const RunConfig& raw,
                                    const Log& log = {}) {
  const RunConfig cfg = raw.resolved();
  TrainedBundle out;
  ModelBundle& b = out.bundle;
  b.teacher_a = teachers.a;
  b.student_a = build_network<float>(Role::StudentA, cfg.spec_a, stream_seed(cfg.seed, SeedStream::StudentA));
  if (cfg.train.attention_enabled)
    b.gates_a = AttentionGates<float>::for_teacher(Pair::A, cfg.spec_a, stream_seed(cfg.seed, SeedStream::GatesA));
  auto epoch_log = [&](const std::string& who) {
    return [&log, who](const EpochLoss& e) {
      if (log)
        log(who + " epoch " + std::to_string(e.epoch) + " loss " + fmt("%.5f", e.total) + " (" + fmt("%.2f", e.seconds) +
            " s)");
    };
  };
  out.loss_a = train_student_a(*b.teacher_a, *b.student_a, b.gates_a ? &*b.gates_a : nullptr, train, cfg.train,
                               epoch_log("student_a"));
  b.student_a->freeze();
  if (!cfg.baseline_only) {
    b.teacher_b = teachers.b;
    b.student_b = build_decoder<float>(DecoderSpec::for_teachers(cfg.spec_a, b.teacher_b->spec()),
                                       stream_seed(cfg.seed, SeedStream::StudentB));
    if (cfg.train.attention_enabled)
      b.gates_b = AttentionGates<float>::for_teacher(Pair::B, b.teacher_b->spec(),
                                                     stream_seed(cfg.seed, SeedStream::GatesB));
    out.loss_b = train_student_b(*b.teacher_a, *b.teacher_b, *b.student_b, b.gates_b ? &*b.gates_b : nullptr, train,
                                 cfg.train, epoch_log("student_b"));
    b.student_b->freeze();
  }
  b.metadata = {{"image_size", cfg.image_size},
                {"attention_enabled", cfg.train.attention_enabled},
                {"teacher_b", teacher_b_name(cfg.teacher_b)},
                {"baseline_only", cfg.baseline_only},
                {"seed", cfg.seed},
                {"train", to_json(cfg.train)},
                {"category", train.category}};
  record_pretrain(b.metadata, "pretrain_teacher_a", teachers.result_a);
  if (!cfg.baseline_only) record_pretrain(b.metadata, "pretrain_teacher_b", teachers.result_b);
  return out;
}

/// Writes every raw map of every test image into one tensor archive, tensors
/// named "<item>/<map>".
inline void write_map_dump(const std::string& path, const LabeledCorpus& test,
                           const std::vector<InferenceResult>& results) {
  TensorArchive ar;
  ar.metadata = {{"kind", "anomaly_map_set"}, {"category", test.category}};
  json scores = json::object();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const TensorArchive one = result_archive(results[i]);
    const std::string item = test.items[i].label + "/" + test.items[i].name;
    scores[item] = results[i].score;
    for (const auto& t : one.tensors) ar.tensors.push_back(NamedTensor{item + "/" + t.name, t.tensor});
  }
  ar.metadata["scores"] = scores;
  write_archive(path, ar);
}

}  // namespace rstpm
