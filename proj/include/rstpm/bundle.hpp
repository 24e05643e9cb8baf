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

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rstpm/backbones.hpp"
#include "rstpm/distill.hpp"

// Tensor archive layout (all integers little-endian):
//
//   magic    8 bytes  "RSTPMARC"
//   version  u32      kArchiveVersion
//   hlen     u64      length of the JSON header
//   header   hlen     UTF-8 JSON: {"metadata": {...}, "tensors": [{"name", "shape"}...]}
//   blocks            one per header tensor, in header order:
//                       u32 name length, name bytes, 4 x i32 dims (n, c, h, w),
//                       n*c*h*w IEEE-754 float32 values
//   crc      u32      zlib CRC-32 of every preceding byte
//
// Model bundles and raw anomaly-map dumps share this layout.
namespace rstpm {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

inline constexpr char kArchiveMagic[8] = {'R', 'S', 'T', 'P', 'M', 'A', 'R', 'C'};
inline constexpr std::uint32_t kArchiveVersion = 1;

using json = nlohmann::json;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

struct TensorArchive {
  json metadata = json::object();
  std::vector<NamedTensor> tensors;

  const Tensor<float>& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw FormatError("archive has no tensor '" + name + "'");
  }
};

namespace detail {

class ArchiveWriter {
 public:
  template <typename V>
  void put(const V& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ArchiveReader {
 public:
  explicit ArchiveReader(std::vector<char> data) : buf_(std::move(data)) {}
  bool can_read(std::size_t n) const { return pos_ + n <= buf_.size(); }
  template <typename V>
  bool get(V& v) {
    if (!can_read(sizeof(V))) return false;
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return true;
  }
  bool get_bytes(void* dst, std::size_t n) {
    if (!can_read(n)) return false;
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
    return true;
  }
  std::size_t pos() const { return pos_; }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<char> encode_archive(const TensorArchive& ar) {
  json header;
  header["metadata"] = ar.metadata;
  header["tensors"] = json::array();
  for (const auto& t : ar.tensors) {
    const Shape& s = t.tensor.shape();
    header["tensors"].push_back({{"name", t.name}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  const std::string text = header.dump();
  detail::ArchiveWriter w;
  w.put_bytes(kArchiveMagic, sizeof kArchiveMagic);
  w.put(kArchiveVersion);
  w.put(static_cast<std::uint64_t>(text.size()));
  w.put_bytes(text.data(), text.size());
  for (const auto& t : ar.tensors) {
    w.put(static_cast<std::uint32_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    const Shape& s = t.tensor.shape();
    for (std::int32_t d : {s.n, s.c, s.h, s.w}) w.put(d);
    w.put_bytes(t.tensor.data(), t.tensor.size() * sizeof(float));
  }
  std::vector<char> out = w.bytes();
  const std::uint32_t crc = detail::crc32_of(out.data(), out.size());
  const auto* p = reinterpret_cast<const char*>(&crc);
  out.insert(out.end(), p, p + sizeof crc);
  return out;
}

inline TensorArchive decode_archive(std::vector<char> bytes, const std::string& origin = "archive") {
  detail::ArchiveReader r(std::move(bytes));
  char magic[8];
  RSTPM_REQUIRE(r.get_bytes(magic, sizeof magic) && std::memcmp(magic, kArchiveMagic, sizeof magic) == 0, FormatError,
                origin + ": not a tensor archive (bad magic)");
  std::uint32_t version = 0;
  RSTPM_REQUIRE(r.get(version), FormatError, origin + ": truncated before version");
  RSTPM_REQUIRE(version == kArchiveVersion, FormatError,
                origin + ": unsupported archive version " + std::to_string(version) + " (expected " +
                    std::to_string(kArchiveVersion) + ")");
  std::uint64_t hlen = 0;
  RSTPM_REQUIRE(r.get(hlen) && r.can_read(hlen), FormatError, origin + ": truncated header");
  std::string text(hlen, '\0');
  r.get_bytes(text.data(), hlen);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(origin + ": corrupt header: " + e.what());
  }
  TensorArchive ar;
  ar.metadata = header.value("metadata", json::object());
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto dims = entry.at("shape").get<std::vector<int>>();
    RSTPM_REQUIRE(dims.size() == 4, FormatError, origin + ": tensor '" + name + "' is not 4-D");
    std::uint32_t nlen = 0;
    RSTPM_REQUIRE(r.get(nlen) && r.can_read(nlen), FormatError, origin + ": truncated, missing tensor '" + name + "'");
    std::string stored(nlen, '\0');
    r.get_bytes(stored.data(), nlen);
    RSTPM_REQUIRE(stored == name, FormatError,
                  origin + ": tensor block '" + stored + "' found where '" + name + "' was expected");
    std::int32_t d[4];
    for (auto& v : d)
      RSTPM_REQUIRE(r.get(v), FormatError, origin + ": truncated, missing tensor '" + name + "'");
    const Shape shape{d[0], d[1], d[2], d[3]};
    RSTPM_REQUIRE(shape.valid() && shape == (Shape{dims[0], dims[1], dims[2], dims[3]}), FormatError,
                  origin + ": tensor '" + name + "' shape disagrees with header");
    Tensor<float> t(shape);
    RSTPM_REQUIRE(r.get_bytes(t.data(), t.size() * sizeof(float)), FormatError,
                  origin + ": truncated, missing tensor '" + name + "'");
    ar.tensors.push_back(NamedTensor{name, std::move(t)});
  }
  const std::size_t body = r.pos();
  std::uint32_t crc = 0;
  RSTPM_REQUIRE(r.get(crc), FormatError, origin + ": truncated, missing checksum");
  RSTPM_REQUIRE(r.pos() == r.data().size(), FormatError, origin + ": trailing bytes after checksum");
  RSTPM_REQUIRE(crc == detail::crc32_of(r.data().data(), body), FormatError, origin + ": checksum mismatch");
  return ar;
}

inline void write_archive(const std::string& path, const TensorArchive& ar) {
  const std::vector<char> bytes = encode_archive(ar);
  std::ofstream os(path, std::ios::binary);
  RSTPM_REQUIRE(os.good(), FormatError, "cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  RSTPM_REQUIRE(os.good(), FormatError, "write failed for '" + path + "'");
}

inline TensorArchive read_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  RSTPM_REQUIRE(is.good(), FormatError, "cannot open '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_archive(std::move(bytes), path);
}

// ---------------------------------------------------------------------------
// Model bundle

inline json to_json(const PyramidSpec& s) {
  json stages = json::array();
  for (const auto& st : s.stages) stages.push_back({st.blocks, st.channels});
  return {{"stem_channels", s.stem_channels}, {"stem_stride", s.stem_stride}, {"stages", stages}};
}

inline PyramidSpec pyramid_spec_from_json(const json& j) {
  PyramidSpec s;
  s.stem_channels = j.at("stem_channels").get<int>();
  s.stem_stride = j.at("stem_stride").get<int>();
  s.stages.clear();
  for (const auto& st : j.at("stages")) s.stages.push_back(StageSpec{st.at(0).get<int>(), st.at(1).get<int>()});
  return s;
}

inline json to_json(const DecoderSpec& s) {
  return {{"input_channels", s.input_channels}, {"widths", s.widths}, {"out_channels", s.out_channels}};
}

inline DecoderSpec decoder_spec_from_json(const json& j) {
  DecoderSpec s;
  s.input_channels = j.at("input_channels").get<int>();
  s.widths = j.at("widths").get<std::array<int, 3>>();
  s.out_channels = j.at("out_channels").get<std::array<int, 3>>();
  return s;
}

inline json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"image_size", c.image_size},
          {"attention_enabled", c.attention_enabled}};
}

inline json to_json(const LossReport& r) {
  json rows = json::array();
  for (const auto& e : r.epochs) rows.push_back({e.epoch, e.level[0], e.level[1], e.level[2], e.total});
  return {{"student", r.student}, {"epochs", rows}};
}

/// Persisted set of networks and gates. Any subset may be present: a teacher
/// alone (pretraining output), the A pair (baseline mode) or everything.
struct ModelBundle {
  std::optional<PyramidNet<float>> teacher_a;
  std::optional<PyramidNet<float>> student_a;
  std::optional<PyramidNet<float>> teacher_b;
  std::optional<Decoder<float>> student_b;
  std::optional<AttentionGates<float>> gates_a;
  std::optional<AttentionGates<float>> gates_b;
  json metadata = json::object();

  bool has_pair_a() const { return teacher_a && student_a; }
  bool has_pair_b() const { return teacher_a && teacher_b && student_b; }
  bool attention_enabled() const { return metadata.value("attention_enabled", false); }
  int image_size() const { return metadata.value("image_size", 0); }
};

namespace detail {

template <typename Net>
void collect_tensors(Net& net, const std::string& prefix, std::vector<NamedTensor>& out) {
  net.visit([&](const std::string& name, Tensor<float>& t) { out.push_back(NamedTensor{prefix + "/" + name, t}); });
}

template <typename Net>
void restore_tensors(Net& net, const std::string& prefix, const std::map<std::string, const Tensor<float>*>& index) {
  net.visit([&](const std::string& name, Tensor<float>& t) {
    const std::string key = prefix + "/" + name;
    auto it = index.find(key);
    RSTPM_REQUIRE(it != index.end(), FormatError, "bundle is missing tensor '" + key + "'");
    RSTPM_REQUIRE(it->second->shape() == t.shape(), FormatError,
                  "bundle tensor '" + key + "' has shape " + it->second->shape().str() + ", expected " +
                      t.shape().str());
    t = *it->second;
  });
}

inline json gates_json(const AttentionGates<float>& g) {
  json ch = json::array();
  for (const auto& gate : g.gates) ch.push_back(gate.channels());
  return {{"pair", pair_name(g.pair)}, {"channels", ch}};
}

}  // namespace detail

inline TensorArchive bundle_to_archive(ModelBundle& b) {
  TensorArchive ar;
  ar.metadata = b.metadata;
  ar.metadata["kind"] = "model_bundle";
  json nets = json::object();
  auto add_net = [&](std::optional<PyramidNet<float>>& net) {
    if (!net) return;
    const std::string key = role_name(net->role());
    nets[key] = {{"spec", to_json(net->spec())}, {"frozen", net->frozen()}, {"seed", net->seed()}};
    detail::collect_tensors(*net, key, ar.tensors);
  };
  add_net(b.teacher_a);
  add_net(b.student_a);
  add_net(b.teacher_b);
  if (b.student_b) {
    nets["student_b"] = {{"decoder_spec", to_json(b.student_b->spec())},
                         {"frozen", b.student_b->frozen()},
                         {"seed", b.student_b->seed()}};
    detail::collect_tensors(*b.student_b, "student_b", ar.tensors);
  }
  if (b.gates_a) {
    nets["gates_a"] = detail::gates_json(*b.gates_a);
    detail::collect_tensors(*b.gates_a, "gates_a", ar.tensors);
  }
  if (b.gates_b) {
    nets["gates_b"] = detail::gates_json(*b.gates_b);
    detail::collect_tensors(*b.gates_b, "gates_b", ar.tensors);
  }
  ar.metadata["networks"] = nets;
  return ar;
}

inline ModelBundle bundle_from_archive(const TensorArchive& ar) {
  RSTPM_REQUIRE(ar.metadata.value("kind", "") == "model_bundle", FormatError, "archive is not a model bundle");
  ModelBundle b;
  b.metadata = ar.metadata;
  b.metadata.erase("networks");
  b.metadata.erase("kind");
  std::map<std::string, const Tensor<float>*> index;
  for (const auto& t : ar.tensors) index.emplace(t.name, &t.tensor);
  const json& nets = ar.metadata.at("networks");
  auto load_net = [&](const std::string& key, std::optional<PyramidNet<float>>& slot) {
    if (!nets.contains(key)) return;
    const json& j = nets.at(key);
    slot.emplace(role_from_name(key), pyramid_spec_from_json(j.at("spec")), j.value("seed", std::uint64_t{0}));
    detail::restore_tensors(*slot, key, index);
    if (j.value("frozen", false)) slot->freeze();
  };
  load_net("teacher_a", b.teacher_a);
  load_net("student_a", b.student_a);
  load_net("teacher_b", b.teacher_b);
  if (nets.contains("student_b")) {
    const json& j = nets.at("student_b");
    b.student_b.emplace(decoder_spec_from_json(j.at("decoder_spec")), j.value("seed", std::uint64_t{0}));
    detail::restore_tensors(*b.student_b, "student_b", index);
    if (j.value("frozen", false)) b.student_b->freeze();
  }
  for (const char* key : {"gates_a", "gates_b"}) {
    if (!nets.contains(key)) continue;
    const json& j = nets.at(key);
    const Pair pair = j.at("pair").get<std::string>() == "a" ? Pair::A : Pair::B;
    auto& slot = pair == Pair::A ? b.gates_a : b.gates_b;
    slot.emplace(pair, j.at("channels").get<std::array<int, 3>>(), 0);
    detail::restore_tensors(*slot, key, index);
  }
  return b;
}

inline void save_bundle(ModelBundle& b, const std::string& path) { write_archive(path, bundle_to_archive(b)); }

inline ModelBundle load_bundle(const std::string& path) { return bundle_from_archive(read_archive(path)); }

}  // namespace rstpm
