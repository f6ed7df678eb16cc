#pragma once

// On-disk formats. All integers and floats are little-endian.
//
// Teacher cache ("RFBC"):
//   magic "RFBC" | u32 version = 1 | u32 d_H | u64 record count
//   per record: u32 id length | id bytes (UTF-8) | u32 |r|
//               | |r|*d_H f32 emb (row-major) | |r|*d_H f32 hid (row-major)
//
// Model checkpoint ("RFBM"):
//   magic "RFBM" | u32 version = 1 | u32 role (0 teacher, 1 student, 2 projections)
//   | u32 num_layers | u32 hidden | u32 heads | u32 ffn | u32 vocab | u32 max_seq_len
//   | u32 reference_hidden | u32 activation (0 gelu, 1 relu) | f64 ln_eps | f64 delta
//   | u64 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | rank * u32 dims | f32 values
//
// Payloads are single precision; loading promotes them to double.

#include <map>
#include <string>
#include <vector>

#include "refdistill/binary_io.hpp"
#include "refdistill/transformer.hpp"

namespace refdistill {

inline constexpr std::uint32_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Teacher cache

inline void write_f32_payload(BinaryWriter& w, const Tensor& t) {
  for (double v : t.values()) w.f32(static_cast<float>(v));
}

inline Tensor read_f32_payload(BinaryReader& r, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = static_cast<double>(r.f32());
  return t;
}

inline BinaryWriter encode_cache(const std::vector<ReferenceContext>& records, std::size_t hidden) {
  BinaryWriter w;
  w.bytes("RFBC", 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(hidden));
  w.u64(records.size());
  for (const ReferenceContext& rc : records) {
    rc.validate();
    if (rc.emb.cols() != hidden) {
      throw ShapeError("cache record '" + rc.doc_id + "' has width " + std::to_string(rc.emb.cols()) +
                       ", expected " + std::to_string(hidden));
    }
    w.str(rc.doc_id);
    w.u32(static_cast<std::uint32_t>(rc.length()));
    write_f32_payload(w, rc.emb);
    write_f32_payload(w, rc.hid);
  }
  return w;
}

inline void save_cache(const std::string& path, const std::vector<ReferenceContext>& records, std::size_t hidden) {
  encode_cache(records, hidden).save(path);
}

struct TeacherCache {
  std::size_t hidden = 0;
  std::vector<ReferenceContext> records;

  const ReferenceContext* find(const std::string& doc_id) const {
    for (const auto& r : records)
      if (r.doc_id == doc_id) return &r;
    return nullptr;
  }
};

inline TeacherCache load_cache(const std::string& path) {
  BinaryReader r = BinaryReader::open(path);
  r.expect_magic("RFBC");
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) throw IoError("'" + path + "': unsupported cache version " + std::to_string(version));
  TeacherCache cache;
  cache.hidden = r.u32();
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    ReferenceContext rc;
    rc.doc_id = r.str();
    const std::size_t len = r.u32();
    rc.emb = read_f32_payload(r, {len, cache.hidden});
    rc.hid = read_f32_payload(r, {len, cache.hidden});
    cache.records.push_back(std::move(rc));
  }
  if (!r.at_end()) throw IoError("'" + path + "': trailing bytes after last record");
  return cache;
}

// ---------------------------------------------------------------------------
// Model checkpoints

enum class CheckpointRole : std::uint32_t { kTeacher = 0, kStudent = 1, kProjections = 2 };

struct Checkpoint {
  CheckpointRole role = CheckpointRole::kTeacher;
  ModelConfig config;
  double delta = 0.0;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline BinaryWriter encode_checkpoint(const Checkpoint& ck) {
  BinaryWriter w;
  w.bytes("RFBM", 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(ck.role));
  const ModelConfig& c = ck.config;
  for (std::size_t v : {c.num_layers, c.hidden_size, c.num_heads, c.ffn_size, c.vocab_size, c.max_seq_len,
                        c.reference_hidden_size}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u32(c.activation == Activation::kGelu ? 0 : 1);
  w.f64(c.ln_eps);
  w.f64(ck.delta);
  w.u64(ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) w.u32(static_cast<std::uint32_t>(dim));
    write_f32_payload(w, t);
  }
  return w;
}

inline Checkpoint decode_checkpoint(BinaryReader& r) {
  r.expect_magic("RFBM");
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw IoError("'" + r.source() + "': unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const std::uint32_t role = r.u32();
  if (role > 2) throw IoError("'" + r.source() + "': unknown checkpoint role");
  ck.role = static_cast<CheckpointRole>(role);
  ModelConfig& c = ck.config;
  c.num_layers = r.u32();
  c.hidden_size = r.u32();
  c.num_heads = r.u32();
  c.ffn_size = r.u32();
  c.vocab_size = r.u32();
  c.max_seq_len = r.u32();
  c.reference_hidden_size = r.u32();
  c.activation = r.u32() == 0 ? Activation::kGelu : Activation::kRelu;
  c.ln_eps = r.f64();
  ck.delta = r.f64();
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& dim : shape) dim = r.u32();
    ck.tensors.emplace_back(std::move(name), read_f32_payload(r, std::move(shape)));
  }
  if (!r.at_end()) throw IoError("'" + r.source() + "': trailing bytes after last tensor");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  BinaryReader r = BinaryReader::open(path);
  return decode_checkpoint(r);
}

template <typename W>
std::vector<std::pair<std::string, Tensor>> named_tensors(const W& w) {
  std::vector<std::pair<std::string, Tensor>> out;
  W::visit(w, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

template <typename W>
void assign_named(W& w, const Checkpoint& ck) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ck.tensors) by_name[name] = &t;
  W::visit(w, [&](const std::string& name, Tensor& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    if (!t.empty() && it->second->shape() != t.shape()) {
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_string(it->second->shape()) +
                    ", expected " + shape_string(t.shape()));
    }
    t = *it->second;
  });
}

inline void save_teacher(const std::string& path, const TeacherModel& m) {
  encode_checkpoint({CheckpointRole::kTeacher, m.config, 0.0, named_tensors(m.weights)}).save(path);
}

inline void save_student(const std::string& path, const StudentModel& m) {
  encode_checkpoint({CheckpointRole::kStudent, m.config, m.delta, named_tensors(m.weights)}).save(path);
}

/// Loads a teacher checkpoint; the layer list is sized from the stored config.
inline TeacherModel load_teacher(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.role != CheckpointRole::kTeacher) throw IoError("'" + path + "' is not a teacher checkpoint");
  ck.config.validate();
  TeacherModel m{ck.config, {}};
  m.weights.layers.resize(ck.config.num_layers);
  assign_named(m.weights, ck);
  return m;
}

inline StudentModel load_student(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.role != CheckpointRole::kStudent) throw IoError("'" + path + "' is not a student checkpoint");
  ck.config.validate_student();
  StudentModel m{ck.config, ck.delta, {}};
  m.weights.layers.resize(ck.config.num_layers - 1);
  assign_named(m.weights, ck);
  return m;
}

}  // namespace refdistill
