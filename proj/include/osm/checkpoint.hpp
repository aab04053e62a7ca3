#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "osm/training.hpp"

// Binary checkpoint format, version 1. Little-endian throughout; doubles are
// stored bit-exactly, so save -> load -> save is byte-identical and a resumed
// run reproduces an uninterrupted one.
//
//   magic     8 bytes "OSMCKPT\0"
//   version   u32
//   digest    u64   (config digest, checked on resume)
//   step      u64   (training steps attempted so far)
//   vocab     u32 count, then that many raw bytes
//   meta      u32 length + bytes (the canonical run config, may be empty)
//   tensors   u32 count, then per tensor:
//     name    u32 length + bytes
//     rows    u32
//     cols    u32
//     field   u8    (0 real, 1 complex)
//     data    rows*cols f64 real plane, then rows*cols f64 imaginary plane
//             (imaginary plane present only for complex tensors)
//
// Optimizer moments ride along as tensors named "opt/m/<param>" and
// "opt/v/<param>"; the applied-step counter is the 1x1 tensor "opt/t".

namespace osm {

inline constexpr char kCheckpointMagic[8] = {'O', 'S', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr uint32_t kCheckpointVersion = 1;

// FNV-1a; used to fingerprint the run configuration.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= static_cast<uint64_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct Checkpoint {
  uint64_t config_digest = 0;
  uint64_t step = 0;  // attempted steps; addresses the next batch
  std::vector<uint8_t> vocab;
  std::string meta;  // canonical run config, empty when saved without one
  std::vector<std::string> names;
  std::vector<Matrix> tensors;

  int index_of(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return static_cast<int>(i);
    }
    return -1;
  }
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& buf) : buf_(&buf) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(static_cast<unsigned char>((*buf_)[pos_ + static_cast<size_t>(i)]))
           << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(static_cast<unsigned char>((*buf_)[pos_ + static_cast<size_t>(i)]))
           << (8 * i);
    }
    pos_ += 8;
    return v;
  }

  double f64() {
    const uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }

  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>((*buf_)[pos_++]);
  }

  std::string bytes(size_t n) {
    need(n);
    std::string s = buf_->substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_->size(); }

 private:
  void need(size_t n) {
    if (buf_->size() - pos_ < n) throw InvalidInputError("checkpoint: truncated data");
  }
  const std::string* buf_;
  size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  if (ck.names.size() != ck.tensors.size()) {
    throw InvalidInputError("checkpoint: name/tensor count mismatch");
  }
  std::string out;
  out.append(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, ck.config_digest);
  detail::put_u64(out, ck.step);
  detail::put_u32(out, static_cast<uint32_t>(ck.vocab.size()));
  out.append(reinterpret_cast<const char*>(ck.vocab.data()), ck.vocab.size());
  detail::put_u32(out, static_cast<uint32_t>(ck.meta.size()));
  out.append(ck.meta);
  detail::put_u32(out, static_cast<uint32_t>(ck.tensors.size()));
  for (size_t i = 0; i < ck.tensors.size(); ++i) {
    const std::string& name = ck.names[i];
    const Matrix& m = ck.tensors[i];
    detail::put_u32(out, static_cast<uint32_t>(name.size()));
    out.append(name);
    detail::put_u32(out, static_cast<uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<uint32_t>(m.cols()));
    out.push_back(m.field() == Field::Complex ? 1 : 0);
    for (double v : m.re_data()) detail::put_f64(out, v);
    for (double v : m.im_data()) detail::put_f64(out, v);
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& buf) {
  detail::ByteReader rd(buf);
  const std::string magic = rd.bytes(sizeof kCheckpointMagic);
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw InvalidInputError("checkpoint: bad magic");
  }
  const uint32_t version = rd.u32();
  if (version != kCheckpointVersion) {
    throw InvalidInputError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config_digest = rd.u64();
  ck.step = rd.u64();
  const uint32_t vn = rd.u32();
  const std::string vb = rd.bytes(vn);
  ck.vocab.assign(vb.begin(), vb.end());
  const uint32_t mn = rd.u32();
  ck.meta = rd.bytes(mn);
  const uint32_t tn = rd.u32();
  ck.names.reserve(tn);
  ck.tensors.reserve(tn);
  for (uint32_t i = 0; i < tn; ++i) {
    const uint32_t nl = rd.u32();
    ck.names.push_back(rd.bytes(nl));
    const uint32_t rows = rd.u32();
    const uint32_t cols = rd.u32();
    const uint8_t field = rd.u8();
    if (field > 1) throw InvalidInputError("checkpoint: bad field tag");
    if (rows == 0 || cols == 0 || rows > (1u << 20) || cols > (1u << 20)) {
      throw InvalidInputError("checkpoint: implausible tensor shape");
    }
    Matrix m(static_cast<int>(rows), static_cast<int>(cols),
             field == 1 ? Field::Complex : Field::Real);
    for (double& v : m.re_data()) v = rd.f64();
    for (double& v : m.im_data()) v = rd.f64();
    ck.tensors.push_back(std::move(m));
  }
  if (!rd.done()) throw InvalidInputError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string buf = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInputError("checkpoint: cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw InvalidInputError("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("checkpoint: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

// Packs parameters plus optimizer state. The parameter store's canonical
// order is preserved so restore needs no reordering.
inline Checkpoint make_checkpoint(const ParamStore& ps, const AdamState& adam, uint64_t step,
                                  uint64_t config_digest, const std::vector<uint8_t>& vocab,
                                  const std::string& meta = std::string()) {
  if (adam.m.size() != ps.values.size() || adam.v.size() != ps.values.size()) {
    throw InvalidInputError("checkpoint: moment count mismatch");
  }
  Checkpoint ck;
  ck.config_digest = config_digest;
  ck.step = step;
  ck.vocab = vocab;
  ck.meta = meta;
  for (size_t i = 0; i < ps.values.size(); ++i) {
    ck.names.push_back(ps.names[i]);
    ck.tensors.push_back(ps.values[i]);
  }
  for (size_t i = 0; i < ps.values.size(); ++i) {
    ck.names.push_back("opt/m/" + ps.names[i]);
    ck.tensors.push_back(adam.m[i]);
  }
  for (size_t i = 0; i < ps.values.size(); ++i) {
    ck.names.push_back("opt/v/" + ps.names[i]);
    ck.tensors.push_back(adam.v[i]);
  }
  Matrix t(1, 1, Field::Real);
  t.re(0, 0) = static_cast<double>(adam.t);
  ck.names.push_back("opt/t");
  ck.tensors.push_back(t);
  return ck;
}

// Restores parameters and optimizer state in place. Matches by name and
// rejects shape changes; missing tensors are an error.
inline void restore_training(const Checkpoint& ck, ParamStore& ps, AdamState& adam) {
  if (adam.m.size() != ps.values.size() || adam.v.size() != ps.values.size()) {
    throw InvalidInputError("checkpoint: moment count mismatch");
  }
  auto fetch = [&](const std::string& name, const Matrix& like) -> const Matrix& {
    const int idx = ck.index_of(name);
    if (idx < 0) throw InvalidInputError("checkpoint: missing tensor '" + name + "'");
    const Matrix& src = ck.tensors[static_cast<size_t>(idx)];
    if (!like.same_shape(src)) {
      throw InvalidInputError("checkpoint: shape mismatch for '" + name + "'");
    }
    return src;
  };
  for (size_t i = 0; i < ps.values.size(); ++i) {
    ps.values[i] = fetch(ps.names[i], ps.values[i]);
    adam.m[i] = fetch("opt/m/" + ps.names[i], adam.m[i]);
    adam.v[i] = fetch("opt/v/" + ps.names[i], adam.v[i]);
  }
  Matrix t_like(1, 1, Field::Real);
  adam.t = static_cast<int64_t>(fetch("opt/t", t_like).re(0, 0));
}

}  // namespace osm
