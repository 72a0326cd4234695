#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "bixnas/graph.hpp"

namespace bixnas {

// Weight file layout (little-endian):
//   "BIXW" | u32 version
//   repeated until EOF:
//     u32 name_len | name bytes | u32 rank (always 4) | u64 dims[4] | f64 data
// Values are stored as f64 regardless of the in-memory scalar type, so
// float-trained weights round-trip exactly.
using TensorMap = std::map<std::string, Tensor<double>>;

namespace detail {

inline void put_u32(std::ostream& os, u32 v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, u64 v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<u64>(v)); }

inline bool get_u32(std::istream& is, u32& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<u32>(b[i]) << (8 * i);
  return true;
}

inline bool get_u64(std::istream& is, u64& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<u64>(b[i]) << (8 * i);
  return true;
}

inline bool get_f64(std::istream& is, double& v) {
  u64 bits;
  if (!get_u64(is, bits)) return false;
  v = std::bit_cast<double>(bits);
  return true;
}

}  // namespace detail

inline void save_tensor_map(const std::string& path, const TensorMap& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("BIXW", 4);
  detail::put_u32(os, 1);
  for (const auto& [name, t] : tensors) {
    detail::put_u32(os, static_cast<u32>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, 4);
    detail::put_u64(os, static_cast<u64>(t.shape.b));
    detail::put_u64(os, static_cast<u64>(t.shape.c));
    detail::put_u64(os, static_cast<u64>(t.shape.h));
    detail::put_u64(os, static_cast<u64>(t.shape.w));
    for (double v : t.data) detail::put_f64(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline TensorMap load_tensor_map(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "BIXW", 4) != 0)
    throw IoError("bad weight file magic: " + path);
  u32 version;
  if (!detail::get_u32(is, version) || version != 1)
    throw IoError("unsupported weight file version in " + path);
  TensorMap out;
  u32 name_len;
  while (detail::get_u32(is, name_len)) {
    if (name_len > 4096) throw IoError("corrupt weight file (name too long): " + path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw IoError("truncated weight file: " + path);
    u32 rank;
    if (!detail::get_u32(is, rank) || rank != 4) throw IoError("bad tensor rank in " + path);
    u64 dims[4];
    for (auto& d : dims) {
      if (!detail::get_u64(is, d)) throw IoError("truncated weight file: " + path);
    }
    TensorShape shape{static_cast<i64>(dims[0]), static_cast<i64>(dims[1]),
                      static_cast<i64>(dims[2]), static_cast<i64>(dims[3])};
    Tensor<double> t(shape);
    for (auto& v : t.data) {
      if (!detail::get_f64(is, v)) throw IoError("truncated weight file: " + path);
    }
    if (!out.emplace(std::move(name), std::move(t)).second)
      throw IoError("duplicate tensor name in " + path);
  }
  return out;
}

template <class S>
void snapshot_tensor(const std::string& name, const Tensor<S>& t, TensorMap& out) {
  out[name] = cast<double>(t);
}

template <class S>
void restore_tensor(const TensorMap& in, const std::string& name, Tensor<S>& t) {
  auto it = in.find(name);
  if (it == in.end()) throw DataError("weight file is missing tensor: " + name);
  if (!(it->second.shape == t.shape))
    throw DataError("weight shape mismatch for " + name + ": file " + it->second.shape.str() +
                    " vs model " + t.shape.str());
  t = cast<S>(it->second);
}

template <class S>
void snapshot_params(const std::vector<ParamPtr<S>>& params, TensorMap& out) {
  for (const auto& p : params) snapshot_tensor(p->name, p->value, out);
}

template <class S>
void restore_params(const TensorMap& in, const std::vector<ParamPtr<S>>& params) {
  for (const auto& p : params) restore_tensor(in, p->name, p->value);
}

}  // namespace bixnas
