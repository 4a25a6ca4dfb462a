#pragma once

// Checkpoint file, version 1. All integers and doubles little-endian.
//
//   magic        8 bytes  "ICACKPT\0"
//   version      u32      1
//   vocab, dim, layers, heads, max_context, query_offset   i32 each
//   init_std     f64
//   seed         u64
//   n_tensors    u32
//   per tensor:  name_len u32, name bytes, rank u32, dims u64[rank], values f64[prod(dims)]
//
// Identical parameters always produce identical bytes.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ica/error.hpp"
#include "ica/model.hpp"

namespace ica {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 8> kCheckpointMagic = {'I', 'C', 'A', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error("checkpoint truncated");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  const auto& c = p.config();
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  for (int v : {c.vocab, c.dim, c.layers, c.heads, c.max_context, c.query_offset}) detail::put<std::int32_t>(out, v);
  detail::put<double>(out, c.init_std);
  detail::put<std::uint64_t>(out, c.seed);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.layout().tensors().size()));
  for (const auto& t : p.layout().tensors()) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(p.data() + t.offset), static_cast<std::streamsize>(t.size * sizeof(double)));
  }
  if (!out) throw Error("write failed: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) throw Error(path + ": not a checkpoint file");
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw Error(path + ": unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.vocab = detail::get<std::int32_t>(in);
  c.dim = detail::get<std::int32_t>(in);
  c.layers = detail::get<std::int32_t>(in);
  c.heads = detail::get<std::int32_t>(in);
  c.max_context = detail::get<std::int32_t>(in);
  c.query_offset = detail::get<std::int32_t>(in);
  c.init_std = detail::get<double>(in);
  c.seed = detail::get<std::uint64_t>(in);
  ModelParams p(c);
  const auto n = detail::get<std::uint32_t>(in);
  if (n != p.layout().tensors().size()) throw Error(path + ": tensor count does not match config");
  for (const auto& t : p.layout().tensors()) {
    const auto len = detail::get<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in || name != t.name) throw Error(path + ": expected tensor " + t.name);
    const auto rank = detail::get<std::uint32_t>(in);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::get<std::uint64_t>(in));
    if (shape != t.shape) throw Error(path + ": shape mismatch for " + t.name);
    in.read(reinterpret_cast<char*>(p.data() + t.offset), static_cast<std::streamsize>(t.size * sizeof(double)));
    if (!in) throw Error("checkpoint truncated");
  }
  return p;
}

}  // namespace ica
