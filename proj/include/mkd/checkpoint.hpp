#pragma once

// Parameter checkpoint file:
//
//   "MKD1\n"                      5-byte version header
//   u64 little-endian             manifest length in bytes
//   manifest                      UTF-8 JSON {"meta": {...}, "tensors": [...]}
//   raw arrays                    little-endian f64, at manifest offsets
//
// Each tensors[] entry is {"name", "shape", "dtype": "f64", "offset", "nbytes"}
// with offset relative to the first byte after the manifest.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mkd/optim.hpp"

namespace mkd {

inline constexpr char kCheckpointMagic[] = "MKD1\n";

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> tensors;

  const NamedArray& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::out_of_range("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["meta"] = ckpt.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw DimensionError("checkpoint tensor '" + t.name + "' shape/data mismatch");
    const std::uint64_t nbytes = t.values.size() * 8;
    manifest["tensors"].push_back(
        {{"name", t.name}, {"shape", t.shape}, {"dtype", "f64"}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string mtext = manifest.dump();
  std::string out(kCheckpointMagic);
  detail::put_u64(out, mtext.size());
  out += mtext;
  out.reserve(out.size() + offset);
  for (const auto& t : ckpt.tensors)
    for (double v : t.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  const std::size_t magic_len = sizeof(kCheckpointMagic) - 1;
  if (bytes.size() < magic_len + 8 || bytes.compare(0, magic_len, kCheckpointMagic) != 0) {
    throw std::runtime_error("not an MKD1 checkpoint");
  }
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t mlen = detail::get_u64(base + magic_len);
  const std::size_t data_start = magic_len + 8 + mlen;
  if (data_start > bytes.size()) throw std::runtime_error("checkpoint manifest truncated");
  const auto manifest = nlohmann::json::parse(bytes.substr(magic_len + 8, mlen));
  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    if (e.at("dtype") != "f64") throw std::runtime_error("unsupported dtype " + e.at("dtype").dump());
    NamedArray t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::uint64_t>();
    const auto nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_numel(t.shape) * 8 || data_start + off + nbytes > bytes.size()) {
      throw std::runtime_error("checkpoint tensor '" + t.name + "' has inconsistent extent");
    }
    t.values.resize(nbytes / 8);
    for (std::size_t i = 0; i < t.values.size(); ++i)
      t.values[i] = std::bit_cast<double>(detail::get_u64(base + data_start + off + 8 * i));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

inline Checkpoint to_checkpoint(const ParameterStore& store, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint c;
  c.meta = std::move(meta);
  for (const auto& p : store.all())
    c.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  return c;
}

/// Copies checkpoint values into a store whose names and shapes must match.
inline void load_into(ParameterStore& store, const Checkpoint& c) {
  if (c.tensors.size() != store.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model expects " +
                             std::to_string(store.size()));
  }
  for (const auto& t : c.tensors) {
    auto& p = store.at(t.name);
    if (p.tensor.shape() != t.shape) {
      throw DimensionError("checkpoint tensor '" + t.name + "' has shape " + shape_str(t.shape) + ", model expects " +
                           shape_str(p.tensor.shape()));
    }
    std::copy(t.values.begin(), t.values.end(), p.tensor.mutable_data().begin());
  }
}

}  // namespace mkd
