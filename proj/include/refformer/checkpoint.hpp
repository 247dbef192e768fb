#pragma once

// Binary checkpoints: "RFCK", u32 version, then named float32 tensors
// (u32 name length, name, u32 ndim, u32 dims[], LE float32 data), then a
// CRC32 of everything before it. All integers are little-endian.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "refformer/tensor.hpp"

namespace refformer {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw CheckpointError("checkpoint truncated at offset " + std::to_string(pos));
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  pos += 4;
  return v;
}

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(len)));
}

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out = "RFCK";
  detail::put_u32(out, kCheckpointVersion);
  for (const auto& t : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (std::uint32_t d : t.dims) detail::put_u32(out, d);
    for (float v : t.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  detail::put_u32(out, detail::crc32_of(out, out.size()));
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 4, "RFCK") != 0)
    throw CheckpointError("checkpoint: bad magic at offset 0");
  const std::size_t body = bytes.size() - 4;
  std::size_t crc_pos = body;
  const std::uint32_t stored = detail::get_u32(bytes, crc_pos);
  if (stored != detail::crc32_of(bytes, body))
    throw CheckpointError("checkpoint: CRC mismatch (trailer at offset " + std::to_string(body) + ")");
  std::size_t pos = 4;
  const std::uint32_t version = detail::get_u32(bytes, pos);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
  std::vector<NamedTensor> out;
  while (pos < body) {
    const std::size_t entry = pos;
    NamedTensor t;
    const std::uint32_t len = detail::get_u32(bytes, pos);
    if (pos + len > body) throw CheckpointError("checkpoint: name overruns payload at offset " + std::to_string(entry));
    t.name = bytes.substr(pos, len);
    pos += len;
    const std::uint32_t ndim = detail::get_u32(bytes, pos);
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      t.dims.push_back(detail::get_u32(bytes, pos));
      count *= t.dims.back();
    }
    if (pos + count * 4 > body)
      throw CheckpointError("checkpoint: tensor '" + t.name + "' overruns payload at offset " + std::to_string(entry));
    t.data.resize(count);
    for (auto& v : t.data) v = std::bit_cast<float>(detail::get_u32(bytes, pos));
    out.push_back(std::move(t));
  }
  return out;
}

/// Snapshot of parameters (optionally only those under `prefix`) as
/// float32, in visit order.
template <class Model>
std::vector<NamedTensor> collect_parameters(Model& model, const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  std::set<std::string> seen;
  for (auto& [name, t] : model.named_parameters()) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (!seen.insert(name).second) throw CheckpointError("duplicate parameter name '" + name + "'");
    NamedTensor n;
    n.name = name;
    for (std::size_t d : t.shape()) n.dims.push_back(static_cast<std::uint32_t>(d));
    for (auto v : t.data()) n.data.push_back(static_cast<float>(v));
    out.push_back(std::move(n));
  }
  return out;
}

template <class Model>
std::string encode_model(Model& model, const std::string& prefix = "") {
  return encode_checkpoint(collect_parameters(model, prefix));
}

/// Loads every parameter under `prefix` by name; the table must match that
/// subset of the model exactly.
template <class Model>
void load_model(Model& model, const std::string& bytes, const std::string& prefix = "") {
  std::map<std::string, NamedTensor> table;
  for (auto& t : decode_checkpoint(bytes))
    if (!table.emplace(t.name, std::move(t)).second) throw CheckpointError("checkpoint: duplicate entry");
  std::size_t used = 0;
  for (auto& [name, t] : model.named_parameters()) {
    if (name.rfind(prefix, 0) != 0) continue;
    auto it = table.find(name);
    if (it == table.end()) throw CheckpointError("checkpoint: missing parameter '" + name + "'");
    Shape s(it->second.dims.begin(), it->second.dims.end());
    if (s != t.shape())
      throw CheckpointError("checkpoint: '" + name + "' has shape " + shape_str(s) + ", model expects " +
                            shape_str(t.shape()));
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<typename decltype(dst)::value_type>(it->second.data[i]);
    ++used;
  }
  if (used != table.size()) throw CheckpointError("checkpoint: contains parameters the model does not have");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace refformer
