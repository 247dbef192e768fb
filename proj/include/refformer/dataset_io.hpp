#pragma once

// JSON-lines dataset files. A full record carries
//   {"seed", "tokens", "box": [cx, cy, w, h], "image": base64 LE float32,
//    "mask": {"size": [h, w], "counts": [...]}}
// and a seeds-only record carries just {"seed"}; it is regenerated on load.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refformer/hash.hpp"
#include "refformer/scene.hpp"

namespace refformer {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Run lengths of a binary mask in raster order, starting with a run of
/// zeros (possibly empty).
inline std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& mask) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (std::uint8_t v : mask) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      counts.push_back(run);
      run = 0;
      current = bit;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

inline std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& counts, std::size_t total) {
  std::vector<std::uint8_t> mask;
  mask.reserve(total);
  std::uint8_t bit = 0;
  for (std::uint32_t c : counts) {
    mask.insert(mask.end(), c, bit);
    bit ^= 1;
  }
  if (mask.size() != total)
    throw DatasetError("rle: decoded " + std::to_string(mask.size()) + " pixels, expected " + std::to_string(total));
  return mask;
}

inline std::vector<std::uint8_t> float32_le_bytes(const std::vector<float>& values) {
  std::vector<std::uint8_t> out(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return out;
}

inline std::vector<float> float32_from_le_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % 4 != 0) throw DatasetError("float32 payload length not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline nlohmann::json sample_to_json(const GroundingSample& s, std::size_t image_size, bool seeds_only) {
  nlohmann::json j;
  j["seed"] = s.seed;
  if (seeds_only) return j;
  j["tokens"] = s.tokens;
  j["box"] = {s.box.cx, s.box.cy, s.box.w, s.box.h};
  j["image"] = base64_encode(float32_le_bytes(s.image));
  j["mask"] = {{"size", {image_size, image_size}}, {"counts", rle_encode(s.mask)}};
  return j;
}

inline GroundingSample sample_from_json(const nlohmann::json& j, const GeneratorConfig& cfg) {
  if (!j.contains("seed")) throw DatasetError("record without seed");
  const std::uint64_t seed = j.at("seed").get<std::uint64_t>();
  if (!j.contains("image")) return generate_scene(seed, cfg);
  GroundingSample s;
  s.seed = seed;
  s.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
  s.words = detokenize(s.tokens);
  const auto box = j.at("box").get<std::vector<double>>();
  if (box.size() != 4) throw DatasetError("box must have 4 values");
  s.box = {box[0], box[1], box[2], box[3]};
  s.image = float32_from_le_bytes(base64_decode(j.at("image").get<std::string>()));
  const auto size = j.at("mask").at("size").get<std::vector<std::size_t>>();
  if (size.size() != 2) throw DatasetError("mask size must be [h, w]");
  s.mask = rle_decode(j.at("mask").at("counts").get<std::vector<std::uint32_t>>(), size[0] * size[1]);
  if (s.image.size() != size[0] * size[1] * 3) throw DatasetError("image and mask extents disagree");
  return s;
}

/// Serialized dataset text (one JSON object per line).
inline std::string serialize_dataset(const std::vector<GroundingSample>& samples, std::size_t image_size,
                                     bool seeds_only = false) {
  std::string out;
  for (const auto& s : samples) {
    out += sample_to_json(s, image_size, seeds_only).dump();
    out += '\n';
  }
  return out;
}

inline void write_dataset(const std::string& path, const std::vector<GroundingSample>& samples,
                          std::size_t image_size, bool seeds_only = false) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DatasetError("cannot open '" + path + "' for writing");
  const std::string text = serialize_dataset(samples, image_size, seeds_only);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw DatasetError("write to '" + path + "' failed");
}

inline std::vector<GroundingSample> read_dataset(const std::string& path, const GeneratorConfig& cfg = {}) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot open '" + path + "'");
  std::vector<GroundingSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line), cfg));
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace refformer
