#pragma once

// Flat key=value run configuration. Every key has a default; unknown keys
// and malformed values are rejected.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "refformer/config.hpp"
#include "refformer/scene.hpp"
#include "refformer/train.hpp"

namespace refformer {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PretrainConfig pretrain;
  std::string data_path;
  std::string out_dir = "run";
  std::uint64_t data_seed = 0;
  std::size_t data_count = 5000;

  bool operator==(const RunConfig& o) const { return to_text() == o.to_text(); }

  void validate() const {
    model.validate();
    train.weights.validate();
    if (train.batch_size == 0 || pretrain.batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (!(train.lr > 0.0) || !(pretrain.lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(pretrain.temperature > 0.0)) throw ConfigError("temperature must be positive");
  }

  /// Canonical text: one "key = value" per line in fixed key order.
  std::string to_text() const {
    std::string out;
    for (const auto& [key, field] : fields())
      out += key + " = " + field.get(*this) + "\n";
    return out;
  }

  void set(const std::string& key, const std::string& value) {
    const auto f = fields();
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second.set(*this, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }

  static RunConfig parse(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    c.validate();
    return c;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static std::vector<std::size_t> parse_layers(const std::string& v) {
    std::vector<std::size_t> out;
    std::string s = v;
    if (s == "none") return out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      out.push_back(static_cast<std::size_t>(parse_uint(item)));
    }
    return out;
  }

  static std::string format_layers(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  }

  static std::uint64_t parse_uint(const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a nonnegative integer, got '" + v + "'");
    return out;
  }

  static double parse_double(const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
    return out;
  }

  static bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("expected true|false, got '" + v + "'");
  }

  static std::string format_double(double v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
  }

 private:
  struct Field {
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
  };

  static std::map<std::string, Field> fields() {
    std::map<std::string, Field> f;
#define RF_SIZE(key, expr)                                                                     \
  f[key] = {[](const RunConfig& c) { return std::to_string(c.expr); },                        \
            [](RunConfig& c, const std::string& v) { c.expr = static_cast<std::size_t>(parse_uint(v)); }}
#define RF_U64(key, expr)                                                                      \
  f[key] = {[](const RunConfig& c) { return std::to_string(c.expr); },                        \
            [](RunConfig& c, const std::string& v) { c.expr = parse_uint(v); }}
#define RF_DOUBLE(key, expr)                                                                   \
  f[key] = {[](const RunConfig& c) { return format_double(c.expr); },                         \
            [](RunConfig& c, const std::string& v) { c.expr = parse_double(v); }}
#define RF_BOOL(key, expr)                                                                     \
  f[key] = {[](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); },        \
            [](RunConfig& c, const std::string& v) { c.expr = parse_bool(v); }}
#define RF_ENUM(key, expr, parser)                                                             \
  f[key] = {[](const RunConfig& c) { return to_string(c.expr); },                             \
            [](RunConfig& c, const std::string& v) { c.expr = parser(v); }}
#define RF_LAYERS(key, expr)                                                                   \
  f[key] = {[](const RunConfig& c) { return format_layers(c.expr); },                         \
            [](RunConfig& c, const std::string& v) { c.expr = parse_layers(v); }}
#define RF_STRING(key, expr)                                                                   \
  f[key] = {[](const RunConfig& c) { return c.expr; }, [](RunConfig& c, const std::string& v) { c.expr = v; }}

    RF_U64("seed", model.seed);
    RF_SIZE("image_size", model.image_size);
    RF_SIZE("patch_size", model.patch_size);
    RF_SIZE("width", model.width);
    RF_SIZE("layers", model.layers);
    RF_SIZE("heads", model.heads);
    RF_SIZE("mlp_ratio", model.mlp_ratio);
    RF_SIZE("vocab_size", model.vocab_size);
    RF_SIZE("max_text_len", model.max_text_len);
    RF_LAYERS("qa_layers", model.qa_layers);
    RF_SIZE("qa_width", model.qa_width);
    RF_SIZE("num_queries", model.num_queries);
    RF_SIZE("qa_heads", model.qa_heads);
    RF_ENUM("direction", model.direction, parse_direction);
    RF_LAYERS("fusion_layers", model.fusion_layers);
    RF_SIZE("decoder_heads", model.decoder_heads);
    RF_ENUM("strategy", model.strategy, parse_strategy);
    RF_ENUM("global_token", model.global_token, parse_global_token);
    RF_ENUM("decoder_residual", model.decoder_residual, parse_decoder_residual);
    RF_BOOL("seg_head", model.seg_head);
    RF_ENUM("mask_upsample", model.mask_upsample, parse_upsample);

    RF_SIZE("epochs", train.epochs);
    RF_SIZE("batch_size", train.batch_size);
    RF_DOUBLE("lr", train.lr);
    RF_DOUBLE("weight_decay", train.weight_decay);
    RF_DOUBLE("clip_norm", train.clip_norm);
    RF_U64("train_seed", train.seed);
    RF_BOOL("freeze", train.freeze_backbone);
    RF_DOUBLE("lambda_iou", train.weights.iou);
    RF_DOUBLE("lambda_l1", train.weights.l1);
    RF_DOUBLE("lambda_ce", train.weights.ce);
    RF_DOUBLE("lambda_aux", train.weights.aux);
    RF_DOUBLE("lambda_focal", train.weights.focal);
    RF_DOUBLE("lambda_dice", train.weights.dice);
    RF_DOUBLE("no_object_weight", train.weights.no_object);

    RF_SIZE("pretrain_epochs", pretrain.epochs);
    RF_SIZE("pretrain_batch_size", pretrain.batch_size);
    RF_DOUBLE("pretrain_lr", pretrain.lr);
    RF_DOUBLE("pretrain_temperature", pretrain.temperature);

    RF_STRING("data", data_path);
    RF_STRING("out_dir", out_dir);
    RF_U64("data_seed", data_seed);
    RF_SIZE("data_count", data_count);
#undef RF_SIZE
#undef RF_U64
#undef RF_DOUBLE
#undef RF_BOOL
#undef RF_ENUM
#undef RF_LAYERS
#undef RF_STRING
    return f;
  }
};

}  // namespace refformer
