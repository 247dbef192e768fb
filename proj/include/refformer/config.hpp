#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "refformer/ops.hpp"

namespace refformer {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Which backbone streams receive the adapter's residual injection.
enum class QaDirection { kBoth, kImageOnly, kTextOnly, kNone };

/// What the decoder receives as its prior query.
enum class QueryStrategy { kReferential, kRandomInit, kLinguistic, kZero };

/// Which text position acts as the global sentence token.
enum class GlobalToken { kSos, kEos };

/// Residual form of the decoder's condition-aggregation step:
///   kAsPrinted: O_c = LN(O_bar) + O_bar,  H_mm = LN(H_bar) + H_bar
///   kStandard:  O_c = LN(O_bar) + seed,   H_mm = LN(H_bar) + H_vml
enum class DecoderResidual { kAsPrinted, kStandard };

inline std::string to_string(QaDirection d) {
  switch (d) {
    case QaDirection::kBoth: return "both";
    case QaDirection::kImageOnly: return "image-only";
    case QaDirection::kTextOnly: return "text-only";
    case QaDirection::kNone: return "none";
  }
  return "?";
}

inline std::string to_string(QueryStrategy s) {
  switch (s) {
    case QueryStrategy::kReferential: return "referential";
    case QueryStrategy::kRandomInit: return "random-init";
    case QueryStrategy::kLinguistic: return "linguistic-embedding";
    case QueryStrategy::kZero: return "zero";
  }
  return "?";
}

inline std::string to_string(GlobalToken g) { return g == GlobalToken::kSos ? "sos" : "eos"; }

inline std::string to_string(DecoderResidual r) {
  return r == DecoderResidual::kAsPrinted ? "as-printed" : "standard";
}

inline std::string to_string(UpsampleMode m) {
  return m == UpsampleMode::kBilinear ? "bilinear" : "nearest";
}

inline QaDirection parse_direction(const std::string& s) {
  if (s == "both") return QaDirection::kBoth;
  if (s == "image-only") return QaDirection::kImageOnly;
  if (s == "text-only") return QaDirection::kTextOnly;
  if (s == "none") return QaDirection::kNone;
  throw ConfigError("unknown QA direction '" + s + "' (expected both|image-only|text-only|none)");
}

inline QueryStrategy parse_strategy(const std::string& s) {
  if (s == "referential") return QueryStrategy::kReferential;
  if (s == "random-init") return QueryStrategy::kRandomInit;
  if (s == "linguistic-embedding" || s == "linguistic") return QueryStrategy::kLinguistic;
  if (s == "zero") return QueryStrategy::kZero;
  throw ConfigError("unknown query strategy '" + s +
                    "' (expected referential|random-init|linguistic-embedding|zero)");
}

inline GlobalToken parse_global_token(const std::string& s) {
  if (s == "sos") return GlobalToken::kSos;
  if (s == "eos") return GlobalToken::kEos;
  throw ConfigError("unknown global token '" + s + "' (expected sos|eos)");
}

inline DecoderResidual parse_decoder_residual(const std::string& s) {
  if (s == "as-printed") return DecoderResidual::kAsPrinted;
  if (s == "standard") return DecoderResidual::kStandard;
  throw ConfigError("unknown decoder residual '" + s + "' (expected as-printed|standard)");
}

inline UpsampleMode parse_upsample(const std::string& s) {
  if (s == "bilinear") return UpsampleMode::kBilinear;
  if (s == "nearest") return UpsampleMode::kNearest;
  throw ConfigError("unknown upsample mode '" + s + "' (expected bilinear|nearest)");
}

/// Architecture hyperparameters for the dual encoder, adapters and decoder.
struct ModelConfig {
  // Dual encoder.
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t width = 64;
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t vocab_size = 20;
  std::size_t max_text_len = 12;

  // Query adaptation.
  std::vector<std::size_t> qa_layers{2, 4, 6};
  std::size_t qa_width = 32;
  std::size_t num_queries = 3;
  std::size_t qa_heads = 4;
  QaDirection direction = QaDirection::kBoth;

  // Decoder.
  std::vector<std::size_t> fusion_layers{2, 4, 6};
  std::size_t decoder_heads = 4;
  QueryStrategy strategy = QueryStrategy::kReferential;
  GlobalToken global_token = GlobalToken::kSos;
  DecoderResidual decoder_residual = DecoderResidual::kAsPrinted;
  bool seg_head = false;
  UpsampleMode mask_upsample = UpsampleMode::kBilinear;

  std::uint64_t seed = 0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t image_tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  bool has_qa_layer(std::size_t i) const {
    for (std::size_t l : qa_layers)
      if (l == i) return true;
    return false;
  }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size must be divisible by patch_size");
    if (width == 0 || heads == 0 || width % heads != 0)
      throw ConfigError("width must be a positive multiple of heads");
    if (layers == 0) throw ConfigError("layers must be positive");
    if (max_text_len < 2) throw ConfigError("max_text_len must hold SOS and EOS");
    if (qa_width == 0 || qa_width >= width)
      throw ConfigError("qa_width must satisfy 0 < qa_width < width");
    if (qa_heads == 0 || qa_width % qa_heads != 0)
      throw ConfigError("qa_width must be a multiple of qa_heads");
    if (decoder_heads == 0 || width % decoder_heads != 0)
      throw ConfigError("width must be a multiple of decoder_heads");
    if (num_queries == 0) throw ConfigError("num_queries must be positive");
    for (std::size_t i = 0; i < qa_layers.size(); ++i) {
      if (qa_layers[i] < 1 || qa_layers[i] > layers)
        throw ConfigError("qa layer " + std::to_string(qa_layers[i]) + " outside [1, " +
                          std::to_string(layers) + "]");
      if (i > 0 && qa_layers[i] <= qa_layers[i - 1])
        throw ConfigError("qa layers must be strictly increasing");
    }
    if (fusion_layers.empty()) throw ConfigError("fusion layer set must be nonempty");
    for (std::size_t i = 0; i < fusion_layers.size(); ++i) {
      if (fusion_layers[i] < 1 || fusion_layers[i] > layers)
        throw ConfigError("fusion layer " + std::to_string(fusion_layers[i]) + " outside [1, " +
                          std::to_string(layers) + "]");
      if (i > 0 && fusion_layers[i] <= fusion_layers[i - 1])
        throw ConfigError("fusion layers must be strictly increasing");
    }
  }
};

/// Per-term loss weights.
struct LossWeights {
  double iou = 3.0;
  double l1 = 1.0;
  double ce = 1.0;
  double aux = 0.1;
  double focal = 5.0;
  double dice = 1.0;
  double no_object = 0.1;

  void validate() const {
    for (double w : {iou, l1, ce, aux, focal, dice, no_object})
      if (!std::isfinite(w) || w < 0.0) throw ConfigError("loss weights must be finite and >= 0");
  }
};

}  // namespace refformer
