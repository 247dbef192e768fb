#pragma once

// Language-guided multi-level fusion, the referential-query decoder and the
// grounding / segmentation heads.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "refformer/backbone.hpp"
#include "refformer/config.hpp"
#include "refformer/nn.hpp"
#include "refformer/ops.hpp"

namespace refformer {

/// Batched predictions: boxes [B, N_q, 4] normalized cxcywh, logits
/// [B, N_q, 2] ordered (no-object, object), masks [B, N_q, H, W] or undefined.
template <class T>
struct PredictionSet {
  Tensor<T> boxes;
  Tensor<T> logits;
  Tensor<T> masks;
};

template <class T>
struct DecodeOutput {
  Tensor<T> targets;    // O     [B, N_q, D]
  Tensor<T> features;   // H_mm  [B, N_v+1, D]
  Tensor<T> attention;  // O_c -> H_mm weights [B, N_q, N_v+1]
};

template <class T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const ModelConfig& cfg, Philox& rng)
      : fusion_layers_(cfg.fusion_layers),
        residual_(cfg.decoder_residual),
        grid_(cfg.grid()),
        image_size_(cfg.image_size),
        upsample_mode_(cfg.mask_upsample),
        text_proj(cfg.width, cfg.width, rng),
        merge(cfg.width * cfg.fusion_layers.size(), cfg.width, rng),
        query_gate(cfg.qa_width, cfg.width, cfg.width, rng),
        query_offset(constant_param<T>({cfg.num_queries, cfg.width}, T(0))),
        condition_attn(cfg.width, cfg.decoder_heads, rng),
        query_ln(cfg.width),
        feature_ln(cfg.width),
        target_attn(cfg.width, cfg.decoder_heads, rng),
        target_proj(cfg.width, cfg.width, rng),
        target_ln(cfg.width),
        box_head(cfg.width, cfg.width, 4, rng),
        class_head(cfg.width, cfg.width, 2, rng) {
    for (std::size_t k : cfg.fusion_layers) {
      level_proj.emplace(k, Linear<T>(cfg.width, cfg.width, rng));
      level_attn.emplace(k, MultiHeadAttention<T>(cfg.width, cfg.decoder_heads, rng));
    }
    if (cfg.seg_head) mask_head = Mlp<T>(cfg.width, cfg.width, cfg.width, rng);
  }

  const std::vector<std::size_t>& fusion_layers() const { return fusion_layers_; }
  bool has_mask_head() const { return mask_head.fc1.weight.defined(); }
  DecoderResidual residual() const { return residual_; }
  void set_residual(DecoderResidual r) { residual_ = r; }

  /// H_t = phi_mt(Z_t^last), [B, N_t, D].
  Tensor<T> project_text(const Tensor<T>& z_text) const { return text_proj(z_text); }

  /// levels: layer index -> Z_hat_v^k, [B, N_v+1, D]. text_global: H_t rows
  /// of the global token, [B, D]. Returns H_vml, [B, N_v+1, D].
  Tensor<T> language_guided_fusion(const std::map<std::size_t, Tensor<T>>& levels,
                                   const Tensor<T>& text_global) const {
    const std::size_t b = text_global.dim(0), d = text_global.dim(1);
    const Tensor<T> key = reshape(text_global, Shape{b, 1, d});
    std::vector<Tensor<T>> fused;
    for (std::size_t k : fusion_layers_) {
      auto it = levels.find(k);
      if (it == levels.end())
        throw ContractError("language_guided_fusion: level " + std::to_string(k) + " missing");
      const Tensor<T> h = level_proj.at(k)(it->second);
      fused.push_back(add(level_attn.at(k)(h, key, key), h));
    }
    return merge(fused.size() == 1 ? fused[0] : concat<T>(fused, 2));
  }

  /// Decodes prior queries Q [B, N_q, D_l] against H_vml and H_t.
  DecodeOutput<T> decode(const Tensor<T>& prior, const Tensor<T>& fused, const Tensor<T>& text,
                         const std::vector<std::uint8_t>* text_mask) const {
    const std::size_t nq = prior.dim(1);
    if (nq != query_offset.dim(0))
      throw ContractError("decode: " + std::to_string(nq) + " prior queries but Q' has " +
                          std::to_string(query_offset.dim(0)) + " rows");
    const Tensor<T> seed = add(query_gate(prior), query_offset);
    const Tensor<T> joint = condition_attn(concat<T>({seed, fused}, 1), text, text, text_mask);
    const Tensor<T> oc_bar = slice(joint, 1, 0, nq);
    const Tensor<T> hmm_bar = slice(joint, 1, nq, joint.dim(1));
    const bool printed = residual_ == DecoderResidual::kAsPrinted;
    DecodeOutput<T> out;
    const Tensor<T> oc = add(query_ln(oc_bar), printed ? oc_bar : seed);
    out.features = add(feature_ln(hmm_bar), printed ? hmm_bar : fused);
    const Tensor<T> o_bar = target_attn(oc, out.features, out.features, nullptr, &out.attention);
    out.targets = add(target_ln(target_proj(o_bar)), o_bar);
    return out;
  }

  /// Boxes are sigmoid(phi_box(O)); logits are phi_cls(O).
  PredictionSet<T> grounding_head(const Tensor<T>& targets) const {
    return {sigmoid(box_head(targets)), class_head(targets), Tensor<T>()};
  }

  /// Per-query pixel masks [B, N_q, H, W] in (0, 1).
  Tensor<T> segmentation_head(const Tensor<T>& targets, const Tensor<T>& features) const {
    if (!has_mask_head()) throw ContractError("segmentation_head: model built without a mask head");
    const std::size_t b = targets.dim(0), nq = targets.dim(1);
    const std::size_t spatial = features.dim(1) - 1;
    if (spatial != grid_ * grid_)
      throw DimensionError("segmentation_head: " + std::to_string(spatial) + " spatial tokens do not form a " +
                           std::to_string(grid_) + "x" + std::to_string(grid_) + " grid");
    const Tensor<T> embed = mask_head(targets);
    const Tensor<T> tokens = slice(features, 1, 1, features.dim(1));
    const Tensor<T> logits = reshape(matmul_nt(embed, tokens), Shape{b, nq, grid_, grid_});
    return sigmoid(upsample(logits, image_size_, image_size_, upsample_mode_));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    text_proj.visit(prefix + ".text_proj", fn);
    for (auto& [k, lin] : level_proj) lin.visit(prefix + ".level" + std::to_string(k) + ".proj", fn);
    for (auto& [k, att] : level_attn) att.visit(prefix + ".level" + std::to_string(k) + ".attn", fn);
    merge.visit(prefix + ".merge", fn);
    query_gate.visit(prefix + ".query_gate", fn);
    fn(prefix + ".query_offset", query_offset);
    condition_attn.visit(prefix + ".condition_attn", fn);
    query_ln.visit(prefix + ".query_ln", fn);
    feature_ln.visit(prefix + ".feature_ln", fn);
    target_attn.visit(prefix + ".target_attn", fn);
    target_proj.visit(prefix + ".target_proj", fn);
    target_ln.visit(prefix + ".target_ln", fn);
    box_head.visit(prefix + ".box_head", fn);
    class_head.visit(prefix + ".class_head", fn);
    if (has_mask_head()) mask_head.visit(prefix + ".mask_head", fn);
  }

 private:
  std::vector<std::size_t> fusion_layers_;
  DecoderResidual residual_ = DecoderResidual::kAsPrinted;
  std::size_t grid_ = 8;
  std::size_t image_size_ = 64;
  UpsampleMode upsample_mode_ = UpsampleMode::kBilinear;

 public:
  Linear<T> text_proj;                                  // phi_mt
  std::map<std::size_t, Linear<T>> level_proj;          // phi_mv^k
  std::map<std::size_t, MultiHeadAttention<T>> level_attn;
  Linear<T> merge;                                      // phi_vml
  Mlp<T> query_gate;                                    // phi_q
  Tensor<T> query_offset;                               // Q', zero-initialized
  MultiHeadAttention<T> condition_attn;
  LayerNorm<T> query_ln, feature_ln;
  MultiHeadAttention<T> target_attn;
  Linear<T> target_proj;                                // phi_r
  LayerNorm<T> target_ln;
  Mlp<T> box_head, class_head;
  Mlp<T> mask_head;
};

/// Index of the query with the highest object probability. Ties resolve to
/// the lowest index.
template <class T>
std::size_t select_prediction(std::span<const T> logits, std::size_t num_queries) {
  if (num_queries == 0 || logits.size() != 2 * num_queries)
    throw ContractError("select_prediction: expected " + std::to_string(2 * num_queries) + " logits");
  std::size_t best = 0;
  double best_margin = 0.0;
  for (std::size_t q = 0; q < num_queries; ++q) {
    const double margin = static_cast<double>(logits[2 * q + 1]) - static_cast<double>(logits[2 * q]);
    if (q == 0 || margin > best_margin) {
      best = q;
      best_margin = margin;
    }
  }
  return best;
}

}  // namespace refformer
