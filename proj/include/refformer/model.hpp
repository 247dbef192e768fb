#pragma once

// Full grounding model: dual encoder with QA blocks interleaved after the
// configured layers, multi-level fusion, referential-query decoder and heads.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refformer/backbone.hpp"
#include "refformer/config.hpp"
#include "refformer/decoder.hpp"
#include "refformer/nn.hpp"
#include "refformer/qa_module.hpp"

namespace refformer {

/// Backbone state after the last layer that no trainable parameter can
/// influence. With a frozen backbone it can be computed once per sample.
template <class T>
struct BackbonePrefix {
  std::size_t layer = 0;  // layers 1..layer already applied (0 = embeddings only)
  Tensor<T> image;        // [B, N_v+1, D]
  Tensor<T> text;         // [B, N_t, D]
  std::map<std::size_t, Tensor<T>> levels;  // fusion levels k < layer
};

template <class T>
struct ForwardOutput {
  PredictionSet<T> predictions;
  std::vector<PredictionSet<T>> aux;  // one per QA layer, ascending
  std::vector<QaTraceEntry<T>> trace;
  Tensor<T> prior;                    // queries handed to the decoder, [B, N_q, D_l]
  Tensor<T> decoder_attention;        // [B, N_q, N_v+1]
  Tensor<T> decoder_features;         // H_mm
};

template <class T>
class RefFormerModel {
 public:
  RefFormerModel() = default;
  explicit RefFormerModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const Philox root(cfg_.seed, 0);
    Philox r_backbone = root.split(1), r_qa = root.split(2), r_dec = root.split(3), r_aux = root.split(4),
           r_strategy = root.split(5);
    backbone = DualEncoder<T>(cfg_, r_backbone);
    qa = QaStack<T>(cfg_, r_qa);
    decoder = Decoder<T>(cfg_, r_dec);
    if (!qa.empty()) {
      aux_box = Mlp<T>(cfg_.qa_width, cfg_.qa_width, 4, r_aux);
      aux_cls = Mlp<T>(cfg_.qa_width, cfg_.qa_width, 2, r_aux);
    }
    if (cfg_.strategy == QueryStrategy::kRandomInit)
      random_queries = uniform_init<T>({cfg_.num_queries, cfg_.qa_width}, 1, r_strategy);
    if (cfg_.strategy == QueryStrategy::kLinguistic) linguistic_proj = Linear<T>(cfg_.width, cfg_.qa_width, r_strategy);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Last backbone layer before which nothing trainable acts.
  std::size_t prefix_layer() const { return cfg_.qa_layers.empty() ? cfg_.layers : cfg_.qa_layers.front(); }

  /// Embeds the inputs and runs backbone layers 1..prefix_layer() without QA.
  BackbonePrefix<T> compute_prefix(const Tensor<T>& patches, const TokenBatch& tokens) const {
    return compute_prefix(patches, tokens, prefix_layer());
  }

  BackbonePrefix<T> compute_prefix(const Tensor<T>& patches, const TokenBatch& tokens, std::size_t upto) const {
    BackbonePrefix<T> p;
    p.layer = upto;
    p.image = backbone.image.embed(patches);
    p.text = backbone.text.embed(tokens);
    for (std::size_t i = 1; i <= upto; ++i) {
      p.image = backbone.image.layer(i, p.image);
      p.text = backbone.text.layer(i, p.text, &tokens.key_mask);
      if (i < upto && is_fusion_layer(i)) p.levels[i] = p.image;
    }
    return p;
  }

  ForwardOutput<T> forward(const Tensor<T>& patches, const TokenBatch& tokens) const {
    return forward_from(compute_prefix(patches, tokens, 0), tokens);
  }

  /// Continues the forward pass from a prefix (computed with any upto layer).
  ForwardOutput<T> forward_from(const BackbonePrefix<T>& prefix, const TokenBatch& tokens) const {
    const std::vector<std::uint8_t>* mask = &tokens.key_mask;
    const std::size_t batch = prefix.image.dim(0);
    ForwardOutput<T> out;
    std::map<std::size_t, Tensor<T>> levels = prefix.levels;
    Tensor<T> zv = prefix.image, zt = prefix.text;
    Tensor<T> q;
    if (!qa.empty()) q = qa.initial_batch(batch);
    for (std::size_t i = prefix.layer; i <= cfg_.layers; ++i) {
      if (i > prefix.layer) {
        zv = backbone.image.layer(i, zv);
        zt = backbone.text.layer(i, zt, mask);
      }
      if (i == 0) continue;
      if (qa.has_layer(i)) {
        QaBlockOutput<T> o = qa.forward(i, zv, zt, q, mask);
        zv = o.image;
        zt = o.text;
        q = o.queries;
        out.trace.push_back(std::move(o.trace));
      }
      if (is_fusion_layer(i)) levels[i] = zv;
    }

    const Tensor<T> ht = decoder.project_text(zt);
    const Tensor<T> global = DualEncoder<T>::global_tokens(ht, tokens, cfg_.global_token);
    const Tensor<T> fused = decoder.language_guided_fusion(levels, global);
    out.prior = prior_queries(q, zt, tokens, batch);
    DecodeOutput<T> d = decoder.decode(out.prior, fused, ht, mask);
    out.predictions = decoder.grounding_head(d.targets);
    if (decoder.has_mask_head()) out.predictions.masks = decoder.segmentation_head(d.targets, d.features);
    out.decoder_attention = d.attention;
    out.decoder_features = d.features;
    for (const auto& entry : out.trace)
      out.aux.push_back({sigmoid(aux_box(entry.queries)), aux_cls(entry.queries), Tensor<T>()});
    return out;
  }

  void visit(const ParamVisitor<T>& fn) {
    backbone.visit("backbone", fn);
    qa.visit("qa", fn);
    decoder.visit("decoder", fn);
    if (aux_box.fc1.weight.defined()) {
      aux_box.visit("aux.box", fn);
      aux_cls.visit("aux.cls", fn);
    }
    if (random_queries.defined()) fn("strategy.random_queries", random_queries);
    if (linguistic_proj.weight.defined()) linguistic_proj.visit("strategy.linguistic_proj", fn);
  }

  /// Parameters in canonical visit order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  DualEncoder<T> backbone;
  QaStack<T> qa;
  Decoder<T> decoder;
  Mlp<T> aux_box, aux_cls;      // shared across QA layers, width D_l
  Tensor<T> random_queries;     // random-init strategy
  Linear<T> linguistic_proj;    // linguistic-embedding strategy

 private:
  bool is_fusion_layer(std::size_t i) const {
    return std::find(cfg_.fusion_layers.begin(), cfg_.fusion_layers.end(), i) != cfg_.fusion_layers.end();
  }

  Tensor<T> prior_queries(const Tensor<T>& qa_queries, const Tensor<T>& text_last, const TokenBatch& tokens,
                          std::size_t batch) const {
    const Shape shape{batch, cfg_.num_queries, cfg_.qa_width};
    switch (cfg_.strategy) {
      case QueryStrategy::kReferential:
        if (qa_queries.defined()) return qa_queries;
        return Tensor<T>(shape, T(0));
      case QueryStrategy::kRandomInit:
        return broadcast_to(random_queries, shape);
      case QueryStrategy::kLinguistic: {
        const Tensor<T> g = linguistic_proj(DualEncoder<T>::global_tokens(text_last, tokens, cfg_.global_token));
        return broadcast_to(reshape(g, Shape{batch, 1, cfg_.qa_width}), shape);
      }
      case QueryStrategy::kZero:
        return Tensor<T>(shape, T(0));
    }
    return Tensor<T>(shape, T(0));
  }

  ModelConfig cfg_;
};

/// Copies every parameter whose name starts with `prefix` from src into dst.
template <class T>
void copy_parameters(RefFormerModel<T>& dst, RefFormerModel<T>& src, const std::string& prefix) {
  std::map<std::string, Tensor<T>> from;
  for (auto& [name, t] : src.named_parameters())
    if (name.rfind(prefix, 0) == 0) from.emplace(name, t);
  for (auto& [name, t] : dst.named_parameters()) {
    if (name.rfind(prefix, 0) != 0) continue;
    auto it = from.find(name);
    if (it == from.end()) throw ContractError("copy_parameters: source lacks '" + name + "'");
    if (it->second.shape() != t.shape()) throw DimensionError("copy_parameters: shape mismatch for '" + name + "'");
    std::copy(it->second.data().begin(), it->second.data().end(), t.mutable_data().begin());
  }
}

}  // namespace refformer
