#pragma once

// Query adaptation (QA) adapters. One QaBlock sits after each configured
// backbone layer: it projects both streams down, fuses them with learnable
// queries (CAMF), refines target context (TR), and injects a gated residual
// back into the frozen streams. Queries are chained from block to block.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refformer/config.hpp"
#include "refformer/nn.hpp"
#include "refformer/ops.hpp"

namespace refformer {

/// Diagnostics produced by one QA block.
template <class T>
struct QaTraceEntry {
  std::size_t layer = 0;
  Tensor<T> queries;          // Q^i, [B, N_q, D_l] (on the tape)
  Tensor<T> query_attention;  // TR query -> image weights, [B, N_q, N_v+1]
  Tensor<T> camf_image_attention;  // [r_v; Q; F_v] -> text, [B, 1+N_q+N_v+1, N_t]
  Tensor<T> camf_text_attention;   // [r_t; F_t] -> image, [B, 1+N_t, N_v+1] (absent for image-only/none)
};

template <class T>
struct CamfOutput {
  Tensor<T> reg_v;    // r_bar_v  [B, 1, D_l]
  Tensor<T> queries;  // Q_hat_c  [B, N_q, D_l]
  Tensor<T> image;    // F_hat_v  [B, N_v+1, D_l]
  Tensor<T> reg_t;    // r_bar_t  [B, 1, D_l] (undefined when the text path is skipped)
  Tensor<T> text;     // F_hat_t  [B, N_t, D_l] (equals F_t when the text path is skipped)
  Tensor<T> image_attention;
  Tensor<T> text_attention;
};

template <class T>
struct RefineOutput {
  Tensor<T> queries;  // Q^i
  Tensor<T> image;    // G_v (undefined when not injected)
  Tensor<T> text;     // G_t (undefined when not injected)
  Tensor<T> reg_v;    // r_tilde_v
  Tensor<T> reg_t;    // r_tilde_t
  Tensor<T> attention;  // [B, N_q, N_v+1]
};

template <class T>
struct QaBlockOutput {
  Tensor<T> queries;
  Tensor<T> image;  // Z_hat_v
  Tensor<T> text;   // Z_hat_t
  QaTraceEntry<T> trace;
};

inline bool injects_image(QaDirection d) { return d == QaDirection::kBoth || d == QaDirection::kImageOnly; }
inline bool injects_text(QaDirection d) { return d == QaDirection::kBoth || d == QaDirection::kTextOnly; }

template <class T>
class QaBlock {
 public:
  QaBlock() = default;
  QaBlock(std::size_t layer, const ModelConfig& cfg, Philox& rng)
      : layer_(layer),
        down_v(cfg.width, cfg.qa_width, rng),
        down_t(cfg.width, cfg.qa_width, rng),
        reg_v(uniform_init<T>({1, 1, cfg.qa_width}, cfg.qa_width, rng)),
        reg_t(uniform_init<T>({1, 1, cfg.qa_width}, cfg.qa_width, rng)),
        camf_image(cfg.qa_width, cfg.qa_heads, rng),
        camf_query_ln(cfg.qa_width),
        camf_image_ln(cfg.qa_width),
        camf_text(cfg.qa_width, cfg.qa_heads, rng),
        camf_text_ln(cfg.qa_width),
        tr_query(cfg.qa_width, cfg.qa_heads, rng),
        tr_query_mlp(cfg.qa_width, 4 * cfg.qa_width, cfg.qa_width, rng),
        tr_query_ln(cfg.qa_width),
        tr_image(cfg.qa_width, cfg.qa_heads, rng),
        tr_image_mlp(cfg.qa_width, 4 * cfg.qa_width, cfg.qa_width, rng),
        tr_image_ln(cfg.qa_width),
        tr_text(cfg.qa_width, cfg.qa_heads, rng),
        tr_text_mlp(cfg.qa_width, 4 * cfg.qa_width, cfg.qa_width, rng),
        tr_text_ln(cfg.qa_width),
        up_v(cfg.qa_width, cfg.width, rng),
        up_t(cfg.qa_width, cfg.width, rng) {}

  std::size_t layer() const { return layer_; }

  /// F_v = phi_vd(Z_v), F_t = phi_td(Z_t).
  std::pair<Tensor<T>, Tensor<T>> down_project(const Tensor<T>& z_image, const Tensor<T>& z_text) const {
    return {down_v(z_image), down_t(z_text)};
  }

  /// Condition aggregation and multi-modal fusion.
  CamfOutput<T> camf(const Tensor<T>& queries, const Tensor<T>& f_image, const Tensor<T>& f_text,
                     const std::vector<std::uint8_t>* text_mask, bool text_path = true) const {
    const std::size_t b = f_image.dim(0), nq = queries.dim(1), nv = f_image.dim(1), dl = f_image.dim(2);
    if (queries.dim(2) != dl || f_text.dim(2) != dl)
      throw DimensionError("camf: widths differ: Q" + shape_str(queries.shape()) + " F_v" +
                           shape_str(f_image.shape()) + " F_t" + shape_str(f_text.shape()));
    CamfOutput<T> out;
    const Tensor<T> rv = broadcast_to(reg_v, Shape{b, 1, dl});
    const Tensor<T> fused =
        camf_image(concat<T>({rv, queries, f_image}, 1), f_text, f_text, text_mask, &out.image_attention);
    out.reg_v = slice(fused, 1, 0, 1);
    out.queries = add(camf_query_ln(slice(fused, 1, 1, 1 + nq)), queries);
    out.image = add(camf_image_ln(slice(fused, 1, 1 + nq, 1 + nq + nv)), f_image);
    if (text_path) {
      const Tensor<T> rt = broadcast_to(reg_t, Shape{b, 1, dl});
      const Tensor<T> fused_t =
          camf_text(concat<T>({rt, f_text}, 1), f_image, f_image, nullptr, &out.text_attention);
      out.reg_t = slice(fused_t, 1, 0, 1);
      out.text = add(camf_text_ln(slice(fused_t, 1, 1, 1 + f_text.dim(1))), f_text);
    } else {
      out.text = f_text;
    }
    return out;
  }

  /// Target-related context refinement.
  RefineOutput<T> target_refine(const CamfOutput<T>& c, const std::vector<std::uint8_t>* text_mask,
                                bool image_path = true, bool text_path = true) const {
    RefineOutput<T> out;
    const Tensor<T> qv = tr_query(c.queries, c.image, c.image, nullptr, &out.attention);
    out.queries = add(tr_query_ln(tr_query_mlp(qv)), c.queries);
    if (image_path) {
      const std::size_t nv = c.image.dim(1);
      const Tensor<T> sa = tr_image(concat<T>({c.reg_v, c.image}, 1), c.image, c.image);
      out.reg_v = slice(sa, 1, 0, 1);
      out.image = add(tr_image_ln(tr_image_mlp(slice(sa, 1, 1, 1 + nv))), c.image);
    }
    if (text_path) {
      const std::size_t nt = c.text.dim(1);
      const Tensor<T> sa = tr_text(concat<T>({c.reg_t, c.text}, 1), c.text, c.text, text_mask);
      out.reg_t = slice(sa, 1, 0, 1);
      out.text = add(tr_text_ln(tr_text_mlp(slice(sa, 1, 1, 1 + nt))), c.text);
    }
    return out;
  }

  /// Z_hat = phi_u(G * sigmoid(r)) + Z for one stream.
  static Tensor<T> inject(const Linear<T>& up, const Tensor<T>& g, const Tensor<T>& reg, const Tensor<T>& z) {
    const Tensor<T> gate = broadcast_to(sigmoid(reg), g.shape());
    return add(up(mul(g, gate)), z);
  }

  std::pair<Tensor<T>, Tensor<T>> up_project_inject(const Tensor<T>& g_image, const Tensor<T>& g_text,
                                                    const Tensor<T>& reg_image, const Tensor<T>& reg_text,
                                                    const Tensor<T>& z_image, const Tensor<T>& z_text) const {
    return {inject(up_v, g_image, reg_image, z_image), inject(up_t, g_text, reg_text, z_text)};
  }

  QaBlockOutput<T> forward(const Tensor<T>& z_image, const Tensor<T>& z_text, const Tensor<T>& queries,
                           const std::vector<std::uint8_t>* text_mask, QaDirection direction) const {
    const bool to_image = injects_image(direction);
    const bool to_text = injects_text(direction);
    auto [f_image, f_text] = down_project(z_image, z_text);
    const CamfOutput<T> c = camf(queries, f_image, f_text, text_mask, to_text);
    const RefineOutput<T> r = target_refine(c, text_mask, to_image, to_text);
    QaBlockOutput<T> out;
    out.queries = r.queries;
    out.image = to_image ? inject(up_v, r.image, r.reg_v, z_image) : z_image;
    out.text = to_text ? inject(up_t, r.text, r.reg_t, z_text) : z_text;
    out.trace.layer = layer_;
    out.trace.queries = r.queries;
    out.trace.query_attention = r.attention;
    out.trace.camf_image_attention = c.image_attention;
    out.trace.camf_text_attention = c.text_attention;
    return out;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    down_v.visit(prefix + ".down_v", fn);
    down_t.visit(prefix + ".down_t", fn);
    fn(prefix + ".reg_v", reg_v);
    fn(prefix + ".reg_t", reg_t);
    camf_image.visit(prefix + ".camf_image", fn);
    camf_query_ln.visit(prefix + ".camf_query_ln", fn);
    camf_image_ln.visit(prefix + ".camf_image_ln", fn);
    camf_text.visit(prefix + ".camf_text", fn);
    camf_text_ln.visit(prefix + ".camf_text_ln", fn);
    tr_query.visit(prefix + ".tr_query", fn);
    tr_query_mlp.visit(prefix + ".tr_query_mlp", fn);
    tr_query_ln.visit(prefix + ".tr_query_ln", fn);
    tr_image.visit(prefix + ".tr_image", fn);
    tr_image_mlp.visit(prefix + ".tr_image_mlp", fn);
    tr_image_ln.visit(prefix + ".tr_image_ln", fn);
    tr_text.visit(prefix + ".tr_text", fn);
    tr_text_mlp.visit(prefix + ".tr_text_mlp", fn);
    tr_text_ln.visit(prefix + ".tr_text_ln", fn);
    up_v.visit(prefix + ".up_v", fn);
    up_t.visit(prefix + ".up_t", fn);
  }

 private:
  std::size_t layer_ = 0;

 public:
  Linear<T> down_v, down_t;
  Tensor<T> reg_v, reg_t;  // regulation tokens, [1, 1, D_l]
  MultiHeadAttention<T> camf_image;
  LayerNorm<T> camf_query_ln, camf_image_ln;
  MultiHeadAttention<T> camf_text;
  LayerNorm<T> camf_text_ln;
  MultiHeadAttention<T> tr_query;
  Mlp<T> tr_query_mlp;
  LayerNorm<T> tr_query_ln;
  MultiHeadAttention<T> tr_image;
  Mlp<T> tr_image_mlp;
  LayerNorm<T> tr_image_ln;
  MultiHeadAttention<T> tr_text;
  Mlp<T> tr_text_mlp;
  LayerNorm<T> tr_text_ln;
  Linear<T> up_v, up_t;
};

/// All QA blocks of a model plus the shared initial queries Q^0.
template <class T>
class QaStack {
 public:
  QaStack() = default;
  QaStack(const ModelConfig& cfg, Philox& rng)
      : initial_queries(uniform_init<T>({cfg.num_queries, cfg.qa_width}, 1, rng)),
        direction_(cfg.direction) {
    for (std::size_t layer : cfg.qa_layers) blocks_.emplace(layer, QaBlock<T>(layer, cfg, rng));
  }

  Tensor<T> initial_queries;  // Q^0, [N_q, D_l]

  bool empty() const { return blocks_.empty(); }
  bool has_layer(std::size_t i) const { return blocks_.count(i) != 0; }
  QaDirection direction() const { return direction_; }
  QaBlock<T>& block(std::size_t layer) { return blocks_.at(layer); }
  const QaBlock<T>& block(std::size_t layer) const { return blocks_.at(layer); }

  Tensor<T> initial_batch(std::size_t batch) const {
    return broadcast_to(initial_queries, Shape{batch, initial_queries.dim(0), initial_queries.dim(1)});
  }

  /// Runs the block attached to backbone layer i.
  QaBlockOutput<T> forward(std::size_t i, const Tensor<T>& z_image, const Tensor<T>& z_text,
                           const Tensor<T>& queries, const std::vector<std::uint8_t>* text_mask) const {
    auto it = blocks_.find(i);
    if (it == blocks_.end())
      throw ContractError("qa_forward: layer " + std::to_string(i) + " is not an insertion layer");
    return it->second.forward(z_image, z_text, queries, text_mask, direction_);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".initial_queries", initial_queries);
    for (auto& [layer, block] : blocks_) block.visit(prefix + ".layer" + std::to_string(layer), fn);
  }

 private:
  QaDirection direction_ = QaDirection::kBoth;
  std::map<std::size_t, QaBlock<T>> blocks_;
};

}  // namespace refformer
