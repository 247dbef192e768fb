#pragma once

// Training and evaluation harness: batching, the L_final training step,
// contrastive backbone pretraining, evaluation and strategy comparisons.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refformer/losses.hpp"
#include "refformer/model.hpp"
#include "refformer/optim.hpp"
#include "refformer/scene.hpp"

namespace refformer {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  bool freeze_backbone = true;
  LossWeights weights;
  std::size_t eval_batch = 64;
};

struct PretrainConfig {
  std::size_t epochs = 4;
  std::size_t batch_size = 32;
  double lr = 3e-4;
  double temperature = 0.1;
  std::uint64_t seed = 0;
};

/// One sample prepared for the model: patches and padded token ids.
template <class T>
struct PreparedSample {
  std::vector<T> patches;  // N_v x 3P^2
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> caption;  // pretraining text; the expression when the scene is unknown
  Box box;
  std::vector<std::uint8_t> mask;
};

template <class T>
std::vector<PreparedSample<T>> prepare(const std::vector<GroundingSample>& samples, const ModelConfig& cfg) {
  std::vector<PreparedSample<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.tokens.size() != cfg.max_text_len)
      throw DimensionError("prepare: sample has " + std::to_string(s.tokens.size()) + " tokens, model expects " +
                           std::to_string(cfg.max_text_len));
    std::vector<T> img(s.image.begin(), s.image.end());
    PreparedSample<T> p;
    p.patches = patchify<T>(img, cfg.image_size, cfg.image_size, cfg.patch_size);
    p.tokens = s.tokens;
    p.caption = s.objects.empty() ? s.tokens : tokenize(scene_caption(s.objects, cfg.max_text_len - 2), cfg.max_text_len);
    p.box = s.box;
    p.mask = s.mask;
    out.push_back(std::move(p));
  }
  return out;
}

template <class T>
struct Batch {
  Tensor<T> patches;
  TokenBatch tokens;
  std::vector<std::vector<Box>> targets;
  Tensor<T> masks;  // [B, H, W] binary, or undefined
};

template <class T>
Batch<T> make_batch(const std::vector<PreparedSample<T>>& data, const std::vector<std::size_t>& idx,
                    const ModelConfig& cfg, bool with_masks, bool captions = false) {
  Batch<T> b;
  const std::size_t n = idx.size();
  std::vector<T> patches;
  patches.reserve(n * cfg.num_patches() * cfg.patch_dim());
  std::vector<const std::vector<std::int32_t>*> seqs;
  std::vector<T> masks;
  for (std::size_t i : idx) {
    const auto& s = data.at(i);
    patches.insert(patches.end(), s.patches.begin(), s.patches.end());
    seqs.push_back(captions ? &s.caption : &s.tokens);
    b.targets.push_back({s.box});
    if (with_masks)
      for (std::uint8_t v : s.mask) masks.push_back(v ? T(1) : T(0));
  }
  b.patches = Tensor<T>(Shape{n, cfg.num_patches(), cfg.patch_dim()}, std::move(patches));
  b.tokens = make_token_batch(seqs);
  if (with_masks) b.masks = Tensor<T>(Shape{n, cfg.image_size, cfg.image_size}, std::move(masks));
  return b;
}

/// Per-sample cache of the frozen backbone prefix (see BackbonePrefix).
template <class T>
class PrefixCache {
 public:
  PrefixCache() = default;
  PrefixCache(const RefFormerModel<T>& model, const std::vector<PreparedSample<T>>& data, std::size_t chunk = 64) {
    NoGradScope<T> no_grad;
    const ModelConfig& cfg = model.config();
    layer_ = model.prefix_layer();
    rows_.resize(data.size());
    for (std::size_t start = 0; start < data.size(); start += chunk) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
      const Batch<T> b = make_batch(data, idx, cfg, false);
      const BackbonePrefix<T> p = model.compute_prefix(b.patches, b.tokens);
      const std::size_t vi = p.image.numel() / idx.size(), ti = p.text.numel() / idx.size();
      for (std::size_t k = 0; k < idx.size(); ++k) {
        Row& r = rows_[idx[k]];
        r.image.assign(p.image.data().begin() + k * vi, p.image.data().begin() + (k + 1) * vi);
        r.text.assign(p.text.data().begin() + k * ti, p.text.data().begin() + (k + 1) * ti);
        for (const auto& [lvl, t] : p.levels)
          r.levels[lvl].assign(t.data().begin() + k * vi, t.data().begin() + (k + 1) * vi);
      }
      image_shape_ = {p.image.dim(1), p.image.dim(2)};
      text_shape_ = {p.text.dim(1), p.text.dim(2)};
    }
  }

  bool empty() const { return rows_.empty(); }

  BackbonePrefix<T> gather(const std::vector<std::size_t>& idx) const {
    BackbonePrefix<T> p;
    p.layer = layer_;
    std::vector<T> img, txt;
    std::map<std::size_t, std::vector<T>> lv;
    for (std::size_t i : idx) {
      const Row& r = rows_.at(i);
      img.insert(img.end(), r.image.begin(), r.image.end());
      txt.insert(txt.end(), r.text.begin(), r.text.end());
      for (const auto& [k, v] : r.levels) lv[k].insert(lv[k].end(), v.begin(), v.end());
    }
    const std::size_t n = idx.size();
    p.image = Tensor<T>(Shape{n, image_shape_[0], image_shape_[1]}, std::move(img));
    p.text = Tensor<T>(Shape{n, text_shape_[0], text_shape_[1]}, std::move(txt));
    for (auto& [k, v] : lv) p.levels[k] = Tensor<T>(Shape{n, image_shape_[0], image_shape_[1]}, std::move(v));
    return p;
  }

 private:
  struct Row {
    std::vector<T> image, text;
    std::map<std::size_t, std::vector<T>> levels;
  };
  std::size_t layer_ = 0;
  std::vector<Row> rows_;
  std::array<std::size_t, 2> image_shape_{}, text_shape_{};
};

/// Weighted loss terms; det + aux + focal + dice == total.
struct LossBreakdown {
  double det = 0.0;    // iou*L_iou + l1*L_L1 + ce*L_ce
  double aux = 0.0;    // aux * sum over QA layers of their detection losses
  double focal = 0.0;  // focal weight * focal loss
  double dice = 0.0;   // dice weight * dice loss
  double total = 0.0;
  double giou = 0.0, l1 = 0.0, ce = 0.0;  // unweighted components of det
};

template <class T>
struct LossGraph {
  Tensor<T> total;
  LossBreakdown terms;
};

/// L_final for a forward output. Throws TrainingDiverged naming the first
/// non-finite term.
template <class T>
LossGraph<T> final_loss(const ForwardOutput<T>& out, const Batch<T>& batch, const LossWeights& w,
                        std::size_t step = 0) {
  LossGraph<T> g;
  const DetectionLoss<T> det = detection_loss(out.predictions.boxes, out.predictions.logits, batch.targets, w);
  g.total = det.total;
  g.terms.det = static_cast<double>(det.total.item());
  g.terms.giou = static_cast<double>(det.giou.item());
  g.terms.l1 = static_cast<double>(det.l1.item());
  g.terms.ce = static_cast<double>(det.ce.item());
  if (!out.aux.empty() && w.aux > 0.0) {
    Tensor<T> aux;
    for (const auto& a : out.aux) {
      const Tensor<T> l = detection_loss(a.boxes, a.logits, batch.targets, w).total;
      aux = aux.defined() ? add(aux, l) : l;
    }
    aux = scale(aux, static_cast<T>(w.aux));
    g.terms.aux = static_cast<double>(aux.item());
    g.total = add(g.total, aux);
  }
  if (out.predictions.masks.defined() && batch.masks.defined()) {
    const Shape& ms = out.predictions.masks.shape();  // [B, N_q, H, W]
    const std::size_t b = ms[0], nq = ms[1], hw = ms[2] * ms[3];
    std::vector<std::size_t> rows, gt_rows;
    for (std::size_t s = 0; s < b; ++s)
      for (const auto& [q, t] : det.matches[s].pairs) {
        rows.push_back(s * nq + q);
        gt_rows.push_back(s);
      }
    if (!rows.empty()) {
      const Tensor<T> pred = reshape(index_select(reshape(out.predictions.masks, Shape{b * nq, hw}), rows),
                                     Shape{rows.size(), ms[2], ms[3]});
      const Tensor<T> gt = reshape(index_select(reshape(batch.masks, Shape{b, hw}), gt_rows),
                                   Shape{gt_rows.size(), ms[2], ms[3]});
      const Tensor<T> focal = scale(focal_loss(pred, gt), static_cast<T>(w.focal));
      const Tensor<T> dice = scale(dice_loss(pred, gt), static_cast<T>(w.dice));
      g.terms.focal = static_cast<double>(focal.item());
      g.terms.dice = static_cast<double>(dice.item());
      g.total = add(add(g.total, focal), dice);
    }
  }
  g.terms.total = static_cast<double>(g.total.item());
  const std::pair<const char*, double> named[] = {{"L_det", g.terms.det},     {"L_aux", g.terms.aux},
                                                  {"L_focal", g.terms.focal}, {"L_dice", g.terms.dice},
                                                  {"total", g.terms.total}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(v))
      throw TrainingDiverged("non-finite loss term " + std::string(name) + " at step " + std::to_string(step));
  return g;
}

/// Forward, L_final, backward and one optimizer update.
template <class T>
LossBreakdown train_step(RefFormerModel<T>& model, AdamW<T>& opt, const Batch<T>& batch, const LossWeights& w,
                         const BackbonePrefix<T>* prefix = nullptr) {
  opt.zero_grad();
  Tape<T> tape;
  LossBreakdown terms;
  {
    TapeScope<T> scope(tape);
    const ForwardOutput<T> out =
        prefix ? model.forward_from(*prefix, batch.tokens) : model.forward(batch.patches, batch.tokens);
    LossGraph<T> g = final_loss(out, batch, w, opt.step_count());
    terms = g.terms;
    tape.backward(g.total);
  }
  tape.clear();
  opt.step();
  return terms;
}

struct EvalReport {
  double prec_at_05 = 0.0;
  std::optional<double> miou;
  double mean_box_iou = 0.0;
  std::size_t samples = 0;
  std::vector<double> loss_curve;      // mean training loss per epoch
  std::vector<double> accuracy_curve;  // held-out Prec@0.5 per epoch

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["samples"] = samples;
    j["prec@0.5"] = prec_at_05;
    j["miou"] = miou ? nlohmann::ordered_json(*miou) : nlohmann::ordered_json(nullptr);
    j["mean_box_iou"] = mean_box_iou;
    j["loss_curve"] = loss_curve;
    j["accuracy_curve"] = accuracy_curve;
    return j;
  }
};

/// Per-sample inference result.
struct SamplePrediction {
  std::size_t query = 0;
  Box box;
  double iou = 0.0;
  std::vector<std::uint8_t> mask;  // binarized at 0.5, empty without a mask head
};

template <class T>
std::vector<SamplePrediction> predict(const RefFormerModel<T>& model, const std::vector<PreparedSample<T>>& data,
                                      std::size_t batch_size = 64) {
  NoGradScope<T> no_grad;
  const ModelConfig& cfg = model.config();
  std::vector<SamplePrediction> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch<T> b = make_batch(data, idx, cfg, false);
    const ForwardOutput<T> f = model.forward(b.patches, b.tokens);
    const std::size_t nq = cfg.num_queries;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      SamplePrediction p;
      p.query = select_prediction<T>(f.predictions.logits.data().subspan(k * nq * 2, nq * 2), nq);
      const auto bx = f.predictions.boxes.data().subspan((k * nq + p.query) * 4, 4);
      p.box = {double(bx[0]), double(bx[1]), double(bx[2]), double(bx[3])};
      p.iou = iou(p.box, data[idx[k]].box);
      if (f.predictions.masks.defined()) {
        const std::size_t hw = cfg.image_size * cfg.image_size;
        const auto m = f.predictions.masks.data().subspan((k * nq + p.query) * hw, hw);
        p.mask.resize(hw);
        for (std::size_t i = 0; i < hw; ++i) p.mask[i] = m[i] > T(0.5) ? 1 : 0;
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

/// Prec@0.5 counts IoU strictly greater than 0.5.
inline EvalReport summarize(const std::vector<SamplePrediction>& preds,
                            const std::vector<const std::vector<std::uint8_t>*>& gt_masks) {
  if (preds.empty()) throw ContractError("evaluate: empty dataset");
  EvalReport r;
  r.samples = preds.size();
  std::size_t hits = 0;
  double iou_sum = 0.0, miou_sum = 0.0;
  bool masks = !preds[0].mask.empty();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].iou > 0.5) ++hits;
    iou_sum += preds[i].iou;
    if (masks) miou_sum += mask_iou(preds[i].mask, *gt_masks.at(i));
  }
  r.prec_at_05 = static_cast<double>(hits) / static_cast<double>(preds.size());
  r.mean_box_iou = iou_sum / static_cast<double>(preds.size());
  if (masks) r.miou = miou_sum / static_cast<double>(preds.size());
  return r;
}

template <class T>
EvalReport evaluate(const RefFormerModel<T>& model, const std::vector<PreparedSample<T>>& data,
                    std::size_t batch_size = 64) {
  const auto preds = predict(model, data, batch_size);
  std::vector<const std::vector<std::uint8_t>*> gt;
  for (const auto& s : data) gt.push_back(&s.mask);
  return summarize(preds, gt);
}

/// Epoch-order permutation; a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Philox rng(derive_seed(seed, epoch), 0x0e70c4);
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
  return perm;
}

struct StepLog {
  std::size_t step = 0;
  LossBreakdown terms;
  double lr = 0.0;
};

inline void write_step_log_header(std::ostream& os) { os << "step,L_det,L_aux,L_focal,L_dice,total,lr\n"; }

inline void write_step_log(std::ostream& os, const StepLog& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", s.step, s.terms.det, s.terms.aux,
                s.terms.focal, s.terms.dice, s.terms.total, s.lr);
  os << buf;
}

template <class T>
struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(std::size_t epoch, const EvalReport&)> on_epoch;  // epoch is 1-based
};

/// Trains for cfg.epochs, evaluating on `val` after every epoch. Returns the
/// final held-out report with loss and accuracy curves filled in.
template <class T>
EvalReport train(RefFormerModel<T>& model, const std::vector<PreparedSample<T>>& train_data,
                 const std::vector<PreparedSample<T>>& val, const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  if (train_data.empty()) throw ContractError("train: empty training set");
  if (cfg.freeze_backbone)
    model.backbone.freeze();
  else
    model.backbone.unfreeze();
  std::vector<Tensor<T>> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  AdamW<T> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm});
  const bool masks = model.decoder.has_mask_head();
  PrefixCache<T> cache;
  if (cfg.freeze_backbone) cache = PrefixCache<T>(model, train_data);

  std::vector<double> loss_curve, acc_curve;
  EvalReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(train_data.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + cfg.batch_size)));
      const Batch<T> batch = make_batch(train_data, idx, model.config(), masks);
      LossBreakdown terms;
      if (!cache.empty()) {
        const BackbonePrefix<T> prefix = cache.gather(idx);
        terms = train_step(model, opt, batch, cfg.weights, &prefix);
      } else {
        terms = train_step(model, opt, batch, cfg.weights);
      }
      loss_sum += terms.total;
      ++batches;
      if (hooks.on_step) hooks.on_step({opt.step_count(), terms, opt.config().lr});
    }
    loss_curve.push_back(loss_sum / static_cast<double>(batches));
    report = val.empty() ? EvalReport{} : evaluate(model, val, cfg.eval_batch);
    acc_curve.push_back(report.prec_at_05);
    report.loss_curve = loss_curve;
    report.accuracy_curve = acc_curve;
    if (hooks.on_epoch) hooks.on_epoch(epoch + 1, report);
  }
  return report;
}

/// Symmetric InfoNCE between image class tokens and global text tokens.
template <class T>
Tensor<T> contrastive_loss(const Tensor<T>& image_global, const Tensor<T>& text_global, double temperature) {
  auto normalize = [](const Tensor<T>& x) {
    const std::size_t b = x.dim(0);
    const Tensor<T> norm = sqrt(add_scalar(sum_last(square(x)), T(1e-12)));
    return div(x, broadcast_to(reshape(norm, Shape{b, 1}), x.shape()));
  };
  const std::size_t b = image_global.dim(0);
  const Tensor<T> logits = scale(matmul_nt(normalize(image_global), normalize(text_global)), static_cast<T>(1.0 / temperature));
  std::vector<T> eye(b * b, T(0));
  for (std::size_t i = 0; i < b; ++i) eye[i * b + i] = T(1);
  const Tensor<T> diag(Shape{b, b}, eye);
  const Tensor<T> row = sum(mul(neg(log(softmax(logits, 1))), diag));
  const Tensor<T> col = sum(mul(neg(log(softmax(logits, 0))), diag));
  return scale(add(row, col), T(0.5) / static_cast<T>(b));
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> global_embeddings(const RefFormerModel<T>& model, const Batch<T>& batch) {
  const Tensor<T> zv = model.backbone.image.encode(batch.patches);
  const Tensor<T> zt = model.backbone.text.encode(batch.tokens);
  const std::size_t b = zv.dim(0), nv = zv.dim(1), d = zv.dim(2);
  std::vector<std::size_t> cls(b);
  for (std::size_t i = 0; i < b; ++i) cls[i] = i * nv;
  return {index_select(reshape(zv, Shape{b * nv, d}), cls),
          DualEncoder<T>::global_tokens(zt, batch.tokens, model.config().global_token)};
}

/// Trains only the backbone with the contrastive objective, then leaves it
/// unfrozen (the caller freezes). Returns mean loss per epoch.
template <class T>
std::vector<double> contrastive_pretrain(RefFormerModel<T>& model, const std::vector<PreparedSample<T>>& data,
                                         const PretrainConfig& cfg) {
  model.backbone.unfreeze();
  std::vector<Tensor<T>> params;
  model.backbone.visit("backbone", [&](const std::string&, Tensor<T>& t) { params.push_back(t); });
  AdamW<T> opt(params, {cfg.lr, 0.9, 0.999, 1e-8, 1e-2, 1.0});
  std::vector<double> curve;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), cfg.seed ^ 0xC0417ULL, epoch);
    double sum_loss = 0.0;
    std::size_t n = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + cfg.batch_size)));
      const Batch<T> batch = make_batch(data, idx, model.config(), false, true);
      opt.zero_grad();
      Tape<T> tape;
      double lv = 0.0;
      {
        TapeScope<T> scope(tape);
        auto [img, txt] = global_embeddings(model, batch);
        const Tensor<T> loss = contrastive_loss(img, txt, cfg.temperature);
        lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv)) throw TrainingDiverged("non-finite contrastive loss at epoch " + std::to_string(epoch));
        tape.backward(loss);
      }
      opt.step();
      sum_loss += lv;
      ++n;
    }
    curve.push_back(n ? sum_loss / static_cast<double>(n) : 0.0);
  }
  return curve;
}

/// Image-to-text top-1 retrieval accuracy within one batch. Retrieving a
/// caption whose token sequence equals the true one counts as a hit, since
/// identical captions have identical embeddings.
template <class T>
double retrieval_accuracy(const RefFormerModel<T>& model, const Batch<T>& batch) {
  NoGradScope<T> no_grad;
  auto [img, txt] = global_embeddings(model, batch);
  const std::size_t b = img.dim(0), d = img.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    double best_s = -1e300;
    for (std::size_t j = 0; j < b; ++j) {
      double dot = 0.0, ni = 0.0, nj = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double a = img.data()[i * d + k], c = txt.data()[j * d + k];
        dot += a * c;
        ni += a * a;
        nj += c * c;
      }
      const double s = dot / std::sqrt(ni * nj + 1e-24);
      if (s > best_s) {
        best_s = s;
        best = j;
      }
    }
    const auto row = [&](std::size_t r) {
      return std::vector<std::int32_t>(batch.tokens.ids.begin() + static_cast<long>(r * batch.tokens.length),
                                       batch.tokens.ids.begin() + static_cast<long>((r + 1) * batch.tokens.length));
    };
    if (row(best) == row(i)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

struct ConvergenceRow {
  std::string strategy;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double prec = 0.0;
};

struct ConvergenceTable {
  std::vector<ConvergenceRow> rows;

  /// Median (over seeds) accuracy per epoch for one strategy.
  std::vector<double> median_curve(const std::string& strategy) const {
    std::map<std::size_t, std::vector<double>> by_epoch;
    for (const auto& r : rows)
      if (r.strategy == strategy) by_epoch[r.epoch].push_back(r.prec);
    std::vector<double> out;
    for (auto& [e, v] : by_epoch) {
      std::sort(v.begin(), v.end());
      const std::size_t n = v.size();
      out.push_back(n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]));
    }
    return out;
  }

  /// First epoch (1-based) whose median accuracy reaches `threshold`.
  std::optional<std::size_t> epochs_to(const std::string& strategy, double threshold) const {
    const auto c = median_curve(strategy);
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c[i] >= threshold) return i + 1;
    return std::nullopt;
  }

  void write_csv(std::ostream& os) const {
    os << "strategy,seed,epoch,prec@0.5\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%.6f", r.prec);
      os << r.strategy << ',' << r.seed << ',' << r.epoch << ',' << buf << '\n';
    }
  }
};

/// Trains one model per (strategy, seed) under an identical budget.
/// `make_model` builds a fresh model for a given strategy and seed.
template <class T>
ConvergenceTable convergence_experiment(const std::vector<QueryStrategy>& strategies,
                                        const std::vector<std::uint64_t>& seeds,
                                        const std::function<RefFormerModel<T>(QueryStrategy, std::uint64_t)>& make_model,
                                        const std::vector<PreparedSample<T>>& train_data,
                                        const std::vector<PreparedSample<T>>& val, TrainConfig cfg) {
  if (strategies.size() < 2 || seeds.size() < 3)
    throw ContractError("convergence_experiment: need >= 2 strategies and >= 3 seeds");
  ConvergenceTable table;
  for (QueryStrategy s : strategies)
    for (std::uint64_t seed : seeds) {
      RefFormerModel<T> model = make_model(s, seed);
      cfg.seed = seed;
      TrainHooks<T> hooks;
      hooks.on_epoch = [&](std::size_t epoch, const EvalReport& r) {
        table.rows.push_back({to_string(s), seed, epoch, r.prec_at_05});
      };
      train(model, train_data, val, cfg, hooks);
    }
  return table;
}

}  // namespace refformer
