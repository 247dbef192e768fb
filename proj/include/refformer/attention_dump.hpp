#pragma once

// Query attention maps per QA layer and from the decoder, reduced to the
// patch grid, plus the attention-mass-in-box statistic used to check that
// later QA layers concentrate on the referent.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "refformer/boxes.hpp"
#include "refformer/model.hpp"
#include "refformer/train.hpp"

namespace refformer {

/// Rows are queries, columns are patches in raster order.
using AttentionMap = std::vector<std::vector<double>>;

struct AttentionDump {
  std::size_t sample = 0;
  std::size_t grid = 0;   // patches per side
  std::size_t query = 0;  // selected prediction
  std::vector<std::size_t> layers;
  std::vector<std::optional<AttentionMap>> qa;  // empty when the layer skips target refinement
  AttentionMap decoder;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["sample"] = sample;
    j["grid"] = grid;
    j["selected_query"] = query;
    j["qa_layers"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      nlohmann::ordered_json e;
      e["layer"] = layers[i];
      e["attention"] = qa[i] ? nlohmann::ordered_json(*qa[i]) : nlohmann::ordered_json(nullptr);
      j["qa_layers"].push_back(e);
    }
    j["decoder"] = decoder;
    return j;
  }
};

/// Drops the class-token column of a [B, N_q, N_v+1] weight tensor for
/// sample `b` and renormalizes each row over patches.
template <class T>
AttentionMap patch_attention(const Tensor<T>& w, std::size_t b) {
  if (w.rank() != 3 || b >= w.dim(0)) throw ContractError("patch_attention: bad weights or sample index");
  const std::size_t nq = w.dim(1), nk = w.dim(2);
  AttentionMap out(nq, std::vector<double>(nk - 1));
  for (std::size_t q = 0; q < nq; ++q) {
    const auto row = w.data().subspan((b * nq + q) * nk, nk);
    double total = 0.0;
    for (std::size_t j = 1; j < nk; ++j) total += static_cast<double>(row[j]);
    for (std::size_t j = 1; j < nk; ++j)
      out[q][j - 1] = total > 0.0 ? static_cast<double>(row[j]) / total : 1.0 / static_cast<double>(nk - 1);
  }
  return out;
}

/// Fraction of a patch-grid distribution covered by `box` (normalized
/// coordinates), weighting each patch by its area overlap with the box.
inline double attention_mass_in_box(const std::vector<double>& row, std::size_t grid, const Box& box) {
  if (row.size() != grid * grid) throw DimensionError("attention_mass_in_box: row does not match grid");
  const CornerBox c = box_cxcywh_to_xyxy(box);
  const double cell = 1.0 / static_cast<double>(grid);
  double mass = 0.0;
  for (std::size_t y = 0; y < grid; ++y)
    for (std::size_t x = 0; x < grid; ++x) {
      const double x0 = static_cast<double>(x) * cell, y0 = static_cast<double>(y) * cell;
      const double ox = std::max(0.0, std::min(x0 + cell, c.x1) - std::max(x0, c.x0));
      const double oy = std::max(0.0, std::min(y0 + cell, c.y1) - std::max(y0, c.y0));
      mass += row[y * grid + x] * (ox * oy) / (cell * cell);
    }
  return mass;
}

/// Runs one sample and collects its maps.
template <class T>
AttentionDump dump_attention(const RefFormerModel<T>& model, const std::vector<PreparedSample<T>>& data,
                             std::size_t index) {
  if (index >= data.size())
    throw ContractError("dump_attention: sample " + std::to_string(index) + " out of range [0, " +
                        std::to_string(data.size()) + ")");
  NoGradScope<T> no_grad;
  const ModelConfig& cfg = model.config();
  const Batch<T> b = make_batch(data, {index}, cfg, false);
  const ForwardOutput<T> f = model.forward(b.patches, b.tokens);
  AttentionDump d;
  d.sample = index;
  d.grid = cfg.image_size / cfg.patch_size;
  d.query = select_prediction<T>(f.predictions.logits.data(), cfg.num_queries);
  for (const auto& e : f.trace) {
    d.layers.push_back(e.layer);
    d.qa.push_back(e.query_attention.defined() ? std::optional<AttentionMap>(patch_attention(e.query_attention, 0))
                                               : std::nullopt);
  }
  d.decoder = patch_attention(f.decoder_attention, 0);
  return d;
}

struct SignTest {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t ties = 0;
  double p_value = 1.0;  // one-sided, H1: positive differences dominate
};

/// Exact one-sided binomial sign test; ties are discarded.
inline SignTest sign_test(const std::vector<double>& diffs) {
  SignTest s;
  for (double d : diffs) {
    if (d > 0.0)
      ++s.positive;
    else if (d < 0.0)
      ++s.negative;
    else
      ++s.ties;
  }
  const std::size_t n = s.positive + s.negative;
  if (n == 0) return s;
  const double ln_half_n = static_cast<double>(n) * std::log(0.5);
  double p = 0.0;
  for (std::size_t k = s.positive; k <= n; ++k)
    p += std::exp(std::lgamma(double(n) + 1.0) - std::lgamma(double(k) + 1.0) - std::lgamma(double(n - k) + 1.0) +
                  ln_half_n);
  s.p_value = std::min(1.0, p);
  return s;
}

struct RefinementStatistic {
  std::size_t samples = 0;
  double first_mean = 0.0;  // mean mass in the target box at the first QA layer
  double last_mean = 0.0;
  SignTest test;
};

/// Compares in-box attention mass of the selected query between the first
/// and last QA layers that refine targets.
template <class T>
RefinementStatistic refinement_statistic(const RefFormerModel<T>& model, const std::vector<PreparedSample<T>>& data,
                                         std::size_t batch_size = 64) {
  NoGradScope<T> no_grad;
  const ModelConfig& cfg = model.config();
  const std::size_t grid = cfg.image_size / cfg.patch_size, nq = cfg.num_queries;
  RefinementStatistic r;
  std::vector<double> diffs;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch<T> b = make_batch(data, idx, cfg, false);
    const ForwardOutput<T> f = model.forward(b.patches, b.tokens);
    std::vector<const QaTraceEntry<T>*> refined;
    for (const auto& e : f.trace)
      if (e.query_attention.defined()) refined.push_back(&e);
    if (refined.size() < 2) throw ContractError("refinement_statistic: need at least two refining QA layers");
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::size_t q = select_prediction<T>(f.predictions.logits.data().subspan(k * nq * 2, nq * 2), nq);
      const Box& gt = data[idx[k]].box;
      const double first = attention_mass_in_box(patch_attention(refined.front()->query_attention, k)[q], grid, gt);
      const double last = attention_mass_in_box(patch_attention(refined.back()->query_attention, k)[q], grid, gt);
      r.first_mean += first;
      r.last_mean += last;
      diffs.push_back(last - first);
    }
  }
  r.samples = diffs.size();
  if (r.samples) {
    r.first_mean /= static_cast<double>(r.samples);
    r.last_mean /= static_cast<double>(r.samples);
  }
  r.test = sign_test(diffs);
  return r;
}

}  // namespace refformer
