#pragma once

// Matching cost, detection loss (box L1 + GIoU + confidence CE) and the
// focal / dice mask losses.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "refformer/boxes.hpp"
#include "refformer/config.hpp"
#include "refformer/hungarian.hpp"
#include "refformer/ops.hpp"

namespace refformer {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kDiceSmooth = 1.0;

/// Softmax object probability of a (no-object, object) logit pair.
inline double object_probability(double no_obj, double obj) { return 1.0 / (1.0 + std::exp(no_obj - obj)); }

/// cost[q, t] = l1 * |b_q - b_t|_1 + iou * (1 - giou) - ce * p_q(object).
/// boxes: N_q x 4 cxcywh values, logits: N_q x 2.
template <class T>
CostMatrix match_cost(std::span<const T> boxes, std::span<const T> logits, const std::vector<Box>& targets,
                      const LossWeights& w) {
  const std::size_t nq = boxes.size() / 4;
  if (nq == 0 || targets.empty() || logits.size() != 2 * nq)
    throw ContractError("match_cost: need nonempty predictions and targets");
  CostMatrix c{nq, targets.size(), std::vector<double>(nq * targets.size())};
  for (std::size_t q = 0; q < nq; ++q) {
    const Box b{double(boxes[4 * q]), double(boxes[4 * q + 1]), double(boxes[4 * q + 2]), double(boxes[4 * q + 3])};
    const double p = object_probability(double(logits[2 * q]), double(logits[2 * q + 1]));
    for (std::size_t t = 0; t < targets.size(); ++t)
      c(q, t) = w.l1 * l1_distance(b, targets[t]) + w.iou * (1.0 - giou(b, targets[t])) - w.ce * p;
  }
  return c;
}

template <class T>
struct DetectionLoss {
  Tensor<T> total;  // iou * L_iou + l1 * L_L1 + ce * L_ce
  Tensor<T> giou;   // mean over matches of 1 - giou
  Tensor<T> l1;     // mean over matches of |b - b_gt|_1
  Tensor<T> ce;     // weighted mean confidence CE over all queries
  std::vector<MatchAssignment> matches;  // per sample
};

/// Matches each sample's N_q predictions against its targets, then computes
/// the loss. boxes [B, N_q, 4], logits [B, N_q, 2]; targets[b] per sample.
template <class T>
DetectionLoss<T> detection_loss(const Tensor<T>& boxes, const Tensor<T>& logits,
                                const std::vector<std::vector<Box>>& targets, const LossWeights& w) {
  const std::size_t b = boxes.dim(0), nq = boxes.dim(1);
  if (boxes.rank() != 3 || boxes.dim(2) != 4 || logits.shape() != Shape{b, nq, 2} || targets.size() != b)
    throw DimensionError("detection_loss: boxes " + shape_str(boxes.shape()) + ", logits " +
                         shape_str(logits.shape()) + ", " + std::to_string(targets.size()) + " target sets");
  DetectionLoss<T> out;
  std::vector<std::size_t> pred_rows;
  std::vector<T> target_values;
  std::vector<T> onehot(b * nq * 2, T(0));
  std::vector<T> weight(b * nq, static_cast<T>(w.no_object));
  for (std::size_t s = 0; s < b; ++s) {
    std::vector<std::size_t> matched_rows;
    if (!targets[s].empty()) {
      const auto cost = match_cost<T>(boxes.data().subspan(s * nq * 4, nq * 4),
                                      logits.data().subspan(s * nq * 2, nq * 2), targets[s], w);
      out.matches.push_back(hungarian_assign(cost));
    } else {
      out.matches.emplace_back();
    }
    std::vector<char> is_matched(nq, 0);
    for (const auto& [q, t] : out.matches.back().pairs) {
      is_matched[q] = 1;
      pred_rows.push_back(s * nq + q);
      const Box& g = targets[s][t];
      for (double v : {g.cx, g.cy, g.w, g.h}) target_values.push_back(static_cast<T>(v));
    }
    for (std::size_t q = 0; q < nq; ++q) {
      const std::size_t row = s * nq + q;
      onehot[row * 2 + (is_matched[q] ? 1 : 0)] = T(1);
      if (is_matched[q]) weight[row] = T(1);
    }
  }

  const Tensor<T> probs = clamp(softmax(logits, -1), static_cast<T>(kProbClamp), static_cast<T>(1 - kProbClamp));
  const Tensor<T> picked = sum_last(mul(probs, Tensor<T>(Shape{b, nq, 2}, onehot)));
  const Tensor<T> wt(Shape{b, nq}, weight);
  T weight_sum = T(0);
  for (T v : weight) weight_sum += v;
  out.ce = scale(sum(mul(neg(log(picked)), wt)), T(1) / weight_sum);

  if (pred_rows.empty()) {
    out.giou = Tensor<T>::scalar(T(0));
    out.l1 = Tensor<T>::scalar(T(0));
  } else {
    const std::size_t m = pred_rows.size();
    const Tensor<T> pred = index_select(reshape(boxes, Shape{b * nq, 4}), pred_rows);
    const Tensor<T> gt(Shape{m, 4}, target_values);
    out.giou = scale(sum(add_scalar(neg(giou_tensor(pred, gt)), T(1))), T(1) / static_cast<T>(m));
    out.l1 = scale(sum(abs(sub(pred, gt))), T(1) / static_cast<T>(m));
  }
  out.total = add(add(scale(out.giou, static_cast<T>(w.iou)), scale(out.l1, static_cast<T>(w.l1))),
                  scale(out.ce, static_cast<T>(w.ce)));
  return out;
}

/// Sigmoid focal loss on probabilities, mean over pixels. pred and target
/// share a shape; target is binary.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& pred, const Tensor<T>& target, double alpha = kFocalAlpha,
                     double gamma = kFocalGamma) {
  if (pred.shape() != target.shape())
    throw DimensionError("focal_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  std::vector<T> sign(target.numel()), offset(target.numel()), alpha_t(target.numel());
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const bool pos = target.data()[i] > T(0.5);
    sign[i] = pos ? T(1) : T(-1);
    offset[i] = pos ? T(0) : T(1);
    alpha_t[i] = static_cast<T>(pos ? alpha : 1.0 - alpha);
  }
  const Shape& s = pred.shape();
  const Tensor<T> pt = clamp(add(mul(pred, Tensor<T>(s, sign)), Tensor<T>(s, offset)), static_cast<T>(kProbClamp),
                             static_cast<T>(1 - kProbClamp));
  const Tensor<T> miss = add_scalar(neg(pt), T(1));
  const Tensor<T> modulator = gamma == 2.0 ? square(miss) : exp(scale(log(miss), static_cast<T>(gamma)));
  return mean(mul(mul(modulator, Tensor<T>(s, alpha_t)), neg(log(pt))));
}

/// 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps) per mask over the last
/// two axes, averaged over masks.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double smooth = kDiceSmooth) {
  if (pred.shape() != target.shape() || pred.rank() < 2)
    throw DimensionError("dice_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  const Shape& s = pred.shape();
  const std::size_t pixels = s[s.size() - 1] * s[s.size() - 2];
  const std::size_t masks = pred.numel() / pixels;
  const Tensor<T> p = reshape(pred, Shape{masks, pixels});
  const Tensor<T> g = reshape(target, Shape{masks, pixels});
  const Tensor<T> num = add_scalar(scale(sum_last(mul(p, g)), T(2)), static_cast<T>(smooth));
  const Tensor<T> den = add_scalar(add(sum_last(p), sum_last(g)), static_cast<T>(smooth));
  return add_scalar(neg(mean(div(num, den))), T(1));
}

/// Pixel-level IoU of two binary masks; 1 when both are empty.
inline double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace refformer
