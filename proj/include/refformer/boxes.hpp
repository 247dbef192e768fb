#pragma once

// Box geometry: scalar helpers for metrics and matching, and tape-recorded
// tensor versions for the losses. Boxes are normalized (cx, cy, w, h).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>

#include "refformer/ops.hpp"

namespace refformer {

struct Box {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
  bool operator==(const Box&) const = default;
};

struct CornerBox {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  bool operator==(const CornerBox&) const = default;
};

inline constexpr double kEnclosingFloor = 1e-7;

inline CornerBox box_cxcywh_to_xyxy(const Box& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

inline Box box_xyxy_to_cxcywh(const CornerBox& c) {
  return {(c.x0 + c.x1) / 2, (c.y0 + c.y1) / 2, c.x1 - c.x0, c.y1 - c.y0};
}

inline double area(const CornerBox& c) { return std::max(0.0, c.x1 - c.x0) * std::max(0.0, c.y1 - c.y0); }

inline double intersection(const CornerBox& a, const CornerBox& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return std::max(0.0, w) * std::max(0.0, h);
}

inline double iou(const CornerBox& a, const CornerBox& b) {
  const double inter = intersection(a, b);
  const double uni = area(a) + area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double iou(const Box& a, const Box& b) { return iou(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)); }

inline double giou(const CornerBox& a, const CornerBox& b) {
  const double inter = intersection(a, b);
  const double uni = area(a) + area(b) - inter;
  const double enclosing = std::max(kEnclosingFloor, (std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) *
                                                         (std::max(a.y1, b.y1) - std::min(a.y0, b.y0)));
  const double i = uni > 0.0 ? inter / uni : 0.0;
  return i - (enclosing - uni) / enclosing;
}

inline double giou(const Box& a, const Box& b) { return giou(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)); }

inline double l1_distance(const Box& a, const Box& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) + std::abs(a.h - b.h);
}

/// Row-wise GIoU of two [M, 4] cxcywh tensors -> [M, 1]. Differentiable with
/// respect to both arguments.
template <class T>
Tensor<T> giou_tensor(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || a.dim(1) != 4 || a.shape() != b.shape())
    throw DimensionError("giou: expected matching [M, 4] boxes, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  auto corners = [](const Tensor<T>& x) {
    const Tensor<T> c = slice(x, 1, 0, 2);
    const Tensor<T> half = scale(slice(x, 1, 2, 4), T(0.5));
    return std::array<Tensor<T>, 3>{sub(c, half), add(c, half), slice(x, 1, 2, 4)};
  };
  const auto [a0, a1, awh] = corners(a);
  const auto [b0, b1, bwh] = corners(b);
  auto prod = [](const Tensor<T>& x) { return mul(slice(x, 1, 0, 1), slice(x, 1, 1, 2)); };
  const Tensor<T> inter = prod(relu(sub(minimum(a1, b1), maximum(a0, b0))));
  const Tensor<T> uni = sub(add(prod(relu(awh)), prod(relu(bwh))), inter);
  const Tensor<T> floor(uni.shape(), static_cast<T>(kEnclosingFloor));
  const Tensor<T> ratio = div(inter, maximum(uni, floor));
  const Tensor<T> enclosing = maximum(prod(sub(maximum(a1, b1), minimum(a0, b0))), floor);
  return sub(ratio, div(sub(enclosing, uni), enclosing));
}

}  // namespace refformer
