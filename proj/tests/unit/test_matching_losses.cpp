#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "../common/gradient_suite.hpp"
#include "refformer/boxes.hpp"
#include "refformer/grad_check.hpp"
#include "refformer/hungarian.hpp"
#include "refformer/losses.hpp"

using namespace refformer;
using refformer::testing::random_tensor;

namespace {

Box random_box(Philox& rng) {
  const double w = rng.uniform(0.05, 0.6), h = rng.uniform(0.05, 0.6);
  return {rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h};
}

// Exhaustive minimum over injective maps from the smaller side.
double brute_force_minimum(const CostMatrix& c) {
  const bool rows_small = c.rows <= c.cols;
  const std::size_t small = rows_small ? c.rows : c.cols, big = rows_small ? c.cols : c.rows;
  std::vector<std::size_t> perm(big);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0;
    for (std::size_t i = 0; i < small; ++i) total += rows_small ? c(i, perm[i]) : c(perm[i], i);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

CostMatrix random_cost(Philox& rng, std::size_t rows, std::size_t cols) {
  CostMatrix c{rows, cols, std::vector<double>(rows * cols)};
  for (auto& v : c.values) v = rng.uniform(-5, 5);
  return c;
}

bool injective(const MatchAssignment& m) {
  std::vector<std::size_t> r, c;
  for (const auto& [a, b] : m.pairs) {
    r.push_back(a);
    c.push_back(b);
  }
  std::sort(r.begin(), r.end());
  std::sort(c.begin(), c.end());
  return std::adjacent_find(r.begin(), r.end()) == r.end() && std::adjacent_find(c.begin(), c.end()) == c.end();
}

double focal_oracle(const std::vector<double>& p, const std::vector<double>& g) {
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pt = std::clamp(g[i] > 0.5 ? p[i] : 1 - p[i], 1e-7, 1 - 1e-7);
    const double at = g[i] > 0.5 ? 0.25 : 0.75;
    total += -at * (1 - pt) * (1 - pt) * std::log(pt);
  }
  return total / static_cast<double>(p.size());
}

double dice_oracle(const std::vector<double>& p, const std::vector<double>& g) {
  double inter = 0, ps = 0, gs = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    ps += p[i];
    gs += g[i];
  }
  return 1 - (2 * inter + 1) / (ps + gs + 1);
}

}  // namespace

TEST(Boxes, ConversionExamples) {
  EXPECT_EQ(box_cxcywh_to_xyxy({0.5, 0.5, 1, 1}), (CornerBox{0, 0, 1, 1}));
  EXPECT_EQ(box_cxcywh_to_xyxy({0.25, 0.25, 0.5, 0.5}), (CornerBox{0, 0, 0.5, 0.5}));
  const Box b{0.375, 0.625, 0.25, 0.5};
  EXPECT_EQ(box_xyxy_to_cxcywh(box_cxcywh_to_xyxy(b)), b);
}

TEST(Iou, Examples) {
  const CornerBox a{0, 0, 2, 2};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_NEAR(iou(a, CornerBox{1, 1, 3, 3}), 1.0 / 7.0, 1e-15);
  EXPECT_EQ(iou(a, CornerBox{5, 5, 6, 6}), 0.0);
  EXPECT_EQ(iou(CornerBox{0, 0, 0, 0}, CornerBox{0, 0, 0, 0}), 0.0);
}

TEST(Giou, Examples) {
  const CornerBox a{0, 0, 1, 1};
  EXPECT_EQ(giou(a, a), 1.0);
  EXPECT_NEAR(giou(a, CornerBox{1, 1, 2, 2}), -0.5, 1e-15);
}

TEST(Giou, SymmetricAndBounded) {
  Philox rng(1, 0);
  for (int t = 0; t < 1000; ++t) {
    const Box a = random_box(rng), b = random_box(rng);
    const double g = giou(a, b), i = iou(a, b);
    EXPECT_NEAR(g, giou(b, a), 1e-12);
    EXPECT_NEAR(i, iou(b, a), 1e-12);
    EXPECT_GT(g, -1.0);
    EXPECT_LE(g, 1.0);
    EXPECT_GE(i, 0.0);
    EXPECT_LE(i, 1.0);
    EXPECT_LE(g, i + 1e-12);
    EXPECT_GE(1.0 - g, 0.0);
    EXPECT_LT(1.0 - g, 2.0);
  }
}

TEST(Giou, TensorMatchesScalarAndGradient) {
  Philox rng(2, 0);
  std::vector<double> av, bv;
  std::vector<Box> as, bs;
  for (int i = 0; i < 20; ++i) {
    as.push_back(random_box(rng));
    bs.push_back(random_box(rng));
    for (double v : {as.back().cx, as.back().cy, as.back().w, as.back().h}) av.push_back(v);
    for (double v : {bs.back().cx, bs.back().cy, bs.back().w, bs.back().h}) bv.push_back(v);
  }
  const Tensor<double> a(Shape{20, 4}, av), b(Shape{20, 4}, bv);
  const auto g = giou_tensor(a, b);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(g.data()[i], giou(as[i], bs[i]), 1e-12);
  const Tensor<double> w = random_tensor<double>({20, 1}, rng);
  EXPECT_LT(grad_check<double>([&](const Tensor<double>& x) { return sum(mul(giou_tensor(x, b), w)); }, a, 1e-5),
            1e-4);
}

TEST(Hungarian, HandExamples) {
  const auto m = hungarian_assign(CostMatrix{2, 2, {1, 2, 3, 0}});
  EXPECT_EQ(m.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}}));
  EXPECT_EQ(m.total_cost, 1.0);
  const auto z = hungarian_assign(CostMatrix{3, 3, std::vector<double>(9, 0.0)});
  EXPECT_EQ(z.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}, {2, 2}}));
  const auto col = hungarian_assign(CostMatrix{3, 1, {0.4, -0.2, 0.7}});
  EXPECT_EQ(col.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}}));
  EXPECT_THROW(hungarian_assign(CostMatrix{0, 0, {}}), ContractError);
}

TEST(Hungarian, MatchesBruteForceOracle) {
  Philox rng(3, 0);
  for (std::size_t n = 2; n <= 7; ++n)
    for (int t = 0; t < 200; ++t) {
      const auto c = random_cost(rng, n, n);
      const auto m = hungarian_assign(c);
      EXPECT_EQ(m.pairs.size(), n);
      EXPECT_TRUE(injective(m));
      EXPECT_NEAR(m.total_cost, brute_force_minimum(c), 1e-9) << n << "x" << n << " trial " << t;
    }
}

TEST(Hungarian, RectangularMatchesBruteForce) {
  Philox rng(4, 0);
  for (const auto& [r, c] : {std::pair<std::size_t, std::size_t>{3, 1}, {2, 5}, {6, 3}, {4, 7}})
    for (int t = 0; t < 50; ++t) {
      const auto cost = random_cost(rng, r, c);
      const auto m = hungarian_assign(cost);
      EXPECT_EQ(m.pairs.size(), std::min(r, c));
      EXPECT_TRUE(injective(m));
      EXPECT_NEAR(m.total_cost, brute_force_minimum(cost), 1e-9);
    }
}

TEST(Hungarian, InvariantToRowAndColumnShifts) {
  Philox rng(5, 0);
  for (int t = 0; t < 100; ++t) {
    auto c = random_cost(rng, 5, 5);
    const auto base = hungarian_assign(c);
    const std::size_t r = static_cast<std::size_t>(rng.uniform_int(0, 4));
    const std::size_t col = static_cast<std::size_t>(rng.uniform_int(0, 4));
    const double dr = rng.uniform(-3, 3), dc = rng.uniform(-3, 3);
    for (std::size_t j = 0; j < 5; ++j) c(r, j) += dr;
    for (std::size_t i = 0; i < 5; ++i) c(i, col) += dc;
    EXPECT_EQ(hungarian_assign(c).pairs, base.pairs);
  }
}

TEST(MatchCost, Examples) {
  const LossWeights w;
  const std::vector<double> boxes{0.5, 0.5, 0.2, 0.2};
  const std::vector<double> logits{-30, 30};
  const auto c = match_cost<double>(boxes, logits, {Box{0.5, 0.5, 0.2, 0.2}}, w);
  EXPECT_NEAR(c(0, 0), -w.ce, 1e-12);
  Philox rng(6, 0);
  std::vector<double> b3, l3;
  for (int q = 0; q < 3; ++q) {
    const Box b = random_box(rng);
    for (double v : {b.cx, b.cy, b.w, b.h}) b3.push_back(v);
    l3.push_back(rng.uniform(-3, 3));
    l3.push_back(rng.uniform(-3, 3));
  }
  const auto m = match_cost<double>(b3, l3, {random_box(rng)}, w);
  for (double v : m.values) EXPECT_TRUE(std::isfinite(v));
  const std::size_t argmin = static_cast<std::size_t>(std::min_element(m.values.begin(), m.values.end()) - m.values.begin());
  EXPECT_EQ(hungarian_assign(m).pairs.front().first, argmin);
}

TEST(DetectionLoss, PerfectConfidentPredictionIsNearZero) {
  const LossWeights w;
  const Tensor<double> boxes(Shape{1, 3, 4}, {0.5, 0.5, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.9, 0.9, 0.1, 0.1});
  const Tensor<double> logits(Shape{1, 3, 2}, {-5, 5, 5, -5, 5, -5});
  const auto l = detection_loss(boxes, logits, {{Box{0.5, 0.5, 0.2, 0.2}}}, w);
  const double ce_margin = std::log1p(std::exp(-10.0));
  EXPECT_NEAR(l.ce.item(), ce_margin, 1e-12);
  EXPECT_LT(l.total.item(), 0.01);
  EXPECT_EQ(l.matches[0].pairs.front().first, 0u);
}

TEST(DetectionLoss, ZeroWeightsGiveZeroAndTermsAreNonnegative) {
  Philox rng(7, 0);
  LossWeights zero{0, 0, 0, 0, 0, 0, 0.1};
  for (int t = 0; t < 50; ++t) {
    const auto boxes = random_tensor<double>({2, 3, 4}, rng, 0.05, 0.95);
    const auto logits = random_tensor<double>({2, 3, 2}, rng, -4, 4);
    const std::vector<std::vector<Box>> targets{{random_box(rng)}, {random_box(rng)}};
    EXPECT_EQ(detection_loss(boxes, logits, targets, zero).total.item(), 0.0);
    const auto l = detection_loss(boxes, logits, targets, LossWeights{});
    EXPECT_GE(l.total.item(), 0.0);
    EXPECT_GE(l.l1.item(), 0.0);
    EXPECT_GE(l.giou.item(), 0.0);
    EXPECT_GE(l.ce.item(), 0.0);
    EXPECT_NEAR(l.total.item(), 3 * l.giou.item() + l.l1.item() + l.ce.item(), 1e-12);
  }
}

TEST(DetectionLoss, GradientOnBoxes) {
  Philox rng(8, 0);
  const auto boxes = random_tensor<double>({2, 3, 4}, rng, 0.2, 0.8);
  const auto logits = random_tensor<double>({2, 3, 2}, rng, -2, 2);
  const std::vector<std::vector<Box>> targets{{random_box(rng)}, {random_box(rng)}};
  const double err = grad_check<double>(
      [&](const Tensor<double>& b) { return detection_loss(b, logits, targets, LossWeights{}).total; }, boxes, 1e-7);
  EXPECT_LT(err, 1e-3);
}

TEST(FocalLoss, MatchesClosedForm) {
  Philox rng(9, 0);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> p(64), g(64);
    for (std::size_t i = 0; i < 64; ++i) {
      p[i] = rng.uniform(0.01, 0.99);
      g[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
    }
    const Tensor<double> pt(Shape{1, 8, 8}, p), gt(Shape{1, 8, 8}, g);
    EXPECT_NEAR(focal_loss(pt, gt).item(), focal_oracle(p, g), 1e-12);
    EXPECT_NEAR(dice_loss(pt, gt).item(), dice_oracle(p, g), 1e-12);
  }
  EXPECT_THROW(focal_loss(Tensor<double>(Shape{2, 2}), Tensor<double>(Shape{2, 3})), DimensionError);
  EXPECT_THROW(dice_loss(Tensor<double>(Shape{2, 2}), Tensor<double>(Shape{2, 3})), DimensionError);
}

TEST(FocalLoss, PerfectBinaryPredictionIsNearZero) {
  std::vector<double> g(64 * 64, 0.0);
  for (std::size_t i = 0; i < g.size(); i += 3) g[i] = 1.0;
  const Tensor<double> t(Shape{1, 64, 64}, g);
  EXPECT_LT(focal_loss(t, t).item(), 1e-12);
  EXPECT_LT(dice_loss(t, t).item(), 1e-3);
  EXPECT_EQ(dice_loss(t, t).item(), 0.0);
  const Tensor<double> empty(Shape{1, 64, 64}, 0.0);
  EXPECT_EQ(dice_loss(empty, empty).item(), 0.0);
}

TEST(FocalLoss, PermutationInvariantOverPixels) {
  Philox rng(10, 0);
  std::vector<double> p(36), g(36);
  for (std::size_t i = 0; i < 36; ++i) {
    p[i] = rng.uniform(0.01, 0.99);
    g[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  std::vector<std::size_t> perm(36);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 35; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  std::vector<double> pp(36), gp(36);
  for (std::size_t i = 0; i < 36; ++i) {
    pp[i] = p[perm[i]];
    gp[i] = g[perm[i]];
  }
  const Tensor<double> a(Shape{6, 6}, p), ag(Shape{6, 6}, g), b(Shape{6, 6}, pp), bg(Shape{6, 6}, gp);
  EXPECT_NEAR(focal_loss(a, ag).item(), focal_loss(b, bg).item(), 1e-14);
  EXPECT_NEAR(dice_loss(a, ag).item(), dice_loss(b, bg).item(), 1e-14);
}

TEST(MaskIou, MatchesPixelCountsOnFixtures) {
  Philox rng(11, 0);
  for (int f = 0; f < 10; ++f) {
    const std::size_t side = 16;
    std::vector<std::uint8_t> a(side * side, 0), b(side * side, 0);
    const std::size_t ax = static_cast<std::size_t>(rng.uniform_int(0, 8)), ay = static_cast<std::size_t>(rng.uniform_int(0, 8));
    const std::size_t bx = static_cast<std::size_t>(rng.uniform_int(0, 8)), by = static_cast<std::size_t>(rng.uniform_int(0, 8));
    const std::size_t aw = 1 + static_cast<std::size_t>(rng.uniform_int(0, 7)), bw = 1 + static_cast<std::size_t>(rng.uniform_int(0, 7));
    for (std::size_t y = ay; y < ay + aw; ++y)
      for (std::size_t x = ax; x < ax + aw; ++x) a[y * side + x] = 1;
    for (std::size_t y = by; y < by + bw; ++y)
      for (std::size_t x = bx; x < bx + bw; ++x) b[y * side + x] = 1;
    const auto overlap = [](std::size_t p0, std::size_t pw, std::size_t q0, std::size_t qw) {
      const std::size_t lo = std::max(p0, q0), hi = std::min(p0 + pw, q0 + qw);
      return hi > lo ? hi - lo : 0;
    };
    const std::size_t inter = overlap(ax, aw, bx, bw) * overlap(ay, aw, by, bw);
    const std::size_t uni = aw * aw + bw * bw - inter;
    EXPECT_EQ(mask_iou(a, b), static_cast<double>(inter) / static_cast<double>(uni)) << "fixture " << f;
  }
  const std::vector<std::uint8_t> none(9, 0);
  EXPECT_EQ(mask_iou(none, none), 1.0);
}
