#include <gtest/gtest.h>

#include <cmath>

#include "../common/gradient_suite.hpp"
#include "refformer/backbone.hpp"
#include "refformer/grad_check.hpp"
#include "refformer/qa_module.hpp"
#include "refformer/vocabulary.hpp"

using namespace refformer;
using refformer::testing::random_tensor;

namespace {

ModelConfig tiny(std::size_t qa_heads = 2) {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.width = 16;
  c.layers = 4;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.qa_layers = {2, 4};
  c.qa_width = 8;
  c.qa_heads = qa_heads;
  c.num_queries = 3;
  c.fusion_layers = {4};
  c.decoder_heads = 2;
  return c;
}

TokenBatch two_expressions() {
  const auto a = tokenize({"red", "circle"}, 6);
  const auto b = tokenize({"big", "blue", "square", "left"}, 6);
  return make_token_batch({&a, &b});
}

void zero_tensor(Tensor<double>& t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

bool same(const Tensor<double>& a, const Tensor<double>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

double max_abs(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

void expect_row_stochastic(const Tensor<double>& w, double tol) {
  const std::size_t cols = w.shape().back();
  for (std::size_t r = 0; r < w.numel() / cols; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += w.data()[r * cols + c];
    EXPECT_NEAR(total, 1.0, tol);
  }
}

struct Streams {
  Tensor<double> image, text;
  TokenBatch tokens;
};

Streams random_streams(const ModelConfig& cfg, std::uint64_t seed) {
  Philox rng(seed, 0);
  Streams s;
  s.tokens = two_expressions();
  s.image = random_tensor<double>({2, cfg.image_tokens(), cfg.width}, rng);
  s.text = random_tensor<double>({2, s.tokens.length, cfg.width}, rng);
  return s;
}

}  // namespace

TEST(QaDownProject, WidthsAndZeroWeights) {
  const auto cfg = tiny();
  Philox rng(1, 0);
  QaBlock<double> block(2, cfg, rng);
  const auto s = random_streams(cfg, 2);
  auto [fv, ft] = block.down_project(s.image, s.text);
  EXPECT_EQ(fv.shape(), (Shape{2, cfg.image_tokens(), cfg.qa_width}));
  EXPECT_EQ(ft.shape(), (Shape{2, s.tokens.length, cfg.qa_width}));
  block.down_v.zero();
  block.down_t.zero();
  auto [zv, zt] = block.down_project(s.image, s.text);
  EXPECT_EQ(max_abs(zv), 0.0);
  EXPECT_EQ(max_abs(zt), 0.0);
  EXPECT_THROW(block.down_project(Tensor<double>(Shape{1, 5, 3}), s.text), DimensionError);
}

TEST(QaDownProject, GradientMatchesFiniteDifferences) {
  const auto cfg = tiny();
  Philox rng(3, 0);
  QaBlock<double> block(2, cfg, rng);
  const auto s = random_streams(cfg, 4);
  const Tensor<double> w = random_tensor<double>({2, cfg.image_tokens(), cfg.qa_width}, rng);
  const double err = grad_check<double>(
      [&](const Tensor<double>& z) { return sum(mul(block.down_project(z, s.text).first, w)); }, s.image, 1e-6);
  EXPECT_LT(err, 1e-4);
}

TEST(QaCamf, PartitionSizes) {
  const auto cfg = tiny();
  Philox rng(5, 0);
  QaBlock<double> block(2, cfg, rng);
  const auto s = random_streams(cfg, 6);
  auto [fv, ft] = block.down_project(s.image, s.text);
  const auto q = random_tensor<double>({2, cfg.num_queries, cfg.qa_width}, rng);
  const auto c = block.camf(q, fv, ft, &s.tokens.key_mask);
  EXPECT_EQ(c.image_attention.shape(), (Shape{2, 1 + cfg.num_queries + cfg.image_tokens(), s.tokens.length}));
  EXPECT_EQ(c.text_attention.shape(), (Shape{2, 1 + s.tokens.length, cfg.image_tokens()}));
  EXPECT_EQ(c.reg_v.shape(), (Shape{2, 1, cfg.qa_width}));
  EXPECT_EQ(c.reg_t.shape(), (Shape{2, 1, cfg.qa_width}));
  EXPECT_EQ(c.queries.shape(), q.shape());
  EXPECT_EQ(c.image.shape(), fv.shape());
  EXPECT_EQ(c.text.shape(), ft.shape());
  expect_row_stochastic(c.image_attention, 1e-12);
  expect_row_stochastic(c.text_attention, 1e-12);
}

TEST(QaCamf, ZeroValueProjectionLeavesQueriesUnchanged) {
  const auto cfg = tiny();
  Philox rng(7, 0);
  QaBlock<double> block(2, cfg, rng);
  block.camf_image.v_proj.zero();
  zero_tensor(block.camf_image.o_proj.bias);
  const auto s = random_streams(cfg, 8);
  auto [fv, ft] = block.down_project(s.image, s.text);
  const auto q = random_tensor<double>({2, cfg.num_queries, cfg.qa_width}, rng);
  const auto c = block.camf(q, fv, ft, &s.tokens.key_mask);
  EXPECT_TRUE(same(c.queries, q));
  EXPECT_TRUE(same(c.image, fv));
}

TEST(QaCamf, PaddedTextKeysReceiveNoWeight) {
  const auto cfg = tiny();
  Philox rng(9, 0);
  QaBlock<double> block(2, cfg, rng);
  const auto s = random_streams(cfg, 10);
  auto [fv, ft] = block.down_project(s.image, s.text);
  const auto q = random_tensor<double>({2, cfg.num_queries, cfg.qa_width}, rng);
  const auto c = block.camf(q, fv, ft, &s.tokens.key_mask);
  const std::size_t rows = c.image_attention.dim(1), nt = s.tokens.length;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < nt; ++j)
        if (!s.tokens.key_mask[b * nt + j]) {
          EXPECT_EQ(c.image_attention.data()[(b * rows + r) * nt + j], 0.0);
        }
}

TEST(QaAttention, SingleHeadHandExample) {
  Philox rng(11, 0);
  MultiHeadAttention<double> mha(2, 1, rng);
  for (auto* lin : {&mha.q_proj, &mha.k_proj, &mha.v_proj, &mha.o_proj}) {
    lin->zero();
    lin->weight.mutable_data()[0] = 1.0;
    lin->weight.mutable_data()[3] = 1.0;
  }
  const Tensor<double> q(Shape{1, 1, 2}, {1.0, 2.0});
  const Tensor<double> k(Shape{1, 2, 2}, {0.5, -1.0, 2.0, 1.0});
  const Tensor<double> v(Shape{1, 2, 2}, {3.0, 0.0, -1.0, 4.0});
  const auto y = mha(q, k, v);
  const double s1 = (1.0 * 0.5 + 2.0 * -1.0) / std::sqrt(2.0), s2 = (1.0 * 2.0 + 2.0 * 1.0) / std::sqrt(2.0);
  const double w1 = std::exp(s1) / (std::exp(s1) + std::exp(s2)), w2 = 1.0 - w1;
  EXPECT_NEAR(y.data()[0], w1 * 3.0 + w2 * -1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], w1 * 0.0 + w2 * 4.0, 1e-12);
}

TEST(QaRefine, AttentionShapeAndZeroMlpIdentity) {
  const auto cfg = tiny();
  Philox rng(13, 0);
  QaBlock<double> block(2, cfg, rng);
  block.tr_query_mlp.zero();
  const auto s = random_streams(cfg, 14);
  auto [fv, ft] = block.down_project(s.image, s.text);
  const auto q = random_tensor<double>({2, cfg.num_queries, cfg.qa_width}, rng);
  const auto c = block.camf(q, fv, ft, &s.tokens.key_mask);
  const auto r = block.target_refine(c, &s.tokens.key_mask);
  EXPECT_EQ(r.attention.shape(), (Shape{2, cfg.num_queries, cfg.image_tokens()}));
  expect_row_stochastic(r.attention, 1e-12);
  EXPECT_TRUE(same(r.queries, c.queries));
  EXPECT_EQ(r.image.shape(), c.image.shape());
  EXPECT_EQ(r.text.shape(), c.text.shape());
}

TEST(QaRefine, AttentionConcentratesOnAlignedToken) {
  const auto cfg = tiny(1);
  Philox rng(15, 0);
  QaBlock<double> block(2, cfg, rng);
  const std::size_t dl = cfg.qa_width, nv = cfg.image_tokens();
  for (auto* lin : {&block.tr_query.q_proj, &block.tr_query.k_proj}) {
    lin->zero();
    for (std::size_t i = 0; i < dl; ++i) lin->weight.mutable_data()[i * dl + i] = 1.0;
  }
  CamfOutput<double> c;
  c.queries = Tensor<double>(Shape{1, cfg.num_queries, dl}, 0.0);
  for (std::size_t i = 0; i < cfg.num_queries; ++i) c.queries.mutable_data()[i * dl] = 6.0;
  c.image = random_tensor<double>({1, nv, dl}, rng, -0.1, 0.1);
  for (std::size_t j = 0; j < nv; ++j) c.image.mutable_data()[j * dl] = 0.0;
  const std::size_t target = 3;
  c.image.mutable_data()[target * dl] = 6.0;
  const auto r = block.target_refine(c, nullptr, false, false);
  for (std::size_t i = 0; i < cfg.num_queries; ++i) EXPECT_GT(r.attention.data()[i * nv + target], 0.99);
  EXPECT_FALSE(r.image.defined());
  EXPECT_FALSE(r.text.defined());
}

TEST(QaRefine, TextRefinementUsesTextRegulationToken) {
  const auto cfg = tiny();
  Philox rng(17, 0);
  QaBlock<double> block(2, cfg, rng);
  const auto s = random_streams(cfg, 18);
  auto [fv, ft] = block.down_project(s.image, s.text);
  const auto q = random_tensor<double>({2, cfg.num_queries, cfg.qa_width}, rng);
  const auto base = block.target_refine(block.camf(q, fv, ft, &s.tokens.key_mask), &s.tokens.key_mask);
  block.reg_v.mutable_data()[0] += 0.5;
  const auto moved_v = block.target_refine(block.camf(q, fv, ft, &s.tokens.key_mask), &s.tokens.key_mask);
  EXPECT_TRUE(same(base.text, moved_v.text));
  EXPECT_TRUE(same(base.image, moved_v.image));
  EXPECT_TRUE(same(base.reg_t, moved_v.reg_t));
  EXPECT_FALSE(same(base.reg_v, moved_v.reg_v));
  block.reg_t.mutable_data()[0] += 0.5;
  const auto moved_t = block.target_refine(block.camf(q, fv, ft, &s.tokens.key_mask), &s.tokens.key_mask);
  EXPECT_FALSE(same(moved_v.reg_t, moved_t.reg_t));
  EXPECT_TRUE(same(moved_v.reg_v, moved_t.reg_v));
}

TEST(QaInject, ZeroUpProjectionIsExactPassThrough) {
  const auto cfg = tiny();
  Philox rng(19, 0);
  QaBlock<double> block(2, cfg, rng);
  block.up_v.zero();
  block.up_t.zero();
  const auto s = random_streams(cfg, 20);
  const auto gv = random_tensor<double>({2, cfg.image_tokens(), cfg.qa_width}, rng);
  const auto gt = random_tensor<double>({2, s.tokens.length, cfg.qa_width}, rng);
  auto [zv, zt] = block.up_project_inject(gv, gt, block.reg_v, block.reg_t, s.image, s.text);
  EXPECT_TRUE(same(zv, s.image));
  EXPECT_TRUE(same(zt, s.text));
}

TEST(QaInject, ZeroRegulationGivesHalfGate) {
  Philox rng(21, 0);
  Linear<double> up(4, 4, rng);
  up.zero();
  for (std::size_t i = 0; i < 4; ++i) up.weight.mutable_data()[i * 4 + i] = 1.0;
  const Tensor<double> g(Shape{1, 2, 4}, 1.0), z(Shape{1, 2, 4}, 0.0), reg(Shape{1, 1, 4}, 0.0);
  const auto out = QaBlock<double>::inject(up, g, reg, z);
  for (double v : out.data()) EXPECT_EQ(v, 0.5);
}

TEST(QaInject, SaturatedGateSuppressesSignal) {
  Philox rng(23, 0);
  Linear<double> up(8, 16, rng);
  const auto g = random_tensor<double>({2, 5, 8}, rng);
  const auto z = random_tensor<double>({2, 5, 16}, rng);
  const Tensor<double> reg(Shape{1, 1, 8}, -20.0);
  const auto out = QaBlock<double>::inject(up, g, reg, z);
  const double bound = 1e-6 * max_abs(up(g));
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_LT(std::abs(out.data()[i] - z.data()[i]), bound);
}

TEST(QaForward, NonInsertionLayerIsContractError) {
  const auto cfg = tiny();
  Philox rng(25, 0);
  QaStack<double> stack(cfg, rng);
  const auto s = random_streams(cfg, 26);
  EXPECT_THROW(stack.forward(3, s.image, s.text, stack.initial_batch(2), &s.tokens.key_mask), ContractError);
  EXPECT_NO_THROW(stack.forward(2, s.image, s.text, stack.initial_batch(2), &s.tokens.key_mask));
}

TEST(QaForward, DirectionControlsWhichStreamIsTouched) {
  const auto s = random_streams(tiny(), 28);
  const std::pair<QaDirection, std::pair<bool, bool>> cases[] = {
      {QaDirection::kBoth, {true, true}},
      {QaDirection::kImageOnly, {true, false}},
      {QaDirection::kTextOnly, {false, true}},
      {QaDirection::kNone, {false, false}},
  };
  for (const auto& [dir, touched] : cases) {
    auto cfg = tiny();
    cfg.direction = dir;
    Philox rng(27, 0);
    QaStack<double> stack(cfg, rng);
    const auto o = stack.forward(2, s.image, s.text, stack.initial_batch(2), &s.tokens.key_mask);
    EXPECT_EQ(!same(o.image, s.image), touched.first);
    EXPECT_EQ(!same(o.text, s.text), touched.second);
    EXPECT_EQ(o.trace.camf_text_attention.defined(), touched.second);
    EXPECT_EQ(o.queries.shape(), (Shape{2, cfg.num_queries, cfg.qa_width}));
  }
}

TEST(QaForward, TraceMapsAreRowStochastic) {
  const auto cfg = tiny();
  Philox rng(29, 0);
  QaStack<double> stack(cfg, rng);
  const auto s = random_streams(cfg, 30);
  const auto o = stack.forward(2, s.image, s.text, stack.initial_batch(2), &s.tokens.key_mask);
  EXPECT_EQ(o.trace.layer, 2u);
  expect_row_stochastic(o.trace.query_attention, 1e-5);
  expect_row_stochastic(o.trace.camf_image_attention, 1e-5);
  expect_row_stochastic(o.trace.camf_text_attention, 1e-5);
}

TEST(QaForward, QueriesChainFromInitialQueries) {
  const auto cfg = tiny();
  Philox rng(31, 0);
  QaStack<double> stack(cfg, rng);
  const auto s = random_streams(cfg, 32);
  for (std::size_t last : {std::size_t{2}, std::size_t{4}}) {
    stack.initial_queries.set_requires_grad(true);
    stack.initial_queries.zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto o = stack.forward(2, s.image, s.text, stack.initial_batch(2), &s.tokens.key_mask);
    if (last == 4) o = stack.forward(4, o.image, o.text, o.queries, &s.tokens.key_mask);
    tape.backward(sum(o.queries));
    ASSERT_TRUE(stack.initial_queries.has_grad());
    EXPECT_GT(max_abs(Tensor<double>(stack.initial_queries.shape(),
                                     std::vector<double>(stack.initial_queries.grad().begin(),
                                                         stack.initial_queries.grad().end()))),
              1e-8)
        << "layer " << last;
  }
}

namespace {

std::pair<Tensor<double>, Tensor<double>> run_backbone(const DualEncoder<double>& enc, const QaStack<double>* qa,
                                                       const Tensor<double>& patches, const TokenBatch& tokens,
                                                       std::size_t layers) {
  Tensor<double> zv = enc.image.embed(patches), zt = enc.text.embed(tokens);
  Tensor<double> q = qa ? qa->initial_batch(patches.dim(0)) : Tensor<double>();
  for (std::size_t i = 1; i <= layers; ++i) {
    zv = enc.image.layer(i, zv);
    zt = enc.text.layer(i, zt, &tokens.key_mask);
    if (qa && qa->has_layer(i)) {
      auto o = qa->forward(i, zv, zt, q, &tokens.key_mask);
      zv = o.image;
      zt = o.text;
      q = o.queries;
    }
  }
  return {zv, zt};
}

}  // namespace

TEST(QaForward, ZeroWeightsReproduceQaFreeBackbone) {
  const auto cfg = tiny();
  Philox rng(33, 0);
  DualEncoder<double> enc(cfg, rng);
  const auto tokens = two_expressions();
  const auto patches = random_tensor<double>({2, cfg.num_patches(), cfg.patch_dim()}, rng);
  const auto reference = run_backbone(enc, nullptr, patches, tokens, cfg.layers);

  QaStack<double> up_only(cfg, rng);
  for (std::size_t layer : cfg.qa_layers) {
    up_only.block(layer).up_v.zero();
    up_only.block(layer).up_t.zero();
  }
  const auto with_zero_up = run_backbone(enc, &up_only, patches, tokens, cfg.layers);
  EXPECT_TRUE(same(with_zero_up.first, reference.first));
  EXPECT_TRUE(same(with_zero_up.second, reference.second));

  QaStack<double> all_zero(cfg, rng);
  all_zero.visit("qa", [](const std::string& name, Tensor<double>& t) {
    if (name.find("_ln.") == std::string::npos) zero_tensor(t);
  });
  const auto with_zero = run_backbone(enc, &all_zero, patches, tokens, cfg.layers);
  EXPECT_TRUE(same(with_zero.first, reference.first));
  EXPECT_TRUE(same(with_zero.second, reference.second));
}
