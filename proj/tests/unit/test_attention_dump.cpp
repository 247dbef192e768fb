#include <gtest/gtest.h>

#include <cmath>

#include "../common/gradient_suite.hpp"
#include "refformer/attention_dump.hpp"

using namespace refformer;
using refformer::testing::small_model_config;
using refformer::testing::small_samples;

TEST(PatchAttention, DropsClassColumnAndRenormalizes) {
  // one sample, two queries, class token + 4 patches
  const Tensor<double> w(Shape{1, 2, 5}, {0.5, 0.1, 0.1, 0.2, 0.1, 0.0, 0.25, 0.25, 0.25, 0.25});
  const auto m = patch_attention(w, 0);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_NEAR(m[0][0], 0.2, 1e-15);
  EXPECT_NEAR(m[0][2], 0.4, 1e-15);
  EXPECT_NEAR(m[1][3], 0.25, 1e-15);
  EXPECT_THROW(patch_attention(w, 1), ContractError);
}

TEST(AttentionMass, Examples) {
  const std::vector<double> uniform(4, 0.25);
  EXPECT_NEAR(attention_mass_in_box(uniform, 2, Box{0.25, 0.5, 0.5, 1.0}), 0.5, 1e-12);
  EXPECT_NEAR(attention_mass_in_box(uniform, 2, Box{0.5, 0.5, 1.0, 1.0}), 1.0, 1e-12);
  // box [0.25,0.75]^2 overlaps a quarter of every cell
  EXPECT_NEAR(attention_mass_in_box(uniform, 2, Box{0.5, 0.5, 0.5, 0.5}), 0.25, 1e-12);
  const std::vector<double> peaked{0.0, 0.0, 0.0, 1.0};
  EXPECT_NEAR(attention_mass_in_box(peaked, 2, Box{0.75, 0.75, 0.5, 0.5}), 1.0, 1e-12);
  EXPECT_NEAR(attention_mass_in_box(peaked, 2, Box{0.25, 0.25, 0.5, 0.5}), 0.0, 1e-12);
  EXPECT_THROW(attention_mass_in_box(uniform, 3, Box{}), DimensionError);
}

TEST(SignTest, MatchesBinomialTail) {
  auto diffs = [](std::size_t pos, std::size_t neg, std::size_t ties) {
    std::vector<double> d;
    d.insert(d.end(), pos, 1.0);
    d.insert(d.end(), neg, -1.0);
    d.insert(d.end(), ties, 0.0);
    return d;
  };
  EXPECT_NEAR(sign_test(diffs(8, 2, 0)).p_value, 56.0 / 1024.0, 1e-12);
  EXPECT_NEAR(sign_test(diffs(15, 5, 7)).p_value, 0.020694732666015625, 1e-12);
  EXPECT_NEAR(sign_test(diffs(60, 40, 0)).p_value, 0.028443966820490392, 1e-10);
  const auto t = sign_test(diffs(3, 1, 2));
  EXPECT_EQ(t.ties, 2u);
  EXPECT_EQ(sign_test({}).p_value, 1.0);
  EXPECT_NEAR(sign_test(diffs(0, 5, 0)).p_value, 1.0, 1e-12);
}

TEST(DumpAttention, RowsSumToOneAndOneMapPerLayer) {
  const auto cfg = small_model_config(false);
  RefFormerModel<double> model(cfg);
  const auto data = prepare<double>(small_samples(4, 3, cfg.image_size), cfg);
  const auto d = dump_attention(model, data, 2);
  EXPECT_EQ(d.layers, cfg.qa_layers);
  ASSERT_EQ(d.qa.size(), cfg.qa_layers.size());
  const std::size_t patches = d.grid * d.grid;
  auto check = [&](const AttentionMap& m) {
    ASSERT_EQ(m.size(), cfg.num_queries);
    for (const auto& row : m) {
      ASSERT_EQ(row.size(), patches);
      double s = 0;
      for (double v : row) s += v;
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  };
  for (const auto& m : d.qa) {
    ASSERT_TRUE(m.has_value());
    check(*m);
  }
  check(d.decoder);
  const auto j = d.to_json();
  EXPECT_EQ(j["qa_layers"].size(), cfg.qa_layers.size());
  EXPECT_EQ(j["grid"], d.grid);
  EXPECT_THROW(dump_attention(model, data, 3), ContractError);
}

TEST(DumpAttention, RefinementStatisticCountsEverySample) {
  const auto cfg = small_model_config(false);
  RefFormerModel<double> model(cfg);
  const auto data = prepare<double>(small_samples(6, 5, cfg.image_size), cfg);
  const auto r = refinement_statistic(model, data, 2);
  EXPECT_EQ(r.samples, 5u);
  EXPECT_EQ(r.test.positive + r.test.negative + r.test.ties, 5u);
  EXPECT_GE(r.first_mean, 0.0);
  EXPECT_LE(r.last_mean, 1.0 + 1e-12);

  auto one = cfg;
  one.qa_layers = {4};
  RefFormerModel<double> single(one);
  EXPECT_THROW(refinement_statistic(single, data), ContractError);
}
