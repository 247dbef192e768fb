#include <gtest/gtest.h>

#include <set>

#include "refformer/checkpoint.hpp"
#include "refformer/model.hpp"
#include "refformer/run_config.hpp"

using namespace refformer;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.image_size = 16;
  c.width = 16;
  c.layers = 4;
  c.qa_layers = {2, 4};
  c.qa_width = 8;
  c.fusion_layers = {2, 4};
  return c;
}

std::string hex(const std::string& bytes) {
  static const char* d = "0123456789abcdef";
  std::string out;
  for (unsigned char c : bytes) {
    out.push_back(d[c >> 4]);
    out.push_back(d[c & 15]);
  }
  return out;
}

}  // namespace

TEST(Checkpoint, HandBuiltLayout) {
  const std::string bytes = encode_checkpoint({{"a", {2}, {1.0f, -2.0f}}});
  ASSERT_EQ(bytes.size(), 33u);
  EXPECT_EQ(hex(bytes.substr(0, 29)), "5246434b01000000010000006101000000020000000000803f000000c0");
  EXPECT_EQ(hex(bytes.substr(29)), "efd5960d");
  const auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].name, "a");
  EXPECT_EQ(back[0].dims, std::vector<std::uint32_t>{2});
  EXPECT_EQ(back[0].data, (std::vector<float>{1.0f, -2.0f}));
}

TEST(Checkpoint, CorruptionNamesOffset) {
  std::string bytes = encode_checkpoint({{"w", {3}, {1, 2, 3}}});
  std::string flipped = bytes;
  flipped[14] ^= 0x01;
  try {
    decode_checkpoint(flipped);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos);
  }
  EXPECT_THROW(decode_checkpoint("XXXX" + bytes.substr(4)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 8)), CheckpointError);
}

TEST(Checkpoint, ModelRoundTripIsExact) {
  auto cfg = tiny();
  RefFormerModel<float> a(cfg);
  cfg.seed = 99;
  RefFormerModel<float> b(cfg);
  const std::string bytes = encode_model(a);
  EXPECT_NE(encode_model(b), bytes);
  load_model(b, bytes);
  EXPECT_EQ(encode_model(b), bytes);
}

TEST(Checkpoint, EveryParameterAppearsOnce) {
  RefFormerModel<float> m(tiny());
  const auto table = collect_parameters(m);
  std::set<std::string> names;
  for (const auto& t : table) EXPECT_TRUE(names.insert(t.name).second) << t.name;
  EXPECT_EQ(table.size(), m.named_parameters().size());
}

TEST(Checkpoint, LoadRejectsMismatchedTables) {
  RefFormerModel<float> m(tiny());
  auto table = collect_parameters(m);
  auto missing = table;
  missing.pop_back();
  EXPECT_THROW(load_model(m, encode_checkpoint(missing)), CheckpointError);
  auto extra = table;
  extra.push_back({"stray", {1}, {0.0f}});
  EXPECT_THROW(load_model(m, encode_checkpoint(extra)), CheckpointError);
  auto reshaped = table;
  reshaped[0].dims = {static_cast<std::uint32_t>(reshaped[0].data.size())};
  ASSERT_NE(reshaped[0].dims, table[0].dims);
  EXPECT_THROW(load_model(m, encode_checkpoint(reshaped)), CheckpointError);

  auto cfg = tiny();
  RefFormerModel<float> b(cfg);
  const std::string backbone = encode_model(m, "backbone");
  load_model(b, backbone, "backbone");
  EXPECT_EQ(encode_model(b, "backbone"), backbone);
}

TEST(RunConfigText, RoundTrip) {
  RunConfig c;
  c.model.qa_layers = {4};
  c.model.fusion_layers = {2, 6};
  c.model.direction = QaDirection::kImageOnly;
  c.model.strategy = QueryStrategy::kLinguistic;
  c.train.lr = 3.5e-4;
  c.train.weights.aux = 0.25;
  c.data_path = "some/file.jsonl";
  const RunConfig back = RunConfig::parse(c.to_text());
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(RunConfig::parse(RunConfig{}.to_text()), RunConfig{});
}

TEST(RunConfigText, CommentsBlankLinesAndNone) {
  const auto c = RunConfig::parse("# header\n\n  lr = 0.002   # trailing\nqa_layers = none\n");
  EXPECT_DOUBLE_EQ(c.train.lr, 0.002);
  EXPECT_TRUE(c.model.qa_layers.empty());
}

TEST(RunConfigText, Errors) {
  EXPECT_THROW(RunConfig::parse("learning_rate = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("lr\n"), ConfigError);
  try {
    RunConfig::parse("epochs = ten\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochs"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::parse("qa_layers = 2,9\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("fusion_layers = 0\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("direction = sideways\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("lr = 0\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("freeze = maybe\n"), ConfigError);
}
