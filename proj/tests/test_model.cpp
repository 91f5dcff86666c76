#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "decred/grad_check.hpp"
#include "decred/model.hpp"
#include "decred/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using decred::Features;
using decred::Model;
using decred::ModelConfig;
using decred::Rng;
using decred::ad::Matrix;

ModelConfig small_config() {
  ModelConfig c;
  c.feat_dim = 8;
  c.conv_channels = 3;
  c.encoder_layers = 2;
  c.decoder_layers = 4;
  c.d_model = 16;
  c.d_ff = 32;
  c.heads = 2;
  c.dropout = 0.1;
  c.vocab_size = 11;
  c.taps = {2, 4};
  return c;
}

Features random_features(int T, int F, std::uint64_t seed) {
  Rng rng(seed);
  Features f(T, F);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.normal());
  return f;
}

TEST(Subsampling, LengthFormula) {
  EXPECT_EQ(decred::subsampled_length(100), 25);
  EXPECT_EQ(decred::subsampled_length(4), 1);
  EXPECT_EQ(decred::subsampled_length(5), 2);
  Model<float> m(small_config(), 1);
  EXPECT_EQ(m.encode(random_features(100, 8, 1)).rows(), 25);
  EXPECT_EQ(m.encode(random_features(4, 8, 1)).rows(), 1);
  EXPECT_THROW(m.encode(random_features(3, 8, 1)), std::invalid_argument);
  EXPECT_THROW(m.encode(random_features(10, 7, 1)), std::invalid_argument);
}

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  c.taps = {2};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.taps = {0, 4};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  const nlohmann::json j = small_config();
  EXPECT_EQ(nlohmann::json(j.get<ModelConfig>()), j);
}

TEST(CtcHead, RowsAreNormalizedAndUniformAtZeroWeights) {
  Model<double> m(small_config(), 2);
  const auto enc = m.encode(random_features(20, 8, 2));
  const Matrix<double> lp = m.ctc_log_probs(enc);
  for (Eigen::Index t = 0; t < lp.rows(); ++t) EXPECT_NEAR(lp.row(t).array().exp().sum(), 1.0, 1e-6);
  m.parameter("ctc.weight").value.setZero();
  const Matrix<double> uni = m.ctc_log_probs(enc);
  EXPECT_TRUE((uni.array() - (-std::log(11.0))).abs().maxCoeff() < 1e-12);
}

TEST(CtcHead, MatchesRecordedForwardPass) {
  std::ifstream in(std::string(DECRED_TEST_DATA) + "/ctc_head_golden.json");
  ASSERT_TRUE(in) << "missing golden file";
  const auto golden = nlohmann::json::parse(in);
  Model<float> m(golden["config"].get<ModelConfig>(), golden["seed"].get<std::uint64_t>());
  const auto f = random_features(golden["frames"], m.config().feat_dim, golden["feature_seed"]);
  const Matrix<float> lp = m.ctc_log_probs(m.encode(f));
  const auto expected = golden["log_probs"].get<std::vector<std::vector<double>>>();
  ASSERT_EQ(static_cast<std::size_t>(lp.rows()), expected.size());
  for (Eigen::Index t = 0; t < lp.rows(); ++t)
    for (Eigen::Index k = 0; k < lp.cols(); ++k)
      EXPECT_NEAR(lp(t, k), expected[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)], 1e-5);
}

TEST(Decoder, OneLogitMatrixPerTapAndDeterministic) {
  Model<float> m(small_config(), 3);
  const auto enc = m.encode(random_features(24, 8, 3));
  const std::vector<int> prefix{2, 5, 6};
  const auto a = m.decode_step(prefix, &enc);
  const auto b = m.decode_step(prefix, &enc);
  ASSERT_EQ(a.taps, (std::vector<int>{2, 4}));
  ASSERT_EQ(a.logits.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.logits[i].rows(), 3);
    EXPECT_EQ(a.logits[i].cols(), 11);
    EXPECT_TRUE((a.logits[i].array() == b.logits[i].array()).all());
    EXPECT_TRUE(a.logits[i].allFinite());
  }
}

TEST(Decoder, Causality) {
  Model<double> m(small_config(), 4);
  const auto enc = m.encode(random_features(24, 8, 4));
  const std::vector<int> full{2, 5, 6, 7, 8, 9};
  const auto ref = m.decode_step(full, &enc);
  for (std::size_t n = 1; n < full.size(); ++n) {
    const std::vector<int> prefix(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(n));
    const auto part = m.decode_step(prefix, &enc);
    for (std::size_t i = 0; i < part.taps.size(); ++i)
      EXPECT_LT((part.logits[i] - ref.logits[i].topRows(static_cast<Eigen::Index>(n))).cwiseAbs().maxCoeff(), 1e-12);
  }
  // Changing token t leaves earlier positions alone.
  std::vector<int> changed = full;
  changed[4] = 10;
  const auto alt = m.decode_step(changed, &enc);
  for (std::size_t i = 0; i < alt.taps.size(); ++i) {
    EXPECT_LT((alt.logits[i].topRows(4) - ref.logits[i].topRows(4)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GT((alt.logits[i].row(4) - ref.logits[i].row(4)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Decoder, PrefixLongerThanPositionTableThrows) {
  ModelConfig c = small_config();
  c.max_positions = 4;
  Model<float> m(c, 1);
  const auto enc = m.encode(random_features(16, 8, 1));
  EXPECT_THROW(m.decode_step(std::vector<int>{2, 5, 5, 5, 5}, &enc), std::invalid_argument);
}

TEST(Parameters, EachExtraTapAddsDModelTimesVocab) {
  ModelConfig c = small_config();
  c.taps = {4};
  const std::size_t base = Model<float>(c, 1).parameter_count();
  c.taps = {2, 4};
  EXPECT_EQ(Model<float>(c, 1).parameter_count(), base + 16u * 11u);
  c.taps = {1, 2, 3, 4};
  EXPECT_EQ(Model<float>(c, 1).parameter_count(), base + 3u * 16u * 11u);
}

TEST(Parameters, SharedTensorsDoNotDependOnTaps) {
  ModelConfig c = small_config();
  Model<float> a(c, 9);
  c.taps = {4};
  Model<float> b(c, 9);
  for (const auto* p : b.parameters()) EXPECT_TRUE((a.parameter(p->name).value.array() == p->value.array()).all()) << p->name;
}

TEST(Batch, UtteranceOutputsDoNotDependOnBatchMates) {
  Model<float> m(small_config(), 5);
  const auto f1 = random_features(20, 8, 5);
  const auto f2 = random_features(33, 8, 6);
  decred::ad::Tape<float> alone_tape(false);
  auto alone = m.bind(alone_tape);
  const Matrix<float> solo = m.encode(alone, f1).value();
  decred::ad::Tape<float> batch_tape(false);
  auto batch = m.bind(batch_tape);
  m.encode(batch, f2);
  const Matrix<float> inside = m.encode(batch, f1).value();
  EXPECT_LT((solo - inside).cwiseAbs().maxCoeff(), 1e-5);
}

// Full composite loss through a one-layer encoder and decoder, all tensors.
void full_model_grad_check(decred::EncoderBlock block) {
  ModelConfig c;
  c.feat_dim = 5;
  c.conv_channels = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.d_model = 4;
  c.d_ff = 6;
  c.heads = 2;
  c.dropout = 0.0;
  c.vocab_size = 7;
  c.taps = {1};
  c.encoder_block = block;
  c.branch_kernel = 3;
  Model<double> m(c, 12);
  decred::LossConfig loss;
  loss.alpha = 0.3;
  loss.betas = {{1, 1.0}};
  loss.label_smoothing = 0.1;
  std::vector<decred::TrainItem> items{{"a", random_features(12, 5, 7), {5, 6}}, {"b", random_features(9, 5, 8), {6}}};
  auto params = m.parameters();
  const auto report = decred::grad_check(std::span<decred::ad::Parameter<double>* const>(params), [&](decred::ad::Tape<double>& t) {
    auto s = m.bind(t);
    return decred::batch_loss(m, s, items, loss).total;
  });
  EXPECT_LT(report.max_rel_error, 1e-3) << report.worst_parameter << "[" << report.worst_index << "]";
  EXPECT_GT(report.coordinates, 100u);
}

TEST(GradCheck, FullTinyModelPlainEncoder) { full_model_grad_check(decred::EncoderBlock::kPlain); }
TEST(GradCheck, FullTinyModelBranchEncoder) { full_model_grad_check(decred::EncoderBlock::kBranch); }

TEST(Checkpoint, RoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "decred_test_ckpt";
  fs::remove_all(dir);
  Model<float> m(small_config(), 13);
  m.save(dir, {{"note", "x"}});
  nlohmann::json extra;
  Model<float> back = Model<float>::load(dir, &extra);
  EXPECT_EQ(extra["note"], "x");
  EXPECT_EQ(back.config().taps, m.config().taps);
  for (const auto* p : m.parameters()) EXPECT_TRUE((back.parameter(p->name).value.array() == p->value.array()).all());
  const auto manifest = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
  EXPECT_EQ(manifest["tensors"][0]["dtype"], "float32");
  EXPECT_EQ(fs::file_size(dir / "weights.bin"), m.parameter_count() * 4);
}

}  // namespace
