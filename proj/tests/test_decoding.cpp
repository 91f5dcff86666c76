#include <gtest/gtest.h>

#include <cmath>

#include "ctc_oracle.hpp"
#include "decred/decoding.hpp"

namespace {

using decred::DecodeConfig;
using decred::Fusion;
using decred::FusionWeights;
using decred::Hypothesis;
using decred::Model;
using decred::ModelConfig;
using decred::Rng;
using decred::ad::Matrix;

Matrix<double> random_log_probs(int T, int V, Rng& rng) {
  Matrix<double> x(T, V);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = 2.0 * rng.normal();
  return decred::ad::log_softmax_rows(x);
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.feat_dim = 6;
  c.conv_channels = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 3;
  c.d_model = 8;
  c.d_ff = 16;
  c.heads = 2;
  c.dropout = 0.0;
  c.vocab_size = 9;
  c.taps = {1, 3};
  return c;
}

decred::Features random_features(int T, int F, Rng& rng) {
  decred::Features f(T, F);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.normal());
  return f;
}

// Attention-only argmax chaining, written independently of the search code.
std::vector<int> attention_argmax(const decred::AttentionScorer& scorer, int cap) {
  std::vector<int> prefix{decred::special::kBos};
  std::vector<int> out;
  while (static_cast<int>(out.size()) < cap) {
    const auto logp = scorer(prefix);
    int best = -1;
    for (int i = 0; i < logp.size(); ++i) {
      if (!decred::can_emit(i)) continue;
      if (best < 0 || logp(i) > logp(best)) best = i;
    }
    out.push_back(best);
    prefix.push_back(best);
    if (best == decred::special::kEos) break;
  }
  return out;
}

TEST(CtcPrefix, SingleFrame) {
  Matrix<double> x(1, 2);
  x << std::log(0.3), std::log(0.7);
  decred::CtcPrefixScorer scorer(x);
  const auto s = scorer.extend(scorer.initial(), 1);
  EXPECT_NEAR(s.prefix_logp, std::log(0.7), 1e-12);
}

TEST(CtcPrefix, WorkedCompletion) {
  Matrix<double> x = Matrix<double>::Constant(3, 3, std::log(1.0 / 3.0));
  decred::CtcPrefixScorer scorer(x);
  const auto s = scorer.extend(scorer.extend(scorer.initial(), 1), 2);
  EXPECT_NEAR(scorer.finish(s), std::log(5.0 / 27.0), 1e-12);
}

TEST(CtcPrefix, MatchesExhaustiveEnumeration) {
  Rng rng(21);
  for (int V = 2; V <= 4; ++V) {
    for (int T = 1; T <= 3; ++T) {
      const Matrix<double> x = random_log_probs(T, V, rng);
      decred::CtcPrefixScorer scorer(x);
      for (const auto& seq : ctc_oracle::all_label_sequences(V, 3)) {
        auto state = scorer.initial();
        for (int c : seq) state = scorer.extend(state, c);
        if (!seq.empty()) {
          EXPECT_NEAR(std::exp(state.prefix_logp), ctc_oracle::prefix_probability(x, seq), 1e-6);
        }
        EXPECT_NEAR(std::exp(scorer.finish(state)), ctc_oracle::path_probability(x, seq), 1e-6);
        const double loss = decred::ctc_forward_backward(x, seq);
        if (std::isfinite(loss)) EXPECT_NEAR(scorer.finish(state), -loss, 1e-9);
      }
    }
  }
}

TEST(CtcPrefix, RejectsBlankAndMismatchedState) {
  Matrix<double> x = Matrix<double>::Constant(2, 3, std::log(1.0 / 3.0));
  decred::CtcPrefixScorer scorer(x);
  EXPECT_THROW(scorer.extend(scorer.initial(), 0), std::invalid_argument);
  decred::CtcPrefixState bad;
  bad.r_n.assign(5, 0.0);
  bad.r_b.assign(5, 0.0);
  EXPECT_THROW(scorer.extend(bad, 1), std::invalid_argument);
}

class ModelDecoding : public ::testing::Test {
 protected:
  ModelDecoding() : model_(tiny_config(), 5) {
    Rng rng(17);
    for (int i = 0; i < 6; ++i) feats_.push_back(random_features(24 + 4 * i, 6, rng));
  }

  Model<double> model_;
  std::vector<decred::Features> feats_;
};

TEST_F(ModelDecoding, WeightedSumWithLastLayerWeightsIsBitIdentical) {
  const auto enc = model_.encode(feats_[0]);
  const std::vector<int> prefix{2, 5, 6, 7};
  const auto taps = model_.decode_step(prefix, &enc);
  DecodeConfig last;
  DecodeConfig fused;
  fused.fusion = Fusion::kWeightedSum;
  const auto v = FusionWeights::last_layer(model_.config().taps, model_.config().vocab_size);
  for (Eigen::Index n = 0; n < 4; ++n) {
    const auto a = decred::fuse_step(taps, n, last);
    const auto b = decred::fuse_step(taps, n, fused, &v);
    EXPECT_TRUE((a.array() == b.array()).all()) << "row " << n;
    EXPECT_NEAR(a.array().exp().sum(), 1.0, 1e-6);
  }
}

TEST_F(ModelDecoding, EarlyExitEqualsOneHotWeights) {
  const auto enc = model_.encode(feats_[1]);
  const std::vector<int> prefix{2, 8, 5};
  DecodeConfig exit;
  exit.fusion = Fusion::kEarlyExit;
  exit.early_exit_layer = 1;
  DecodeConfig fused;
  fused.fusion = Fusion::kWeightedSum;
  const auto v = FusionWeights::one_hot(model_.config().taps, 1, model_.config().vocab_size);
  const auto truncated = model_.decode_step(prefix, &enc, 1);
  const auto full = model_.decode_step(prefix, &enc);
  EXPECT_EQ(truncated.taps, std::vector<int>{1});
  for (Eigen::Index n = 0; n < 3; ++n) {
    const auto a = decred::fuse_step(truncated, n, exit);
    const auto b = decred::fuse_step(full, n, fused, &v);
    EXPECT_TRUE((a.array() == b.array()).all()) << "row " << n;
  }
}

TEST_F(ModelDecoding, WeightedSumWithoutWeightsThrows) {
  const auto enc = model_.encode(feats_[0]);
  const std::vector<int> prefix{2};
  DecodeConfig fused;
  fused.fusion = Fusion::kWeightedSum;
  EXPECT_THROW(decred::fuse_step(model_.decode_step(prefix, &enc), 0, fused), std::invalid_argument);
  DecodeConfig exit;
  exit.fusion = Fusion::kEarlyExit;
  exit.early_exit_layer = 2;
  EXPECT_THROW(exit.validate(model_.config().taps), std::invalid_argument);
}

TEST_F(ModelDecoding, LambdaZeroGreedyIsAttentionArgmax) {
  DecodeConfig cfg;
  cfg.lambda = 0.0;
  for (const auto& f : feats_) {
    const auto enc = model_.encode(f);
    const Matrix<double> ctc = model_.ctc_log_probs(enc);
    const auto scorer = decred::make_attention_scorer(model_, enc, cfg);
    const Hypothesis h = decred::greedy_decode(scorer, ctc, cfg);
    EXPECT_EQ(h.tokens, attention_argmax(scorer, cfg.max_len(static_cast<int>(enc.rows()))));
  }
}

TEST_F(ModelDecoding, BeamWidthOneEqualsGreedy) {
  for (double lambda : {0.0, 0.3, 0.7, 1.0}) {
    DecodeConfig cfg;
    cfg.lambda = lambda;
    for (const auto& f : feats_) {
      const auto enc = model_.encode(f);
      const Matrix<double> ctc = model_.ctc_log_probs(enc);
      const auto scorer = decred::make_attention_scorer(model_, enc, cfg);
      const Hypothesis g = decred::greedy_decode(scorer, ctc, cfg);
      const auto beam = decred::beam_decode(scorer, ctc, cfg);
      ASSERT_EQ(beam.size(), 1u);
      EXPECT_EQ(beam.front().tokens, g.tokens) << "lambda " << lambda;
      EXPECT_EQ(beam.front().joint_logp, g.joint_logp);
    }
  }
}

TEST_F(ModelDecoding, WiderBeamScoresAtLeastAsWellAndListIsSorted) {
  DecodeConfig narrow;
  DecodeConfig wide;
  wide.beam_width = 10;
  for (const auto& f : feats_) {
    const auto enc = model_.encode(f);
    const Matrix<double> ctc = model_.ctc_log_probs(enc);
    const auto scorer = decred::make_attention_scorer(model_, enc, narrow);
    const auto a = decred::beam_decode(scorer, ctc, narrow);
    const auto b = decred::beam_decode(scorer, ctc, wide);
    if (a.front().finished && b.front().finished) EXPECT_GE(b.front().joint_logp, a.front().joint_logp);
    for (std::size_t i = 1; i < b.size(); ++i) EXPECT_GE(b[i - 1].joint_logp, b[i].joint_logp);
    for (const auto& h : b) {
      EXPECT_EQ(h.joint_logp, decred::mix_scores(wide.lambda, h.ctc_logp, h.attn_logp));
      for (int t : h.tokens) EXPECT_TRUE(decred::can_emit(t));
    }
  }
}

TEST_F(ModelDecoding, CtcOnlyBeamRanksByCtcLoss) {
  DecodeConfig cfg;
  cfg.lambda = 1.0;
  cfg.beam_width = 6;
  Rng rng(3);
  const auto f = random_features(12, 6, rng);  // T' = 3
  const auto enc = model_.encode(f);
  const Matrix<double> ctc = model_.ctc_log_probs(enc);
  const auto scorer = decred::make_attention_scorer(model_, enc, cfg);
  const auto nbest = decred::beam_decode(scorer, ctc, cfg);
  ASSERT_FALSE(nbest.empty());
  double prev = 0.0;
  for (const auto& h : nbest) {
    if (!h.finished) continue;
    std::vector<int> labels(h.tokens.begin(), h.tokens.end() - 1);
    const double expected = -decred::ctc_forward_backward(ctc, labels);
    EXPECT_NEAR(h.joint_logp, expected, 1e-9);
    EXPECT_LE(expected, prev + 1e-12);
    prev = expected;
  }
}

TEST_F(ModelDecoding, GreedyIsDeterministicAndCapped) {
  DecodeConfig cfg;
  cfg.min_max_len = 3;
  cfg.max_len_ratio = 0.1;
  const auto a = decred::decode_utterance(model_, feats_[2], cfg);
  const auto b = decred::decode_utterance(model_, feats_[2], cfg);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_LE(a.tokens.size(), 3u);
}

TEST(DecodeConfigJson, RoundTrip) {
  DecodeConfig c;
  c.lambda = 0.5;
  c.fusion = Fusion::kEarlyExit;
  c.early_exit_layer = 2;
  c.search = decred::Search::kBeam;
  c.beam_width = 4;
  const nlohmann::json j = c;
  const auto d = j.get<DecodeConfig>();
  EXPECT_EQ(nlohmann::json(d), j);
  FusionWeights v = FusionWeights::last_layer({2, 4}, 3);
  v.v[2](1) = 0.25;
  const nlohmann::json jv = v;
  EXPECT_EQ(nlohmann::json(jv.get<FusionWeights>()), jv);
}

}  // namespace
