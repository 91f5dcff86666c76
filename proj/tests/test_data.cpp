#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "decred/data.hpp"

namespace {

namespace fs = std::filesystem;
using decred::AugmentConfig;
using decred::Features;
using decred::Rng;
using decred::SynthSpec;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("decred_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Features random_features(int T, int F, std::uint64_t seed) {
  Rng rng(seed);
  Features f(T, F);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.normal());
  return f;
}

TEST(MaskTransform, Examples) {
  EXPECT_EQ(decred::mask_transform("[hesitation] to re- to re- renew"), "[MASK] to [MASK] to [MASK] renew");
  EXPECT_EQ(decred::mask_transform("hello world"), "hello world");
  EXPECT_EQ(decred::mask_transform("ok- [noise] done"), "[MASK] [MASK] done");
}

TEST(MaskTransform, Idempotent) {
  for (const char* s : {"[a] b- c", "x y z", "[MASK] q-", ""}) {
    const std::string once = decred::mask_transform(s);
    EXPECT_EQ(decred::mask_transform(once), once);
  }
}

TEST(Tokenizer, RoundTripAndSpecials) {
  const decred::Tokenizer tok(decred::synth_symbols(16));
  EXPECT_EQ(tok.vocab_size(), 21);
  for (const char* s : {"abc de", "o", "a b c d"}) EXPECT_EQ(tok.decode(tok.encode(s)), s);
  const auto ids = tok.encode("ab [MASK] c");
  EXPECT_EQ(ids[3], decred::special::kMask);
  EXPECT_EQ(tok.decode(ids), "ab [MASK] c");
  for (int id : tok.encode("abc")) EXPECT_GE(id, decred::special::kFirstSymbol);
  EXPECT_THROW(tok.encode("xyz"), std::invalid_argument);
  const auto back = decred::Tokenizer::from_json(tok.to_json());
  EXPECT_EQ(back.encode("ab c"), tok.encode("ab c"));
}

TEST(Synth, DeterministicForFixedSeed) {
  SynthSpec spec;
  spec.n_utts = 20;
  const auto a = decred::synth_generate(spec, 7);
  const auto b = decred::synth_generate(spec, 7);
  ASSERT_EQ(a.utterances.size(), 20u);
  for (std::size_t i = 0; i < a.utterances.size(); ++i) {
    EXPECT_EQ(a.utterances[i].transcript, b.utterances[i].transcript);
    EXPECT_TRUE((a.utterances[i].features.array() == b.utterances[i].features.array()).all());
  }
  const auto c = decred::synth_generate(spec, 8);
  EXPECT_NE(a.utterances[0].transcript + a.utterances[1].transcript,
            c.utterances[0].transcript + c.utterances[1].transcript);
}

TEST(Synth, TranscriptsFollowTheGrammarRules) {
  SynthSpec spec;
  spec.n_utts = 300;
  const auto ds = decred::synth_generate(spec, 3);
  for (const auto& u : ds.utterances) {
    ASSERT_GE(u.transcript.size(), 3u);
    ASSERT_LE(u.transcript.size(), 10u);
    EXPECT_NE(u.transcript.front(), ' ');
    EXPECT_NE(u.transcript.back(), ' ');
    EXPECT_EQ(u.transcript.find("  "), std::string::npos);
  }
}

TEST(Synth, NoiseFreeFeaturesAreConcatenatedPrototypes) {
  std::vector<Features> protos{Features::Constant(4, 3, 1.0f), Features::Constant(6, 3, 2.0f)};
  Rng rng(1);
  const std::vector<int> seq{0, 1};
  const Features f = decred::render_features(protos, seq, 0.0, rng);
  EXPECT_EQ(f.rows(), 10);
  EXPECT_TRUE((f.topRows(4).array() == 1.0f).all());
  EXPECT_TRUE((f.bottomRows(6).array() == 2.0f).all());

  SynthSpec spec;
  spec.n_utts = 5;
  spec.noise_sigma = 0.0;
  const auto ds = decred::synth_generate(spec, 11);
  for (const auto& u : ds.utterances) {
    Eigen::Index row = 0;
    for (char c : u.transcript) {
      const auto& syms = ds.task.tokenizer.symbols();
      const auto pos = static_cast<std::size_t>(std::find(syms.begin(), syms.end(), c) - syms.begin());
      const Features& p = ds.task.prototypes[pos];
      EXPECT_TRUE((u.features.middleRows(row, p.rows()).array() == p.array()).all());
      row += p.rows();
    }
    EXPECT_EQ(row, u.features.rows());
  }
}

TEST(Synth, EmptyAndInvalidSpecs) {
  SynthSpec spec;
  spec.n_utts = 0;
  EXPECT_TRUE(decred::synth_generate(spec, 1).utterances.empty());
  spec.min_len = 0;
  EXPECT_THROW(decred::synth_generate(spec, 1), std::invalid_argument);
}

TEST(SpecAugment, IdentityConfigs) {
  const Features f = random_features(30, 8, 2);
  Rng rng(3);
  AugmentConfig none;
  none.n_freq_masks = none.n_time_masks = 0;
  EXPECT_TRUE((decred::spec_augment(f, none, rng).features.array() == f.array()).all());
  AugmentConfig zero_width;
  zero_width.max_freq_width = zero_width.max_time_width = 0;
  EXPECT_TRUE((decred::spec_augment(f, zero_width, rng).features.array() == f.array()).all());
}

TEST(SpecAugment, ZeroedCellsLieInsideRecordedMasks) {
  const Features f = random_features(40, 10, 4);
  const Features copy = f;
  AugmentConfig cfg;
  cfg.n_time_masks = 3;
  cfg.max_time_width = 6;
  cfg.n_freq_masks = 2;
  cfg.max_freq_width = 3;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto res = decred::spec_augment(f, cfg, rng);
    ASSERT_EQ(res.features.rows(), f.rows());
    ASSERT_EQ(res.features.cols(), f.cols());
    long zeroed = 0;
    for (int t = 0; t < f.rows(); ++t) {
      for (int c = 0; c < f.cols(); ++c) {
        bool in_mask = false;
        for (const auto& m : res.time_masks) in_mask = in_mask || (t >= m.start && t < m.start + m.width);
        for (const auto& m : res.freq_masks) in_mask = in_mask || (c >= m.start && c < m.start + m.width);
        if (in_mask) {
          EXPECT_EQ(res.features(t, c), 0.0f);
          ++zeroed;
        } else {
          EXPECT_EQ(res.features(t, c), f(t, c));
        }
      }
    }
    EXPECT_LE(zeroed, cfg.n_time_masks * cfg.max_time_width * f.cols() + cfg.n_freq_masks * cfg.max_freq_width * f.rows());
  }
  EXPECT_TRUE((f.array() == copy.array()).all());
}

TEST(SpeedPerturb, Examples) {
  const Features f = random_features(100, 4, 5);
  EXPECT_TRUE((decred::speed_perturb(f, 1.0).array() == f.array()).all());
  EXPECT_EQ(decred::speed_perturb(f, 1.1).rows(), 91);
  EXPECT_EQ(decred::speed_perturb(f, 0.9).rows(), 111);
  const Features c = Features::Constant(50, 3, 0.75f);
  for (double factor : {0.9, 1.1, 1.7}) EXPECT_TRUE((decred::speed_perturb(c, factor).array() == 0.75f).all());
  EXPECT_THROW(decred::speed_perturb(f, 0.0), std::invalid_argument);
  EXPECT_THROW(decred::speed_perturb(f, -1.0), std::invalid_argument);
}

TEST(FeatureFiles, RoundTripWithTwelveByteHeader) {
  const fs::path dir = scratch_dir("feats");
  const Features f = random_features(7, 5, 6);
  decred::write_features(dir / "x.fbnk", f);
  EXPECT_EQ(fs::file_size(dir / "x.fbnk"), 12u + 7u * 5u * 4u);
  std::ifstream in(dir / "x.fbnk", std::ios::binary);
  char magic[5] = {};
  in.read(magic, 4);
  EXPECT_STREQ(magic, "FBNK");
  const Features g = decred::read_features(dir / "x.fbnk");
  EXPECT_TRUE((f.array() == g.array()).all());
  std::ofstream(dir / "bad.fbnk", std::ios::binary) << "NOPE";
  EXPECT_THROW(decred::read_features(dir / "bad.fbnk"), std::runtime_error);
}

TEST(Manifest, RoundTripAndLengthFilter) {
  const fs::path dir = scratch_dir("manifest");
  std::vector<decred::Utterance> utts{{"u1", random_features(8, 4, 1), "ab c"}, {"u2", random_features(30, 4, 2), "d"}};
  decred::write_manifest(dir / "train.jsonl", utts, "feats");
  const auto back = decred::read_manifest(dir / "train.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].id, "u2");
  EXPECT_EQ(back[0].transcript, "ab c");
  EXPECT_TRUE((back[1].features.array() == utts[1].features.array()).all());
  const auto kept = decred::filter_by_length(back, 10);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].id, "u1");
}

}  // namespace
