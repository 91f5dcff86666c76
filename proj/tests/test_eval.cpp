#include <gtest/gtest.h>

#include <fstream>

#include "decred/eval.hpp"

namespace {

using nlohmann::json;

json load(const std::string& name) {
  std::ifstream in(std::string(DECRED_TEST_DATA) + "/" + name);
  return json::parse(in);
}

std::vector<decred::ScoredUtterance> score_system(const json& sys) {
  std::vector<decred::ScoredUtterance> out;
  for (const auto& u : sys["utterances"]) out.push_back(decred::score_utterance(u["id"], u["ref"], u["hyp"]));
  return out;
}

TEST(Wer, SubstitutionAndInsertion) {
  const auto s = decred::score_utterance("u", "a b c", "a x c d");
  EXPECT_EQ(s.substitutions, 1);
  EXPECT_EQ(s.insertions, 1);
  EXPECT_EQ(s.deletions, 0);
  EXPECT_DOUBLE_EQ(s.wer(), 2.0 / 3.0);
}

TEST(Wer, EmptyHypothesisIsAllDeletions) {
  const auto s = decred::score_utterance("u", "a b c", "");
  EXPECT_EQ(s.deletions, 3);
  EXPECT_DOUBLE_EQ(s.wer(), 1.0);
}

TEST(Wer, AlignByIdRejectsMissingHypotheses) {
  std::vector<std::pair<std::string, std::string>> refs{{"a", "x"}, {"b", "y"}};
  EXPECT_THROW(decred::align_by_id(refs, {{"a", "x"}}), std::invalid_argument);
  EXPECT_THROW(decred::align_by_id(refs, {{"a", "x"}, {"b", "y"}, {"c", "z"}}), std::invalid_argument);
  EXPECT_EQ(decred::align_by_id(refs, {{"a", "x"}, {"b", "q"}}).size(), 2u);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(decred::percentile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(decred::percentile({4, 1, 3, 2}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(decred::percentile({4, 1, 3, 2}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(decred::percentile({0, 10}, 0.025), 0.25);
}

TEST(StatsGolden, EngineMatchesReference) {
  const json golden = load("stats_golden.json");
  decred::Rng rng(5489);
  EXPECT_EQ(rng.next(), golden["mt19937_64_seed5489_first"].get<std::uint64_t>());
}

TEST(StatsGolden, WerAndCounts) {
  const json fixtures = load("stats_fixtures.json");
  const json golden = load("stats_golden.json");
  for (const auto& [name, sys] : fixtures["systems"].items()) {
    const auto scored = score_system(sys);
    const auto& g = golden["systems"][name];
    EXPECT_EQ(decred::corpus_wer(scored), g["wer"].get<double>()) << name;
    for (std::size_t i = 0; i < scored.size(); ++i) {
      const auto& c = g["counts"][i];
      EXPECT_EQ(scored[i].ref_words, c[0].get<int>());
      EXPECT_EQ(scored[i].substitutions, c[1].get<int>());
      EXPECT_EQ(scored[i].deletions, c[2].get<int>());
      EXPECT_EQ(scored[i].insertions, c[3].get<int>());
    }
  }
}

TEST(StatsGolden, BootstrapIntervals) {
  const json fixtures = load("stats_fixtures.json");
  const json golden = load("stats_golden.json");
  for (const auto& [name, sys] : fixtures["systems"].items()) {
    const auto scored = score_system(sys);
    for (const auto& b : golden["systems"][name]["bootstrap"]) {
      const auto res = decred::bootstrap_ci(scored, b["B"], b["alpha"], b["seed"]);
      EXPECT_EQ(res.ci_low, b["ci"][0].get<double>()) << name << " B=" << b["B"];
      EXPECT_EQ(res.ci_high, b["ci"][1].get<double>()) << name << " B=" << b["B"];
    }
  }
}

TEST(StatsGolden, PairedBootstrap) {
  const json fixtures = load("stats_fixtures.json");
  const json golden = load("stats_golden.json");
  for (const auto& p : golden["pairs"]) {
    const auto a = score_system(fixtures["systems"][p["a"].get<std::string>()]);
    const auto b = score_system(fixtures["systems"][p["b"].get<std::string>()]);
    EXPECT_EQ(decred::paired_bootstrap(a, b, p["B"], p["seed"]), p["p_value"].get<double>());
  }
}

TEST(PairedBootstrap, IdenticalSystems) {
  const json fixtures = load("stats_fixtures.json");
  const auto a = score_system(fixtures["systems"]["sysA"]);
  for (int B : {1, 10, 999}) EXPECT_EQ(decred::paired_bootstrap(a, a, B, 3), (0.5 * B + 1) / (B + 1));
}

TEST(PairedBootstrap, StrictlyBetterSystem) {
  std::vector<decred::ScoredUtterance> a{{"u1", 3, 0, 0, 0}, {"u2", 2, 0, 0, 0}};
  std::vector<decred::ScoredUtterance> b{{"u1", 3, 1, 0, 0}, {"u2", 2, 0, 1, 0}};
  EXPECT_EQ(decred::paired_bootstrap(a, b, 100, 1), 1.0 / 101.0);
  EXPECT_EQ(decred::paired_bootstrap(b, a, 100, 1), 101.0 / 101.0);
}

TEST(PairedBootstrap, MismatchedIdsThrow) {
  std::vector<decred::ScoredUtterance> a{{"u1", 3, 0, 0, 0}};
  std::vector<decred::ScoredUtterance> b{{"u2", 3, 0, 0, 0}};
  EXPECT_THROW(decred::paired_bootstrap(a, b, 10, 1), std::invalid_argument);
}

TEST(Bootstrap, SingleUtteranceCollapsesInterval) {
  std::vector<decred::ScoredUtterance> a{{"u1", 4, 1, 0, 0}};
  const auto r = decred::bootstrap_ci(a, 50, 0.05, 9);
  EXPECT_EQ(r.ci_low, 0.25);
  EXPECT_EQ(r.ci_high, 0.25);
  EXPECT_EQ(decred::to_json(r)["B"], 50);
}

}  // namespace
