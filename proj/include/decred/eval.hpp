#pragma once

// Word error rate, percentile-bootstrap confidence intervals and the paired
// bootstrap test.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "decred/rng.hpp"

namespace decred {

struct ScoredUtterance {
  std::string id;
  int ref_words = 0;
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;

  int errors() const { return substitutions + deletions + insertions; }
  double wer() const { return static_cast<double>(errors()) / std::max(ref_words, 1); }
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

/// Levenshtein alignment with unit costs. Among minimal alignments the
/// backtrace prefers substitution/match, then deletion, then insertion.
inline ScoredUtterance score_utterance(const std::string& id, const std::string& ref, const std::string& hyp) {
  const auto r = split_words(ref);
  const auto h = split_words(hyp);
  const std::size_t n = r.size();
  const std::size_t m = h.size();
  std::vector<std::vector<int>> cost(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) cost[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) cost[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const int diag = cost[i - 1][j - 1] + (r[i - 1] == h[j - 1] ? 0 : 1);
      cost[i][j] = std::min({diag, cost[i - 1][j] + 1, cost[i][j - 1] + 1});
    }
  }
  ScoredUtterance s{id, static_cast<int>(n), 0, 0, 0};
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && cost[i][j] == cost[i - 1][j - 1] + (r[i - 1] == h[j - 1] ? 0 : 1)) {
      s.substitutions += r[i - 1] == h[j - 1] ? 0 : 1;
      --i;
      --j;
    } else if (i > 0 && cost[i][j] == cost[i - 1][j] + 1) {
      ++s.deletions;
      --i;
    } else {
      ++s.insertions;
      --j;
    }
  }
  return s;
}

struct RefHyp {
  std::string id;
  std::string ref;
  std::string hyp;
};

/// Pairs references with hypotheses by id; every reference needs a hypothesis
/// and vice versa.
inline std::vector<RefHyp> align_by_id(const std::vector<std::pair<std::string, std::string>>& refs,
                                       const std::map<std::string, std::string>& hyps) {
  std::vector<RefHyp> out;
  for (const auto& [id, ref] : refs) {
    const auto it = hyps.find(id);
    if (it == hyps.end()) throw std::invalid_argument("no hypothesis for utterance " + id);
    out.push_back({id, ref, it->second});
  }
  if (hyps.size() != refs.size()) throw std::invalid_argument("hypotheses contain ids missing from the references");
  return out;
}

inline double corpus_wer(std::span<const ScoredUtterance> scored) {
  long errors = 0, words = 0;
  for (const auto& s : scored) {
    errors += s.errors();
    words += s.ref_words;
  }
  return static_cast<double>(errors) / static_cast<double>(std::max(words, 1L));
}

struct WerResult {
  double wer = 0.0;
  std::vector<ScoredUtterance> utterances;
};

inline WerResult wer(std::span<const RefHyp> pairs) {
  WerResult res;
  for (const auto& p : pairs) res.utterances.push_back(score_utterance(p.id, p.ref, p.hyp));
  res.wer = corpus_wer(res.utterances);
  return res;
}

inline double macro_average(std::span<const double> per_dataset) {
  if (per_dataset.empty()) return 0.0;
  return std::accumulate(per_dataset.begin(), per_dataset.end(), 0.0) / static_cast<double>(per_dataset.size());
}

/// Percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct BootstrapResult {
  double wer = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int resamples = 0;
  double alpha = 0.05;
  std::uint64_t seed = 0;
};

namespace detail {
// Resample b draws n utterance indices from its own stream seeded seed + b.
inline std::vector<std::size_t> resample_indices(std::size_t n, std::uint64_t seed, int b) {
  Rng rng(seed + static_cast<std::uint64_t>(b));
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
  return idx;
}
}  // namespace detail

inline BootstrapResult bootstrap_ci(std::span<const ScoredUtterance> scored, int resamples, double alpha,
                                    std::uint64_t seed) {
  if (scored.empty()) throw std::invalid_argument("bootstrap_ci: empty input");
  if (resamples < 1) throw std::invalid_argument("bootstrap_ci: need at least one resample");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("bootstrap_ci: alpha must be in (0, 1)");
  std::vector<double> wers;
  wers.reserve(static_cast<std::size_t>(resamples));
  for (int b = 0; b < resamples; ++b) {
    long errors = 0, words = 0;
    for (std::size_t i : detail::resample_indices(scored.size(), seed, b)) {
      errors += scored[i].errors();
      words += scored[i].ref_words;
    }
    wers.push_back(static_cast<double>(errors) / static_cast<double>(std::max(words, 1L)));
  }
  BootstrapResult res;
  res.wer = corpus_wer(scored);
  res.ci_low = percentile(wers, alpha / 2.0);
  res.ci_high = percentile(wers, 1.0 - alpha / 2.0);
  res.resamples = resamples;
  res.alpha = alpha;
  res.seed = seed;
  return res;
}

/// Probability that system A is not better than system B: resamples where A
/// has more errors count 1, ties count 1/2, with add-one smoothing.
inline double paired_bootstrap(std::span<const ScoredUtterance> a, std::span<const ScoredUtterance> b, int resamples,
                               std::uint64_t seed) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_bootstrap: systems cover different utterances");
  if (a.empty()) throw std::invalid_argument("paired_bootstrap: empty input");
  if (resamples < 1) throw std::invalid_argument("paired_bootstrap: need at least one resample");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].id != b[i].id || a[i].ref_words != b[i].ref_words)
      throw std::invalid_argument("paired_bootstrap: utterance id mismatch at position " + std::to_string(i));
  }
  double worse = 0.0;
  for (int r = 0; r < resamples; ++r) {
    // Both systems share the reference word count, so comparing error totals
    // is comparing WERs without rounding.
    long delta = 0;
    for (std::size_t i : detail::resample_indices(a.size(), seed, r)) delta += a[i].errors() - b[i].errors();
    if (delta > 0) {
      worse += 1.0;
    } else if (delta == 0) {
      worse += 0.5;
    }
  }
  return (worse + 1.0) / (static_cast<double>(resamples) + 1.0);
}

inline nlohmann::json to_json(const BootstrapResult& r) {
  return nlohmann::json{{"wer", r.wer}, {"ci", {r.ci_low, r.ci_high}}, {"B", r.resamples}, {"alpha", r.alpha}, {"seed", r.seed}};
}

}  // namespace decred
