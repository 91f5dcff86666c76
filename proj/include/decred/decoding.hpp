#pragma once

// Greedy and beam search with joint CTC/attention scoring, and the three ways
// of turning tapped decoder logits into a next-token distribution.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "decred/data.hpp"
#include "decred/losses.hpp"
#include "decred/model.hpp"

namespace decred {

enum class Fusion { kLastLayer, kWeightedSum, kEarlyExit };
enum class Search { kGreedy, kBeam };

inline std::string fusion_name(Fusion f) {
  switch (f) {
    case Fusion::kLastLayer:
      return "last_layer";
    case Fusion::kWeightedSum:
      return "weighted_sum";
    case Fusion::kEarlyExit:
      return "early_exit";
  }
  return "?";
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "last_layer") return Fusion::kLastLayer;
  if (s == "weighted_sum") return Fusion::kWeightedSum;
  if (s == "early_exit") return Fusion::kEarlyExit;
  throw std::invalid_argument("unknown fusion mode '" + s + "'");
}

struct DecodeConfig {
  double lambda = 0.3;
  Fusion fusion = Fusion::kLastLayer;
  int early_exit_layer = 0;  // decoder layer for Fusion::kEarlyExit
  Search search = Search::kGreedy;
  int beam_width = 1;
  double max_len_ratio = 1.0;
  int min_max_len = 8;
  int ctc_candidates = 8;  // attention top-K that get a CTC prefix score

  void validate(const std::vector<int>& taps) const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("decode: lambda must be in [0, 1]");
    if (beam_width < 1) throw std::invalid_argument("decode: beam_width must be >= 1");
    if (ctc_candidates < 1) throw std::invalid_argument("decode: ctc_candidates must be >= 1");
    if (!(max_len_ratio > 0.0) || min_max_len < 1) throw std::invalid_argument("decode: invalid length cap");
    if (fusion == Fusion::kEarlyExit && std::find(taps.begin(), taps.end(), early_exit_layer) == taps.end())
      throw std::invalid_argument("decode: early_exit layer " + std::to_string(early_exit_layer) + " has no classifier");
  }

  /// Maximum number of output tokens (EOS included) for T' encoder frames.
  int max_len(int frames) const {
    return std::max(min_max_len, static_cast<int>(std::ceil(max_len_ratio * static_cast<double>(frames))));
  }
};

inline void to_json(nlohmann::json& j, const DecodeConfig& c) {
  j = nlohmann::json{{"lambda", c.lambda},
                     {"fusion", fusion_name(c.fusion)},
                     {"early_exit_layer", c.early_exit_layer},
                     {"search", c.search == Search::kGreedy ? "greedy" : "beam"},
                     {"beam_width", c.beam_width},
                     {"max_len_ratio", c.max_len_ratio},
                     {"min_max_len", c.min_max_len},
                     {"ctc_candidates", c.ctc_candidates}};
}

inline void from_json(const nlohmann::json& j, DecodeConfig& c) {
  c.lambda = j.value("lambda", c.lambda);
  c.fusion = parse_fusion(j.value("fusion", fusion_name(c.fusion)));
  c.early_exit_layer = j.value("early_exit_layer", c.early_exit_layer);
  const std::string search = j.value("search", std::string(c.search == Search::kGreedy ? "greedy" : "beam"));
  if (search == "greedy") {
    c.search = Search::kGreedy;
  } else if (search == "beam") {
    c.search = Search::kBeam;
  } else {
    throw std::invalid_argument("decode: unknown search '" + search + "'");
  }
  c.beam_width = j.value("beam_width", c.beam_width);
  c.max_len_ratio = j.value("max_len_ratio", c.max_len_ratio);
  c.min_max_len = j.value("min_max_len", c.min_max_len);
  c.ctc_candidates = j.value("ctc_candidates", c.ctc_candidates);
}

/// Per-tap elementwise weights on the classifier logits. Layers without an
/// entry contribute nothing.
struct FusionWeights {
  std::map<int, ad::RowVector<double>> v;

  /// v_D = 1, every other tap 0: reproduces last-layer decoding.
  static FusionWeights last_layer(const std::vector<int>& taps, int vocab) {
    FusionWeights w;
    for (int t : taps) w.v[t] = ad::RowVector<double>::Zero(vocab);
    w.v[taps.back()].setOnes();
    return w;
  }

  /// All weight on one tap.
  static FusionWeights one_hot(const std::vector<int>& taps, int tap, int vocab) {
    FusionWeights w;
    for (int t : taps) w.v[t] = ad::RowVector<double>::Zero(vocab);
    w.v.at(tap).setOnes();
    return w;
  }
};

inline void to_json(nlohmann::json& j, const FusionWeights& w) {
  j = nlohmann::json::object();
  for (const auto& [tap, v] : w.v) j[std::to_string(tap)] = std::vector<double>(v.data(), v.data() + v.size());
}

inline void from_json(const nlohmann::json& j, FusionWeights& w) {
  w.v.clear();
  for (const auto& [key, arr] : j.items()) {
    const auto vals = arr.get<std::vector<double>>();
    w.v[std::stoi(key)] = Eigen::Map<const ad::RowVector<double>>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  }
}

/// Next-token log-distribution at row `n` of the tap outputs.
template <class S>
ad::RowVector<double> fuse_step(const DecoderTapOutputs<S>& taps, Eigen::Index n, const DecodeConfig& cfg,
                                const FusionWeights* v = nullptr) {
  ad::Matrix<double> logits;
  switch (cfg.fusion) {
    case Fusion::kLastLayer:
      if (taps.taps.empty()) throw std::invalid_argument("fuse_step: no tap outputs");
      logits = taps.logits.back().row(n).template cast<double>();
      break;
    case Fusion::kEarlyExit:
      logits = taps.logits_at(cfg.early_exit_layer).row(n).template cast<double>();
      break;
    case Fusion::kWeightedSum: {
      if (v == nullptr) throw std::invalid_argument("fuse_step: weighted_sum needs fusion weights");
      logits = ad::Matrix<double>::Zero(1, taps.logits.front().cols());
      for (const auto& [tap, weights] : v->v) {
        if (weights.size() != logits.cols()) throw std::invalid_argument("fuse_step: fusion weight size mismatch");
        logits.array() += weights.array() * taps.logits_at(tap).row(n).template cast<double>().array();
      }
      break;
    }
  }
  return ad::log_softmax_rows(logits);
}

// ---------------------------------------------------------------------------
// CTC prefix scoring

/// Forward variables of a prefix over all frames: r_n ends in the last label,
/// r_b ends in blank. `prefix_logp` is log P(prefix starts the output).
struct CtcPrefixState {
  std::vector<double> r_n;
  std::vector<double> r_b;
  int last = -1;
  double prefix_logp = 0.0;
};

class CtcPrefixScorer {
 public:
  explicit CtcPrefixScorer(const ad::Matrix<double>& log_probs) : x_(log_probs) {
    if (x_.rows() < 1) throw std::invalid_argument("ctc prefix scorer: no frames");
  }

  int frames() const { return static_cast<int>(x_.rows()); }

  CtcPrefixState initial() const {
    CtcPrefixState s;
    const auto T = static_cast<std::size_t>(x_.rows());
    s.r_n.assign(T, kNegInf);
    s.r_b.assign(T, kNegInf);
    double acc = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      acc += x_(static_cast<Eigen::Index>(t), special::kBlank);
      s.r_b[t] = acc;
    }
    return s;
  }

  /// State of prefix + c. Its `prefix_logp` minus the parent's is the
  /// incremental score.
  CtcPrefixState extend(const CtcPrefixState& s, int c) const {
    if (c == special::kBlank || c < 0 || c >= x_.cols()) throw std::invalid_argument("ctc prefix scorer: bad token");
    if (s.r_n.size() != static_cast<std::size_t>(x_.rows())) throw std::invalid_argument("ctc prefix scorer: state mismatch");
    const auto T = static_cast<std::size_t>(x_.rows());
    CtcPrefixState out;
    out.last = c;
    out.r_n.assign(T, kNegInf);
    out.r_b.assign(T, kNegInf);
    auto phi = [&](std::size_t t) { return c == s.last ? s.r_b[t] : log_add(s.r_b[t], s.r_n[t]); };
    const bool empty = s.last < 0;
    out.r_n[0] = empty ? x_(0, c) : kNegInf;
    double psi = out.r_n[0];
    for (std::size_t t = 1; t < T; ++t) {
      const auto ti = static_cast<Eigen::Index>(t);
      const double p = phi(t - 1);
      out.r_n[t] = log_add(out.r_n[t - 1], p) + x_(ti, c);
      out.r_b[t] = log_add(out.r_b[t - 1], out.r_n[t - 1]) + x_(ti, special::kBlank);
      psi = log_add(psi, p + x_(ti, c));
    }
    out.prefix_logp = psi;
    return out;
  }

  /// log P(output == prefix).
  double finish(const CtcPrefixState& s) const { return log_add(s.r_n.back(), s.r_b.back()); }

 private:
  static constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  ad::Matrix<double> x_;
};

// ---------------------------------------------------------------------------
// Search

/// Maps a decoder input prefix (BOS first) to the next-token log-distribution.
using AttentionScorer = std::function<ad::RowVector<double>(std::span<const int>)>;

struct Hypothesis {
  std::vector<int> tokens;  // output tokens; ends in EOS when finished
  double attn_logp = 0.0;
  double ctc_logp = 0.0;
  double joint_logp = 0.0;
  bool finished = false;
  CtcPrefixState ctc_state;

  std::vector<int> decoder_input() const {
    std::vector<int> in{special::kBos};
    in.insert(in.end(), tokens.begin(), tokens.end());
    return in;
  }
};

/// λ·ctc + (1−λ)·attn, with the endpoints exact so that a -inf on the unused
/// side never turns into NaN.
inline double mix_scores(double lambda, double ctc, double attn) {
  if (lambda == 0.0) return attn;
  if (lambda == 1.0) return ctc;
  return lambda * ctc + (1.0 - lambda) * attn;
}

inline bool can_emit(int token) {
  return token != special::kBlank && token != special::kPad && token != special::kBos && token != special::kMask;
}

namespace detail {

// Emittable tokens ranked by attention score, ties by lower id.
inline std::vector<int> top_candidates(const ad::RowVector<double>& logp, int k) {
  std::vector<int> ids;
  for (int i = 0; i < logp.size(); ++i)
    if (can_emit(i)) ids.push_back(i);
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(), [&](int a, int b) {
    return logp(a) > logp(b) || (logp(a) == logp(b) && a < b);
  });
  ids.resize(n);
  return ids;
}

struct Expansion {
  Hypothesis hyp;
  double increment = 0.0;  // mixed score of the new token alone
  int token = 0;
  std::size_t parent = 0;
};

// Joint score first. Within one parent that is the same order as the
// incremental score; the later keys only settle exact ties.
inline bool ranks_before(const Expansion& a, const Expansion& b) {
  if (a.hyp.joint_logp != b.hyp.joint_logp) return a.hyp.joint_logp > b.hyp.joint_logp;
  if (a.increment != b.increment) return a.increment > b.increment;
  if (a.token != b.token) return a.token < b.token;
  return a.parent < b.parent;
}

inline Expansion expand(const Hypothesis& h, std::size_t parent, int token, double attn_step,
                        const CtcPrefixScorer& ctc, double lambda) {
  Hypothesis out;
  out.tokens = h.tokens;
  out.tokens.push_back(token);
  out.attn_logp = h.attn_logp + attn_step;
  if (token == special::kEos) {
    out.ctc_state = h.ctc_state;
    out.ctc_logp = ctc.finish(h.ctc_state);
    out.finished = true;
  } else {
    out.ctc_state = ctc.extend(h.ctc_state, token);
    out.ctc_logp = out.ctc_state.prefix_logp;
  }
  out.joint_logp = mix_scores(lambda, out.ctc_logp, out.attn_logp);
  const double inc = mix_scores(lambda, out.ctc_logp - h.ctc_logp, attn_step);
  return {std::move(out), inc, token, parent};
}

}  // namespace detail

inline Hypothesis initial_hypothesis(const CtcPrefixScorer& ctc) {
  Hypothesis h;
  h.ctc_state = ctc.initial();
  return h;
}

/// One token per step: the attention top-K get CTC prefix scores and the best
/// mixed score wins. With λ = 0 this is plain attention argmax.
inline Hypothesis greedy_decode(const AttentionScorer& attention, const ad::Matrix<double>& ctc_log_probs,
                                const DecodeConfig& cfg) {
  const CtcPrefixScorer ctc(ctc_log_probs);
  Hypothesis h = initial_hypothesis(ctc);
  const int cap = cfg.max_len(ctc.frames());
  for (int step = 0; step < cap && !h.finished; ++step) {
    const ad::RowVector<double> logp = attention(h.decoder_input());
    const auto cands = detail::top_candidates(logp, cfg.lambda == 0.0 ? 1 : cfg.ctc_candidates);
    std::optional<detail::Expansion> best;
    for (int c : cands) {
      detail::Expansion e = detail::expand(h, 0, c, logp(c), ctc, cfg.lambda);
      if (!best || detail::ranks_before(e, *best)) best = std::move(e);
    }
    h = std::move(best->hyp);
  }
  return h;
}

/// Beam search over joint scores. Returns the n-best list, best first:
/// finished hypotheses when any exist, otherwise the surviving active ones.
inline std::vector<Hypothesis> beam_decode(const AttentionScorer& attention, const ad::Matrix<double>& ctc_log_probs,
                                           const DecodeConfig& cfg) {
  const CtcPrefixScorer ctc(ctc_log_probs);
  const int cap = cfg.max_len(ctc.frames());
  const int k = std::max(cfg.ctc_candidates, cfg.beam_width);
  std::vector<Hypothesis> active{initial_hypothesis(ctc)};
  std::vector<Hypothesis> pool;

  for (int step = 0; step < cap && !active.empty(); ++step) {
    std::vector<detail::Expansion> expansions;
    for (std::size_t p = 0; p < active.size(); ++p) {
      const Hypothesis& h = active[p];
      const ad::RowVector<double> logp = attention(h.decoder_input());
      for (int c : detail::top_candidates(logp, cfg.lambda == 0.0 ? cfg.beam_width : k))
        expansions.push_back(detail::expand(h, p, c, logp(c), ctc, cfg.lambda));
    }
    std::stable_sort(expansions.begin(), expansions.end(), detail::ranks_before);
    if (expansions.size() > static_cast<std::size_t>(cfg.beam_width)) expansions.resize(static_cast<std::size_t>(cfg.beam_width));
    active.clear();
    for (auto& e : expansions) {
      if (e.hyp.finished) {
        pool.push_back(std::move(e.hyp));
      } else {
        active.push_back(std::move(e.hyp));
      }
    }
    if (!pool.empty() && !active.empty()) {
      double pool_best = -std::numeric_limits<double>::infinity();
      for (const auto& h : pool) pool_best = std::max(pool_best, h.joint_logp);
      // Scores only decrease as hypotheses grow, so nothing active can win.
      const bool done = std::all_of(active.begin(), active.end(), [&](const Hypothesis& h) { return pool_best > h.joint_logp; });
      if (done) active.clear();
    }
  }
  std::vector<Hypothesis> out = pool.empty() ? active : pool;
  std::stable_sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) { return a.joint_logp > b.joint_logp; });
  return out;
}

// ---------------------------------------------------------------------------
// Model-backed decoding

template <class S>
AttentionScorer make_attention_scorer(Model<S>& model, const ad::Matrix<S>& enc, const DecodeConfig& cfg,
                                      const FusionWeights* v = nullptr) {
  const int max_layer = cfg.fusion == Fusion::kEarlyExit ? cfg.early_exit_layer : 0;
  return [&model, &enc, cfg, v, max_layer](std::span<const int> prefix) {
    const DecoderTapOutputs<S> taps = model.decode_step(prefix, &enc, max_layer);
    return fuse_step(taps, static_cast<Eigen::Index>(prefix.size()) - 1, cfg, v);
  };
}

struct DecodeRecord {
  std::string id;
  std::string hyp;
  std::vector<int> tokens;
  double joint_logp = 0.0;
  double attn_logp = 0.0;
  double ctc_logp = 0.0;
  int n_steps = 0;
};

inline constexpr double kLogZeroSentinel = -1e30;

inline nlohmann::json to_json_record(const DecodeRecord& r) {
  auto clamp = [](double x) { return std::isfinite(x) ? x : kLogZeroSentinel; };
  return nlohmann::ordered_json{{"id", r.id},           {"hyp", r.hyp},
                                {"joint_logp", clamp(r.joint_logp)}, {"attn_logp", clamp(r.attn_logp)},
                                {"ctc_logp", clamp(r.ctc_logp)},     {"n_steps", r.n_steps}};
}

template <class S>
Hypothesis decode_utterance(Model<S>& model, const Features& features, const DecodeConfig& cfg,
                            const FusionWeights* v = nullptr) {
  cfg.validate(model.config().taps);
  const ad::Matrix<S> enc = model.encode(features);
  const ad::Matrix<double> ctc_lp = model.ctc_log_probs(enc).template cast<double>();
  const AttentionScorer scorer = make_attention_scorer(model, enc, cfg, v);
  if (cfg.search == Search::kGreedy) return greedy_decode(scorer, ctc_lp, cfg);
  return beam_decode(scorer, ctc_lp, cfg).front();
}

/// Decodes every utterance. With `threads` > 1 utterances are spread over
/// worker threads; results keep input order and do not depend on the count.
template <class S>
std::vector<DecodeRecord> decode_dataset(Model<S>& model, const Tokenizer& tok, std::span<const Utterance> utts,
                                         const DecodeConfig& cfg, const FusionWeights* v = nullptr,
                                         double* seconds = nullptr, int threads = 1) {
  std::vector<DecodeRecord> out(utts.size());
  const auto start = std::chrono::steady_clock::now();
  auto work = [&](std::size_t i) {
    const Utterance& u = utts[i];
    const Hypothesis h = decode_utterance(model, u.features, cfg, v);
    out[i] = DecodeRecord{u.id, tok.decode(h.tokens), h.tokens, h.joint_logp, h.attn_logp, h.ctc_logp,
                          static_cast<int>(h.tokens.size())};
  };
  const auto n_workers = static_cast<std::size_t>(std::clamp<std::size_t>(
      static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(utts.size(), 1)));
  if (n_workers == 1) {
    for (std::size_t i = 0; i < utts.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n_workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next++; i < utts.size(); i = next++) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
          next = utts.size();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  if (seconds != nullptr) *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace decred
