#pragma once

// CTC, masked label-smoothed cross-entropy, the weighted multi-tap decoder
// loss and the CTC/attention composite objective.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "decred/autodiff.hpp"
#include "decred/data.hpp"

namespace decred {

template <class S>
inline S log_add(S a, S b) {
  constexpr S ninf = -std::numeric_limits<S>::infinity();
  if (a == ninf) return b;
  if (b == ninf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

/// Minimum number of frames a CTC alignment of `target` needs.
inline int ctc_min_frames(std::span<const int> target) {
  int repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i) repeats += target[i] == target[i - 1] ? 1 : 0;
  return static_cast<int>(target.size()) + repeats;
}

inline bool ctc_feasible(int frames, std::span<const int> target) { return frames >= ctc_min_frames(target); }

/// The lattice itself only reserves blank; keeping PAD/BOS/EOS out of model
/// targets is the job of `make_targets`.
inline void check_ctc_target(std::span<const int> target, int vocab) {
  for (int id : target) {
    if (id == special::kBlank || id < 0 || id >= vocab)
      throw std::invalid_argument("ctc: target contains blank or an out-of-range id");
  }
}

/// Forward-backward over the blank-interleaved lattice. Returns -log P(target)
/// and, when `occupancy` is given, fills it with the per-frame posterior mass of
/// each vocabulary entry. Infeasible targets give +inf.
template <class S>
S ctc_forward_backward(const ad::Matrix<S>& log_probs, std::span<const int> target, ad::Matrix<S>* occupancy = nullptr) {
  constexpr S ninf = -std::numeric_limits<S>::infinity();
  const int T = static_cast<int>(log_probs.rows());
  const int L = static_cast<int>(target.size());
  const int states = 2 * L + 1;
  check_ctc_target(target, static_cast<int>(log_probs.cols()));
  if (T == 0 || !ctc_feasible(T, target)) return std::numeric_limits<S>::infinity();

  auto label = [&](int s) { return s % 2 == 0 ? special::kBlank : target[static_cast<std::size_t>(s / 2)]; };
  auto can_skip = [&](int s) { return s >= 2 && s % 2 == 1 && label(s) != label(s - 2); };

  ad::Matrix<S> alpha = ad::Matrix<S>::Constant(T, states, ninf);
  alpha(0, 0) = log_probs(0, special::kBlank);
  if (states > 1) alpha(0, 1) = log_probs(0, label(1));
  for (int t = 1; t < T; ++t) {
    for (int s = 0; s < states; ++s) {
      S acc = alpha(t - 1, s);
      if (s >= 1) acc = log_add(acc, alpha(t - 1, s - 1));
      if (can_skip(s)) acc = log_add(acc, alpha(t - 1, s - 2));
      alpha(t, s) = acc == ninf ? ninf : acc + log_probs(t, label(s));
    }
  }
  S log_p = alpha(T - 1, states - 1);
  if (states > 1) log_p = log_add(log_p, alpha(T - 1, states - 2));
  if (log_p == ninf) return std::numeric_limits<S>::infinity();

  if (occupancy != nullptr) {
    // beta(t, s): log-probability of the suffix after frame t, given state s at t.
    ad::Matrix<S> beta = ad::Matrix<S>::Constant(T, states, ninf);
    beta(T - 1, states - 1) = S(0);
    if (states > 1) beta(T - 1, states - 2) = S(0);
    for (int t = T - 2; t >= 0; --t) {
      for (int s = 0; s < states; ++s) {
        S acc = beta(t + 1, s) + log_probs(t + 1, label(s));
        if (s + 1 < states) acc = log_add(acc, beta(t + 1, s + 1) + log_probs(t + 1, label(s + 1)));
        if (s + 2 < states && can_skip(s + 2)) acc = log_add(acc, beta(t + 1, s + 2) + log_probs(t + 1, label(s + 2)));
        beta(t, s) = acc;
      }
    }
    occupancy->setZero(T, log_probs.cols());
    for (int t = 0; t < T; ++t) {
      for (int s = 0; s < states; ++s) {
        const S lg = alpha(t, s) + beta(t, s) - log_p;
        if (lg != ninf) (*occupancy)(t, label(s)) += std::exp(lg);
      }
    }
  }
  return -log_p;
}

/// Differentiable CTC loss on T' x V log-probabilities. Returns nullopt when
/// the target cannot be aligned to the available frames.
template <class S>
std::optional<ad::Var<S>> ctc_loss(const ad::Var<S>& log_probs, std::span<const int> target) {
  ad::Tape<S>* t = log_probs.tape();
  ad::Matrix<S> occupancy;
  const S loss = ctc_forward_backward(log_probs.value(), target, t->recording() ? &occupancy : nullptr);
  if (std::isinf(loss)) return std::nullopt;
  return t->push(ad::Matrix<S>::Constant(1, 1, loss), {log_probs},
                 [t, log_probs, occupancy = std::move(occupancy)](const ad::Matrix<S>& g, const ad::Matrix<S>&) {
                   t->accumulate(log_probs, occupancy * (-g(0, 0)));
                 });
}

// ---------------------------------------------------------------------------
// Cross-entropy

inline bool ce_counted(int target) { return target != special::kMask && target != special::kPad; }

template <class S>
struct CeSum {
  ad::Var<S> total;  // summed over counted positions
  int count = 0;
};

/// Sum over positions of the cross-entropy between the smoothed target
/// distribution ((1-s) on the label, s/(V-1) elsewhere) and softmax(logits).
/// Positions whose target is MASK or PAD contribute nothing.
template <class S>
CeSum<S> smoothed_ce_sum(const ad::Var<S>& logits, std::span<const int> targets, double smoothing) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
    throw std::invalid_argument("cross-entropy: one target per logit row required");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw std::invalid_argument("cross-entropy: smoothing must be in [0,1)");
  ad::Tape<S>* t = logits.tape();
  const Eigen::Index V = logits.cols();
  const S on = S(1.0 - smoothing);
  const S off = V > 1 ? S(smoothing / static_cast<double>(V - 1)) : S(0);
  const ad::Matrix<S> logp = ad::log_softmax_rows(logits.value());
  S total = S(0);
  int count = 0;
  for (std::size_t n = 0; n < targets.size(); ++n) {
    if (!ce_counted(targets[n])) continue;
    const auto row = logp.row(static_cast<Eigen::Index>(n));
    const S lp_label = row(targets[n]);
    total -= on * lp_label + off * (row.sum() - lp_label);
    ++count;
  }
  std::vector<int> tg(targets.begin(), targets.end());
  ad::Var<S> out = t->push(ad::Matrix<S>::Constant(1, 1, total), {logits},
                           [t, logits, logp, tg = std::move(tg), on, off](const ad::Matrix<S>& g, const ad::Matrix<S>&) {
                             ad::Matrix<S> d = ad::Matrix<S>::Zero(logp.rows(), logp.cols());
                             for (std::size_t n = 0; n < tg.size(); ++n) {
                               if (!ce_counted(tg[n])) continue;
                               const auto r = static_cast<Eigen::Index>(n);
                               // dCE/dlogits = softmax - q, and sum(q) = 1
                               d.row(r) = logp.row(r).array().exp() - off;
                               d(r, tg[n]) -= on - off;
                             }
                             t->accumulate(logits, d * g(0, 0));
                           });
  return {out, count};
}

template <class S>
struct MaskedCe {
  ad::Var<S> loss;
  int count = 0;
  bool all_masked = false;  // loss is defined as 0 in that case
};

/// Mean smoothed cross-entropy over counted (non-MASK, non-PAD) positions.
template <class S>
MaskedCe<S> masked_smoothed_ce(const ad::Var<S>& logits, std::span<const int> targets, double smoothing) {
  CeSum<S> sum = smoothed_ce_sum(logits, targets, smoothing);
  if (sum.count == 0) return {ad::scale(sum.total, S(0)), 0, true};
  return {ad::scale(sum.total, S(1) / static_cast<S>(sum.count)), sum.count, false};
}

// ---------------------------------------------------------------------------
// Objective

struct LossConfig {
  double alpha = 0.3;
  std::map<int, double> betas{{2, 0.4}, {4, 0.6}};
  double label_smoothing = 0.1;

  /// Rejects a malformed configuration; `taps` are the model's classifier layers.
  void validate(std::span<const int> taps) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("loss: alpha must be in [0, 1]");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
      throw std::invalid_argument("loss: label_smoothing must be in [0, 1)");
    if (betas.empty()) throw std::invalid_argument("loss: betas must not be empty");
    double total = 0.0;
    for (const auto& [layer, beta] : betas) {
      if (!(beta >= 0.0)) throw std::invalid_argument("loss: betas must be non-negative");
      if (std::find(taps.begin(), taps.end(), layer) == taps.end())
        throw std::invalid_argument("loss: beta for layer " + std::to_string(layer) + " has no classifier");
      total += beta;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("loss: betas must sum to 1");
  }

  double beta(int layer) const {
    const auto it = betas.find(layer);
    return it == betas.end() ? 0.0 : it->second;
  }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  nlohmann::json betas = nlohmann::json::object();
  for (const auto& [layer, beta] : c.betas) betas[std::to_string(layer)] = beta;
  j = nlohmann::json{{"alpha", c.alpha}, {"betas", betas}, {"label_smoothing", c.label_smoothing}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  c.alpha = j.value("alpha", c.alpha);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  if (j.contains("betas")) {
    c.betas.clear();
    for (const auto& [key, value] : j.at("betas").items()) c.betas[std::stoi(key)] = value.get<double>();
  }
}

/// Sum_d beta_d * CE_d over the provided per-tap losses. Taps with zero weight
/// are left out of the graph entirely.
template <class S>
ad::Var<S> decred_loss(const std::map<int, ad::Var<S>>& tap_losses, const LossConfig& cfg) {
  std::optional<ad::Var<S>> total;
  for (const auto& [layer, beta] : cfg.betas) {
    if (beta == 0.0) continue;
    const auto it = tap_losses.find(layer);
    if (it == tap_losses.end()) throw std::invalid_argument("decred_loss: missing tap " + std::to_string(layer));
    ad::Var<S> term = beta == 1.0 ? it->second : ad::scale(it->second, static_cast<S>(beta));
    total = total ? ad::add(*total, term) : term;
  }
  if (!total) throw std::invalid_argument("decred_loss: all betas are zero");
  return *total;
}

inline double composite_loss(double ctc, double decred, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("composite: alpha must be in [0, 1]");
  if (alpha == 1.0) return ctc;
  if (alpha == 0.0) return decred;
  return alpha * ctc + (1.0 - alpha) * decred;
}

template <class S>
ad::Var<S> composite_loss(const ad::Var<S>& ctc, const ad::Var<S>& decred, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("composite: alpha must be in [0, 1]");
  if (alpha == 1.0) return ctc;
  if (alpha == 0.0) return decred;
  return ad::add(ad::scale(ctc, static_cast<S>(alpha)), ad::scale(decred, static_cast<S>(1.0 - alpha)));
}

/// Teacher-forcing views of one tokenized transcript.
struct TargetViews {
  std::vector<int> decoder_input;  // BOS y_1 .. y_N
  std::vector<int> decoder_target;  // y_1 .. y_N EOS
  std::vector<int> ctc_target;      // y without MASK tokens
};

inline TargetViews make_targets(std::span<const int> ids) {
  TargetViews v;
  v.decoder_input.push_back(special::kBos);
  v.decoder_input.insert(v.decoder_input.end(), ids.begin(), ids.end());
  v.decoder_target.assign(ids.begin(), ids.end());
  v.decoder_target.push_back(special::kEos);
  for (int id : ids)
    if (id != special::kMask) v.ctc_target.push_back(id);
  return v;
}

}  // namespace decred
