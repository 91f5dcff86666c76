#pragma once

// Training loop (AdamW, warmup + linear decay, early stopping on dev WER) and
// calibration of the per-tap fusion weights on a frozen model.

#include <json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "decred/autodiff.hpp"
#include "decred/data.hpp"
#include "decred/decoding.hpp"
#include "decred/eval.hpp"
#include "decred/losses.hpp"
#include "decred/model.hpp"
#include "decred/rng.hpp"

namespace decred {

struct TrainConfig {
  double peak_lr = 1e-3;
  double weight_decay = 1e-6;
  int warmup_steps = 500;
  int total_steps = 10000;
  int batch_size = 16;
  int max_epochs = 1000;
  int patience = 10;
  int eval_every = 200;
  int max_frames = 2000;
  double clip_norm = 5.0;
  double dev_lambda = 0.3;
  std::uint64_t seed = 0;
  LossConfig loss;
  AugmentConfig augment;

  void validate(std::span<const int> taps) const {
    if (!(peak_lr > 0)) throw std::invalid_argument("train: peak_lr must be positive");
    if (weight_decay < 0) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (warmup_steps < 0 || total_steps < 1 || warmup_steps >= total_steps)
      throw std::invalid_argument("train: need 0 <= warmup_steps < total_steps");
    if (batch_size < 1 || max_epochs < 1 || eval_every < 1) throw std::invalid_argument("train: counts must be >= 1");
    if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
    if (!(clip_norm > 0)) throw std::invalid_argument("train: clip_norm must be positive");
    if (!(dev_lambda >= 0 && dev_lambda <= 1)) throw std::invalid_argument("train: dev_lambda must be in [0, 1]");
    loss.validate(taps);
    augment.validate();
  }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = nlohmann::json{{"n_freq_masks", c.n_freq_masks},     {"max_freq_width", c.max_freq_width},
                     {"n_time_masks", c.n_time_masks},     {"max_time_width", c.max_time_width},
                     {"specaug_delay_steps", c.specaug_delay_steps}, {"speed_factors", c.speed_factors}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  c.n_freq_masks = j.value("n_freq_masks", c.n_freq_masks);
  c.max_freq_width = j.value("max_freq_width", c.max_freq_width);
  c.n_time_masks = j.value("n_time_masks", c.n_time_masks);
  c.max_time_width = j.value("max_time_width", c.max_time_width);
  c.specaug_delay_steps = j.value("specaug_delay_steps", c.specaug_delay_steps);
  c.speed_factors = j.value("speed_factors", c.speed_factors);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"peak_lr", c.peak_lr},       {"weight_decay", c.weight_decay}, {"warmup_steps", c.warmup_steps},
                     {"total_steps", c.total_steps}, {"batch_size", c.batch_size},     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},     {"eval_every", c.eval_every},     {"max_frames", c.max_frames},
                     {"clip_norm", c.clip_norm},   {"dev_lambda", c.dev_lambda},     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.max_frames = j.value("max_frames", c.max_frames);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.dev_lambda = j.value("dev_lambda", c.dev_lambda);
  c.seed = j.value("seed", c.seed);
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at total_steps.
inline double lr_at(int step, const TrainConfig& cfg) {
  if (step <= 0) return 0.0;
  if (step < cfg.warmup_steps) return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
  if (step >= cfg.total_steps) return 0.0;
  return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

// ---------------------------------------------------------------------------
// Optimizer

template <class S>
class AdamW {
 public:
  AdamW(std::vector<ad::Parameter<S>*> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : params_(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.push_back(ad::Matrix<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(ad::Matrix<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& m = m_[i];
      auto& v = v_[i];
      m = S(b1_) * m + S(1 - b1_) * p.grad;
      v = S(b2_) * v + S(1 - b2_) * p.grad.cwiseProduct(p.grad);
      const auto update = ((m.array() / S(c1)) / ((v.array() / S(c2)).sqrt() + S(eps_))).matrix();
      p.value = p.value * S(1.0 - lr * wd_) - S(lr) * update;
    }
  }

  int steps_taken() const { return t_; }

 private:
  std::vector<ad::Parameter<S>*> params_;
  std::vector<ad::Matrix<S>> m_, v_;
  double wd_, b1_, b2_, eps_;
  int t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class S>
double clip_grad_norm(std::span<ad::Parameter<S>* const> params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) sq += p->grad.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto* p : params) p->grad *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Batch objective

struct TrainItem {
  std::string id;
  Features features;
  std::vector<int> ids;  // tokenized transcript, may contain MASK
};

template <class S>
struct BatchLoss {
  ad::Var<S> total;
  double ctc = 0.0;
  std::map<int, double> ce;  // mean CE per tap
  int ctc_items = 0;
};

/// Composite loss of a batch on one tape. CE is averaged over all counted label
/// positions of the batch and CTC over the utterances it can align.
template <class S>
BatchLoss<S> batch_loss(const Model<S>& model, typename Model<S>::Session& s, std::span<const TrainItem> items,
                        const LossConfig& cfg) {
  ad::Tape<S>& tape = *s.tape;
  std::optional<ad::Var<S>> ctc_sum;
  int ctc_items = 0;
  std::map<int, std::optional<ad::Var<S>>> ce_sum;
  std::map<int, int> ce_count;
  for (const auto& item : items) {
    const TargetViews views = make_targets(item.ids);
    const ad::Var<S> enc = model.encode(s, item.features);
    if (cfg.alpha > 0.0) {
      if (auto c = ctc_loss(model.ctc_head(s, enc), views.ctc_target)) {
        ctc_sum = ctc_sum ? ad::add(*ctc_sum, *c) : *c;
        ++ctc_items;
      }
    }
    const auto dec = model.decode(s, views.decoder_input, &enc);
    for (std::size_t i = 0; i < dec.taps.size(); ++i) {
      const int tap = dec.taps[i];
      CeSum<S> part = smoothed_ce_sum(dec.logits[i], views.decoder_target, cfg.label_smoothing);
      auto& acc = ce_sum[tap];
      acc = acc ? ad::add(*acc, part.total) : part.total;
      ce_count[tap] += part.count;
    }
  }
  BatchLoss<S> out;
  std::map<int, ad::Var<S>> tap_means;
  for (auto& [tap, sum] : ce_sum) {
    const int n = ce_count[tap];
    ad::Var<S> mean = ad::scale(*sum, n > 0 ? S(1) / static_cast<S>(n) : S(0));
    tap_means.emplace(tap, mean);
    out.ce[tap] = static_cast<double>(mean.value()(0, 0));
  }
  const ad::Var<S> dec_loss = decred_loss(tap_means, cfg);
  ad::Var<S> ctc = ctc_sum ? ad::scale(*ctc_sum, S(1) / static_cast<S>(ctc_items))
                           : tape.constant(ad::Matrix<S>::Zero(1, 1));
  out.ctc = static_cast<double>(ctc.value()(0, 0));
  out.ctc_items = ctc_items;
  out.total = composite_loss(ctc, dec_loss, cfg.alpha);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct StepLog {
  int step = 0;
  double loss = 0.0;
  double ctc = 0.0;
  double ce_final = 0.0;
  double ce_tap = std::numeric_limits<double>::quiet_NaN();  // first auxiliary tap, if any
  double lr = 0.0;
};

struct EvalLog {
  int step = 0;
  double train_loss = 0.0;  // averaged over the steps since the previous eval
  double ctc = 0.0;
  double ce_final = 0.0;
  double ce_tap = std::numeric_limits<double>::quiet_NaN();
  double dev_wer = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<StepLog> steps;
  std::vector<EvalLog> evals;
  int best_step = 0;
  double best_dev_wer = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string format_metric(double x) {
  if (std::isnan(x)) return "";
  std::ostringstream os;
  os.precision(9);
  os << x;
  return os.str();
}

inline std::string metrics_csv(const std::vector<EvalLog>& evals) {
  std::string out = "step,train_loss,ctc_loss,ce_final,ce_tap,dev_wer,lr\n";
  for (const auto& e : evals) {
    out += std::to_string(e.step) + "," + format_metric(e.train_loss) + "," + format_metric(e.ctc) + "," +
           format_metric(e.ce_final) + "," + format_metric(e.ce_tap) + "," + format_metric(e.dev_wer) + "," +
           format_metric(e.lr) + "\n";
  }
  return out;
}

inline std::string steps_csv(const std::vector<StepLog>& steps) {
  std::string out = "step,loss,ctc_loss,ce_final,ce_tap,lr\n";
  for (const auto& s : steps) {
    out += std::to_string(s.step) + "," + format_metric(s.loss) + "," + format_metric(s.ctc) + "," +
           format_metric(s.ce_final) + "," + format_metric(s.ce_tap) + "," + format_metric(s.lr) + "\n";
  }
  return out;
}

template <class S>
double dev_wer(Model<S>& model, const Tokenizer& tok, std::span<const Utterance> dev, const DecodeConfig& cfg,
               const FusionWeights* v = nullptr) {
  if (dev.empty()) return 0.0;
  const auto records = decode_dataset(model, tok, dev, cfg, v);
  std::vector<RefHyp> pairs;
  for (std::size_t i = 0; i < dev.size(); ++i) pairs.push_back({dev[i].id, dev[i].transcript, records[i].hyp});
  return wer(pairs).wer;
}

/// Augments one training utterance: speed perturbation always, SpecAug only
/// once `step` reaches the configured delay.
inline Features augment_item(const Features& feats, const AugmentConfig& cfg, int step, Rng& rng) {
  Features out = feats;
  if (!cfg.speed_factors.empty()) {
    const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.speed_factors.size()) - 1));
    Features sped = speed_perturb(feats, cfg.speed_factors[k]);
    if (sped.rows() >= kMinFrames) out = std::move(sped);
  }
  if (step >= cfg.specaug_delay_steps) out = spec_augment(out, cfg, rng).features;
  return out;
}

/// Tracks the best dev WER and says when `patience` evaluations in a row have
/// failed to improve on it.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Returns true when this evaluation is a new best.
  bool update(double wer) {
    if (wer < best_) {
      best_ = wer;
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }

  bool should_stop() const { return since_best_ >= patience_; }
  double best() const { return best_; }

 private:
  int patience_;
  int since_best_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct TrainHooks {
  std::function<void(const EvalLog&)> on_eval;
};

/// Trains `model` in place and leaves it holding the weights of the best dev
/// checkpoint. With an empty dev set, the last weights are kept.
template <class S>
TrainResult train(Model<S>& model, const Tokenizer& tok, std::span<const Utterance> train_set,
                  std::span<const Utterance> dev, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate(model.config().taps);
  std::vector<TrainItem> items;
  for (const auto& u : train_set) {
    if (u.frames() > cfg.max_frames || u.frames() < kMinFrames) continue;
    items.push_back({u.id, u.features, tok.encode(u.transcript)});
  }
  if (items.empty()) throw std::invalid_argument("train: no training utterances left after length filtering");

  const std::vector<ad::Parameter<S>*> params = model.parameters();
  AdamW<S> opt(params, cfg.weight_decay);
  DecodeConfig dev_cfg;
  dev_cfg.lambda = cfg.dev_lambda;

  TrainResult result;
  std::vector<ad::Matrix<S>> best;
  EarlyStopping stopping(cfg.patience);
  double window_loss = 0, window_ctc = 0, window_final = 0, window_tap = 0;
  int window = 0;
  const int final_tap = model.config().taps.back();
  std::optional<int> aux_tap;
  for (int t : model.config().taps)
    if (t != final_tap) {
      aux_tap = t;
      break;
    }

  int step = 0;
  bool stop = false;
  std::vector<std::size_t> order(items.size());
  for (int epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(derive_seed(cfg.seed, "shuffle"), static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    for (std::size_t begin = 0; begin < order.size() && !stop; begin += static_cast<std::size_t>(cfg.batch_size)) {
      ++step;
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      Rng aug(derive_seed(derive_seed(cfg.seed, "augment"), static_cast<std::uint64_t>(step)));
      std::vector<TrainItem> batch;
      for (std::size_t k = begin; k < end; ++k) {
        const TrainItem& src = items[order[k]];
        batch.push_back({src.id, augment_item(src.features, cfg.augment, step, aug), src.ids});
      }

      model.zero_grad();
      Rng dropout(derive_seed(derive_seed(cfg.seed, "dropout"), static_cast<std::uint64_t>(step)));
      ad::Tape<S> tape(true);
      auto session = model.bind(tape, true, &dropout);
      const BatchLoss<S> loss = batch_loss(model, session, batch, cfg.loss);
      const double value = static_cast<double>(loss.total.value()(0, 0));
      if (!std::isfinite(value)) {
        std::string ids;
        for (const auto& b : batch) ids += (ids.empty() ? "" : ",") + b.id;
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(begin / static_cast<std::size_t>(cfg.batch_size)) +
                            ", utterances " + ids + ")");
      }
      tape.backward(loss.total);
      clip_grad_norm<S>(params, cfg.clip_norm);
      const double lr = lr_at(step, cfg);
      opt.step(lr);

      StepLog log{step, value, loss.ctc, loss.ce.at(final_tap),
                  aux_tap ? loss.ce.at(*aux_tap) : std::numeric_limits<double>::quiet_NaN(), lr};
      result.steps.push_back(log);
      window_loss += log.loss;
      window_ctc += log.ctc;
      window_final += log.ce_final;
      window_tap += log.ce_tap;
      ++window;

      const bool last = step >= cfg.total_steps;
      if (step % cfg.eval_every == 0 || last) {
        EvalLog e{step, window_loss / window, window_ctc / window, window_final / window, window_tap / window, 0.0, lr};
        window = 0;
        window_loss = window_ctc = window_final = window_tap = 0;
        e.dev_wer = dev_wer(model, tok, dev, dev_cfg);
        result.evals.push_back(e);
        if (hooks.on_eval) hooks.on_eval(e);
        if (stopping.update(e.dev_wer)) {
          result.best_dev_wer = e.dev_wer;
          result.best_step = step;
          best.clear();
          for (const auto* p : params) best.push_back(p->value);
        } else if (stopping.should_stop()) {
          result.early_stopped = true;
          stop = true;
        }
      }
      if (last) stop = true;
    }
  }
  if (!best.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  }
  return result;
}

// ---------------------------------------------------------------------------
// Fusion-weight calibration

struct CalibrationConfig {
  int epochs = 100;
  double lr = 0.05;
};

inline void to_json(nlohmann::json& j, const CalibrationConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs}, {"lr", c.lr}};
}

inline void from_json(const nlohmann::json& j, CalibrationConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
}

struct CalibrationResult {
  FusionWeights v;
  double initial_ce = 0.0;
  double final_ce = 0.0;
  int epochs_run = 0;
  bool stopped_on_increase = false;
};

inline nlohmann::json to_json(const CalibrationResult& r) {
  return nlohmann::json{{"v", r.v},
                        {"initial_ce", r.initial_ce},
                        {"final_ce", r.final_ce},
                        {"epochs_run", r.epochs_run},
                        {"stopped_on_increase", r.stopped_on_increase}};
}

namespace detail {

struct CalibItem {
  std::map<int, ad::Matrix<double>> logits;  // per tap, N x V
  std::vector<int> targets;
};

// Mean teacher-forced cross-entropy of the fused distribution over the set.
inline ad::Var<double> fused_ce(ad::Tape<double>& tape, const std::vector<CalibItem>& items,
                                const std::map<int, ad::Var<double>>& v) {
  std::optional<ad::Var<double>> total;
  int count = 0;
  for (const auto& item : items) {
    const auto n = static_cast<Eigen::Index>(item.targets.size());
    const ad::Var<double> ones = tape.constant(ad::Matrix<double>::Ones(n, 1));
    std::optional<ad::Var<double>> fused;
    for (const auto& [tap, weights] : v) {
      const ad::Var<double> term = ad::mul(ad::matmul(ones, weights), tape.constant(item.logits.at(tap)));
      fused = fused ? ad::add(*fused, term) : term;
    }
    CeSum<double> ce = smoothed_ce_sum(*fused, item.targets, 0.0);
    total = total ? ad::add(*total, ce.total) : ce.total;
    count += ce.count;
  }
  return ad::scale(*total, 1.0 / std::max(count, 1));
}

}  // namespace detail

/// Fits the per-tap vectors v by full-batch Adam on the dev cross-entropy of the
/// fused distribution. The model is frozen. If any epoch increases the loss the
/// fit is treated as diverged and the last-layer initialisation is returned.
template <class S>
CalibrationResult calibrate_fusion(Model<S>& model, const Tokenizer& tok, std::span<const Utterance> dev,
                                   const CalibrationConfig& cfg) {
  if (dev.empty()) throw std::invalid_argument("calibrate: empty dev set");
  const auto& taps = model.config().taps;
  const int V = model.config().vocab_size;
  std::vector<detail::CalibItem> items;
  for (const auto& u : dev) {
    const TargetViews views = make_targets(tok.encode(u.transcript));
    const ad::Matrix<S> enc = model.encode(u.features);
    const DecoderTapOutputs<S> out = model.decode_step(views.decoder_input, &enc);
    detail::CalibItem item;
    for (std::size_t i = 0; i < out.taps.size(); ++i) item.logits[out.taps[i]] = out.logits[i].template cast<double>();
    item.targets = views.decoder_target;
    items.push_back(std::move(item));
  }

  const FusionWeights init = FusionWeights::last_layer(taps, V);
  std::vector<ad::Parameter<double>> params;
  params.reserve(taps.size());
  for (int t : taps) params.emplace_back("v." + std::to_string(t), ad::Matrix<double>(init.v.at(t)));
  std::vector<ad::Parameter<double>*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  AdamW<double> opt(ptrs, 0.0);

  auto evaluate = [&](bool grad) {
    for (auto& p : params) p.zero_grad();
    ad::Tape<double> tape(grad);
    std::map<int, ad::Var<double>> v;
    for (std::size_t i = 0; i < taps.size(); ++i) v.emplace(taps[i], tape.parameter(params[i]));
    const ad::Var<double> loss = detail::fused_ce(tape, items, v);
    if (grad) tape.backward(loss);
    return loss.value()(0, 0);
  };
  auto snapshot = [&] {
    FusionWeights w;
    for (std::size_t i = 0; i < taps.size(); ++i) w.v[taps[i]] = params[i].value;
    return w;
  };

  CalibrationResult res;
  res.v = init;
  res.initial_ce = evaluate(false);
  res.final_ce = res.initial_ce;
  double prev = res.initial_ce;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    evaluate(true);
    opt.step(cfg.lr);
    const double ce = evaluate(false);
    ++res.epochs_run;
    if (!std::isfinite(ce) || ce > prev) {
      res.stopped_on_increase = true;
      res.v = init;
      res.final_ce = res.initial_ce;
      break;
    }
    prev = ce;
    res.final_ce = ce;
    res.v = snapshot();
  }
  return res;
}

}  // namespace decred
