#pragma once

// Zero-attention internal language model: the decoder run with every
// cross-attention output replaced by zeros, scored teacher-forced on text.

#include <json.hpp>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "decred/data.hpp"
#include "decred/losses.hpp"
#include "decred/model.hpp"

namespace decred {

struct IlmUtterance {
  std::string id;
  int tokens = 0;
  double nll = 0.0;
};

struct IlmReport {
  std::string dataset;
  long tokens = 0;
  double nll = 0.0;
  std::vector<IlmUtterance> per_utt;

  double perplexity() const { return std::exp(nll / static_cast<double>(tokens)); }
};

inline nlohmann::json to_json(const IlmReport& r) {
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& u : r.per_utt) per.push_back({{"id", u.id}, {"tokens", u.tokens}, {"nll", u.nll}});
  return nlohmann::ordered_json{
      {"dataset", r.dataset}, {"tokens", r.tokens}, {"nll", r.nll}, {"ppl", r.perplexity()}, {"per_utt", per}};
}

/// Log-distribution over the next token after `prefix` (BOS first) with the
/// encoder switched off. `tap` 0 selects the final classifier.
template <class S>
ad::RowVector<double> ilm_next_logprobs(Model<S>& model, std::span<const int> prefix, int tap = 0) {
  if (prefix.empty() || prefix.front() != special::kBos) throw std::invalid_argument("ilm: prefix must start with BOS");
  const DecoderTapOutputs<S> out = model.decode_step(prefix, nullptr);
  const ad::Matrix<S>& logits = tap == 0 ? out.logits.back() : out.logits_at(tap);
  const ad::Matrix<double> last = logits.row(logits.rows() - 1).template cast<double>();
  return ad::log_softmax_rows(last);
}

/// Corpus perplexity over token sequences. EOS is predicted, BOS only
/// conditions, and positions whose target is MASK are skipped.
template <class S>
IlmReport ilm_perplexity(Model<S>& model, const Tokenizer& tok, std::span<const Utterance> corpus,
                         const std::string& dataset, int tap = 0) {
  if (corpus.empty()) throw std::invalid_argument("ilm: empty corpus");
  IlmReport report;
  report.dataset = dataset;
  for (const auto& u : corpus) {
    const TargetViews views = make_targets(tok.encode(u.transcript));
    const DecoderTapOutputs<S> out = model.decode_step(views.decoder_input, nullptr);
    const ad::Matrix<S>& logits = tap == 0 ? out.logits.back() : out.logits_at(tap);
    const ad::Matrix<double> logp = ad::log_softmax_rows(ad::Matrix<double>(logits.template cast<double>()));
    IlmUtterance score{u.id, 0, 0.0};
    for (std::size_t n = 0; n < views.decoder_target.size(); ++n) {
      const int target = views.decoder_target[n];
      if (target == special::kMask || target == special::kPad) continue;
      score.nll -= logp(static_cast<Eigen::Index>(n), target);
      ++score.tokens;
    }
    report.tokens += score.tokens;
    report.nll += score.nll;
    report.per_utt.push_back(std::move(score));
  }
  if (report.tokens == 0) throw std::invalid_argument("ilm: corpus has no scorable tokens");
  return report;
}

}  // namespace decred
