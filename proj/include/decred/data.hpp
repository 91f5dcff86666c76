#pragma once

// Utterances, the character tokenizer, transcript masking, the synthetic
// speech-like task, feature-domain augmentation and on-disk formats.

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "decred/autodiff.hpp"
#include "decred/rng.hpp"

namespace decred {

using Features = ad::Matrix<float>;

struct Utterance {
  std::string id;
  Features features;  // T x F
  std::string transcript;

  int frames() const { return static_cast<int>(features.rows()); }
};

/// Fixed special-token positions. Regular symbols start at `kFirstSymbol`.
namespace special {
inline constexpr int kBlank = 0;
inline constexpr int kPad = 1;
inline constexpr int kBos = 2;
inline constexpr int kEos = 3;
inline constexpr int kMask = 4;
inline constexpr int kFirstSymbol = 5;
}  // namespace special

inline constexpr std::string_view kMaskWord = "[MASK]";

class Tokenizer {
 public:
  Tokenizer() = default;

  /// Each symbol is a single character; " " is allowed and acts as the word
  /// separator.
  explicit Tokenizer(std::vector<char> symbols) : symbols_(std::move(symbols)) {
    std::fill(std::begin(lookup_), std::end(lookup_), -1);
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      const auto c = static_cast<unsigned char>(symbols_[i]);
      if (lookup_[c] != -1) throw std::invalid_argument("duplicate tokenizer symbol");
      lookup_[c] = special::kFirstSymbol + static_cast<int>(i);
    }
  }

  int vocab_size() const { return special::kFirstSymbol + static_cast<int>(symbols_.size()); }
  const std::vector<char>& symbols() const { return symbols_; }
  int space_id() const { return lookup_[static_cast<unsigned char>(' ')]; }

  static bool is_special(int id) { return id < special::kFirstSymbol; }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    std::istringstream words{std::string(text)};
    std::string word;
    bool first = true;
    while (words >> word) {
      if (!first) {
        if (space_id() < 0) throw std::invalid_argument("tokenizer has no word separator");
        ids.push_back(space_id());
      }
      first = false;
      if (word == kMaskWord) {
        ids.push_back(special::kMask);
        continue;
      }
      for (char c : word) {
        const int id = lookup_[static_cast<unsigned char>(c)];
        if (id < 0) throw std::invalid_argument(std::string("out-of-vocabulary character '") + c + "'");
        ids.push_back(id);
      }
    }
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (id == special::kMask) {
        out += kMaskWord;
      } else if (id >= special::kFirstSymbol && id < vocab_size()) {
        out += symbols_[static_cast<std::size_t>(id - special::kFirstSymbol)];
      }
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["blank"] = special::kBlank;
    j["pad"] = special::kPad;
    j["bos"] = special::kBos;
    j["eos"] = special::kEos;
    j["mask"] = special::kMask;
    j["symbols"] = std::string(symbols_.begin(), symbols_.end());
    j["vocab_size"] = vocab_size();
    return j;
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    const auto s = j.at("symbols").get<std::string>();
    return Tokenizer(std::vector<char>(s.begin(), s.end()));
  }

 private:
  std::vector<char> symbols_;
  int lookup_[256] = {};
};

/// Replaces bracketed tags and hyphen-terminated fragments with [MASK].
inline std::string mask_transform(std::string_view transcript) {
  std::istringstream in{std::string(transcript)};
  std::string word;
  std::string out;
  while (in >> word) {
    const bool bracketed = word.size() >= 2 && word.front() == '[' && word.back() == ']';
    const bool unfinished = word.back() == '-';
    if (!out.empty()) out += ' ';
    out += (bracketed || unfinished) ? std::string(kMaskWord) : word;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic task

struct SynthSpec {
  int vocab_size = 16;  // regular symbols, including the space separator
  int n_utts = 1000;
  int min_len = 3;
  int max_len = 10;
  int min_frames_per_token = 8;
  int max_frames_per_token = 14;
  int feat_dim = 16;
  double noise_sigma = 0.1;

  void validate() const {
    if (min_len < 1 || max_len < min_len) throw std::invalid_argument("synth: invalid length range");
    if (min_frames_per_token < 1 || max_frames_per_token < min_frames_per_token)
      throw std::invalid_argument("synth: invalid frames-per-token range");
    if (vocab_size < 2 || vocab_size > 63) throw std::invalid_argument("synth: vocab_size must be in [2, 63]");
    if (feat_dim < 1) throw std::invalid_argument("synth: feat_dim must be positive");
    if (n_utts < 0 || noise_sigma < 0) throw std::invalid_argument("synth: negative count or noise");
  }
};

/// Symbols, their acoustic prototypes, and the bigram grammar transcripts are
/// drawn from. Immutable once built.
struct SynthTask {
  Tokenizer tokenizer;
  std::vector<Features> prototypes;  // indexed by symbol position
  ad::Matrix<double> transitions;    // row-stochastic over symbol positions
};

inline std::vector<char> synth_symbols(int vocab_size) {
  static constexpr std::string_view pool = "abcdefghijklmnopqrstuvwxyz0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";
  std::vector<char> symbols{' '};
  for (int i = 0; i + 1 < vocab_size; ++i) symbols.push_back(pool[static_cast<std::size_t>(i)]);
  return symbols;
}

inline SynthTask make_synth_task(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  SynthTask task;
  task.tokenizer = Tokenizer(synth_symbols(spec.vocab_size));
  Rng rng(derive_seed(seed, "prototypes"));
  for (int s = 0; s < spec.vocab_size; ++s) {
    const auto len = static_cast<int>(rng.uniform_int(spec.min_frames_per_token, spec.max_frames_per_token));
    Features proto(len, spec.feat_dim);
    for (Eigen::Index i = 0; i < proto.size(); ++i) proto.data()[i] = static_cast<float>(rng.normal());
    task.prototypes.push_back(std::move(proto));
  }
  Rng grammar(derive_seed(seed, "grammar"));
  const int n = spec.vocab_size;
  task.transitions.resize(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double w = std::exp(1.5 * grammar.normal());
      if (j == 0) w *= 3.0;  // word boundaries are common enough to give several words
      task.transitions(i, j) = w;
    }
    task.transitions.row(i) /= task.transitions.row(i).sum();
  }
  return task;
}

/// Concatenates the prototypes of `symbol_positions` and adds Gaussian noise.
inline Features render_features(const std::vector<Features>& prototypes, std::span<const int> symbol_positions,
                                double noise_sigma, Rng& rng) {
  Eigen::Index total = 0;
  for (int s : symbol_positions) total += prototypes.at(static_cast<std::size_t>(s)).rows();
  const Eigen::Index dim = prototypes.empty() ? 0 : prototypes.front().cols();
  Features out(total, dim);
  Eigen::Index row = 0;
  for (int s : symbol_positions) {
    const Features& p = prototypes[static_cast<std::size_t>(s)];
    out.middleRows(row, p.rows()) = p;
    row += p.rows();
  }
  if (noise_sigma > 0) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += static_cast<float>(noise_sigma * rng.normal());
  }
  return out;
}

namespace detail {
inline int sample_row(const ad::Matrix<double>& probs, int row, bool allow_space, Rng& rng) {
  double total = 0;
  for (Eigen::Index j = allow_space ? 0 : 1; j < probs.cols(); ++j) total += probs(row, j);
  double u = rng.uniform() * total;
  for (Eigen::Index j = allow_space ? 0 : 1; j < probs.cols(); ++j) {
    u -= probs(row, j);
    if (u < 0) return static_cast<int>(j);
  }
  return static_cast<int>(probs.cols() - 1);
}
}  // namespace detail

/// Draws `n` utterances from the task's grammar. Transcripts never start or end
/// with a space and never contain two spaces in a row.
inline std::vector<Utterance> synth_utterances(const SynthTask& task, const SynthSpec& spec, int n,
                                               std::uint64_t seed, std::string_view id_prefix) {
  spec.validate();
  Rng rng(seed);
  std::vector<Utterance> utts;
  utts.reserve(static_cast<std::size_t>(std::max(n, 0)));
  const int n_symbols = spec.vocab_size;
  for (int u = 0; u < n; ++u) {
    const auto len = static_cast<int>(rng.uniform_int(spec.min_len, spec.max_len));
    std::vector<int> seq;
    int prev = static_cast<int>(rng.uniform_int(1, n_symbols - 1));
    seq.push_back(prev);
    for (int i = 1; i < len; ++i) {
      const bool allow_space = prev != 0 && i + 1 < len;
      prev = detail::sample_row(task.transitions, prev, allow_space, rng);
      seq.push_back(prev);
    }
    std::string text;
    for (int s : seq) text += task.tokenizer.symbols()[static_cast<std::size_t>(s)];
    char id[32];
    std::snprintf(id, sizeof(id), "%06d", u);
    Utterance utt{std::string(id_prefix) + id, render_features(task.prototypes, seq, spec.noise_sigma, rng), text};
    utts.push_back(std::move(utt));
  }
  return utts;
}

/// One named split ("train", "dev", ...) drawn from its own stream of `seed`;
/// ids are "<split>_NNNNNN".
inline std::vector<Utterance> synth_split(const SynthTask& task, const SynthSpec& spec, std::uint64_t seed,
                                          const std::string& split, int n) {
  return synth_utterances(task, spec, n, derive_seed(seed, split), split + "_");
}

struct SynthDataset {
  SynthTask task;
  std::vector<Utterance> utterances;
};

inline SynthDataset synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  SynthDataset ds{make_synth_task(spec, seed), {}};
  ds.utterances = synth_utterances(ds.task, spec, spec.n_utts, derive_seed(seed, "utterances"), "utt");
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  int n_freq_masks = 2;
  int max_freq_width = 4;
  int n_time_masks = 2;
  int max_time_width = 5;
  int specaug_delay_steps = 300;
  std::vector<double> speed_factors{0.9, 1.0, 1.1};

  void validate() const {
    if (n_freq_masks < 0 || max_freq_width < 0 || n_time_masks < 0 || max_time_width < 0 || specaug_delay_steps < 0)
      throw std::invalid_argument("augment: counts and widths must be >= 0");
    for (double f : speed_factors)
      if (!(f > 0)) throw std::invalid_argument("augment: speed factors must be > 0");
  }
};

struct MaskSpan {
  int start = 0;
  int width = 0;
};

struct AugmentResult {
  Features features;
  std::vector<MaskSpan> time_masks;
  std::vector<MaskSpan> freq_masks;
};

/// Zeroes random time and frequency spans. Widths are clamped to the tensor.
inline AugmentResult spec_augment(const Features& input, const AugmentConfig& cfg, Rng& rng) {
  AugmentResult res{input, {}, {}};
  const int T = static_cast<int>(input.rows());
  const int F = static_cast<int>(input.cols());
  for (int m = 0; m < cfg.n_time_masks; ++m) {
    const int w = static_cast<int>(rng.uniform_int(0, std::min(cfg.max_time_width, T)));
    const int start = static_cast<int>(rng.uniform_int(0, T - w));
    res.features.middleRows(start, w).setZero();
    res.time_masks.push_back({start, w});
  }
  for (int m = 0; m < cfg.n_freq_masks; ++m) {
    const int w = static_cast<int>(rng.uniform_int(0, std::min(cfg.max_freq_width, F)));
    const int start = static_cast<int>(rng.uniform_int(0, F - w));
    res.features.middleCols(start, w).setZero();
    res.freq_masks.push_back({start, w});
  }
  return res;
}

/// Resamples the time axis by linear interpolation; output length round(T / factor).
inline Features speed_perturb(const Features& input, double factor) {
  if (!(factor > 0)) throw std::invalid_argument("speed_perturb: factor must be > 0");
  const Eigen::Index T = input.rows();
  const auto out_len = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::llround(static_cast<double>(T) / factor)));
  Features out(out_len, input.cols());
  for (Eigen::Index i = 0; i < out_len; ++i) {
    const double src = std::min(static_cast<double>(i) * factor, static_cast<double>(T - 1));
    const auto lo = static_cast<Eigen::Index>(std::floor(src));
    const Eigen::Index hi = std::min(lo + 1, T - 1);
    const auto w = static_cast<float>(src - static_cast<double>(lo));
    out.row(i) = input.row(lo) + w * (input.row(hi) - input.row(lo));
  }
  return out;
}

inline std::vector<Utterance> filter_by_length(std::vector<Utterance> utts, int max_frames) {
  std::erase_if(utts, [max_frames](const Utterance& u) { return u.frames() > max_frames; });
  return utts;
}

// ---------------------------------------------------------------------------
// Feature files: "FBNK", u32 T, u32 F (little endian), then T*F f32 LE.

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("truncated feature file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void write_features(const std::filesystem::path& path, const Features& feats) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("FBNK", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(feats.rows()));
  detail::put_u32(os, static_cast<std::uint32_t>(feats.cols()));
  for (Eigen::Index i = 0; i < feats.size(); ++i) detail::put_u32(os, std::bit_cast<std::uint32_t>(feats.data()[i]));
}

inline Features read_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "FBNK") throw std::runtime_error("bad feature magic in " + path.string());
  const std::uint32_t T = detail::get_u32(is);
  const std::uint32_t F = detail::get_u32(is);
  Features feats(T, F);
  for (Eigen::Index i = 0; i < feats.size(); ++i) feats.data()[i] = std::bit_cast<float>(detail::get_u32(is));
  return feats;
}

// ---------------------------------------------------------------------------
// Manifests: one JSON object per line with keys id, feats, text. Feature paths
// are relative to the manifest's directory unless absolute.

inline void write_manifest(const std::filesystem::path& manifest, std::span<const Utterance> utts,
                           const std::string& feats_subdir) {
  namespace fs = std::filesystem;
  const fs::path root = manifest.parent_path();
  fs::create_directories(root / feats_subdir);
  std::ofstream os(manifest, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + manifest.string());
  for (const auto& u : utts) {
    const std::string rel = feats_subdir + "/" + u.id + ".fbnk";
    write_features(root / rel, u.features);
    nlohmann::json j{{"id", u.id}, {"feats", rel}, {"text", u.transcript}};
    os << j.dump() << '\n';
  }
}

inline std::vector<Utterance> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw std::runtime_error("cannot read manifest " + manifest.string());
  std::vector<Utterance> utts;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    std::filesystem::path feats = j.at("feats").get<std::string>();
    if (feats.is_relative()) feats = manifest.parent_path() / feats;
    utts.push_back({j.at("id").get<std::string>(), read_features(feats), j.at("text").get<std::string>()});
  }
  return utts;
}

}  // namespace decred
