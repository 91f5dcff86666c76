#pragma once

// Encoder-decoder with convolutional subsampling, a CTC head on the encoder,
// and next-token classifiers tapped from selected decoder layers.

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "decred/autodiff.hpp"
#include "decred/data.hpp"
#include "decred/rng.hpp"

namespace decred {

enum class EncoderBlock { kPlain, kBranch };

struct ModelConfig {
  int feat_dim = 16;
  int conv_channels = 16;
  int encoder_layers = 2;
  int decoder_layers = 4;
  int d_model = 64;
  int d_ff = 256;
  int heads = 2;
  double dropout = 0.1;
  int vocab_size = 21;  // including special tokens
  std::vector<int> taps{2, 4};
  EncoderBlock encoder_block = EncoderBlock::kPlain;
  int branch_kernel = 15;
  int max_positions = 512;

  void validate() const {
    if (feat_dim < 1 || conv_channels < 1) throw std::invalid_argument("model: feat_dim and conv_channels must be >= 1");
    if (encoder_layers < 0 || decoder_layers < 1) throw std::invalid_argument("model: need at least one decoder layer");
    if (d_model < 1 || heads < 1 || d_model % heads != 0)
      throw std::invalid_argument("model: d_model must be divisible by heads");
    if (d_ff < 1) throw std::invalid_argument("model: d_ff must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model: dropout must be in [0, 1)");
    if (vocab_size <= special::kFirstSymbol) throw std::invalid_argument("model: vocab_size too small");
    if (taps.empty() || !std::is_sorted(taps.begin(), taps.end()) ||
        std::adjacent_find(taps.begin(), taps.end()) != taps.end())
      throw std::invalid_argument("model: taps must be strictly increasing");
    if (taps.front() < 1 || taps.back() != decoder_layers)
      throw std::invalid_argument("model: taps must lie in [1, D] and include D");
    if (branch_kernel < 1 || branch_kernel % 2 == 0) throw std::invalid_argument("model: branch_kernel must be odd");
  }

  bool has_tap(int layer) const { return std::find(taps.begin(), taps.end(), layer) != taps.end(); }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"feat_dim", c.feat_dim},
                     {"conv_channels", c.conv_channels},
                     {"E", c.encoder_layers},
                     {"D", c.decoder_layers},
                     {"d_model", c.d_model},
                     {"d_ff", c.d_ff},
                     {"heads", c.heads},
                     {"dropout", c.dropout},
                     {"V_total", c.vocab_size},
                     {"taps", c.taps},
                     {"encoder_block", c.encoder_block == EncoderBlock::kPlain ? "plain" : "branch"},
                     {"branch_kernel", c.branch_kernel},
                     {"max_positions", c.max_positions}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.feat_dim = j.value("feat_dim", c.feat_dim);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.encoder_layers = j.value("E", c.encoder_layers);
  c.decoder_layers = j.value("D", c.decoder_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.heads = j.value("heads", c.heads);
  c.dropout = j.value("dropout", c.dropout);
  c.vocab_size = j.value("V_total", c.vocab_size);
  c.taps = j.value("taps", c.taps);
  const std::string block = j.value("encoder_block", std::string("plain"));
  if (block == "plain") {
    c.encoder_block = EncoderBlock::kPlain;
  } else if (block == "branch") {
    c.encoder_block = EncoderBlock::kBranch;
  } else {
    throw std::invalid_argument("model: encoder_block must be plain or branch");
  }
  c.branch_kernel = j.value("branch_kernel", c.branch_kernel);
  c.max_positions = j.value("max_positions", c.max_positions);
}

/// Frames after two stride-2, padding-1, kernel-3 convolutions.
inline int subsampled_length(int frames) {
  const int once = (frames - 1) / 2 + 1;
  return (once - 1) / 2 + 1;
}

inline constexpr int kMinFrames = 4;

template <class S>
ad::Matrix<S> sinusoidal_positions(int length, int dim) {
  ad::Matrix<S> pe(length, dim);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(pos, i) = static_cast<S>(i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate));
    }
  }
  return pe;
}

/// Per-tap decoder outputs for every position of the input prefix.
template <class S>
struct DecoderTapOutputs {
  std::vector<int> taps;
  std::vector<ad::Matrix<S>> hidden;  // N x d_model, after the shared final norm
  std::vector<ad::Matrix<S>> logits;  // N x V_total

  const ad::Matrix<S>& logits_at(int tap) const {
    for (std::size_t i = 0; i < taps.size(); ++i)
      if (taps[i] == tap) return logits[i];
    throw std::out_of_range("no classifier at decoder layer " + std::to_string(tap));
  }
};

template <class S>
class Model {
 public:
  using Matrix = ad::Matrix<S>;
  using Var = ad::Var<S>;
  using Tape = ad::Tape<S>;

  /// Differentiable view of the model's parameters on one tape.
  struct Session {
    Tape* tape = nullptr;
    std::vector<Var> vars;
    bool training = false;
    Rng* rng = nullptr;

    Var operator()(int index) const { return vars[static_cast<std::size_t>(index)]; }
  };

  struct DecoderVars {
    std::vector<int> taps;
    std::vector<Var> hidden;
    std::vector<Var> logits;
  };

  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(seed);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<ad::Parameter<S>*> parameters() {
    std::vector<ad::Parameter<S>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<const ad::Parameter<S>*> parameters() const {
    std::vector<const ad::Parameter<S>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  ad::Parameter<S>& parameter(const std::string& name) { return *params_.at(static_cast<std::size_t>(index_.at(name))); }
  const ad::Parameter<S>& parameter(const std::string& name) const {
    return *params_.at(static_cast<std::size_t>(index_.at(name)));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  /// Copy with a different scalar type (e.g. float training weights into a
  /// double-precision verification model).
  template <class T>
  Model<T> cast() const {
    Model<T> other(cfg_, 0);
    for (const auto& p : params_) other.parameter(p->name).value = p->value.template cast<T>();
    return other;
  }

  Session bind(Tape& tape, bool training = false, Rng* rng = nullptr) {
    Session s{&tape, {}, training, rng};
    s.vars.reserve(params_.size());
    for (auto& p : params_) s.vars.push_back(tape.parameter(*p));
    return s;
  }

  // -------------------------------------------------------------------------
  // Differentiable forward passes

  /// Returns T' x d_model encoder frames.
  Var encode(Session& s, const Features& features) const {
    if (features.rows() < kMinFrames)
      throw std::invalid_argument("encode: need at least " + std::to_string(kMinFrames) + " frames, got " +
                                  std::to_string(features.rows()));
    if (features.cols() != cfg_.feat_dim) throw std::invalid_argument("encode: feature dimension mismatch");
    Var x = s.tape->constant(features.template cast<S>());
    x = ad::relu(ad::conv2d_stride2(x, 1, s(conv1_w_), s(conv1_b_)));
    x = ad::relu(ad::conv2d_stride2(x, cfg_.conv_channels, s(conv2_w_), s(conv2_b_)));
    x = ad::linear(x, s(proj_w_), s(proj_b_));
    x = ad::add(x, s.tape->constant(sinusoidal_positions<S>(static_cast<int>(x.rows()), cfg_.d_model)));
    x = drop(s, x);
    for (const auto& layer : encoder_) x = encoder_block(s, layer, x);
    return ad::layer_norm(x, s(enc_norm_.gamma), s(enc_norm_.beta));
  }

  /// Row-normalized CTC log-probabilities over V_total, blank at index 0.
  Var ctc_head(Session& s, const Var& enc) const { return ad::log_softmax(ad::linear(enc, s(ctc_w_), s(ctc_b_))); }

  /// Teacher-forced decoder pass over `prefix` (which starts with BOS). With a
  /// null `memory`, cross-attention contributes zero (internal-LM probing).
  /// Only layers up to `max_layer` run (early exit); 0 means all layers.
  DecoderVars decode(Session& s, std::span<const int> prefix, const Var* memory, int max_layer = 0) const {
    if (prefix.empty()) throw std::invalid_argument("decode: empty prefix");
    if (static_cast<int>(prefix.size()) > cfg_.max_positions)
      throw std::invalid_argument("decode: prefix longer than the positional table");
    const int last = max_layer <= 0 ? cfg_.decoder_layers : std::min(max_layer, cfg_.decoder_layers);
    Var x = ad::embedding(s(embed_), prefix);
    x = ad::add(x, s.tape->constant(sinusoidal_positions<S>(static_cast<int>(prefix.size()), cfg_.d_model)));
    x = drop(s, x);
    DecoderVars out;
    for (int l = 1; l <= last; ++l) {
      const DecoderLayer& layer = decoder_[static_cast<std::size_t>(l - 1)];
      x = ad::add(x, drop(s, attention(s, layer.self_attn, norm(s, layer.self_norm, x), nullptr, true)));
      if (memory != nullptr) {
        x = ad::add(x, drop(s, attention(s, layer.cross_attn, norm(s, layer.cross_norm, x), memory, false)));
      }
      x = ad::add(x, drop(s, feed_forward(s, layer.ff, norm(s, layer.ff_norm, x))));
      const auto it = classifiers_.find(l);
      if (it != classifiers_.end()) {
        Var h = norm(s, dec_norm_, x);
        out.taps.push_back(l);
        out.hidden.push_back(h);
        out.logits.push_back(ad::matmul(h, s(it->second)));
      }
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // Inference helpers (no gradient recording)

  Matrix encode(const Features& features) {
    Tape tape(false);
    Session s = bind(tape);
    return encode(s, features).value();
  }

  Matrix ctc_log_probs(const Matrix& enc) {
    Tape tape(false);
    Session s = bind(tape);
    return ctc_head(s, tape.constant(enc)).value();
  }

  DecoderTapOutputs<S> decode_step(std::span<const int> prefix, const Matrix* enc, int max_layer = 0) {
    Tape tape(false);
    Session s = bind(tape);
    std::optional<Var> mem;
    if (enc != nullptr) mem = tape.constant(*enc);
    DecoderVars vars = decode(s, prefix, mem ? &*mem : nullptr, max_layer);
    DecoderTapOutputs<S> out;
    out.taps = vars.taps;
    for (const auto& h : vars.hidden) out.hidden.push_back(h.value());
    for (const auto& l : vars.logits) out.logits.push_back(l.value());
    return out;
  }

  // -------------------------------------------------------------------------
  // Checkpoints: <dir>/manifest.json + <dir>/weights.bin (f32 little endian)

  void save(const std::filesystem::path& dir, const nlohmann::json& extra = nlohmann::json::object()) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["config"] = cfg_;
    manifest["extra"] = extra;
    manifest["tensors"] = nlohmann::json::array();
    std::ofstream bin(dir / "weights.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write checkpoint weights in " + dir.string());
    std::uint64_t offset = 0;
    for (const auto& p : params_) {
      manifest["tensors"].push_back({{"name", p->name},
                                     {"shape", {p->value.rows(), p->value.cols()}},
                                     {"dtype", "float32"},
                                     {"offset", offset}});
      for (Eigen::Index i = 0; i < p->value.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(p->value.data()[i]));
        detail::put_u32(bin, bits);
      }
      offset += static_cast<std::uint64_t>(p->value.size()) * 4;
    }
    std::ofstream js(dir / "manifest.json");
    js << manifest.dump(2) << '\n';
  }

  static Model load(const std::filesystem::path& dir, nlohmann::json* extra = nullptr) {
    std::ifstream js(dir / "manifest.json");
    if (!js) throw std::runtime_error("cannot read checkpoint manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(js);
    Model model(manifest.at("config").get<ModelConfig>(), 0);
    std::ifstream bin(dir / "weights.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot read checkpoint weights in " + dir.string());
    for (const auto& t : manifest.at("tensors")) {
      auto& p = model.parameter(t.at("name").get<std::string>());
      const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
      if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols())
        throw std::runtime_error("checkpoint shape mismatch for " + p.name);
      bin.seekg(static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
      for (Eigen::Index i = 0; i < p.value.size(); ++i)
        p.value.data()[i] = static_cast<S>(std::bit_cast<float>(detail::get_u32(bin)));
    }
    if (extra != nullptr) *extra = manifest.value("extra", nlohmann::json::object());
    return model;
  }

 private:
  struct Norm {
    int gamma = -1, beta = -1;
  };
  struct Attention {
    int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
  };
  struct FeedForward {
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
  };
  struct Branch {
    int w_in = -1, b_in = -1, conv_w = -1, conv_b = -1, merge_w = -1, merge_b = -1;
  };
  struct EncoderLayer {
    Norm attn_norm, ff_norm;
    Attention attn;
    FeedForward ff;
    Branch branch;
  };
  struct DecoderLayer {
    Norm self_norm, cross_norm, ff_norm;
    Attention self_attn, cross_attn;
    FeedForward ff;
  };

  enum class Init { kFanIn, kZero, kOne, kEmbedding };

  int add_param(const std::string& name, int rows, int cols, Init init, std::uint64_t seed, int fan_in = 0) {
    Matrix value(rows, cols);
    switch (init) {
      case Init::kZero:
        value.setZero();
        break;
      case Init::kOne:
        value.setOnes();
        break;
      case Init::kFanIn:
      case Init::kEmbedding: {
        // Each tensor draws from its own stream so adding a classifier does not
        // shift the initialization of anything else.
        Rng rng(derive_seed(seed, name));
        const double bound =
            init == Init::kEmbedding ? 1.0 : 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : rows));
        for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
        break;
      }
    }
    index_[name] = static_cast<int>(params_.size());
    params_.push_back(std::make_unique<ad::Parameter<S>>(name, std::move(value)));
    return static_cast<int>(params_.size()) - 1;
  }

  Norm add_norm(const std::string& name, std::uint64_t seed) {
    return {add_param(name + ".gamma", 1, cfg_.d_model, Init::kOne, seed),
            add_param(name + ".beta", 1, cfg_.d_model, Init::kZero, seed)};
  }

  Attention add_attention(const std::string& name, std::uint64_t seed) {
    const int d = cfg_.d_model;
    Attention a;
    a.wq = add_param(name + ".wq", d, d, Init::kFanIn, seed);
    a.bq = add_param(name + ".bq", 1, d, Init::kZero, seed);
    a.wk = add_param(name + ".wk", d, d, Init::kFanIn, seed);
    a.bk = add_param(name + ".bk", 1, d, Init::kZero, seed);
    a.wv = add_param(name + ".wv", d, d, Init::kFanIn, seed);
    a.bv = add_param(name + ".bv", 1, d, Init::kZero, seed);
    a.wo = add_param(name + ".wo", d, d, Init::kFanIn, seed);
    a.bo = add_param(name + ".bo", 1, d, Init::kZero, seed);
    return a;
  }

  FeedForward add_ff(const std::string& name, std::uint64_t seed) {
    return {add_param(name + ".w1", cfg_.d_model, cfg_.d_ff, Init::kFanIn, seed),
            add_param(name + ".b1", 1, cfg_.d_ff, Init::kZero, seed),
            add_param(name + ".w2", cfg_.d_ff, cfg_.d_model, Init::kFanIn, seed),
            add_param(name + ".b2", 1, cfg_.d_model, Init::kZero, seed)};
  }

  void build(std::uint64_t seed) {
    const int d = cfg_.d_model;
    const int c = cfg_.conv_channels;
    const int f2 = subsampled_length(cfg_.feat_dim);
    // conv weights are stored output-major, so pass the fan-in explicitly
    conv1_w_ = add_param("frontend.conv1.weight", c, 9, Init::kFanIn, seed, 9);
    conv1_b_ = add_param("frontend.conv1.bias", 1, c, Init::kZero, seed);
    conv2_w_ = add_param("frontend.conv2.weight", c, c * 9, Init::kFanIn, seed, c * 9);
    conv2_b_ = add_param("frontend.conv2.bias", 1, c, Init::kZero, seed);
    proj_w_ = add_param("frontend.proj.weight", c * f2, d, Init::kFanIn, seed);
    proj_b_ = add_param("frontend.proj.bias", 1, d, Init::kZero, seed);

    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      const std::string p = "encoder." + std::to_string(l);
      EncoderLayer layer;
      layer.attn_norm = add_norm(p + ".attn_norm", seed);
      layer.attn = add_attention(p + ".attn", seed);
      if (cfg_.encoder_block == EncoderBlock::kBranch) {
        layer.branch.w_in = add_param(p + ".branch.w_in", d, 2 * d, Init::kFanIn, seed);
        layer.branch.b_in = add_param(p + ".branch.b_in", 1, 2 * d, Init::kZero, seed);
        layer.branch.conv_w = add_param(p + ".branch.conv_w", cfg_.branch_kernel, d, Init::kFanIn, seed,
                                        cfg_.branch_kernel);
        layer.branch.conv_b = add_param(p + ".branch.conv_b", 1, d, Init::kZero, seed);
        layer.branch.merge_w = add_param(p + ".branch.merge_w", 2 * d, d, Init::kFanIn, seed);
        layer.branch.merge_b = add_param(p + ".branch.merge_b", 1, d, Init::kZero, seed);
      }
      layer.ff_norm = add_norm(p + ".ff_norm", seed);
      layer.ff = add_ff(p + ".ff", seed);
      encoder_.push_back(layer);
    }
    enc_norm_ = add_norm("encoder.final_norm", seed);
    ctc_w_ = add_param("ctc.weight", d, cfg_.vocab_size, Init::kFanIn, seed);
    ctc_b_ = add_param("ctc.bias", 1, cfg_.vocab_size, Init::kZero, seed);

    embed_ = add_param("decoder.embed", cfg_.vocab_size, d, Init::kEmbedding, seed);
    for (int l = 1; l <= cfg_.decoder_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      DecoderLayer layer;
      layer.self_norm = add_norm(p + ".self_norm", seed);
      layer.self_attn = add_attention(p + ".self_attn", seed);
      layer.cross_norm = add_norm(p + ".cross_norm", seed);
      layer.cross_attn = add_attention(p + ".cross_attn", seed);
      layer.ff_norm = add_norm(p + ".ff_norm", seed);
      layer.ff = add_ff(p + ".ff", seed);
      decoder_.push_back(layer);
    }
    dec_norm_ = add_norm("decoder.final_norm", seed);
    for (int tap : cfg_.taps) {
      classifiers_[tap] =
          add_param("decoder.classifier." + std::to_string(tap), d, cfg_.vocab_size, Init::kFanIn, seed);
    }
  }

  Var drop(Session& s, const Var& x) const {
    if (!s.training || cfg_.dropout <= 0.0 || s.rng == nullptr) return x;
    return ad::dropout(x, cfg_.dropout, *s.rng);
  }

  Var norm(Session& s, const Norm& n, const Var& x) const { return ad::layer_norm(x, s(n.gamma), s(n.beta)); }

  Var attention(Session& s, const Attention& a, const Var& x, const Var* memory, bool causal) const {
    const Var& kv = memory != nullptr ? *memory : x;
    Var q = ad::linear(x, s(a.wq), s(a.bq));
    Var k = ad::linear(kv, s(a.wk), s(a.bk));
    Var v = ad::linear(kv, s(a.wv), s(a.bv));
    return ad::linear(ad::multi_head_attention(q, k, v, cfg_.heads, causal), s(a.wo), s(a.bo));
  }

  Var feed_forward(Session& s, const FeedForward& f, const Var& x) const {
    Var h = drop(s, ad::relu(ad::linear(x, s(f.w1), s(f.b1))));
    return ad::linear(h, s(f.w2), s(f.b2));
  }

  Var encoder_block(Session& s, const EncoderLayer& layer, Var x) const {
    Var n = norm(s, layer.attn_norm, x);
    Var mixed = attention(s, layer.attn, n, nullptr, false);
    if (cfg_.encoder_block == EncoderBlock::kBranch) {
      const Branch& b = layer.branch;
      const Eigen::Index d = cfg_.d_model;
      Var u = ad::linear(n, s(b.w_in), s(b.b_in));
      Var gate = ad::depthwise_conv1d(ad::slice_cols(u, d, d), s(b.conv_w), s(b.conv_b));
      Var local = ad::mul(ad::slice_cols(u, 0, d), ad::sigmoid(gate));
      mixed = ad::linear(ad::concat_cols<S>({mixed, local}), s(b.merge_w), s(b.merge_b));
    }
    x = ad::add(x, drop(s, mixed));
    return ad::add(x, drop(s, feed_forward(s, layer.ff, norm(s, layer.ff_norm, x))));
  }

  ModelConfig cfg_;
  std::vector<std::unique_ptr<ad::Parameter<S>>> params_;
  std::map<std::string, int> index_;

  int conv1_w_ = -1, conv1_b_ = -1, conv2_w_ = -1, conv2_b_ = -1, proj_w_ = -1, proj_b_ = -1;
  std::vector<EncoderLayer> encoder_;
  Norm enc_norm_;
  int ctc_w_ = -1, ctc_b_ = -1;
  int embed_ = -1;
  std::vector<DecoderLayer> decoder_;
  Norm dec_norm_;
  std::map<int, int> classifiers_;  // decoder layer -> parameter index
};

}  // namespace decred
