#pragma once

// The `decred` command line: one binary, one subcommand per pipeline stage.
// Every command writes its artifacts under out_dir plus a run.json echoing the
// resolved configuration.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "decred/config.hpp"
#include "decred/data.hpp"
#include "decred/decoding.hpp"
#include "decred/eval.hpp"
#include "decred/grad_check.hpp"
#include "decred/ilm.hpp"
#include "decred/model.hpp"
#include "decred/trainer.hpp"

namespace decred::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitFailure = 2;

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(is);
}

inline void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " is not set");
  if (!fs::exists(p)) throw ConfigError(what + " does not exist: " + p.string());
}

/// Options shared by every command that takes a config file.
struct Common {
  std::string config;
  std::vector<std::string> overrides;
  int threads = 1;

  RunConfig load() const {
    if (threads < 1) throw ConfigError("--threads must be >= 1");
    return load_run_config(config, overrides);
  }
};

inline void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Run configuration (JSON)")->required();
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set decode.lambda=0");
  cmd->add_option("--threads", c.threads, "Worker threads for decoding");
}

inline fs::path out_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.resolve(cfg.data.out_dir);
  fs::create_directories(dir);
  return dir;
}

inline void write_run_json(const RunConfig& cfg, const std::string& command, const nlohmann::json& options) {
  nlohmann::json run{{"command", command}, {"seed", cfg.seed}, {"config", cfg}, {"options", options}};
  write_json(out_dir(cfg) / ("run." + command + ".json"), run);
  write_json(out_dir(cfg) / "run.json", run);
}

struct LoadedModel {
  Model<float> model;
  Tokenizer tokenizer;
};

inline fs::path default_checkpoint(const RunConfig& cfg) { return out_dir(cfg) / "checkpoint"; }

inline LoadedModel load_checkpoint(const fs::path& dir) {
  require_file(dir / "manifest.json", "checkpoint");
  nlohmann::json extra;
  Model<float> m = Model<float>::load(dir, &extra);
  if (!extra.contains("tokenizer")) throw std::runtime_error("checkpoint " + dir.string() + " has no tokenizer");
  return {std::move(m), Tokenizer::from_json(extra.at("tokenizer"))};
}

inline std::vector<Utterance> load_manifest(const RunConfig& cfg, const std::string& path, const std::string& what) {
  const fs::path p = cfg.resolve(path);
  require_file(p, what);
  return read_manifest(p);
}

inline std::string dataset_name(const std::string& manifest) { return fs::path(manifest).stem().string(); }

// Paths given on the command line are relative to the working directory;
// paths inside the config are relative to the config file.
inline fs::path flag_path(const std::string& p) { return p.empty() ? fs::path() : fs::absolute(p).lexically_normal(); }

/// Manifests given as flags, else the config's test manifests, else its dev
/// manifest.
inline std::vector<std::string> eval_manifests(const RunConfig& cfg, const std::vector<std::string>& given) {
  if (!given.empty()) {
    std::vector<std::string> out;
    for (const auto& g : given) out.push_back(flag_path(g).string());
    return out;
  }
  if (!cfg.data.test_manifests.empty()) return cfg.data.test_manifests;
  if (!cfg.data.dev_manifest.empty()) return {cfg.data.dev_manifest};
  throw ConfigError("no manifests to process: set data.test_manifests or data.dev_manifest");
}

inline void check_features(const ModelConfig& mc, std::span<const Utterance> utts, const std::string& what) {
  for (const auto& u : utts) {
    if (u.features.cols() != mc.feat_dim)
      throw ConfigError(what + ": utterance " + u.id + " has " + std::to_string(u.features.cols()) +
                        "-dim features but model.feat_dim is " + std::to_string(mc.feat_dim));
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
  std::uint64_t seed = 0;
  std::string out;
  int n_train = 1000;
  int n_dev = 100;
  int n_test = 200;
  SynthSpec spec;
};

inline nlohmann::json to_json(const SynthSpec& s) {
  return nlohmann::json{{"vocab_size", s.vocab_size},
                        {"min_len", s.min_len},
                        {"max_len", s.max_len},
                        {"min_frames_per_token", s.min_frames_per_token},
                        {"max_frames_per_token", s.max_frames_per_token},
                        {"feat_dim", s.feat_dim},
                        {"noise_sigma", s.noise_sigma}};
}

inline int gen_data(const GenDataOptions& o) {
  o.spec.validate();
  if (o.n_train < 0 || o.n_dev < 0 || o.n_test < 0) throw ConfigError("utterance counts must be >= 0");
  const fs::path out = o.out;
  fs::create_directories(out);
  const SynthTask task = make_synth_task(o.spec, o.seed);
  const std::pair<const char*, int> splits[] = {{"train", o.n_train}, {"dev", o.n_dev}, {"test", o.n_test}};
  for (const auto& [name, n] : splits) {
    const auto utts = synth_split(task, o.spec, o.seed, name, n);
    write_manifest(out / (std::string(name) + ".jsonl"), utts, std::string("feats/") + name);
  }
  write_json(out / "tokenizer.json", task.tokenizer.to_json());

  // A starter run configuration wired to the generated data.
  RunConfig starter;
  starter.seed = o.seed;
  starter.model.feat_dim = o.spec.feat_dim;
  starter.model.vocab_size = task.tokenizer.vocab_size();
  starter.data.train_manifest = "train.jsonl";
  starter.data.dev_manifest = "dev.jsonl";
  starter.data.test_manifests = {"test.jsonl"};
  starter.data.tokenizer = "tokenizer.json";
  starter.data.out_dir = "run";
  write_json(out / "config.json", starter);

  nlohmann::json run{{"command", "gen-data"},
                     {"seed", o.seed},
                     {"synth", to_json(o.spec)},
                     {"n_train", o.n_train},
                     {"n_dev", o.n_dev},
                     {"n_test", o.n_test}};
  write_json(out / "run.json", run);
  std::cerr << "wrote " << o.n_train << "/" << o.n_dev << "/" << o.n_test << " train/dev/test utterances to "
            << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

inline int train_cmd(const Common& c) {
  const RunConfig cfg = c.load();
  require_file(cfg.resolve(cfg.data.tokenizer), "data.tokenizer");
  const Tokenizer tok = Tokenizer::from_json(read_json(cfg.resolve(cfg.data.tokenizer)));
  if (tok.vocab_size() != cfg.model.vocab_size)
    throw ConfigError("model.V_total is " + std::to_string(cfg.model.vocab_size) + " but the tokenizer has " +
                      std::to_string(tok.vocab_size()) + " ids");
  const auto train_set = load_manifest(cfg, cfg.data.train_manifest, "data.train_manifest");
  std::vector<Utterance> dev;
  if (!cfg.data.dev_manifest.empty()) dev = load_manifest(cfg, cfg.data.dev_manifest, "data.dev_manifest");
  check_features(cfg.model, train_set, "train");
  check_features(cfg.model, dev, "dev");
  // Surfaces out-of-vocabulary text before any compute.
  for (const auto& u : train_set) (void)tok.encode(u.transcript);
  for (const auto& u : dev) (void)tok.encode(u.transcript);

  const fs::path out = out_dir(cfg);
  write_run_json(cfg, "train", nlohmann::json::object());
  Model<float> model(cfg.model, cfg.init_seed());
  const auto t0 = std::chrono::steady_clock::now();
  TrainHooks hooks;
  hooks.on_eval = [&](const EvalLog& e) {
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "step " << e.step << " loss " << e.train_loss << " dev_wer " << e.dev_wer << " (" << sec << " s)\n";
  };
  const TrainResult res = train(model, tok, train_set, dev, cfg.train, hooks);

  nlohmann::json extra{{"tokenizer", tok.to_json()},
                       {"loss", cfg.train.loss},
                       {"best_step", res.best_step},
                       {"best_dev_wer", std::isfinite(res.best_dev_wer) ? nlohmann::json(res.best_dev_wer) : nlohmann::json()}};
  model.save(out / "checkpoint", extra);
  write_text(out / "metrics.csv", metrics_csv(res.evals));
  write_text(out / "steps.csv", steps_csv(res.steps));
  write_json(out / "train_summary.json", {{"steps_run", res.steps.size()},
                                          {"best_step", res.best_step},
                                          {"best_dev_wer", extra["best_dev_wer"]},
                                          {"early_stopped", res.early_stopped},
                                          {"parameters", model.parameter_count()}});
  std::cerr << "best dev WER " << res.best_dev_wer << " at step " << res.best_step << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// decode

struct DecodeOptions {
  std::string checkpoint;
  std::vector<std::string> manifests;
  std::string weights;
  std::string name = "decode";
};

inline std::optional<FusionWeights> load_weights(const RunConfig& cfg, const std::string& given, bool needed) {
  fs::path p = given.empty() ? out_dir(cfg) / "calibration" / "fusion_weights.json" : flag_path(given);
  if (!fs::exists(p)) {
    if (needed) throw ConfigError("weighted_sum fusion needs weights; run calibrate or pass --weights");
    return std::nullopt;
  }
  return read_json(p).get<FusionWeights>();
}

inline void check_weights(const FusionWeights& w, const ModelConfig& mc) {
  for (int t : mc.taps) {
    const auto it = w.v.find(t);
    if (it == w.v.end() || it->second.size() != mc.vocab_size)
      throw ConfigError("fusion weights do not match the model's taps and vocabulary");
  }
}

inline int decode_cmd(const Common& c, const DecodeOptions& o) {
  const RunConfig cfg = c.load();
  const fs::path ckpt = o.checkpoint.empty() ? default_checkpoint(cfg) : flag_path(o.checkpoint);
  LoadedModel lm = load_checkpoint(ckpt);
  cfg.decode.validate(lm.model.config().taps);
  const bool weighted = cfg.decode.fusion == Fusion::kWeightedSum;
  std::optional<FusionWeights> w;
  if (weighted) {
    w = load_weights(cfg, o.weights, true);
    check_weights(*w, lm.model.config());
  }
  const auto manifests = eval_manifests(cfg, o.manifests);
  const fs::path dir = out_dir(cfg) / o.name;
  write_run_json(cfg, "decode",
                 {{"checkpoint", o.checkpoint}, {"manifests", o.manifests}, {"weights", o.weights}, {"name", o.name}});
  nlohmann::json timing = nlohmann::json::object();
  for (const auto& m : manifests) {
    const auto utts = load_manifest(cfg, m, "manifest");
    check_features(lm.model.config(), utts, m);
    double sec = 0;
    const auto recs = decode_dataset(lm.model, lm.tokenizer, utts, cfg.decode, w ? &*w : nullptr, &sec, c.threads);
    std::string text;
    for (const auto& r : recs) text += to_json_record(r).dump() + "\n";
    write_text(dir / (dataset_name(m) + ".jsonl"), text);
    timing[dataset_name(m)] = {{"utterances", utts.size()},
                               {"seconds", sec},
                               {"mean_sec", utts.empty() ? 0.0 : sec / static_cast<double>(utts.size())},
                               {"threads", c.threads}};
    std::cerr << "decoded " << utts.size() << " utterances of " << m << " in " << sec << " s\n";
  }
  write_json(dir / "timing.json", timing);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::vector<std::string> manifests;
  std::string hyps;
  std::string baseline;
  std::string name = "eval";
};

inline std::map<std::string, std::string> read_hypotheses(const fs::path& path) {
  require_file(path, "hypothesis file");
  std::ifstream is(path);
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    const auto id = j.at("id").get<std::string>();
    if (!out.emplace(id, j.at("hyp").get<std::string>()).second)
      throw ConfigError("duplicate hypothesis id " + id + " in " + path.string());
  }
  return out;
}

inline std::vector<ScoredUtterance> score_file(const std::vector<std::pair<std::string, std::string>>& refs,
                                               const fs::path& hyp_file) {
  const auto pairs = align_by_id(refs, read_hypotheses(hyp_file));
  return wer(pairs).utterances;
}

inline int eval_cmd(const Common& c, const EvalOptions& o) {
  const RunConfig cfg = c.load();
  const auto manifests = eval_manifests(cfg, o.manifests);
  const fs::path hyp_dir = o.hyps.empty() ? out_dir(cfg) / "decode" : flag_path(o.hyps);
  const std::optional<fs::path> base_dir =
      o.baseline.empty() ? std::nullopt : std::optional<fs::path>(flag_path(o.baseline));
  const fs::path dir = out_dir(cfg) / o.name;
  write_run_json(cfg, "eval", {{"manifests", o.manifests}, {"hyps", o.hyps}, {"baseline", o.baseline}, {"name", o.name}});
  std::vector<double> wers;
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  for (const auto& m : manifests) {
    const std::string name = dataset_name(m);
    std::vector<std::pair<std::string, std::string>> refs;
    for (const auto& u : load_manifest(cfg, m, "manifest")) refs.emplace_back(u.id, u.transcript);
    const auto scored = score_file(refs, hyp_dir / (name + ".jsonl"));
    const auto boot = bootstrap_ci(scored, cfg.eval.resamples, cfg.eval.alpha, cfg.bootstrap_seed());
    nlohmann::json report = to_json(boot);
    if (base_dir) {
      const auto other = score_file(refs, *base_dir / (name + ".jsonl"));
      report["p_value"] = paired_bootstrap(scored, other, cfg.eval.resamples, cfg.bootstrap_seed());
      report["baseline_wer"] = corpus_wer(other);
    }
    write_json(dir / (name + ".json"), report);
    wers.push_back(boot.wer);
    summary[name] = boot.wer;
    std::cerr << name << ": WER " << boot.wer << " CI [" << boot.ci_low << ", " << boot.ci_high << "]";
    if (base_dir) std::cerr << " p=" << report["p_value"].get<double>();
    std::cerr << "\n";
  }
  summary["macro_wer"] = macro_average(wers);
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ilm-ppl

struct IlmOptions {
  std::string checkpoint;
  std::vector<std::string> manifests;
  int tap = 0;
};

inline int ilm_cmd(const Common& c, const IlmOptions& o) {
  const RunConfig cfg = c.load();
  LoadedModel lm = load_checkpoint(o.checkpoint.empty() ? default_checkpoint(cfg) : flag_path(o.checkpoint));
  if (o.tap != 0 && !lm.model.config().has_tap(o.tap)) throw ConfigError("--tap " + std::to_string(o.tap) + " has no classifier");
  std::vector<std::string> manifests;
  for (const auto& m : o.manifests) manifests.push_back(flag_path(m).string());
  if (manifests.empty()) {
    if (!cfg.data.dev_manifest.empty()) manifests.push_back(cfg.data.dev_manifest);
    for (const auto& t : cfg.data.test_manifests) manifests.push_back(t);
  }
  if (manifests.empty()) throw ConfigError("no manifests to score");
  write_run_json(cfg, "ilm-ppl", {{"checkpoint", o.checkpoint}, {"manifests", o.manifests}, {"tap", o.tap}});
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& m : manifests) {
    const auto utts = load_manifest(cfg, m, "manifest");
    const IlmReport r = ilm_perplexity(lm.model, lm.tokenizer, utts, dataset_name(m), o.tap);
    reports.push_back(to_json(r));
    std::cerr << dataset_name(m) << ": ILM perplexity " << r.perplexity() << " over " << r.tokens << " tokens\n";
  }
  write_text(out_dir(cfg) / "ilm.json", reports.dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateOptions {
  std::string checkpoint;
  std::string manifest;
};

inline int calibrate_cmd(const Common& c, const CalibrateOptions& o) {
  const RunConfig cfg = c.load();
  LoadedModel lm = load_checkpoint(o.checkpoint.empty() ? default_checkpoint(cfg) : flag_path(o.checkpoint));
  const std::string m = o.manifest.empty() ? cfg.data.dev_manifest : flag_path(o.manifest).string();
  const auto utts = load_manifest(cfg, m, "calibration manifest");
  write_run_json(cfg, "calibrate", {{"checkpoint", o.checkpoint}, {"manifest", o.manifest}});
  const CalibrationResult r = calibrate_fusion(lm.model, lm.tokenizer, utts, cfg.calibrate);
  const fs::path dir = out_dir(cfg) / "calibration";
  write_json(dir / "fusion_weights.json", r.v);
  write_json(dir / "calibration.json", to_json(r));
  std::cerr << "fused CE " << r.initial_ce << " -> " << r.final_ce << " after " << r.epochs_run << " epochs\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
  std::vector<std::string> models;  // label=checkpoint
  std::vector<std::string> fusions{"last_layer", "weighted_sum", "early_exit"};
  std::vector<double> lambdas;
  std::vector<int> beams{1};
  std::vector<std::string> manifests;
};

inline int bench_cmd(const Common& c, const BenchOptions& o) {
  const RunConfig cfg = c.load();
  std::vector<std::pair<std::string, fs::path>> models;
  for (const auto& spec : o.models) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) {
      models.emplace_back(fs::path(spec).filename().string(), flag_path(spec));
    } else {
      models.emplace_back(spec.substr(0, eq), flag_path(spec.substr(eq + 1)));
    }
  }
  if (models.empty()) models.emplace_back("model", default_checkpoint(cfg));
  std::vector<Fusion> fusions;
  for (const auto& f : o.fusions) {
    try {
      fusions.push_back(parse_fusion(f));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  const std::vector<double> lambdas = o.lambdas.empty() ? std::vector<double>{cfg.decode.lambda} : o.lambdas;
  for (double l : lambdas)
    if (!(l >= 0 && l <= 1)) throw ConfigError("--lambda values must be in [0, 1]");
  for (int b : o.beams)
    if (b < 1) throw ConfigError("--beam values must be >= 1");
  const auto manifests = eval_manifests(cfg, o.manifests);
  std::vector<std::vector<Utterance>> sets;
  for (const auto& m : manifests) sets.push_back(load_manifest(cfg, m, "manifest"));
  write_run_json(cfg, "bench",
                 {{"models", o.models}, {"fusions", o.fusions}, {"lambdas", lambdas}, {"beams", o.beams},
                  {"manifests", o.manifests}, {"threads", c.threads}});

  std::string csv = "model,fusion,lambda,beam,mean_sec,macro_wer\n";
  for (const auto& [label, path] : models) {
    LoadedModel lm = load_checkpoint(path);
    const auto& mc = lm.model.config();
    const bool has_aux = mc.taps.size() > 1;
    std::optional<FusionWeights> w = load_weights(cfg, "", false);
    if (!w) w = FusionWeights::last_layer(mc.taps, mc.vocab_size);
    for (Fusion f : fusions) {
      if (f != Fusion::kLastLayer && !has_aux) {
        std::cerr << "skipping " << fusion_name(f) << " for " << label << ": single classifier\n";
        continue;
      }
      for (double lambda : lambdas) {
        for (int beam : o.beams) {
          DecodeConfig dc = cfg.decode;
          dc.fusion = f;
          dc.lambda = lambda;
          dc.beam_width = beam;
          dc.search = beam > 1 ? Search::kBeam : Search::kGreedy;
          if (f == Fusion::kEarlyExit && !mc.has_tap(dc.early_exit_layer)) dc.early_exit_layer = mc.taps.front();
          if (f == Fusion::kWeightedSum) check_weights(*w, mc);
          double seconds = 0;
          std::size_t count = 0;
          std::vector<double> wers;
          for (const auto& utts : sets) {
            double sec = 0;
            const auto recs = decode_dataset(lm.model, lm.tokenizer, utts, dc, &*w, &sec, c.threads);
            std::vector<RefHyp> pairs;
            for (std::size_t i = 0; i < utts.size(); ++i) pairs.push_back({utts[i].id, utts[i].transcript, recs[i].hyp});
            wers.push_back(wer(pairs).wer);
            seconds += sec;
            count += utts.size();
          }
          std::ostringstream row;
          row.precision(9);
          row << label << "," << fusion_name(f) << "," << lambda << "," << beam << ","
              << (count == 0 ? 0.0 : seconds / static_cast<double>(count)) << "," << macro_average(wers) << "\n";
          csv += row.str();
          std::cerr << row.str();
        }
      }
    }
  }
  write_text(out_dir(cfg) / "bench.csv", csv);
  write_json(out_dir(cfg) / "bench.json", {{"threads", c.threads}});
  return kExitOk;
}

// ---------------------------------------------------------------------------
// grad-check

struct GradCheckCmdOptions {
  double tolerance = 1e-3;
};

/// Finite-difference check of the composite loss through a scaled-down copy
/// of the configured architecture (same encoder block, loss weights and tap
/// layout, tiny widths), in double precision with dropout off.
inline int grad_check_cmd(const Common& c, const GradCheckCmdOptions& o) {
  const RunConfig cfg = c.load();
  ModelConfig mc;
  mc.feat_dim = 5;
  mc.conv_channels = 2;
  mc.encoder_layers = 1;
  mc.decoder_layers = 2;
  mc.d_model = 4;
  mc.d_ff = 6;
  mc.heads = 2;
  mc.dropout = 0.0;
  mc.vocab_size = 8;
  mc.taps = {1, 2};
  mc.encoder_block = cfg.model.encoder_block;
  mc.branch_kernel = 3;
  // The configured auxiliary weight moves to layer 1, the rest to layer 2.
  LossConfig loss = cfg.train.loss;
  const double aux = cfg.model.taps.size() > 1 ? cfg.train.loss.beta(cfg.model.taps.front()) : 0.0;
  loss.betas = {{1, aux}, {2, 1.0 - aux}};

  Model<double> model(mc, cfg.init_seed());
  Rng rng(derive_seed(cfg.seed, "grad-check"));
  auto features = [&rng](int T) {
    Features f(T, 5);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.normal());
    return f;
  };
  std::vector<TrainItem> items{{"a", features(12), {5, 6, 7}}, {"b", features(9), {6}}};
  auto params = model.parameters();
  write_run_json(cfg, "grad-check", {{"tolerance", o.tolerance}});
  const auto report = grad_check(std::span<ad::Parameter<double>* const>(params), [&](ad::Tape<double>& t) {
    auto s = model.bind(t);
    return batch_loss(model, s, items, loss).total;
  });
  const bool ok = report.max_rel_error < o.tolerance;
  write_json(out_dir(cfg) / "grad_check.json", {{"max_rel_error", report.max_rel_error},
                                                {"worst_parameter", report.worst_parameter},
                                                {"worst_index", report.worst_index},
                                                {"coordinates", report.coordinates},
                                                {"tolerance", o.tolerance},
                                                {"passed", ok}});
  std::cout << "max relative error " << report.max_rel_error << " over " << report.coordinates << " coordinates ("
            << (ok ? "ok" : "FAILED") << ")\n";
  return ok ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"DeCRED speech recognition toolkit"};
  app.require_subcommand(1);

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  gen_cmd->add_option("--seed", gen.seed, "Root seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n-train", gen.n_train, "Training utterances");
  gen_cmd->add_option("--n-dev", gen.n_dev, "Dev utterances");
  gen_cmd->add_option("--n-test", gen.n_test, "Test utterances");
  gen_cmd->add_option("--symbols", gen.spec.vocab_size, "Symbol count including the word separator");
  gen_cmd->add_option("--min-len", gen.spec.min_len, "Minimum tokens per utterance");
  gen_cmd->add_option("--max-len", gen.spec.max_len, "Maximum tokens per utterance");
  gen_cmd->add_option("--feat-dim", gen.spec.feat_dim, "Feature dimension");
  gen_cmd->add_option("--noise", gen.spec.noise_sigma, "Gaussian noise sigma");

  Common common;
  auto* train_sub = app.add_subcommand("train", "Train a model");
  add_common(train_sub, common);

  DecodeOptions dec;
  auto* decode_sub = app.add_subcommand("decode", "Decode manifests to JSONL");
  add_common(decode_sub, common);
  decode_sub->add_option("--checkpoint", dec.checkpoint, "Checkpoint directory (default out_dir/checkpoint)");
  decode_sub->add_option("--manifest", dec.manifests, "Manifests to decode (default data.test_manifests)");
  decode_sub->add_option("--weights", dec.weights, "Fusion weights for weighted_sum");
  decode_sub->add_option("--name", dec.name, "Output subdirectory of out_dir");

  EvalOptions ev;
  auto* eval_sub = app.add_subcommand("eval", "Score decodes: WER, bootstrap CI, paired test");
  add_common(eval_sub, common);
  eval_sub->add_option("--manifest", ev.manifests, "Reference manifests (default data.test_manifests)");
  eval_sub->add_option("--hyps", ev.hyps, "Directory of <dataset>.jsonl decodes (default out_dir/decode)");
  eval_sub->add_option("--baseline", ev.baseline, "Directory of baseline decodes for the paired test");
  eval_sub->add_option("--name", ev.name, "Output subdirectory of out_dir");

  IlmOptions ilm;
  auto* ilm_sub = app.add_subcommand("ilm-ppl", "Zero-attention internal LM perplexity");
  add_common(ilm_sub, common);
  ilm_sub->add_option("--checkpoint", ilm.checkpoint, "Checkpoint directory");
  ilm_sub->add_option("--manifest", ilm.manifests, "Text sources (default dev and test manifests)");
  ilm_sub->add_option("--tap", ilm.tap, "Classifier layer (default: final)");

  CalibrateOptions cal;
  auto* cal_sub = app.add_subcommand("calibrate", "Fit fusion weights on held-out data");
  add_common(cal_sub, common);
  cal_sub->add_option("--checkpoint", cal.checkpoint, "Checkpoint directory");
  cal_sub->add_option("--manifest", cal.manifest, "Calibration manifest (default data.dev_manifest)");

  BenchOptions bench;
  auto* bench_sub = app.add_subcommand("bench", "Time decoding across fusion modes and lambdas");
  add_common(bench_sub, common);
  bench_sub->add_option("--model", bench.models, "label=checkpoint (repeatable)");
  bench_sub->add_option("--fusion", bench.fusions, "Fusion modes")->delimiter(',');
  bench_sub->add_option("--lambda", bench.lambdas, "CTC weights")->delimiter(',');
  bench_sub->add_option("--beam", bench.beams, "Beam widths (1 = greedy)")->delimiter(',');
  bench_sub->add_option("--manifest", bench.manifests, "Manifests (default data.test_manifests)");

  GradCheckCmdOptions gc;
  auto* gc_sub = app.add_subcommand("grad-check", "Finite-difference gradient check on a tiny model");
  add_common(gc_sub, common);
  gc_sub->add_option("--tolerance", gc.tolerance, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_sub) return train_cmd(common);
    if (*decode_sub) return decode_cmd(common, dec);
    if (*eval_sub) return eval_cmd(common, ev);
    if (*ilm_sub) return ilm_cmd(common, ilm);
    if (*cal_sub) return calibrate_cmd(common, cal);
    if (*bench_sub) return bench_cmd(common, bench);
    if (*gc_sub) return grad_check_cmd(common, gc);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitInvalid;
}

}  // namespace decred::cli
