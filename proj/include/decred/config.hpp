#pragma once

// Run configuration: one JSON document with a section per module, a root seed
// and data paths. Unknown keys are rejected so typos fail loudly.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "decred/decoding.hpp"
#include "decred/model.hpp"
#include "decred/rng.hpp"
#include "decred/trainer.hpp"

namespace decred {

/// Raised for malformed or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataPaths {
  std::string train_manifest;
  std::string dev_manifest;
  std::vector<std::string> test_manifests;
  std::string tokenizer;
  std::string out_dir = "out";
};

inline void to_json(nlohmann::json& j, const DataPaths& d) {
  j = nlohmann::json{{"train_manifest", d.train_manifest},
                     {"dev_manifest", d.dev_manifest},
                     {"test_manifests", d.test_manifests},
                     {"tokenizer", d.tokenizer},
                     {"out_dir", d.out_dir}};
}

inline void from_json(const nlohmann::json& j, DataPaths& d) {
  d.train_manifest = j.value("train_manifest", d.train_manifest);
  d.dev_manifest = j.value("dev_manifest", d.dev_manifest);
  d.test_manifests = j.value("test_manifests", d.test_manifests);
  d.tokenizer = j.value("tokenizer", d.tokenizer);
  d.out_dir = j.value("out_dir", d.out_dir);
}

struct EvalConfig {
  int resamples = 1000;
  double alpha = 0.05;
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = nlohmann::json{{"resamples", c.resamples}, {"alpha", c.alpha}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.resamples = j.value("resamples", c.resamples);
  c.alpha = j.value("alpha", c.alpha);
}

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;  // carries the loss and augment sections
  DecodeConfig decode;
  CalibrationConfig calibrate;
  EvalConfig eval;
  DataPaths data;
  // Relative data paths are taken relative to this directory (the config
  // file's); it is not serialised so run.json stays location independent.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path q(p);
    return q.is_relative() ? (base_dir / q).lexically_normal() : q;
  }

  // Every consumer of randomness gets its own stream split from the root seed.
  std::uint64_t init_seed() const { return derive_seed(seed, "init"); }
  std::uint64_t train_seed() const { return derive_seed(seed, "train"); }
  std::uint64_t bootstrap_seed() const { return derive_seed(seed, "bootstrap"); }

  void validate() const {
    try {
      model.validate();
      train.validate(model.taps);
      decode.validate(model.taps);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (calibrate.epochs < 0 || !(calibrate.lr > 0)) throw ConfigError("calibrate: need epochs >= 0 and lr > 0");
    if (eval.resamples < 1) throw ConfigError("eval: resamples must be >= 1");
    if (!(eval.alpha > 0 && eval.alpha < 1)) throw ConfigError("eval: alpha must be in (0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json train = c.train;
  train.erase("seed");  // derived from the root seed
  j = nlohmann::json{{"seed", c.seed},           {"model", c.model},         {"loss", c.train.loss},
                     {"train", train},           {"augment", c.train.augment}, {"decode", c.decode},
                     {"calibrate", c.calibrate}, {"eval", c.eval},           {"data", c.data}};
}

namespace detail {

// Rejects keys in `given` that the serialised defaults do not have. Objects
// keyed by layer number (betas) are open.
inline void check_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + key + "'");
    const auto& ref = known.at(key);
    if (ref.is_object() && key != "betas") check_keys(value, ref, where.empty() ? key : where + "." + key);
  }
}

}  // namespace detail

/// Builds a RunConfig from JSON, filling unspecified keys with defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::check_keys(j, nlohmann::json(c), "");
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("loss")) from_json(j.at("loss"), c.train.loss);
    if (j.contains("augment")) from_json(j.at("augment"), c.train.augment);
    if (j.contains("decode")) from_json(j.at("decode"), c.decode);
    if (j.contains("calibrate")) from_json(j.at("calibrate"), c.calibrate);
    if (j.contains("eval")) from_json(j.at("eval"), c.eval);
    if (j.contains("data")) from_json(j.at("data"), c.data);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.train.seed = c.train_seed();
  return c;
}

/// Applies `a.b.c=value` to a JSON document. The value is parsed as JSON when
/// possible and taken as a plain string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key in override " + assignment);
    if (!node->is_object()) throw ConfigError("override path " + path + " crosses a non-object value");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

/// Reads a config file, applies overrides in order and validates the result.
inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = run_config_from_json(doc);
  c.base_dir = path.parent_path();
  c.validate();
  return c;
}

}  // namespace decred
