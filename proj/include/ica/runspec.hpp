#pragma once

// RunSpec: the JSON experiment description consumed by the CLI.
//
// {
//   "version": 1,                 required
//   "seed": 0,
//   "data":     { "kind", "scenario", "train_size", "holdout_size", "test_size", "noise_rate",
//                 "num_domains", "target_domain", "min_len", "max_len", "char_pool", "dir" },
//   "model":    { "dim", "layers", "heads", "max_context", "query_offset", "init_std" },
//   "pretrain": { "steps", "batch_size", "lr", "max_demos", "transforms" },
//   "train":    { "steps", "batch_size", "refreshes", "k", "optimizer", "lr", "scorer", "weighting",
//                 "temperature", "percentile", "percentile_over_dataset", "loss", "beta", "gamma",
//                 "gamma_beta_ratio", "eval_every", "mean_normalize", "oracle_lr", "cache_demos" },
//   "oracle":   { "mode", "candidates", "retrain_steps" }
// }
//
// Every section and key is optional except "version"; unknown keys are errors.
// "data.dir" points at an existing gen output; without it data is generated in memory.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "ica/corpus.hpp"
#include "ica/error.hpp"
#include "ica/model.hpp"
#include "ica/trainloop.hpp"

namespace ica {

inline constexpr int kRunSpecVersion = 1;

enum class OracleMode { OneStep, Retrain };

inline const char* to_string(OracleMode m) { return m == OracleMode::OneStep ? "one-step" : "retrain"; }

inline OracleMode oracle_mode_from_string(const std::string& s) {
  if (s == "one-step") return OracleMode::OneStep;
  if (s == "retrain") return OracleMode::Retrain;
  throw InvalidArgument("unknown oracle mode '" + s + "'");
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "noise") return Scenario::Noise;
  if (s == "domain") return Scenario::Domain;
  throw InvalidArgument("unknown scenario '" + s + "'");
}

inline const char* to_string(Scenario s) { return s == Scenario::Noise ? "noise" : "domain"; }

struct OracleSpec {
  OracleMode mode = OracleMode::OneStep;
  /// Retrain mode: number of leading examples used as candidates; the rest form the base set.
  std::size_t candidates = 16;
  long retrain_steps = 50;
};

struct RunSpec {
  std::uint64_t seed = 0;
  ExampleKind kind = ExampleKind::Sft;
  GenConfig gen;
  std::optional<std::string> data_dir;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig train;
  OracleSpec oracle;

  /// Propagates the run seed into every component that draws randomness.
  void apply_seed(std::uint64_t s) {
    seed = s;
    model.seed = s;
    pretrain.seed = s;
    train.seed = s;
  }

  void validate(const Tokenizer& tok) const {
    gen.validate(tok);
    model.validate();
    if (model.vocab != static_cast<int>(tok.vocab_size())) throw InvalidArgument("model vocab must match the tokenizer");
    pretrain.validate();
    train.validate();
    const bool pref = train.loss != LossKind::Sft;
    if (pref != (kind == ExampleKind::Pref)) throw InvalidArgument("data.kind does not match train.loss");
    if (oracle.candidates < 1) throw InvalidArgument("oracle.candidates must be >= 1");
    if (oracle.retrain_steps < 1) throw InvalidArgument("oracle.retrain_steps must be >= 1");
  }
};

namespace detail {

class Section {
 public:
  Section(const nlohmann::json& j, std::string name, std::set<std::string> allowed) : name_(std::move(name)) {
    if (j.is_null()) return;
    if (!j.is_object()) throw InvalidArgument("config: '" + name_ + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!allowed.count(it.key())) throw InvalidArgument("config: unknown key '" + name_ + "." + it.key() + "'");
    }
    j_ = &j;
  }

  template <class T>
  void read(const char* key, T& out) const {
    if (!j_ || !j_->contains(key)) return;
    try {
      out = j_->at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw InvalidArgument("config: '" + name_ + "." + key + "' has the wrong type");
    }
  }

  std::optional<std::string> string(const char* key) const {
    std::optional<std::string> s;
    if (j_ && j_->contains(key)) {
      std::string v;
      read(key, v);
      s = v;
    }
    return s;
  }

 private:
  std::string name_;
  const nlohmann::json* j_ = nullptr;
};

inline const nlohmann::json& member(const nlohmann::json& j, const char* key) {
  static const nlohmann::json null;
  return j.contains(key) ? j.at(key) : null;
}

}  // namespace detail

inline RunSpec parse_runspec(const nlohmann::json& j, const Tokenizer& tok = Tokenizer()) {
  using detail::member;
  using detail::Section;
  const Section top(j, "<root>", {"version", "seed", "data", "model", "pretrain", "train", "oracle"});
  if (!j.contains("version")) throw InvalidArgument("config: missing 'version'");
  int version = 0;
  top.read("version", version);
  if (version != kRunSpecVersion) throw InvalidArgument("config: unsupported version " + std::to_string(version));

  RunSpec rs;
  std::uint64_t seed = 0;
  top.read("seed", seed);

  const Section data(member(j, "data"), "data",
                     {"kind", "scenario", "train_size", "holdout_size", "test_size", "noise_rate", "num_domains",
                      "target_domain", "min_len", "max_len", "char_pool", "dir"});
  if (auto s = data.string("kind")) rs.kind = example_kind_from_string(*s);
  if (auto s = data.string("scenario")) rs.gen.scenario = scenario_from_string(*s);
  data.read("train_size", rs.gen.train_size);
  data.read("holdout_size", rs.gen.holdout_size);
  data.read("test_size", rs.gen.test_size);
  data.read("noise_rate", rs.gen.noise_rate);
  data.read("num_domains", rs.gen.num_domains);
  data.read("target_domain", rs.gen.target_domain);
  data.read("min_len", rs.gen.min_len);
  data.read("max_len", rs.gen.max_len);
  data.read("char_pool", rs.gen.char_pool);
  rs.data_dir = data.string("dir");

  const Section model(member(j, "model"), "model", {"dim", "layers", "heads", "max_context", "query_offset", "init_std"});
  rs.model.vocab = static_cast<int>(tok.vocab_size());
  rs.model.query_offset = 64;
  model.read("dim", rs.model.dim);
  model.read("layers", rs.model.layers);
  model.read("heads", rs.model.heads);
  model.read("max_context", rs.model.max_context);
  model.read("query_offset", rs.model.query_offset);
  model.read("init_std", rs.model.init_std);

  const Section pre(member(j, "pretrain"), "pretrain", {"steps", "batch_size", "lr", "max_demos", "transforms"});
  pre.read("steps", rs.pretrain.steps);
  pre.read("batch_size", rs.pretrain.batch_size);
  pre.read("lr", rs.pretrain.optimizer.lr);
  pre.read("max_demos", rs.pretrain.max_demos);
  pre.read("transforms", rs.pretrain.transforms);
  rs.pretrain.min_len = rs.gen.min_len;
  rs.pretrain.max_len = rs.gen.max_len;
  rs.pretrain.char_pool = rs.gen.char_pool;

  const Section tr(member(j, "train"), "train",
                   {"steps", "batch_size", "refreshes", "k", "optimizer", "lr", "scorer", "weighting", "temperature",
                    "percentile", "percentile_over_dataset", "loss", "beta", "gamma", "gamma_beta_ratio", "eval_every", "mean_normalize",
                    "oracle_lr", "cache_demos"});
  auto& t = rs.train;
  tr.read("steps", t.steps);
  tr.read("batch_size", t.batch_size);
  tr.read("refreshes", t.refreshes);
  tr.read("k", t.k);
  if (auto s = tr.string("optimizer")) {
    if (*s == "adam") t.optimizer.kind = OptimizerConfig::Kind::Adam;
    else if (*s == "sgd") t.optimizer.kind = OptimizerConfig::Kind::Sgd;
    else throw InvalidArgument("config: unknown optimizer '" + *s + "'");
  }
  tr.read("lr", t.optimizer.lr);
  if (auto s = tr.string("scorer")) t.scorer = scorer_kind_from_string(*s);
  if (auto s = tr.string("weighting")) t.weighting.kind = weighting_kind_from_string(*s);
  tr.read("temperature", t.weighting.temperature);
  tr.read("percentile", t.weighting.percentile);
  tr.read("percentile_over_dataset", t.weighting.percentile_over_dataset);
  if (auto s = tr.string("loss")) t.loss = loss_kind_from_string(*s);
  tr.read("beta", t.beta);
  tr.read("gamma", t.gamma);
  if (j.contains("train") && j.at("train").contains("gamma_beta_ratio")) {
    if (j.at("train").contains("gamma")) throw InvalidArgument("config: give either train.gamma or train.gamma_beta_ratio");
    double ratio = 0.0;
    tr.read("gamma_beta_ratio", ratio);
    t.gamma = ratio * t.beta;
  }
  tr.read("eval_every", t.eval_every);
  tr.read("mean_normalize", t.mean_normalize);
  tr.read("oracle_lr", t.oracle_lr);
  tr.read("cache_demos", t.cache_demos);

  const Section orc(member(j, "oracle"), "oracle", {"mode", "candidates", "retrain_steps"});
  if (auto s = orc.string("mode")) rs.oracle.mode = oracle_mode_from_string(*s);
  orc.read("candidates", rs.oracle.candidates);
  orc.read("retrain_steps", rs.oracle.retrain_steps);

  rs.apply_seed(seed);
  rs.validate(tok);
  return rs;
}

inline RunSpec load_runspec(const std::string& path, const Tokenizer& tok = Tokenizer()) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& ex) {
    throw InvalidArgument("config " + path + ": " + ex.what());
  }
  return parse_runspec(j, tok);
}

}  // namespace ica
