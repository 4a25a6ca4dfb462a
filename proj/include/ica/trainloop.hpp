#pragma once

// Reweighted fine-tuning with periodic score refresh, greedy selection, and
// the in-context pretraining stage that produces the initial checkpoint.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ica/corpus.hpp"
#include "ica/embed.hpp"
#include "ica/error.hpp"
#include "ica/evaluate.hpp"
#include "ica/model.hpp"
#include "ica/optim.hpp"
#include "ica/reweight.hpp"
#include "ica/score.hpp"

namespace ica {

struct TrainConfig {
  long steps = 100;
  std::size_t batch_size = 16;
  /// Number of full rescoring passes the schedule aims for.
  long refreshes = 1;
  std::size_t k = 3;
  OptimizerConfig optimizer;
  ScorerKind scorer = ScorerKind::Ica;
  WeightingMode weighting;
  LossKind loss = LossKind::Sft;
  double beta = 0.1;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  /// Holdout/test evaluation period in steps; 0 evaluates only at start and end.
  long eval_every = 0;
  /// Divide the weighted gradient sum by the batch size.
  bool mean_normalize = false;
  double oracle_lr = 1e-2;
  /// Reuse each candidate's kNN demonstrations across refreshes.
  bool cache_demos = false;

  void validate() const {
    if (steps < 1) throw InvalidArgument("steps must be >= 1");
    if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
    if (refreshes < 1) throw InvalidArgument("refreshes must be >= 1");
    if (k < 1) throw InvalidArgument("k must be >= 1");
    if (eval_every < 0) throw InvalidArgument("eval_every must be >= 0");
    optimizer.validate();
    weighting.validate();
  }
};

/// F = max(1, floor(|D| / (n_B * R))); refresh at every t in [0, steps) with t mod F = 0.
inline long refresh_period(std::size_t dataset_size, std::size_t batch_size, long refreshes) {
  if (dataset_size == 0 || batch_size == 0 || refreshes < 1) throw InvalidArgument("refresh_schedule: arguments must be positive");
  const auto f = static_cast<long>(dataset_size / (batch_size * static_cast<std::size_t>(refreshes)));
  return std::max(1L, f);
}

inline std::vector<long> refresh_schedule(std::size_t dataset_size, std::size_t batch_size, long refreshes, long steps) {
  const long f = refresh_period(dataset_size, batch_size, refreshes);
  std::vector<long> out;
  for (long t = 0; t < steps; t += f) out.push_back(t);
  return out;
}

/// Seeded epoch shuffle without replacement; a batch may straddle two epochs.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::mt19937_64& rng) : rng_(&rng), order_(n) {
    if (n == 0) throw InvalidArgument("cannot sample from an empty dataset");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch_size) {
    std::vector<std::size_t> batch;
    batch.reserve(batch_size);
    while (batch.size() < batch_size) {
      if (cursor_ == order_.size()) reshuffle();
      batch.push_back(order_[cursor_++]);
    }
    return batch;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), *rng_);
    cursor_ = 0;
  }

  std::mt19937_64* rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct StepRecord {
  long step = 0;
  double train_loss = 0.0;
  double weight_min = 0.0, weight_mean = 0.0, weight_max = 0.0;
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct EvalRecord {
  long step = 0;
  double holdout_loss = 0.0;
  std::optional<double> test_loss;
  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct RunMetrics {
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::vector<long> refreshes;
  std::string final_checkpoint;
  friend bool operator==(const RunMetrics&, const RunMetrics&) = default;
};

/// One JSON record per event, chronological; refresh and eval events at step t
/// precede the step-t record. The first line is a header carrying the seed.
inline void write_metrics_jsonl(const RunMetrics& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path);
  using J = nlohmann::ordered_json;
  out << J{{"event", "header"}, {"version", 1}, {"seed", m.seed}}.dump() << '\n';
  std::size_t ri = 0, ei = 0;
  auto emit_eval = [&](const EvalRecord& e) {
    J j{{"event", "eval"}, {"step", e.step}, {"holdout_loss", e.holdout_loss}};
    if (e.test_loss) j["test_loss"] = *e.test_loss;
    out << j.dump() << '\n';
  };
  for (const auto& s : m.steps) {
    while (ri < m.refreshes.size() && m.refreshes[ri] <= s.step) out << J{{"event", "refresh"}, {"step", m.refreshes[ri++]}}.dump() << '\n';
    while (ei < m.evals.size() && m.evals[ei].step <= s.step) emit_eval(m.evals[ei++]);
    out << J{{"event", "step"}, {"step", s.step}, {"train_loss", s.train_loss}, {"weight_min", s.weight_min},
             {"weight_mean", s.weight_mean}, {"weight_max", s.weight_max}}.dump()
        << '\n';
  }
  while (ri < m.refreshes.size()) out << J{{"event", "refresh"}, {"step", m.refreshes[ri++]}}.dump() << '\n';
  while (ei < m.evals.size()) emit_eval(m.evals[ei++]);
  if (!m.final_checkpoint.empty()) out << J{{"event", "final"}, {"checkpoint", m.final_checkpoint}}.dump() << '\n';
}

inline RunMetrics read_metrics_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  RunMetrics m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto ev = j.at("event").get<std::string>();
      if (ev == "header") {
        m.seed = j.at("seed").get<std::uint64_t>();
      } else if (ev == "refresh") {
        m.refreshes.push_back(j.at("step").get<long>());
      } else if (ev == "eval") {
        EvalRecord e{j.at("step").get<long>(), j.at("holdout_loss").get<double>(), std::nullopt};
        if (j.contains("test_loss")) e.test_loss = j.at("test_loss").get<double>();
        m.evals.push_back(e);
      } else if (ev == "step") {
        m.steps.push_back({j.at("step").get<long>(), j.at("train_loss").get<double>(), j.at("weight_min").get<double>(),
                           j.at("weight_mean").get<double>(), j.at("weight_max").get<double>()});
      } else if (ev == "final") {
        m.final_checkpoint = j.at("checkpoint").get<std::string>();
      } else {
        throw ParseError("unknown event '" + ev + "'", lineno);
      }
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(ex.what(), lineno);
    }
  }
  return m;
}

/// Optional inputs of a training run.
struct TrainInputs {
  const Dataset* test = nullptr;
  /// RHO scorer: model trained on the holdout set. Trained on demand when null.
  const ModelParams* holdout_model = nullptr;
  /// Skip scoring entirely (plain training); only valid with UNIFORM or ZERO weighting.
  bool disable_scoring = false;
  /// Called after every refresh with the fresh table.
  std::function<void(const ScoreTable&)> on_refresh;
};

struct TrainResult {
  ModelParams params;
  RunMetrics metrics;
  ScoreTable last_scores;
  /// Set when a RHO reference was trained inside the run.
  std::optional<ModelParams> holdout_model;
};

inline LossSpec make_loss_spec(const TrainConfig& cfg, const ModelParams* reference) {
  LossSpec spec{cfg.loss, cfg.beta, cfg.gamma, cfg.loss == LossKind::Dpo ? reference : nullptr};
  spec.validate();
  return spec;
}

inline TrainResult train(const Dataset& train_set, const Dataset& holdout, const ModelParams& init,
                         const TrainConfig& cfg, const TrainInputs& inputs = {});

/// The RHO reference: the same configuration trained on the holdout set alone,
/// without reweighting.
inline ModelParams train_holdout_model(const Dataset& holdout, const ModelParams& init, const TrainConfig& cfg) {
  TrainConfig ref_cfg = cfg;
  ref_cfg.weighting = WeightingMode::uniform();
  ref_cfg.batch_size = std::min(cfg.batch_size, holdout.size());
  TrainInputs in;
  in.disable_scoring = true;
  return train(holdout, holdout, init, ref_cfg, in).params;
}

inline TrainResult train(const Dataset& train_set, const Dataset& holdout, const ModelParams& init,
                         const TrainConfig& cfg, const TrainInputs& inputs) {
  cfg.validate();
  if (train_set.empty()) throw InvalidArgument("empty training set");
  if (holdout.empty()) throw InvalidArgument("empty holdout set");
  if (cfg.batch_size > train_set.size()) throw InvalidArgument("batch size exceeds training set size");
  const ExampleKind kind = cfg.loss == LossKind::Sft ? ExampleKind::Sft : ExampleKind::Pref;
  if (train_set.kind != kind || holdout.kind != kind || (inputs.test && inputs.test->kind != kind)) {
    throw InvalidArgument("dataset kinds do not match the configured loss");
  }
  const bool scoring = !inputs.disable_scoring;
  if (!scoring && cfg.weighting.kind != WeightingMode::Kind::Uniform && cfg.weighting.kind != WeightingMode::Kind::Zero) {
    throw InvalidArgument("scoring can only be disabled for uniform or zero weighting");
  }

  TrainResult result;
  // The DPO reference policy is the initial checkpoint, frozen.
  const ModelParams reference = init;
  const LossSpec spec = make_loss_spec(cfg, &reference);

  std::vector<ReferenceLogprobs> train_refs, holdout_refs, test_refs;
  if (spec.kind == LossKind::Dpo) {
    train_refs = reference_table(reference, train_set);
    holdout_refs = reference_table(reference, holdout);
    if (inputs.test) test_refs = reference_table(reference, *inputs.test);
  }
  auto refs_or_null = [&](const std::vector<ReferenceLogprobs>& v) { return spec.kind == LossKind::Dpo ? &v : nullptr; };

  const ModelParams* holdout_model = inputs.holdout_model;
  if (scoring && cfg.scorer == ScorerKind::Rho && holdout_model == nullptr) {
    result.holdout_model = train_holdout_model(holdout, init, cfg);
    holdout_model = &*result.holdout_model;
  }

  ScoringContext ctx;
  ctx.kind = cfg.scorer;
  ctx.loss = spec;
  ctx.holdout_model = holdout_model;
  ctx.initial = &reference;
  ctx.oracle_lr = cfg.oracle_lr;
  ctx.train_refs = refs_or_null(train_refs);
  ctx.holdout_refs = refs_or_null(holdout_refs);

  std::optional<DemoSelector> selector;
  if (scoring) selector.emplace(holdout, init.config().vocab, cfg.k, cfg.cache_demos);

  ModelParams params = init;
  Optimizer opt(cfg.optimizer);
  std::mt19937_64 rng(cfg.seed);
  BatchSampler sampler(train_set.size(), rng);
  const long period = refresh_period(train_set.size(), cfg.batch_size, cfg.refreshes);

  RunMetrics& metrics = result.metrics;
  metrics.seed = cfg.seed;
  ScoreTable scores;
  scores.entries.assign(train_set.size(), ScoreEntry{0.0, 0});
  std::vector<double> raw(train_set.size(), 0.0);

  auto evaluate = [&](long t) {
    EvalRecord e;
    e.step = t;
    e.holdout_loss = evaluate_holdout(params, holdout, spec, refs_or_null(holdout_refs));
    if (inputs.test) e.test_loss = evaluate_holdout(params, *inputs.test, spec, refs_or_null(test_refs));
    metrics.evals.push_back(e);
  };

  std::vector<Gradients> grads;
  for (long t = 0; t < cfg.steps; ++t) {
    if (scoring && t % period == 0) {
      if (cfg.scorer == ScorerKind::OneShot && !metrics.refreshes.empty()) {
        // One-shot scores depend only on the initial checkpoint.
        for (auto& e : scores.entries) e.computed_at_step = t;
      } else {
        scores = score_dataset(params, train_set, holdout, ctx, *selector, t);
      }
      raw = scores.raw();
      metrics.refreshes.push_back(t);
      if (inputs.on_refresh) inputs.on_refresh(scores);
    }
    if (t == 0 || (cfg.eval_every > 0 && t % cfg.eval_every == 0)) evaluate(t);

    const auto batch = sampler.next(cfg.batch_size);
    std::vector<double> batch_scores;
    batch_scores.reserve(batch.size());
    for (auto i : batch) batch_scores.push_back(raw[i]);
    const auto weights = batch_weights(cfg.weighting, batch_scores, raw);

    grads.clear();
    double loss_sum = 0.0;
    for (auto i : batch) {
      Gradients g = zero_gradients_like(params);
      const ReferenceLogprobs* rc = spec.kind == LossKind::Dpo ? &train_refs[i] : nullptr;
      const double l = accumulate_loss_grad(params, spec, train_set[i], g, {}, rc);
      if (!std::isfinite(l)) throw TrainingAborted("non-finite loss on example " + std::to_string(i), t);
      loss_sum += l;
      grads.push_back(std::move(g));
    }
    const Gradients g = weighted_gradient(weights, grads, cfg.mean_normalize);
    opt.step(params, g);

    StepRecord rec;
    rec.step = t;
    rec.train_loss = loss_sum / static_cast<double>(batch.size());
    const auto [wmin, wmax] = std::minmax_element(weights.begin(), weights.end());
    rec.weight_min = *wmin;
    rec.weight_max = *wmax;
    rec.weight_mean = std::accumulate(weights.begin(), weights.end(), 0.0) / static_cast<double>(weights.size());
    metrics.steps.push_back(rec);
  }
  evaluate(cfg.steps);
  if (!params.all_finite()) throw TrainingAborted("non-finite parameters", cfg.steps);

  result.params = std::move(params);
  result.last_scores = std::move(scores);
  return result;
}

/// Sequential selection: score all remaining candidates, take the argmax
/// (lowest id on ties), take one optimizer step on it, repeat m times.
inline std::vector<std::size_t> greedy_select(const Dataset& train_set, const Dataset& holdout, const ModelParams& init,
                                              std::size_t m, const TrainConfig& cfg) {
  cfg.validate();
  if (m > train_set.size()) throw InvalidArgument("greedy_select: m exceeds dataset size");
  std::vector<std::size_t> selected;
  if (m == 0) return selected;

  const ModelParams reference = init;
  const LossSpec spec = make_loss_spec(cfg, &reference);
  std::vector<ReferenceLogprobs> train_refs, holdout_refs;
  if (spec.kind == LossKind::Dpo) {
    train_refs = reference_table(reference, train_set);
    holdout_refs = reference_table(reference, holdout);
  }
  std::optional<ModelParams> holdout_model;
  ScoringContext ctx;
  ctx.kind = cfg.scorer;
  ctx.loss = spec;
  ctx.initial = &reference;
  ctx.oracle_lr = cfg.oracle_lr;
  if (spec.kind == LossKind::Dpo) {
    ctx.train_refs = &train_refs;
    ctx.holdout_refs = &holdout_refs;
  }
  if (cfg.scorer == ScorerKind::Rho) {
    holdout_model = train_holdout_model(holdout, init, cfg);
    ctx.holdout_model = &*holdout_model;
  }
  ctx.validate();
  DemoSelector selector(holdout, init.config().vocab, cfg.k, true);

  ModelParams params = init;
  Optimizer opt(cfg.optimizer);
  std::vector<bool> taken(train_set.size(), false);
  for (std::size_t round = 0; round < m; ++round) {
    std::size_t best = train_set.size();
    double best_score = 0.0;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      if (taken[i]) continue;
      const double s = score_example(params, train_set, i, holdout, ctx, selector);
      if (best == train_set.size() || s > best_score) {
        best = i;
        best_score = s;
      }
    }
    taken[best] = true;
    selected.push_back(best);
    Gradients g = zero_gradients_like(params);
    const ReferenceLogprobs* rc = spec.kind == LossKind::Dpo ? &train_refs[best] : nullptr;
    accumulate_loss_grad(params, spec, train_set[best], g, {}, rc);
    opt.step(params, g);
  }
  return selected;
}

// ---------------------------------------------------------------------------
// In-context pretraining

/// Meta-training on episodes "demo_1 ... demo_m query" where every segment
/// applies one transform drawn from the first `transforms`. The loss covers
/// every response token, so the model learns to infer the transform from
/// context. Produces the initial checkpoint the fine-tuning runs start from.
struct PretrainConfig {
  long steps = 3000;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer{OptimizerConfig::Kind::Adam, 3e-3};
  /// Linear warmup then cosine decay to `min_lr_ratio * lr`.
  long warmup_steps = 200;
  double min_lr_ratio = 0.1;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  int max_demos = 3;
  int transforms = kNumTransforms;
  int min_len = 5;
  int max_len = 5;
  int char_pool = 16;
  std::uint64_t seed = 1;

  void validate() const {
    if (steps < 0) throw InvalidArgument("pretrain steps must be >= 0");
    if (batch_size < 1) throw InvalidArgument("pretrain batch size must be >= 1");
    if (warmup_steps < 0) throw InvalidArgument("warmup_steps must be >= 0");
    if (!(min_lr_ratio > 0.0 && min_lr_ratio <= 1.0)) throw InvalidArgument("min_lr_ratio must lie in (0, 1]");
    if (!(clip_norm >= 0.0)) throw InvalidArgument("clip_norm must be >= 0");
    if (max_demos < 0) throw InvalidArgument("max_demos must be >= 0");
    if (transforms < 1 || transforms > kNumTransforms) throw InvalidArgument("transforms out of range");
    if (min_len < 1 || max_len < min_len) throw InvalidArgument("invalid pretrain length range");
    if (char_pool < 2) throw InvalidArgument("char_pool must be >= 2");
    optimizer.validate();
  }
};

struct Episode {
  DemoSet demos;
  TokenSeq prompt;
  TokenSeq response;
  Transform transform = Transform::Reverse;
};

inline Episode sample_episode(std::mt19937_64& rng, const PretrainConfig& cfg) {
  std::uniform_int_distribution<int> tdist(0, cfg.transforms - 1);
  std::uniform_int_distribution<int> mdist(0, cfg.max_demos);
  std::uniform_int_distribution<int> ldist(cfg.min_len, cfg.max_len);
  std::uniform_int_distribution<Token> cdist(0, cfg.char_pool - 1);
  auto rand_string = [&] {
    TokenSeq s(static_cast<std::size_t>(ldist(rng)));
    for (auto& c : s) c = cdist(rng);
    return s;
  };
  Episode ep;
  ep.transform = static_cast<Transform>(tdist(rng));
  const int m = mdist(rng);
  for (int i = 0; i < m; ++i) {
    auto p = rand_string();
    auto r = apply_transform(ep.transform, p);
    ep.demos.push_back({std::move(p), std::move(r)});
  }
  ep.prompt = rand_string();
  ep.response = apply_transform(ep.transform, ep.prompt);
  return ep;
}

/// Loss summed over all response segments of the serialized episode; the
/// gradient is accumulated into `grads`.
inline double episode_loss_grad(const ModelParams& params, const Episode& ep, Gradients& grads) {
  const auto& cfg = params.config();
  const auto seq = serialize(cfg, ep.demos, ep.prompt, ep.response);
  // Mark response positions of the demonstrations that survived truncation.
  std::vector<bool> scored(seq.tokens.size(), false);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < seq.demos_used; ++i) {
    pos += ep.demos[i].prompt.size() + 1;
    for (std::size_t j = 0; j < ep.demos[i].response.size(); ++j) scored[pos + j] = true;
    pos += ep.demos[i].response.size() + 1;
  }
  for (std::size_t t = seq.score_begin; t < seq.tokens.size(); ++t) scored[t] = true;

  detail::ForwardCache cache;
  detail::forward(params, seq.tokens, seq.pos0, cache);
  const auto V = static_cast<std::size_t>(cfg.vocab);
  std::vector<double> dlogits(cache.T * V, 0.0);
  double loss = 0.0;
  for (std::size_t t = 1; t < seq.tokens.size(); ++t) {
    if (!scored[t]) continue;
    double* dl = dlogits.data() + (t - 1) * V;
    loss -= detail::log_softmax_at(cache.logits.data() + (t - 1) * V, V, seq.tokens[t], dl);
    dl[static_cast<std::size_t>(seq.tokens[t])] -= 1.0;
  }
  detail::backward(params, cache, dlogits, grads);
  return loss;
}

inline double pretrain_lr(const PretrainConfig& cfg, long step) {
  const double peak = cfg.optimizer.lr;
  if (step < cfg.warmup_steps) return peak * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  const double span = static_cast<double>(std::max(1L, cfg.steps - cfg.warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  const double lo = peak * cfg.min_lr_ratio;
  return lo + 0.5 * (peak - lo) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

inline ModelParams pretrain_in_context(const ModelParams& init, const PretrainConfig& cfg,
                                       std::vector<double>* loss_trace = nullptr) {
  cfg.validate();
  ModelParams params = init;
  Optimizer opt(cfg.optimizer);
  std::mt19937_64 rng(cfg.seed);
  for (long step = 0; step < cfg.steps; ++step) {
    Gradients g = zero_gradients_like(params);
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) loss += episode_loss_grad(params, sample_episode(rng, cfg), g);
    if (!std::isfinite(loss)) throw TrainingAborted("non-finite pretraining loss", step);
    const double inv = 1.0 / static_cast<double>(cfg.batch_size);
    double norm2 = 0.0;
    for (double& v : g.values()) {
      v *= inv;
      norm2 += v * v;
    }
    if (cfg.clip_norm > 0.0 && norm2 > cfg.clip_norm * cfg.clip_norm) {
      const double c = cfg.clip_norm / std::sqrt(norm2);
      for (double& v : g.values()) v *= c;
    }
    opt.set_lr(pretrain_lr(cfg, step));
    opt.step(params, g);
    if (loss_trace) loss_trace->push_back(loss * inv);
  }
  return params;
}

}  // namespace ica
