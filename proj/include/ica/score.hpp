#pragma once

// Data-value scorers: the in-context approximation (ICA), RHO-Loss, one-shot,
// and the one-step holdout-gain oracle they are validated against.

#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ica/corpus.hpp"
#include "ica/embed.hpp"
#include "ica/error.hpp"
#include "ica/evaluate.hpp"
#include "ica/model.hpp"

namespace ica {

enum class ScorerKind { Ica, Rho, OneShot, OracleOneStep };

inline const char* to_string(ScorerKind k) {
  switch (k) {
    case ScorerKind::Ica: return "ica";
    case ScorerKind::Rho: return "rho";
    case ScorerKind::OneShot: return "oneshot";
    case ScorerKind::OracleOneStep: return "oracle";
  }
  return "?";
}

inline ScorerKind scorer_kind_from_string(const std::string& s) {
  if (s == "ica") return ScorerKind::Ica;
  if (s == "rho") return ScorerKind::Rho;
  if (s == "oneshot") return ScorerKind::OneShot;
  if (s == "oracle") return ScorerKind::OracleOneStep;
  throw InvalidArgument("unknown scorer '" + s + "'");
}

/// loss(y | x) - loss(y | demos, x) under the same parameters.
inline double ica_score(const ModelParams& params, const LossSpec& spec, const Example& e, const DemoSet& demos,
                        const ReferenceLogprobs* ref_cache = nullptr) {
  return example_loss(params, spec, e, {}, ref_cache) - example_loss(params, spec, e, demos, ref_cache);
}

/// loss under the current model minus loss under a model trained on the holdout set.
inline double rho_score(const ModelParams& params, const ModelParams& holdout_model, const LossSpec& spec,
                        const Example& e, const ReferenceLogprobs* ref_cache = nullptr) {
  if (!params.congruent(holdout_model)) throw InvalidArgument("rho_score: parameter shapes differ");
  return example_loss(params, spec, e, {}, ref_cache) - example_loss(holdout_model, spec, e, {}, ref_cache);
}

/// Mean holdout loss under the initial model, minus the same with the
/// candidate prepended as the single demonstration of every holdout example.
/// `zero_shot` may carry the precomputed candidate-independent first term.
inline double oneshot_score(const ModelParams& initial, const LossSpec& spec, const Example& candidate,
                            const Dataset& holdout, const std::vector<ReferenceLogprobs>* holdout_refs = nullptr,
                            std::optional<double> zero_shot = std::nullopt) {
  if (holdout.empty()) throw InvalidArgument("oneshot_score: empty holdout");
  if (!zero_shot) zero_shot = evaluate_holdout(initial, holdout, spec, holdout_refs);
  const DemoSet demo{{candidate.prompt, candidate.target()}};
  double one_shot = 0.0;
  for (std::size_t j = 0; j < holdout.size(); ++j) {
    const ReferenceLogprobs* rc = holdout_refs ? &(*holdout_refs)[j] : nullptr;
    one_shot += example_loss(initial, spec, holdout[j], demo, rc);
  }
  return *zero_shot - one_shot / static_cast<double>(holdout.size());
}

/// L(holdout; params) - L(holdout; params - lr * grad loss(candidate)).
/// Positive when one SGD step on the candidate lowers the holdout loss.
inline double oracle_one_step_gain(const ModelParams& params, const LossSpec& spec, const Example& candidate,
                                   const Dataset& holdout, double lr,
                                   const std::vector<ReferenceLogprobs>* holdout_refs = nullptr,
                                   const ReferenceLogprobs* candidate_ref = nullptr) {
  if (!(lr >= 0.0)) throw InvalidArgument("oracle lr must be >= 0");
  const auto g = loss_and_grad(params, spec, candidate, {}, candidate_ref).grads;
  ModelParams stepped = params;
  auto p = stepped.values();
  const auto gv = g.values();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * gv[i];
  return evaluate_holdout(params, holdout, spec, holdout_refs) - evaluate_holdout(stepped, holdout, spec, holdout_refs);
}

struct ScoreEntry {
  double score = 0.0;
  long computed_at_step = 0;

  friend bool operator==(const ScoreEntry&, const ScoreEntry&) = default;
};

struct ScoreTable {
  std::vector<ScoreEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
  std::vector<double> raw() const {
    std::vector<double> s;
    s.reserve(entries.size());
    for (const auto& e : entries) s.push_back(e.score);
    return s;
  }

  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

/// Everything a scorer may need besides the current parameters.
struct ScoringContext {
  ScorerKind kind = ScorerKind::Ica;
  LossSpec loss;
  /// RHO: model trained on the holdout set only.
  const ModelParams* holdout_model = nullptr;
  /// ONE_SHOT: the initial checkpoint.
  const ModelParams* initial = nullptr;
  double oracle_lr = 1e-2;
  /// DPO reference log-probs, indexed like the scored dataset / the holdout.
  const std::vector<ReferenceLogprobs>* train_refs = nullptr;
  const std::vector<ReferenceLogprobs>* holdout_refs = nullptr;

  void validate() const {
    loss.validate();
    if (kind == ScorerKind::Rho && holdout_model == nullptr) throw InvalidArgument("rho scorer needs a holdout-trained checkpoint");
    if (kind == ScorerKind::OneShot && initial == nullptr) throw InvalidArgument("one-shot scorer needs the initial checkpoint");
  }
};

/// Scores one example of `dataset` (index `i`) with the configured scorer.
inline double score_example(const ModelParams& params, const Dataset& dataset, std::size_t i, const Dataset& holdout,
                            const ScoringContext& ctx, DemoSelector& selector,
                            std::optional<double> holdout_baseline = std::nullopt) {
  const Example& e = dataset[i];
  const ReferenceLogprobs* rc = ctx.train_refs ? &(*ctx.train_refs)[i] : nullptr;
  switch (ctx.kind) {
    case ScorerKind::Ica:
      return ica_score(params, ctx.loss, e, selector.demos(e, i), rc);
    case ScorerKind::Rho:
      return rho_score(params, *ctx.holdout_model, ctx.loss, e, rc);
    case ScorerKind::OneShot:
      return oneshot_score(*ctx.initial, ctx.loss, e, holdout, ctx.holdout_refs, holdout_baseline);
    case ScorerKind::OracleOneStep:
      return oracle_one_step_gain(params, ctx.loss, e, holdout, ctx.oracle_lr, ctx.holdout_refs, rc);
  }
  return 0.0;
}

/// One score per example of `dataset`, demonstrations re-selected per example.
inline ScoreTable score_dataset(const ModelParams& params, const Dataset& dataset, const Dataset& holdout,
                                const ScoringContext& ctx, DemoSelector& selector, long step = 0) {
  ctx.validate();
  if (dataset.kind != ctx.loss.example_kind()) throw InvalidArgument("dataset kind does not match loss kind");
  std::optional<double> baseline;
  if (ctx.kind == ScorerKind::OneShot) baseline = evaluate_holdout(*ctx.initial, holdout, ctx.loss, ctx.holdout_refs);
  ScoreTable table;
  table.entries.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const double s = score_example(params, dataset, i, holdout, ctx, selector, baseline);
    if (!std::isfinite(s)) throw Error("non-finite score for example " + std::to_string(i));
    table.entries.push_back({s, step});
  }
  return table;
}

/// CSV: example_id,score,computed_at_step,corrupted_flag,domain
inline void write_score_csv(const std::string& path, const ScoreTable& table, const Dataset& dataset) {
  if (table.size() != dataset.size()) throw InvalidArgument("score table and dataset differ in size");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path);
  out.precision(17);
  out << "example_id,score,computed_at_step,corrupted_flag,domain\n";
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << i << ',' << table.entries[i].score << ',' << table.entries[i].computed_at_step << ','
        << (dataset[i].corrupted ? 1 : 0) << ',';
    if (dataset[i].domain) out << *dataset[i].domain;
    out << '\n';
  }
}

}  // namespace ica
