#pragma once

// Implementations of the CLI subcommands. Each returns normally on success
// and throws ica::Error with a diagnostic otherwise.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ica/checkpoint.hpp"
#include "ica/corpus.hpp"
#include "ica/error.hpp"
#include "ica/oracle.hpp"
#include "ica/reweight.hpp"
#include "ica/runspec.hpp"
#include "ica/score.hpp"
#include "ica/stats.hpp"
#include "ica/trainloop.hpp"

namespace ica {

namespace fs = std::filesystem;

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
inline void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw Error(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) throw Error(dir.string() + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(dir);
}

inline std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// gen

inline SplitDatasets generate_for(const RunSpec& rs, const Tokenizer& tok) {
  return rs.kind == ExampleKind::Sft ? generate_synthetic_sft(rs.gen, rs.seed, tok)
                                     : generate_synthetic_pref(rs.gen, rs.seed, tok);
}

inline void cmd_gen(const RunSpec& rs, const fs::path& out, bool force, const Tokenizer& tok = Tokenizer()) {
  const auto splits = generate_for(rs, tok);
  prepare_out_dir(out, force);
  save_jsonl(splits.train, (out / "train.jsonl").string(), tok);
  save_jsonl(splits.holdout, (out / "holdout.jsonl").string(), tok);
  save_jsonl(splits.test, (out / "test.jsonl").string(), tok);

  std::size_t corrupted = 0;
  std::map<int, std::size_t> per_domain;
  for (const auto& e : splits.train.examples) {
    corrupted += e.corrupted ? 1 : 0;
    if (e.domain) ++per_domain[*e.domain];
  }
  nlohmann::ordered_json m;
  m["version"] = 1;
  m["seed"] = rs.seed;
  m["kind"] = to_string(rs.kind);
  m["scenario"] = to_string(rs.gen.scenario);
  m["counts"] = {{"train", splits.train.size()}, {"holdout", splits.holdout.size()}, {"test", splits.test.size()}};
  m["corrupted"] = corrupted;
  if (rs.gen.scenario == Scenario::Noise) m["noise_rate"] = rs.gen.noise_rate;
  if (!per_domain.empty()) {
    nlohmann::ordered_json d = nlohmann::ordered_json::object();
    for (const auto& [g, n] : per_domain) d[std::to_string(g)] = n;
    m["train_domains"] = d;
    m["target_domain"] = rs.gen.target_domain;
  }
  std::ofstream f(out / "manifest.json", std::ios::binary | std::ios::trunc);
  f << m.dump(2) << '\n';
  if (!f) throw Error("cannot write manifest");
}

/// train/holdout/test from `rs.data_dir`, or generated from the spec when unset.
inline SplitDatasets load_or_generate(const RunSpec& rs, const Tokenizer& tok = Tokenizer()) {
  if (!rs.data_dir) return generate_for(rs, tok);
  const fs::path d(*rs.data_dir);
  SplitDatasets s;
  s.train = load_jsonl((d / "train.jsonl").string(), tok, rs.kind);
  s.holdout = load_jsonl((d / "holdout.jsonl").string(), tok, rs.kind);
  if (fs::exists(d / "test.jsonl")) s.test = load_jsonl((d / "test.jsonl").string(), tok, rs.kind);
  return s;
}

// ---------------------------------------------------------------------------
// train

/// Initial checkpoint: fresh initialization followed by in-context pretraining.
inline ModelParams initial_checkpoint(const RunSpec& rs) {
  ModelParams p = init_params(rs.model);
  if (rs.pretrain.steps > 0) p = pretrain_in_context(p, rs.pretrain);
  return p;
}

struct TrainArtifacts {
  fs::path checkpoint;
  fs::path metrics;
  TrainResult result;
};

/// Writes init.ckpt, final.ckpt, metrics.jsonl, scores.csv (when scored) and
/// holdout_model.ckpt (RHO). `init` overrides the initial checkpoint.
inline TrainArtifacts cmd_train(const RunSpec& rs, const fs::path& out, bool force,
                                const std::optional<ModelParams>& init = std::nullopt,
                                const Tokenizer& tok = Tokenizer()) {
  const auto splits = load_or_generate(rs, tok);
  prepare_out_dir(out, force);
  const ModelParams theta0 = init ? *init : initial_checkpoint(rs);
  if (!theta0.config().same_architecture(rs.model)) throw InvalidArgument("initial checkpoint does not match model config");
  save_checkpoint(theta0, (out / "init.ckpt").string());

  TrainInputs in;
  if (!splits.test.empty()) in.test = &splits.test;
  in.disable_scoring = rs.train.weighting.kind == WeightingMode::Kind::Uniform;
  TrainArtifacts a;
  a.result = train(splits.train, splits.holdout, theta0, rs.train, in);
  a.checkpoint = out / "final.ckpt";
  a.metrics = out / "metrics.jsonl";
  a.result.metrics.final_checkpoint = "final.ckpt";
  save_checkpoint(a.result.params, a.checkpoint.string());
  write_metrics_jsonl(a.result.metrics, a.metrics.string());
  if (a.result.holdout_model) save_checkpoint(*a.result.holdout_model, (out / "holdout_model.ckpt").string());
  if (!in.disable_scoring) write_score_csv((out / "scores.csv").string(), a.result.last_scores, splits.train);
  return a;
}

// ---------------------------------------------------------------------------
// compare

struct MetricDelta {
  std::string name;
  double a = 0.0, b = 0.0;
  double delta() const { return a - b; }
  bool a_better() const { return a < b; }
};

struct CompareReport {
  std::vector<MetricDelta> metrics;
  struct Point {
    long step;
    double holdout_a, holdout_b;
    std::optional<double> test_a, test_b;
  };
  std::vector<Point> points;
};

/// Trapezoidal area under a loss curve sampled at the eval steps.
inline double loss_auc(const std::vector<long>& steps, const std::vector<double>& loss) {
  double area = 0.0;
  for (std::size_t i = 1; i < steps.size(); ++i) {
    area += 0.5 * (loss[i] + loss[i - 1]) * static_cast<double>(steps[i] - steps[i - 1]);
  }
  return area;
}

inline CompareReport compare_metrics(const RunMetrics& a, const RunMetrics& b) {
  if (a.evals.empty() || b.evals.empty()) throw InvalidArgument("compare: a run has no eval records");
  if (a.evals.size() != b.evals.size()) throw InvalidArgument("compare: eval cadence mismatch");
  const bool has_test = a.evals.front().test_loss.has_value() && b.evals.front().test_loss.has_value();
  CompareReport r;
  std::vector<long> steps;
  std::vector<double> ha, hb, ta, tb;
  for (std::size_t i = 0; i < a.evals.size(); ++i) {
    const auto& ea = a.evals[i];
    const auto& eb = b.evals[i];
    if (ea.step != eb.step) throw InvalidArgument("compare: eval cadence mismatch at step " + std::to_string(ea.step));
    steps.push_back(ea.step);
    ha.push_back(ea.holdout_loss);
    hb.push_back(eb.holdout_loss);
    if (has_test) {
      if (!ea.test_loss || !eb.test_loss) throw InvalidArgument("compare: test loss missing at step " + std::to_string(ea.step));
      ta.push_back(*ea.test_loss);
      tb.push_back(*eb.test_loss);
    }
    r.points.push_back({ea.step, ea.holdout_loss, eb.holdout_loss, ea.test_loss, eb.test_loss});
  }
  auto add = [&](const std::string& split, const std::vector<double>& la, const std::vector<double>& lb) {
    r.metrics.push_back({split + "_final", la.back(), lb.back()});
    r.metrics.push_back({split + "_best", *std::min_element(la.begin(), la.end()), *std::min_element(lb.begin(), lb.end())});
    r.metrics.push_back({split + "_auc", loss_auc(steps, la), loss_auc(steps, lb)});
  };
  add("holdout", ha, hb);
  if (has_test) add("test", ta, tb);
  return r;
}

/// compare.txt, compare.csv (one row per metric) and compare_points.csv (per eval step).
inline CompareReport cmd_compare(const fs::path& metrics_a, const fs::path& metrics_b, const fs::path& out, bool force) {
  const auto report = compare_metrics(read_metrics_jsonl(metrics_a.string()), read_metrics_jsonl(metrics_b.string()));
  prepare_out_dir(out, force);
  std::ofstream csv(out / "compare.csv", std::ios::binary | std::ios::trunc);
  std::ofstream txt(out / "compare.txt", std::ios::binary | std::ios::trunc);
  csv << "metric,a,b,delta,a_better\n";
  txt << "A: " << metrics_a.string() << "\nB: " << metrics_b.string() << "\n\n";
  for (const auto& m : report.metrics) {
    csv << m.name << ',' << format_double(m.a) << ',' << format_double(m.b) << ',' << format_double(m.delta()) << ','
        << (m.a_better() ? "true" : "false") << '\n';
    txt << std::left << std::setw(14) << m.name << " A " << std::setw(12) << m.a << " B " << std::setw(12) << m.b
        << " delta " << std::setw(13) << m.delta() << (m.a_better() ? " A better" : "") << '\n';
  }
  std::ofstream pts(out / "compare_points.csv", std::ios::binary | std::ios::trunc);
  pts << "step,holdout_a,holdout_b,holdout_delta,test_a,test_b,test_delta\n";
  for (const auto& p : report.points) {
    pts << p.step << ',' << format_double(p.holdout_a) << ',' << format_double(p.holdout_b) << ','
        << format_double(p.holdout_a - p.holdout_b) << ',';
    if (p.test_a && p.test_b) {
      pts << format_double(*p.test_a) << ',' << format_double(*p.test_b) << ',' << format_double(*p.test_a - *p.test_b);
    } else {
      pts << ",,";
    }
    pts << '\n';
  }
  if (!csv || !txt || !pts) throw Error("cannot write compare report");
  return report;
}

// ---------------------------------------------------------------------------
// score-report

struct GroupMean {
  std::string group;
  std::size_t count = 0;
  double mean = 0.0;
};

struct ScoreSummary {
  std::vector<GroupMean> domains;  // empty when the data carries no domain labels
  std::vector<GroupMean> flags;    // "clean" / "corrupted"
};

/// Scores min-max normalized over the whole table, averaged per domain and per noise flag.
inline ScoreSummary summarize_scores(const std::vector<double>& scores, const Dataset& ds) {
  if (scores.size() != ds.size()) throw InvalidArgument("score count does not match dataset size");
  if (scores.empty()) throw InvalidArgument("no scores to summarize");
  const auto labelled = std::count_if(ds.examples.begin(), ds.examples.end(), [](const Example& e) { return e.domain.has_value(); });
  if (labelled != 0 && static_cast<std::size_t>(labelled) != ds.size()) throw InvalidArgument("some examples lack a domain label");
  const auto norm = maxmin_weights(scores);
  ScoreSummary s;
  auto mean_by = [&](auto key) {
    std::map<std::string, std::pair<std::size_t, double>> acc;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto& [n, sum] = acc[key(ds[i])];
      ++n;
      sum += norm[i];
    }
    std::vector<GroupMean> out;
    for (const auto& [g, ns] : acc) out.push_back({g, ns.first, ns.second / static_cast<double>(ns.first)});
    return out;
  };
  if (labelled) s.domains = mean_by([](const Example& e) { return std::to_string(*e.domain); });
  s.flags = mean_by([](const Example& e) { return std::string(e.corrupted ? "corrupted" : "clean"); });
  return s;
}

struct Checkpoints {
  ModelParams params;
  /// Initial checkpoint: one-shot scorer and DPO reference.
  ModelParams initial;
};

/// `init` defaults to init.ckpt next to the checkpoint, else the checkpoint itself.
inline Checkpoints load_checkpoints(const fs::path& checkpoint, const std::optional<fs::path>& init) {
  Checkpoints c{load_checkpoint(checkpoint.string()), {}};
  fs::path ip = init ? *init : checkpoint.parent_path() / "init.ckpt";
  c.initial = fs::exists(ip) ? load_checkpoint(ip.string()) : c.params;
  if (!c.initial.congruent(c.params)) throw InvalidArgument("initial checkpoint does not match the scored checkpoint");
  return c;
}

inline ScoreSummary cmd_score_report(const RunSpec& rs, const fs::path& checkpoint, const std::optional<fs::path>& init,
                                     const fs::path& out, bool force, const Tokenizer& tok = Tokenizer()) {
  const auto splits = load_or_generate(rs, tok);
  if (rs.gen.scenario == Scenario::Domain &&
      std::any_of(splits.train.examples.begin(), splits.train.examples.end(), [](const Example& e) { return !e.domain; })) {
    throw InvalidArgument("score-report: domain scenario data is missing domain labels");
  }
  const auto ck = load_checkpoints(checkpoint, init);
  const LossSpec spec = make_loss_spec(rs.train, &ck.initial);
  std::vector<ReferenceLogprobs> train_refs, holdout_refs;
  ScoringContext ctx;
  ctx.kind = rs.train.scorer;
  ctx.loss = spec;
  ctx.initial = &ck.initial;
  ctx.oracle_lr = rs.train.oracle_lr;
  if (spec.kind == LossKind::Dpo) {
    train_refs = reference_table(ck.initial, splits.train);
    holdout_refs = reference_table(ck.initial, splits.holdout);
    ctx.train_refs = &train_refs;
    ctx.holdout_refs = &holdout_refs;
  }
  std::optional<ModelParams> holdout_model;
  if (ctx.kind == ScorerKind::Rho) {
    const auto hm = checkpoint.parent_path() / "holdout_model.ckpt";
    holdout_model = fs::exists(hm) ? load_checkpoint(hm.string()) : train_holdout_model(splits.holdout, ck.initial, rs.train);
    ctx.holdout_model = &*holdout_model;
  }
  DemoSelector selector(splits.holdout, rs.model.vocab, rs.train.k, false);
  const auto table = score_dataset(ck.params, splits.train, splits.holdout, ctx, selector, 0);
  const auto summary = summarize_scores(table.raw(), splits.train);

  prepare_out_dir(out, force);
  write_score_csv((out / "scores.csv").string(), table, splits.train);
  std::ofstream f(out / "summary.csv", std::ios::binary | std::ios::trunc);
  f << "group_kind,group,count,mean_normalized_score\n";
  for (const auto& g : summary.domains) f << "domain," << g.group << ',' << g.count << ',' << format_double(g.mean) << '\n';
  for (const auto& g : summary.flags) f << "flag," << g.group << ',' << g.count << ',' << format_double(g.mean) << '\n';
  if (!f) throw Error("cannot write summary");
  return summary;
}

// ---------------------------------------------------------------------------
// oracle

struct Correlation {
  std::string scorer;
  std::optional<double> spearman, pearson;
};

struct OracleReport {
  std::vector<std::size_t> ids;
  std::vector<double> ica, rho, oneshot, oracle;
  std::vector<Correlation> correlations;
};

inline std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : "undefined"; }

inline std::vector<Correlation> correlate_with_oracle(const OracleReport& r) {
  std::vector<Correlation> out;
  auto add = [&](const char* name, const std::vector<double>& v) {
    out.push_back({name, spearman(v, r.oracle), pearson(v, r.oracle)});
  };
  add("ica", r.ica);
  add("rho", r.rho);
  add("oneshot", r.oneshot);
  add("oracle", r.oracle);
  return out;
}

/// Scores candidates with every scorer at `checkpoint` and correlates them
/// with the oracle. One-step mode scores the whole train set against the
/// one-step holdout gain. Retrain mode takes the first `oracle.candidates`
/// examples as candidates and the rest as the base set; the oracle value is
/// the negated holdout loss after retraining from the initial checkpoint.
inline OracleReport compute_oracle_report(const RunSpec& rs, const SplitDatasets& splits, const Checkpoints& ck) {
  const Dataset& train_set = splits.train;
  const Dataset& holdout = splits.holdout;
  const LossSpec spec = make_loss_spec(rs.train, &ck.initial);
  std::vector<ReferenceLogprobs> train_refs, holdout_refs;
  const std::vector<ReferenceLogprobs>* trp = nullptr;
  const std::vector<ReferenceLogprobs>* hrp = nullptr;
  if (spec.kind == LossKind::Dpo) {
    train_refs = reference_table(ck.initial, train_set);
    holdout_refs = reference_table(ck.initial, holdout);
    trp = &train_refs;
    hrp = &holdout_refs;
  }
  const ModelParams holdout_model = train_holdout_model(holdout, ck.initial, rs.train);
  DemoSelector selector(holdout, rs.model.vocab, rs.train.k, false);

  OracleReport r;
  Dataset base{train_set.kind, {}};
  std::size_t n = train_set.size();
  if (rs.oracle.mode == OracleMode::Retrain) {
    if (train_set.size() > kRetrainBudget) {
      throw BudgetExceeded("oracle_retrain: " + std::to_string(train_set.size()) + " examples exceeds the budget of " +
                           std::to_string(kRetrainBudget));
    }
    n = std::min(rs.oracle.candidates, train_set.size());
    for (std::size_t i = n; i < train_set.size(); ++i) base.push_back(train_set[i]);
  }
  const double zero_shot = evaluate_holdout(ck.initial, holdout, spec, hrp);
  TrainConfig retrain_cfg = rs.train;
  retrain_cfg.steps = rs.oracle.retrain_steps;
  for (std::size_t i = 0; i < n; ++i) {
    const Example& e = train_set[i];
    const ReferenceLogprobs* rc = trp ? &(*trp)[i] : nullptr;
    r.ids.push_back(i);
    r.ica.push_back(ica_score(ck.params, spec, e, selector.demos(e, i), rc));
    r.rho.push_back(rho_score(ck.params, holdout_model, spec, e, rc));
    r.oneshot.push_back(oneshot_score(ck.initial, spec, e, holdout, hrp, zero_shot));
    if (rs.oracle.mode == OracleMode::OneStep) {
      r.oracle.push_back(oracle_one_step_gain(ck.params, spec, e, holdout, rs.train.oracle_lr, hrp, rc));
    } else {
      r.oracle.push_back(-oracle_retrain(base, e, holdout, ck.initial, retrain_cfg));
    }
  }
  r.correlations = correlate_with_oracle(r);
  return r;
}

/// oracle.csv (per example), correlations.csv and correlations.txt.
inline OracleReport cmd_oracle(const RunSpec& rs, const fs::path& checkpoint, const std::optional<fs::path>& init,
                               const fs::path& out, bool force, const Tokenizer& tok = Tokenizer()) {
  const auto splits = load_or_generate(rs, tok);
  const auto ck = load_checkpoints(checkpoint, init);
  const auto r = compute_oracle_report(rs, splits, ck);

  prepare_out_dir(out, force);
  std::ofstream csv(out / "oracle.csv", std::ios::binary | std::ios::trunc);
  csv << "example_id,ica_score,rho_score,oneshot_score,oracle,corrupted_flag,domain\n";
  for (std::size_t i = 0; i < r.ids.size(); ++i) {
    const auto& e = splits.train[r.ids[i]];
    csv << r.ids[i] << ',' << format_double(r.ica[i]) << ',' << format_double(r.rho[i]) << ','
        << format_double(r.oneshot[i]) << ',' << format_double(r.oracle[i]) << ',' << (e.corrupted ? 1 : 0) << ',';
    if (e.domain) csv << *e.domain;
    csv << '\n';
  }
  std::ofstream cc(out / "correlations.csv", std::ios::binary | std::ios::trunc);
  std::ofstream txt(out / "correlations.txt", std::ios::binary | std::ios::trunc);
  cc << "scorer,spearman,pearson\n";
  txt << "oracle mode: " << to_string(rs.oracle.mode) << ", candidates: " << r.ids.size() << '\n';
  for (const auto& c : r.correlations) {
    cc << c.scorer << ',' << format_optional(c.spearman) << ',' << format_optional(c.pearson) << '\n';
    txt << std::left << std::setw(8) << c.scorer << " spearman " << std::setw(22) << format_optional(c.spearman)
        << " pearson " << format_optional(c.pearson) << '\n';
  }
  if (!csv || !cc || !txt) throw Error("cannot write oracle report");
  return r;
}

}  // namespace ica
