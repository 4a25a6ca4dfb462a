// Command-line front end: gen, train, compare, score-report, oracle.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "ica/commands.hpp"

namespace {

ica::RunSpec resolve_spec(const std::string& config, std::optional<std::uint64_t> seed) {
  ica::RunSpec rs = config.empty() ? ica::parse_runspec(nlohmann::json{{"version", ica::kRunSpecVersion}})
                                   : ica::load_runspec(config);
  if (seed) {
    rs.apply_seed(*seed);
    rs.validate(ica::Tokenizer());
  }
  return rs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ICA data valuation and reweighted fine-tuning on a tiny transformer"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, init, metrics_a, metrics_b;
  std::optional<std::uint64_t> seed;
  bool force = false;

  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", config, "RunSpec JSON file");
    if (needs_config) c->required();
    c->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory")->required();
    sub->add_option("--seed", seed, "override the run seed");
    sub->add_flag("--force", force, "overwrite a non-empty output directory");
  };

  auto* gen = app.add_subcommand("gen", "write train/holdout/test JSONL and a manifest");
  common(gen, false);

  auto* trn = app.add_subcommand("train", "run reweighted fine-tuning; writes checkpoints and metrics.jsonl");
  common(trn, false);
  trn->add_option("--init", init, "start from this checkpoint instead of pretraining")->check(CLI::ExistingFile);

  auto* cmp = app.add_subcommand("compare", "compare two metrics.jsonl files (A against B)");
  cmp->add_option("metrics_a", metrics_a, "metrics of run A")->required()->check(CLI::ExistingFile);
  cmp->add_option("metrics_b", metrics_b, "metrics of run B")->required()->check(CLI::ExistingFile);
  cmp->add_option("--out", out, "output directory")->required();
  cmp->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* rep = app.add_subcommand("score-report", "score the train set and summarize per domain and noise flag");
  common(rep, true);
  rep->add_option("--checkpoint", checkpoint, "checkpoint to score with")->required()->check(CLI::ExistingFile);
  rep->add_option("--init", init, "initial checkpoint (default: init.ckpt beside --checkpoint)")->check(CLI::ExistingFile);

  auto* orc = app.add_subcommand("oracle", "correlate every scorer with the one-step or retrain oracle");
  common(orc, true);
  orc->add_option("--checkpoint", checkpoint, "checkpoint to score with")->required()->check(CLI::ExistingFile);
  orc->add_option("--init", init, "initial checkpoint (default: init.ckpt beside --checkpoint)")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  const auto opt_path = [](const std::string& s) -> std::optional<std::filesystem::path> {
    if (s.empty()) return std::nullopt;
    return std::filesystem::path(s);
  };

  try {
    if (*gen) {
      const auto rs = resolve_spec(config, seed);
      ica::cmd_gen(rs, out, force);
      std::cout << "wrote " << out << '\n';
    } else if (*trn) {
      const auto rs = resolve_spec(config, seed);
      std::optional<ica::ModelParams> theta0;
      if (!init.empty()) theta0 = ica::load_checkpoint(init);
      const auto a = ica::cmd_train(rs, out, force, theta0);
      const auto& last = a.result.metrics.evals.back();
      std::cout << "final holdout loss " << last.holdout_loss;
      if (last.test_loss) std::cout << ", test loss " << *last.test_loss;
      std::cout << "\nwrote " << a.checkpoint.string() << " and " << a.metrics.string() << '\n';
    } else if (*cmp) {
      const auto r = ica::cmd_compare(metrics_a, metrics_b, out, force);
      std::ifstream txt(std::filesystem::path(out) / "compare.txt");
      std::cout << txt.rdbuf();
    } else if (*rep) {
      const auto rs = resolve_spec(config, seed);
      const auto s = ica::cmd_score_report(rs, checkpoint, opt_path(init), out, force);
      for (const auto& g : s.domains) std::cout << "domain " << g.group << " mean " << g.mean << " (n=" << g.count << ")\n";
      for (const auto& g : s.flags) std::cout << g.group << " mean " << g.mean << " (n=" << g.count << ")\n";
    } else if (*orc) {
      const auto rs = resolve_spec(config, seed);
      ica::cmd_oracle(rs, checkpoint, opt_path(init), out, force);
      std::ifstream txt(std::filesystem::path(out) / "correlations.txt");
      std::cout << txt.rdbuf();
    }
  } catch (const ica::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
