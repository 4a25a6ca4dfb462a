#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ica/checkpoint.hpp"
#include "ica/corpus.hpp"
#include "ica/trainloop.hpp"
#include "test_util.hpp"

using namespace ica;
using ica::testing::random_params;
using ica::testing::small_config;

namespace {

SplitDatasets tiny_data(std::size_t train, std::size_t holdout, std::uint64_t seed) {
  GenConfig c;
  c.train_size = train;
  c.holdout_size = holdout;
  c.test_size = 4;
  c.min_len = 3;
  c.max_len = 5;
  c.char_pool = 8;
  return generate_synthetic_sft(c, seed);
}

TrainConfig quick(long steps, std::size_t bs) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = bs;
  c.k = 2;
  c.optimizer.lr = 1e-2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(RefreshSchedule, Examples) {
  EXPECT_EQ(refresh_period(512, 16, 1), 32);
  EXPECT_EQ(refresh_period(512, 16, 3), 10);
  EXPECT_EQ(refresh_period(10, 16, 1), 1);
  EXPECT_EQ(refresh_schedule(512, 16, 5, 30), (std::vector<long>{0, 6, 12, 18, 24}));
  EXPECT_EQ(refresh_schedule(100, 10, 2, 12), (std::vector<long>{0, 5, 10}));
  EXPECT_EQ(refresh_schedule(4, 8, 9, 3), (std::vector<long>{0, 1, 2}));
  EXPECT_THROW(refresh_period(0, 1, 1), InvalidArgument);
  EXPECT_THROW(refresh_period(10, 1, 0), InvalidArgument);
}

TEST(RefreshSchedule, RunRecordsExactlyTheSchedule) {
  const auto data = tiny_data(24, 6, 1);
  const auto init = random_params(small_config(2));
  for (long r : {1L, 3L, 5L, 9L}) {
    auto cfg = quick(13, 4);
    cfg.refreshes = r;
    const auto res = train(data.train, data.holdout, init, cfg);
    EXPECT_EQ(res.metrics.refreshes, refresh_schedule(24, 4, r, 13)) << "R=" << r;
  }
}

TEST(BatchSampler, EpochsArePermutations) {
  std::mt19937_64 rng(3);
  BatchSampler s(10, rng);
  std::vector<std::size_t> seen;
  for (int i = 0; i < 10; ++i) {
    const auto b = s.next(3);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    std::set<std::size_t> ids(seen.begin() + epoch * 10, seen.begin() + epoch * 10 + 10);
    EXPECT_EQ(ids.size(), 10u);
  }
  EXPECT_THROW(BatchSampler(0, rng), InvalidArgument);
}

TEST(Controls, UniformMatchesNoScoringBitwise) {
  const auto data = tiny_data(20, 5, 4);
  const auto init = random_params(small_config(5));
  auto cfg = quick(12, 4);
  cfg.weighting = WeightingMode::uniform();
  cfg.eval_every = 4;
  const auto scored = train(data.train, data.holdout, init, cfg);
  TrainInputs in;
  in.disable_scoring = true;
  const auto plain = train(data.train, data.holdout, init, cfg, in);
  EXPECT_EQ(scored.params, plain.params);
  EXPECT_EQ(scored.metrics.steps, plain.metrics.steps);
  EXPECT_EQ(scored.metrics.evals, plain.metrics.evals);
  EXPECT_FALSE(scored.metrics.refreshes.empty());
  EXPECT_TRUE(plain.metrics.refreshes.empty());
}

TEST(Controls, ZeroWeightsLeaveSgdParamsUnchanged) {
  const auto data = tiny_data(12, 4, 6);
  const auto init = random_params(small_config(7));
  auto cfg = quick(6, 4);
  cfg.optimizer.kind = OptimizerConfig::Kind::Sgd;
  cfg.weighting = WeightingMode::zero();
  TrainInputs in;
  in.disable_scoring = true;
  const auto res = train(data.train, data.holdout, init, cfg, in);
  EXPECT_EQ(res.params, init);
  for (const auto& s : res.metrics.steps) EXPECT_EQ(s.weight_max, 0.0);
}

TEST(Controls, ScoringCannotBeDisabledForScoreDrivenWeights) {
  const auto data = tiny_data(8, 4, 8);
  const auto init = random_params(small_config(9));
  TrainInputs in;
  in.disable_scoring = true;
  EXPECT_THROW(train(data.train, data.holdout, init, quick(2, 4), in), InvalidArgument);
}

TEST(Train, MaxMinWeightsAreRecorded) {
  const auto data = tiny_data(16, 4, 10);
  const auto init = random_params(small_config(11));
  const auto res = train(data.train, data.holdout, init, quick(8, 4));
  for (const auto& s : res.metrics.steps) {
    EXPECT_GE(s.weight_min, 0.0);
    EXPECT_EQ(s.weight_max, 1.0);
    EXPECT_LE(s.weight_mean, 1.0);
    EXPECT_TRUE(std::isfinite(s.train_loss));
  }
  ASSERT_EQ(res.metrics.evals.size(), 2u);
  EXPECT_EQ(res.metrics.evals.back().step, 8);
  EXPECT_EQ(res.last_scores.size(), 16u);
}

TEST(Train, EveryScorerRunsForEveryLoss) {
  GenConfig g;
  g.train_size = 8;
  g.holdout_size = 4;
  g.test_size = 2;
  g.min_len = 3;
  g.max_len = 4;
  const auto pref = generate_synthetic_pref(g, 12);
  const auto sft = generate_synthetic_sft(g, 12);
  const auto init = random_params(small_config(13));
  for (auto loss : {LossKind::Sft, LossKind::Dpo, LossKind::Simpo}) {
    for (auto scorer : {ScorerKind::Ica, ScorerKind::Rho, ScorerKind::OneShot, ScorerKind::OracleOneStep}) {
      auto cfg = quick(3, 4);
      cfg.loss = loss;
      cfg.scorer = scorer;
      cfg.beta = loss == LossKind::Simpo ? 2.5 : 0.1;
      const auto& d = loss == LossKind::Sft ? sft : pref;
      TrainInputs in;
      in.test = &d.test;
      const auto res = train(d.train, d.holdout, init, cfg, in);
      EXPECT_TRUE(res.params.all_finite());
      EXPECT_TRUE(res.metrics.evals.back().test_loss.has_value());
      EXPECT_EQ(res.holdout_model.has_value(), scorer == ScorerKind::Rho);
    }
  }
}

TEST(Train, InputValidation) {
  const auto data = tiny_data(8, 4, 14);
  const auto init = random_params(small_config(15));
  EXPECT_THROW(train(data.train, data.holdout, init, quick(2, 9)), InvalidArgument);
  EXPECT_THROW(train(data.train, Dataset{}, init, quick(2, 4)), InvalidArgument);
  auto cfg = quick(2, 4);
  cfg.loss = LossKind::Simpo;
  cfg.beta = 2.5;
  EXPECT_THROW(train(data.train, data.holdout, init, cfg), InvalidArgument);
  cfg = quick(0, 4);
  EXPECT_THROW(train(data.train, data.holdout, init, cfg), InvalidArgument);
}

TEST(Train, DivergenceAborts) {
  const auto data = tiny_data(8, 4, 16);
  const auto init = random_params(small_config(17));
  auto cfg = quick(20, 4);
  cfg.optimizer.kind = OptimizerConfig::Kind::Sgd;
  cfg.optimizer.lr = 1e200;
  cfg.weighting = WeightingMode::uniform();
  TrainInputs in;
  in.disable_scoring = true;
  EXPECT_THROW(train(data.train, data.holdout, init, cfg, in), TrainingAborted);
}

TEST(Train, DeterministicAcrossRuns) {
  const auto data = tiny_data(16, 4, 18);
  const auto init = random_params(small_config(19));
  auto cfg = quick(10, 4);
  cfg.refreshes = 3;
  cfg.eval_every = 3;
  const auto a = train(data.train, data.holdout, init, cfg);
  const auto b = train(data.train, data.holdout, init, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.metrics, b.metrics);
  ica::testing::TempDir dir;
  write_metrics_jsonl(a.metrics, dir.file("a.jsonl"));
  write_metrics_jsonl(b.metrics, dir.file("b.jsonl"));
  EXPECT_EQ(ica::testing::slurp(dir.file("a.jsonl")), ica::testing::slurp(dir.file("b.jsonl")));
  save_checkpoint(a.params, dir.file("a.ckpt"));
  save_checkpoint(b.params, dir.file("b.ckpt"));
  EXPECT_EQ(ica::testing::slurp(dir.file("a.ckpt")), ica::testing::slurp(dir.file("b.ckpt")));
}

TEST(Metrics, JsonlRoundTrip) {
  RunMetrics m;
  m.seed = 123456789012345ULL;
  m.refreshes = {0, 2, 4};
  for (long t = 0; t < 5; ++t) m.steps.push_back({t, 1.0 / (t + 3.0), 0.0, 0.1 * t, 1.0});
  m.evals = {{0, 2.5, 2.75}, {5, 1.0 / 3.0, std::nullopt}};
  m.final_checkpoint = "final.ckpt";
  ica::testing::TempDir dir;
  write_metrics_jsonl(m, dir.file("m.jsonl"));
  EXPECT_EQ(read_metrics_jsonl(dir.file("m.jsonl")), m);
  const auto text = ica::testing::slurp(dir.file("m.jsonl"));
  EXPECT_EQ(text.rfind("{\"event\":\"header\"", 0), 0u);
  // Refresh and eval events at step t precede the step-t record.
  EXPECT_LT(text.find("{\"event\":\"refresh\",\"step\":2}"), text.find("{\"event\":\"step\",\"step\":2"));
}

TEST(Metrics, MalformedLinesReportLineNumbers) {
  ica::testing::TempDir dir;
  ica::testing::write_text(dir.file("bad.jsonl"), "{\"event\":\"header\",\"seed\":1}\n{\"event\":\"nope\"}\n");
  try {
    read_metrics_jsonl(dir.file("bad.jsonl"));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  ica::testing::write_text(dir.file("bad2.jsonl"), "not json\n");
  EXPECT_THROW(read_metrics_jsonl(dir.file("bad2.jsonl")), ParseError);
  EXPECT_THROW(read_metrics_jsonl(dir.file("missing.jsonl")), Error);
}

TEST(HoldoutModel, TrainsOnHoldoutOnly) {
  const auto data = tiny_data(8, 4, 20);
  const auto init = random_params(small_config(21));
  auto cfg = quick(5, 8);
  const auto ref = train_holdout_model(data.holdout, init, cfg);
  auto plain_cfg = cfg;
  plain_cfg.weighting = WeightingMode::uniform();
  plain_cfg.batch_size = 4;
  TrainInputs in;
  in.disable_scoring = true;
  EXPECT_EQ(ref, train(data.holdout, data.holdout, init, plain_cfg, in).params);
}

TEST(GreedySelect, PicksDistinctArgmaxSequence) {
  const auto data = tiny_data(10, 4, 22);
  const auto init = random_params(small_config(23));
  auto cfg = quick(1, 4);
  cfg.scorer = ScorerKind::OracleOneStep;
  const auto sel = greedy_select(data.train, data.holdout, init, 4, cfg);
  ASSERT_EQ(sel.size(), 4u);
  EXPECT_EQ(std::set<std::size_t>(sel.begin(), sel.end()).size(), 4u);

  // First pick is the argmax of a fresh scoring pass.
  ScoringContext ctx;
  ctx.kind = ScorerKind::OracleOneStep;
  ctx.oracle_lr = cfg.oracle_lr;
  ctx.initial = &init;
  DemoSelector ds(data.holdout, 32, cfg.k);
  const auto raw = score_dataset(init, data.train, data.holdout, ctx, ds).raw();
  EXPECT_EQ(sel.front(), static_cast<std::size_t>(std::max_element(raw.begin(), raw.end()) - raw.begin()));

  EXPECT_TRUE(greedy_select(data.train, data.holdout, init, 0, cfg).empty());
  EXPECT_THROW(greedy_select(data.train, data.holdout, init, 11, cfg), InvalidArgument);
}

TEST(Pretrain, LearningRateSchedule) {
  PretrainConfig c;
  c.steps = 1000;
  c.warmup_steps = 100;
  c.optimizer.lr = 1e-3;
  c.min_lr_ratio = 0.1;
  EXPECT_NEAR(pretrain_lr(c, 0), 1e-5, 1e-18);
  EXPECT_NEAR(pretrain_lr(c, 99), 1e-3, 1e-18);
  EXPECT_NEAR(pretrain_lr(c, 999), 1e-4, 1e-8);
  for (long t = 100; t < 999; ++t) ASSERT_GE(pretrain_lr(c, t), pretrain_lr(c, t + 1));
}
