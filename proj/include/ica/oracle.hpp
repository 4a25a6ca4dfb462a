#pragma once

// Brute-force retraining oracle for tiny instances.

#include <algorithm>
#include <string>

#include "ica/corpus.hpp"
#include "ica/error.hpp"
#include "ica/evaluate.hpp"
#include "ica/model.hpp"
#include "ica/trainloop.hpp"

namespace ica {

inline constexpr std::size_t kRetrainBudget = 64;

/// Trains a fresh model on base_set + {candidate} from `init` with plain
/// (unweighted) training and returns the mean holdout loss it reaches.
/// Lower is better; rank candidates by the negated value.
inline double oracle_retrain(const Dataset& base_set, const Example& candidate, const Dataset& holdout,
                             const ModelParams& init, const TrainConfig& cfg, std::size_t budget = kRetrainBudget) {
  const std::size_t n = base_set.size() + 1;
  if (n > budget) {
    throw BudgetExceeded("oracle_retrain: " + std::to_string(n) + " examples exceeds the budget of " + std::to_string(budget));
  }
  Dataset train_set = base_set;
  train_set.push_back(candidate);

  TrainConfig rc = cfg;
  rc.weighting = WeightingMode::uniform();
  rc.batch_size = std::min(cfg.batch_size, n);
  rc.eval_every = 0;
  TrainInputs in;
  in.disable_scoring = true;
  const auto result = train(train_set, holdout, init, rc, in);
  return result.metrics.evals.back().holdout_loss;
}

}  // namespace ica
