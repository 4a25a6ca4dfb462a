#pragma once

#include <vector>

#include "ica/corpus.hpp"
#include "ica/model.hpp"

namespace ica {

/// Reference log-probs for every example of a preference dataset under `ref`.
inline std::vector<ReferenceLogprobs> reference_table(const ModelParams& ref, const Dataset& ds) {
  std::vector<ReferenceLogprobs> out;
  out.reserve(ds.size());
  for (const auto& e : ds.examples) out.push_back(reference_logprobs(ref, e));
  return out;
}

/// Arithmetic mean of per-example losses.
inline double evaluate_holdout(const ModelParams& params, const Dataset& ds, const LossSpec& spec,
                               const std::vector<ReferenceLogprobs>* ref_cache = nullptr) {
  if (ds.empty()) throw InvalidArgument("evaluate_holdout: empty dataset");
  if (ds.kind != spec.example_kind()) throw InvalidArgument("dataset kind does not match loss kind");
  double sum = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const ReferenceLogprobs* rc = ref_cache ? &(*ref_cache)[i] : nullptr;
    sum += example_loss(params, spec, ds[i], {}, rc);
  }
  return sum / static_cast<double>(ds.size());
}

}  // namespace ica
