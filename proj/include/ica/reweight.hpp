#pragma once

// Score-to-weight conversions and the weighted batch gradient.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ica/error.hpp"
#include "ica/tensor_tree.hpp"

namespace ica {

struct WeightingMode {
  enum class Kind { MaxMin, Softmax, Percentile, Uniform, Zero };

  Kind kind = Kind::MaxMin;
  double temperature = 1.0;  // Softmax
  double percentile = 50.0;  // Percentile, in [0, 100]
  /// Percentile threshold over all stored scores instead of the batch.
  bool percentile_over_dataset = false;

  static WeightingMode maxmin() { return {}; }
  static WeightingMode uniform() { return {Kind::Uniform}; }
  /// Diagnostic: every weight 0.
  static WeightingMode zero() { return {Kind::Zero}; }
  static WeightingMode softmax(double temperature) { return {Kind::Softmax, temperature}; }
  static WeightingMode percentile_filter(double p, bool over_dataset = false) {
    return {Kind::Percentile, 1.0, p, over_dataset};
  }

  void validate() const {
    if (kind == Kind::Softmax && !(temperature > 0.0)) throw InvalidArgument("softmax temperature must be > 0");
    if (kind == Kind::Percentile && !(percentile >= 0.0 && percentile <= 100.0)) {
      throw InvalidArgument("percentile must lie in [0, 100]");
    }
  }
};

inline const char* to_string(WeightingMode::Kind k) {
  switch (k) {
    case WeightingMode::Kind::MaxMin: return "maxmin";
    case WeightingMode::Kind::Softmax: return "softmax";
    case WeightingMode::Kind::Percentile: return "percentile";
    case WeightingMode::Kind::Uniform: return "uniform";
    case WeightingMode::Kind::Zero: return "zero";
  }
  return "?";
}

inline WeightingMode::Kind weighting_kind_from_string(const std::string& s) {
  using K = WeightingMode::Kind;
  if (s == "maxmin") return K::MaxMin;
  if (s == "softmax") return K::Softmax;
  if (s == "percentile") return K::Percentile;
  if (s == "uniform") return K::Uniform;
  if (s == "zero") return K::Zero;
  throw InvalidArgument("unknown weighting mode '" + s + "'");
}

/// w_i = (s_i - min) / (max - min). All-equal scores give all ones.
inline std::vector<double> maxmin_weights(std::span<const double> scores) {
  if (scores.empty()) throw InvalidArgument("maxmin_weights: empty input");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double mn = *lo, mx = *hi;
  std::vector<double> w(scores.size(), 1.0);
  if (mx == mn) return w;
  const double range = mx - mn;
  for (std::size_t i = 0; i < scores.size(); ++i) w[i] = (scores[i] - mn) / range;
  return w;
}

/// n * softmax(s / temperature), so an uninformative batch weighs 1 per example.
inline std::vector<double> softmax_weights(std::span<const double> scores, double temperature) {
  if (scores.empty()) throw InvalidArgument("softmax_weights: empty input");
  if (!(temperature > 0.0)) throw InvalidArgument("softmax temperature must be > 0");
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> w(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    w[i] = std::exp((scores[i] - mx) / temperature);
    sum += w[i];
  }
  const double scale = static_cast<double>(scores.size()) / sum;
  for (double& v : w) v *= scale;
  return w;
}

/// Threshold whose rank is floor(p * n / 100) + 1 in ascending order (clamped
/// to n): exactly floor(p * n / 100) sorted values sit strictly below its rank.
inline double percentile_threshold(std::span<const double> scores, double p) {
  if (scores.empty()) throw InvalidArgument("percentile: empty input");
  if (!(p >= 0.0 && p <= 100.0)) throw InvalidArgument("percentile must lie in [0, 100]");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::floor(p * static_cast<double>(n) / 100.0 + 1e-12)) + 1;
  rank = std::min(rank, n);
  return sorted[rank - 1];
}

/// 1 for scores at or above the threshold, else 0.
inline std::vector<double> percentile_filter(std::span<const double> scores, double p) {
  const double thr = percentile_threshold(scores, p);
  std::vector<double> w(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) w[i] = scores[i] >= thr ? 1.0 : 0.0;
  return w;
}

/// Weights for one batch from its members' stored raw scores. `all_scores`
/// is only read by the dataset-wide percentile variant.
inline std::vector<double> batch_weights(const WeightingMode& mode, std::span<const double> batch_scores,
                                         std::span<const double> all_scores = {}) {
  using K = WeightingMode::Kind;
  switch (mode.kind) {
    case K::MaxMin:
      return maxmin_weights(batch_scores);
    case K::Softmax:
      return softmax_weights(batch_scores, mode.temperature);
    case K::Percentile: {
      if (!mode.percentile_over_dataset) return percentile_filter(batch_scores, mode.percentile);
      const double thr = percentile_threshold(all_scores, mode.percentile);
      std::vector<double> w(batch_scores.size());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = batch_scores[i] >= thr ? 1.0 : 0.0;
      return w;
    }
    case K::Uniform:
      return std::vector<double>(batch_scores.size(), 1.0);
    case K::Zero:
      return std::vector<double>(batch_scores.size(), 0.0);
  }
  return {};
}

/// g = sum_i w_i * grad_i, optionally divided by the batch size.
inline Gradients weighted_gradient(std::span<const double> weights, std::span<const Gradients> grads,
                                   bool mean_normalize = false) {
  if (weights.size() != grads.size()) throw InvalidArgument("weights and gradients differ in length");
  if (grads.empty()) throw InvalidArgument("weighted_gradient: empty batch");
  Gradients out(grads.front().shared_layout());
  auto acc = out.values();
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].congruent(grads.front())) throw InvalidArgument("gradient shapes differ");
    const auto g = grads[i].values();
    const double w = weights[i];
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * g[j];
  }
  if (mean_normalize) {
    const double inv = 1.0 / static_cast<double>(grads.size());
    for (double& v : acc) v *= inv;
  }
  return out;
}

}  // namespace ica
