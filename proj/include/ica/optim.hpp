#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ica/error.hpp"
#include "ica/model.hpp"

namespace ica {

struct OptimizerConfig {
  enum class Kind { Sgd, Adam };
  Kind kind = Kind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw InvalidArgument("learning rate must be > 0");
    if (kind == Kind::Adam && !(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
      throw InvalidArgument("invalid adam hyperparameters");
    }
  }
};

/// SGD, or Adam with bias-corrected moments.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const OptimizerConfig& config() const noexcept { return cfg_; }
  long steps_taken() const noexcept { return t_; }
  void set_lr(double lr) {
    if (!(lr > 0.0)) throw InvalidArgument("learning rate must be > 0");
    cfg_.lr = lr;
  }

  void step(ModelParams& params, const Gradients& grads) {
    if (!grads.congruent(params)) throw InvalidArgument("optimizer: gradient shape mismatch");
    auto p = params.values();
    const auto g = grads.values();
    ++t_;
    if (cfg_.kind == OptimizerConfig::Kind::Sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg_.lr * g[i];
      return;
    }
    if (m_.empty()) {
      m_.assign(p.size(), 0.0);
      v_.assign(p.size(), 0.0);
    }
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * g[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace ica
