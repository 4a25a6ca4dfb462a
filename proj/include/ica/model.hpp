#pragma once

// Tiny pre-norm decoder-only transformer with hand-written reverse mode, and
// the sequence losses built on it (SFT negative log-likelihood, DPO, SimPO,
// and the demonstration-conditioned variants).

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ica/corpus.hpp"
#include "ica/error.hpp"
#include "ica/tensor_tree.hpp"

namespace ica {

struct ModelConfig {
  int vocab = 32;
  int dim = 32;
  int layers = 2;
  int heads = 2;
  int max_context = 256;
  /// 0 packs demonstrations and query from position 0. A positive value pins
  /// the query to start at this absolute position, with demonstrations
  /// right-aligned in front of it.
  int query_offset = 0;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  Token separator() const noexcept { return static_cast<Token>(vocab - 1); }

  void validate() const {
    if (vocab < 2) throw InvalidArgument("vocab must be >= 2");
    if (dim < 1 || heads < 1 || dim % heads != 0) throw InvalidArgument("dim must be a positive multiple of heads");
    if (layers < 0) throw InvalidArgument("layers must be >= 0");
    if (max_context < 2) throw InvalidArgument("max_context must be >= 2");
    if (query_offset < 0 || query_offset >= max_context) throw InvalidArgument("query_offset must lie in [0, max_context)");
    if (!(init_std >= 0.0)) throw InvalidArgument("init_std must be >= 0");
  }

  /// Same shapes and sequence layout; ignores the initialization fields.
  bool same_architecture(const ModelConfig& o) const noexcept {
    return vocab == o.vocab && dim == o.dim && layers == o.layers && heads == o.heads &&
           max_context == o.max_context && query_offset == o.query_offset;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace detail {

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ModelOffsets {
  std::size_t tok, pos;
  std::vector<LayerOffsets> layers;
  std::size_t lnf_g, lnf_b, head;
};

inline std::shared_ptr<const TensorLayout> build_layout(const ModelConfig& c, ModelOffsets& off) {
  auto layout = std::make_shared<TensorLayout>();
  const auto V = static_cast<std::size_t>(c.vocab);
  const auto d = static_cast<std::size_t>(c.dim);
  const auto N = static_cast<std::size_t>(c.max_context);
  off.tok = layout->add("tok_emb", {V, d});
  off.pos = layout->add("pos_emb", {N, d});
  off.layers.clear();
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    LayerOffsets lo{};
    lo.ln1_g = layout->add(p + "ln1.g", {d});
    lo.ln1_b = layout->add(p + "ln1.b", {d});
    lo.wq = layout->add(p + "attn.wq", {d, d});
    lo.bq = layout->add(p + "attn.bq", {d});
    lo.wk = layout->add(p + "attn.wk", {d, d});
    lo.bk = layout->add(p + "attn.bk", {d});
    lo.wv = layout->add(p + "attn.wv", {d, d});
    lo.bv = layout->add(p + "attn.bv", {d});
    lo.wo = layout->add(p + "attn.wo", {d, d});
    lo.bo = layout->add(p + "attn.bo", {d});
    lo.ln2_g = layout->add(p + "ln2.g", {d});
    lo.ln2_b = layout->add(p + "ln2.b", {d});
    lo.w1 = layout->add(p + "mlp.w1", {d, 4 * d});
    lo.b1 = layout->add(p + "mlp.b1", {4 * d});
    lo.w2 = layout->add(p + "mlp.w2", {4 * d, d});
    lo.b2 = layout->add(p + "mlp.b2", {d});
    off.layers.push_back(lo);
  }
  off.lnf_g = layout->add("ln_f.g", {d});
  off.lnf_b = layout->add("ln_f.b", {d});
  off.head = layout->add("lm_head", {d, V});
  return layout;
}

}  // namespace detail

struct ParameterTag;

/// All weights of the model plus the config that fixes their shapes.
class ModelParams : public TensorTree<ParameterTag> {
 public:
  ModelParams() = default;
  explicit ModelParams(const ModelConfig& config) : config_(config) {
    config_.validate();
    auto layout = detail::build_layout(config_, offsets_);
    static_cast<TensorTree<ParameterTag>&>(*this) = TensorTree<ParameterTag>(std::move(layout));
  }

  const ModelConfig& config() const noexcept { return config_; }
  const detail::ModelOffsets& offsets() const noexcept { return offsets_; }

  bool all_finite() const {
    for (double v : values()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.config_ == b.config_ &&
           static_cast<const TensorTree<ParameterTag>&>(a) == static_cast<const TensorTree<ParameterTag>&>(b);
  }

 private:
  ModelConfig config_;
  detail::ModelOffsets offsets_;
};

/// Normal(0, init_std) for matrices and embeddings, zero biases, unit norm scales.
inline ModelParams init_params(const ModelConfig& config) {
  ModelParams p(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  for (const auto& t : p.layout().tensors()) {
    auto span = p.values().subspan(t.offset, t.size);
    const std::string leaf = t.name.substr(t.name.rfind('.') + 1);
    const bool is_gain = leaf == "g";
    const bool is_bias = leaf != t.name && leaf.front() == 'b';
    if (is_gain) {
      std::fill(span.begin(), span.end(), 1.0);
    } else if (is_bias) {
      std::fill(span.begin(), span.end(), 0.0);
    } else {
      for (auto& v : span) v = normal(rng);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// out[T x n_out] = in[T x n_in] * W[n_in x n_out] + b
inline void linear_forward(double* out, const double* in, const double* W, const double* b, std::size_t T,
                           std::size_t n_in, std::size_t n_out) {
  for (std::size_t t = 0; t < T; ++t) {
    double* o = out + t * n_out;
    if (b) {
      for (std::size_t j = 0; j < n_out; ++j) o[j] = b[j];
    } else {
      for (std::size_t j = 0; j < n_out; ++j) o[j] = 0.0;
    }
    const double* x = in + t * n_in;
    for (std::size_t i = 0; i < n_in; ++i) {
      const double xi = x[i];
      const double* w = W + i * n_out;
      for (std::size_t j = 0; j < n_out; ++j) o[j] += xi * w[j];
    }
  }
}

// Accumulates din, dW, db from dout.
inline void linear_backward(double* din, double* dW, double* db, const double* dout, const double* in, const double* W,
                            std::size_t T, std::size_t n_in, std::size_t n_out) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* go = dout + t * n_out;
    const double* x = in + t * n_in;
    double* gx = din + t * n_in;
    if (db) {
      for (std::size_t j = 0; j < n_out; ++j) db[j] += go[j];
    }
    for (std::size_t i = 0; i < n_in; ++i) {
      const double* w = W + i * n_out;
      double* gw = dW + i * n_out;
      const double xi = x[i];
      double acc = 0.0;
      for (std::size_t j = 0; j < n_out; ++j) {
        acc += go[j] * w[j];
        gw[j] += xi * go[j];
      }
      gx[i] += acc;
    }
  }
}

inline void layernorm_forward(double* out, double* xhat, double* rstd, const double* in, const double* g,
                              const double* b, std::size_t T, std::size_t d) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* x = in + t * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLnEps);
    rstd[t] = r;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (x[i] - mean) * r;
      xhat[t * d + i] = h;
      out[t * d + i] = h * g[i] + b[i];
    }
  }
}

inline void layernorm_backward(double* din, double* dg, double* db, const double* dout, const double* xhat,
                               const double* rstd, const double* g, std::size_t T, std::size_t d) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* go = dout + t * d;
    const double* h = xhat + t * d;
    double mean_dh = 0.0, mean_dh_h = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double dh = go[i] * g[i];
      mean_dh += dh;
      mean_dh_h += dh * h[i];
      dg[i] += go[i] * h[i];
      db[i] += go[i];
    }
    mean_dh /= static_cast<double>(d);
    mean_dh_h /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double dh = go[i] * g[i];
      din[t * d + i] += rstd[t] * (dh - mean_dh - h[i] * mean_dh_h);
    }
  }
}

struct LayerCache {
  std::vector<double> x_in, a, xhat1, rstd1, q, k, v, att, o, x1, m, xhat2, rstd2, f, g;
};

struct ForwardCache {
  std::size_t T = 0;
  int pos0 = 0;
  std::vector<Token> tokens;
  std::vector<LayerCache> layers;
  std::vector<double> x_final, xhat_f, rstd_f, z, logits;
};

inline void forward(const ModelParams& params, std::span<const Token> tokens, int pos0, ForwardCache& c) {
  const auto& cfg = params.config();
  const auto& off = params.offsets();
  const double* P = params.data();
  const std::size_t T = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.dim);
  const auto V = static_cast<std::size_t>(cfg.vocab);
  const auto H = static_cast<std::size_t>(cfg.heads);
  const std::size_t hd = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  if (T == 0) throw LengthError("empty token sequence");
  if (pos0 < 0 || static_cast<std::size_t>(pos0) + T > static_cast<std::size_t>(cfg.max_context)) {
    throw LengthError("sequence of length " + std::to_string(T) + " at offset " + std::to_string(pos0) +
                      " exceeds context " + std::to_string(cfg.max_context));
  }
  c.T = T;
  c.pos0 = pos0;
  c.tokens.assign(tokens.begin(), tokens.end());

  std::vector<double> x(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    const Token tok = tokens[t];
    if (tok < 0 || static_cast<std::size_t>(tok) >= V) throw InvalidArgument("token id out of vocabulary");
    const double* te = P + off.tok + static_cast<std::size_t>(tok) * d;
    const double* pe = P + off.pos + (static_cast<std::size_t>(pos0) + t) * d;
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = te[i] + pe[i];
  }

  c.layers.resize(off.layers.size());
  for (std::size_t l = 0; l < off.layers.size(); ++l) {
    const auto& lo = off.layers[l];
    auto& L = c.layers[l];
    L.x_in = x;
    L.a.resize(T * d);
    L.xhat1.resize(T * d);
    L.rstd1.resize(T);
    layernorm_forward(L.a.data(), L.xhat1.data(), L.rstd1.data(), x.data(), P + lo.ln1_g, P + lo.ln1_b, T, d);
    L.q.resize(T * d);
    L.k.resize(T * d);
    L.v.resize(T * d);
    linear_forward(L.q.data(), L.a.data(), P + lo.wq, P + lo.bq, T, d, d);
    linear_forward(L.k.data(), L.a.data(), P + lo.wk, P + lo.bk, T, d, d);
    linear_forward(L.v.data(), L.a.data(), P + lo.wv, P + lo.bv, T, d, d);

    L.att.assign(H * T * T, 0.0);
    L.o.assign(T * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        double* row = L.att.data() + (h * T + t) * T;
        const double* qt = L.q.data() + t * d + h * hd;
        double mx = -1e300;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* ku = L.k.data() + u * d + h * hd;
          double s = 0.0;
          for (std::size_t i = 0; i < hd; ++i) s += qt[i] * ku[i];
          s *= scale;
          row[u] = s;
          if (s > mx) mx = s;
        }
        double sum = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          row[u] = std::exp(row[u] - mx);
          sum += row[u];
        }
        const double inv = 1.0 / sum;
        double* ot = L.o.data() + t * d + h * hd;
        for (std::size_t u = 0; u <= t; ++u) {
          row[u] *= inv;
          const double* vu = L.v.data() + u * d + h * hd;
          for (std::size_t i = 0; i < hd; ++i) ot[i] += row[u] * vu[i];
        }
      }
    }
    std::vector<double> proj(T * d);
    linear_forward(proj.data(), L.o.data(), P + lo.wo, P + lo.bo, T, d, d);
    L.x1.resize(T * d);
    for (std::size_t i = 0; i < T * d; ++i) L.x1[i] = x[i] + proj[i];

    L.m.resize(T * d);
    L.xhat2.resize(T * d);
    L.rstd2.resize(T);
    layernorm_forward(L.m.data(), L.xhat2.data(), L.rstd2.data(), L.x1.data(), P + lo.ln2_g, P + lo.ln2_b, T, d);
    L.f.resize(T * 4 * d);
    L.g.resize(T * 4 * d);
    linear_forward(L.f.data(), L.m.data(), P + lo.w1, P + lo.b1, T, d, 4 * d);
    for (std::size_t i = 0; i < T * 4 * d; ++i) {
      const double u = L.f[i];
      L.g[i] = 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u)));
    }
    linear_forward(proj.data(), L.g.data(), P + lo.w2, P + lo.b2, T, 4 * d, d);
    for (std::size_t i = 0; i < T * d; ++i) x[i] = L.x1[i] + proj[i];
  }

  c.x_final = std::move(x);
  c.z.resize(T * d);
  c.xhat_f.resize(T * d);
  c.rstd_f.resize(T);
  layernorm_forward(c.z.data(), c.xhat_f.data(), c.rstd_f.data(), c.x_final.data(), P + off.lnf_g, P + off.lnf_b, T, d);
  c.logits.resize(T * V);
  linear_forward(c.logits.data(), c.z.data(), P + off.head, nullptr, T, d, V);
}

/// Accumulates into `grads` the gradient of sum(dlogits * logits).
inline void backward(const ModelParams& params, const ForwardCache& c, const std::vector<double>& dlogits,
                     Gradients& grads) {
  const auto& cfg = params.config();
  const auto& off = params.offsets();
  const double* P = params.data();
  double* G = grads.data();
  const std::size_t T = c.T;
  const auto d = static_cast<std::size_t>(cfg.dim);
  const auto V = static_cast<std::size_t>(cfg.vocab);
  const auto H = static_cast<std::size_t>(cfg.heads);
  const std::size_t hd = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> dz(T * d, 0.0);
  linear_backward(dz.data(), G + off.head, nullptr, dlogits.data(), c.z.data(), P + off.head, T, d, V);
  std::vector<double> dx(T * d, 0.0);
  layernorm_backward(dx.data(), G + off.lnf_g, G + off.lnf_b, dz.data(), c.xhat_f.data(), c.rstd_f.data(),
                     P + off.lnf_g, T, d);

  for (std::size_t li = off.layers.size(); li-- > 0;) {
    const auto& lo = off.layers[li];
    const auto& L = c.layers[li];

    // x = x1 + mlp(ln2(x1))
    std::vector<double> dg(T * 4 * d, 0.0);
    linear_backward(dg.data(), G + lo.w2, G + lo.b2, dx.data(), L.g.data(), P + lo.w2, T, 4 * d, d);
    std::vector<double> df(T * 4 * d);
    for (std::size_t i = 0; i < T * 4 * d; ++i) {
      const double u = L.f[i];
      const double inner = kGeluC * (u + 0.044715 * u * u * u);
      const double th = std::tanh(inner);
      const double dinner = kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
      df[i] = dg[i] * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * dinner);
    }
    std::vector<double> dm(T * d, 0.0);
    linear_backward(dm.data(), G + lo.w1, G + lo.b1, df.data(), L.m.data(), P + lo.w1, T, d, 4 * d);
    std::vector<double> dx1 = dx;  // residual path
    layernorm_backward(dx1.data(), G + lo.ln2_g, G + lo.ln2_b, dm.data(), L.xhat2.data(), L.rstd2.data(),
                       P + lo.ln2_g, T, d);

    // x1 = x_in + attn(ln1(x_in))
    std::vector<double> d_o(T * d, 0.0);
    linear_backward(d_o.data(), G + lo.wo, G + lo.bo, dx1.data(), L.o.data(), P + lo.wo, T, d, d);
    std::vector<double> dq(T * d, 0.0), dk(T * d, 0.0), dv(T * d, 0.0);
    std::vector<double> datt(T);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* row = L.att.data() + (h * T + t) * T;
        const double* dot = d_o.data() + t * d + h * hd;
        double weighted = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* vu = L.v.data() + u * d + h * hd;
          double* dvu = dv.data() + u * d + h * hd;
          double s = 0.0;
          for (std::size_t i = 0; i < hd; ++i) {
            s += dot[i] * vu[i];
            dvu[i] += row[u] * dot[i];
          }
          datt[u] = s;
          weighted += row[u] * s;
        }
        const double* qt = L.q.data() + t * d + h * hd;
        double* dqt = dq.data() + t * d + h * hd;
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = row[u] * (datt[u] - weighted) * scale;
          const double* ku = L.k.data() + u * d + h * hd;
          double* dku = dk.data() + u * d + h * hd;
          for (std::size_t i = 0; i < hd; ++i) {
            dqt[i] += ds * ku[i];
            dku[i] += ds * qt[i];
          }
        }
      }
    }
    std::vector<double> da(T * d, 0.0);
    linear_backward(da.data(), G + lo.wq, G + lo.bq, dq.data(), L.a.data(), P + lo.wq, T, d, d);
    linear_backward(da.data(), G + lo.wk, G + lo.bk, dk.data(), L.a.data(), P + lo.wk, T, d, d);
    linear_backward(da.data(), G + lo.wv, G + lo.bv, dv.data(), L.a.data(), P + lo.wv, T, d, d);
    dx = dx1;
    layernorm_backward(dx.data(), G + lo.ln1_g, G + lo.ln1_b, da.data(), L.xhat1.data(), L.rstd1.data(),
                       P + lo.ln1_g, T, d);
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* gt = G + off.tok + static_cast<std::size_t>(c.tokens[t]) * d;
    double* gp = G + off.pos + (static_cast<std::size_t>(c.pos0) + t) * d;
    for (std::size_t i = 0; i < d; ++i) {
      gt[i] += dx[t * d + i];
      gp[i] += dx[t * d + i];
    }
  }
}

inline double log_softmax_at(const double* logits, std::size_t V, Token target, double* probs_out = nullptr) {
  double mx = logits[0];
  for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, logits[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < V; ++j) sum += std::exp(logits[j] - mx);
  const double lse = mx + std::log(sum);
  if (probs_out) {
    for (std::size_t j = 0; j < V; ++j) probs_out[j] = std::exp(logits[j] - lse);
  }
  return logits[static_cast<std::size_t>(target)] - lse;
}

}  // namespace detail

/// Per-position logits, row-major [len x vocab]. Positions start at `pos0`.
inline std::vector<double> forward_logits(const ModelParams& params, std::span<const Token> tokens, int pos0 = 0) {
  detail::ForwardCache cache;
  detail::forward(params, tokens, pos0, cache);
  return std::move(cache.logits);
}

// ---------------------------------------------------------------------------
// Serialization of (demonstrations, prompt, target) into one scored sequence

/// One in-context demonstration: a prompt and the response it teaches.
struct Demonstration {
  TokenSeq prompt;
  TokenSeq response;
};
using DemoSet = std::vector<Demonstration>;

/// A token sequence placed at absolute positions [pos0, pos0 + size) whose
/// tokens from `score_begin` on are scored given everything before them.
struct ScoredSequence {
  TokenSeq tokens;
  int pos0 = 0;
  std::size_t score_begin = 0;
  std::size_t demos_used = 0;
};

/// Lays out d1.prompt SEP d1.response SEP ... x SEP y. Demonstrations that do
/// not fit are dropped from the back; the query is never truncated.
inline ScoredSequence serialize(const ModelConfig& cfg, const DemoSet& demos, const TokenSeq& x, const TokenSeq& y) {
  if (x.empty() || y.empty()) throw InvalidArgument("prompt and response must be nonempty");
  const Token sep = cfg.separator();
  const std::size_t qlen = x.size() + 1 + y.size();
  const auto N = static_cast<std::size_t>(cfg.max_context);
  const auto Q = static_cast<std::size_t>(cfg.query_offset);
  const std::size_t query_limit = Q > 0 ? N - Q : N;
  if (qlen > query_limit) {
    throw LengthError("query of length " + std::to_string(qlen) + " does not fit context " + std::to_string(query_limit));
  }
  const std::size_t demo_budget = Q > 0 ? Q : N - qlen;

  std::size_t used = 0, demo_len = 0;
  for (const auto& d : demos) {
    const std::size_t len = d.prompt.size() + d.response.size() + 2;
    if (demo_len + len > demo_budget) break;
    demo_len += len;
    ++used;
  }

  ScoredSequence s;
  s.tokens.reserve(demo_len + qlen);
  for (std::size_t i = 0; i < used; ++i) {
    s.tokens.insert(s.tokens.end(), demos[i].prompt.begin(), demos[i].prompt.end());
    s.tokens.push_back(sep);
    s.tokens.insert(s.tokens.end(), demos[i].response.begin(), demos[i].response.end());
    s.tokens.push_back(sep);
  }
  s.tokens.insert(s.tokens.end(), x.begin(), x.end());
  s.tokens.push_back(sep);
  s.score_begin = s.tokens.size();
  s.tokens.insert(s.tokens.end(), y.begin(), y.end());
  s.pos0 = static_cast<int>(Q > 0 ? Q - demo_len : 0);
  s.demos_used = used;
  return s;
}

/// Forward pass over a scored sequence, kept for a later backward pass.
struct SequenceEval {
  double logprob = 0.0;
  detail::ForwardCache cache;
};

inline SequenceEval evaluate_sequence(const ModelParams& params, const ScoredSequence& s) {
  SequenceEval ev;
  detail::forward(params, s.tokens, s.pos0, ev.cache);
  const auto V = static_cast<std::size_t>(params.config().vocab);
  for (std::size_t t = s.score_begin; t < s.tokens.size(); ++t) {
    ev.logprob += detail::log_softmax_at(ev.cache.logits.data() + (t - 1) * V, V, s.tokens[t]);
  }
  return ev;
}

/// log pi(scored tokens | prefix).
inline double sequence_logprob(const ModelParams& params, const ScoredSequence& s) {
  return evaluate_sequence(params, s).logprob;
}

/// Accumulates coef * d logprob / d params.
inline void sequence_logprob_backward(const ModelParams& params, const ScoredSequence& s, const SequenceEval& ev,
                                      double coef, Gradients& grads) {
  const auto V = static_cast<std::size_t>(params.config().vocab);
  std::vector<double> dlogits(ev.cache.T * V, 0.0);
  for (std::size_t t = s.score_begin; t < s.tokens.size(); ++t) {
    const double* lg = ev.cache.logits.data() + (t - 1) * V;
    double* dl = dlogits.data() + (t - 1) * V;
    detail::log_softmax_at(lg, V, s.tokens[t], dl);
    for (std::size_t j = 0; j < V; ++j) dl[j] = -coef * dl[j];
    dl[static_cast<std::size_t>(s.tokens[t])] += coef;
  }
  detail::backward(params, ev.cache, dlogits, grads);
}

/// Returns log pi(scored tokens | prefix) and accumulates coef * its gradient.
inline double sequence_logprob_grad(const ModelParams& params, const ScoredSequence& s, double coef, Gradients& grads) {
  auto ev = evaluate_sequence(params, s);
  sequence_logprob_backward(params, s, ev, coef, grads);
  return ev.logprob;
}

// ---------------------------------------------------------------------------
// Losses

inline double nll_loss(const ModelParams& params, const TokenSeq& x, const TokenSeq& y) {
  return -sequence_logprob(params, serialize(params.config(), {}, x, y));
}

/// Response loss with demonstrations prepended; only y positions contribute.
inline double conditional_nll_loss(const ModelParams& params, const DemoSet& demos, const TokenSeq& x, const TokenSeq& y) {
  return -sequence_logprob(params, serialize(params.config(), demos, x, y));
}

/// -log sigmoid(z), stable for large |z|.
inline double neg_log_sigmoid(double z) { return std::log1p(std::exp(-std::abs(z))) + std::max(-z, 0.0); }
inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

enum class LossKind { Sft, Dpo, Simpo };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::Sft: return "sft";
    case LossKind::Dpo: return "dpo";
    case LossKind::Simpo: return "simpo";
  }
  return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "sft") return LossKind::Sft;
  if (s == "dpo") return LossKind::Dpo;
  if (s == "simpo") return LossKind::Simpo;
  throw InvalidArgument("unknown loss kind '" + s + "'");
}

struct LossSpec {
  LossKind kind = LossKind::Sft;
  double beta = 0.1;
  /// SimPO target reward margin.
  double gamma = 0.0;
  /// Frozen reference policy, DPO only. Not owned.
  const ModelParams* reference = nullptr;

  ExampleKind example_kind() const noexcept { return kind == LossKind::Sft ? ExampleKind::Sft : ExampleKind::Pref; }

  void validate() const {
    if (kind != LossKind::Sft && !(beta > 0.0)) throw InvalidArgument("beta must be > 0");
    if (kind == LossKind::Simpo && !(gamma >= 0.0)) throw InvalidArgument("gamma must be >= 0");
    if (kind == LossKind::Dpo && reference == nullptr) throw InvalidArgument("dpo loss requires a reference model");
    if (kind != LossKind::Dpo && reference != nullptr) throw InvalidArgument("only dpo takes a reference model");
  }
};

/// Reference log-probabilities of a preference pair; constant during training.
struct ReferenceLogprobs {
  double chosen = 0.0;
  double rejected = 0.0;
};

inline ReferenceLogprobs reference_logprobs(const ModelParams& ref, const Example& e) {
  return {-nll_loss(ref, e.prompt, e.chosen), -nll_loss(ref, e.prompt, e.rejected)};
}

namespace detail {

struct PreferenceMargin {
  double value;
  double d_chosen;    // d margin / d log pi(y_w)
  double d_rejected;  // d margin / d log pi(y_l)
};

inline PreferenceMargin preference_margin(const LossSpec& spec, double lp_w, double lp_l, std::size_t len_w,
                                          std::size_t len_l, const ReferenceLogprobs& ref) {
  if (spec.kind == LossKind::Dpo) {
    return {spec.beta * ((lp_w - ref.chosen) - (lp_l - ref.rejected)), spec.beta, -spec.beta};
  }
  const double cw = spec.beta / static_cast<double>(len_w);
  const double cl = spec.beta / static_cast<double>(len_l);
  return {cw * lp_w - cl * lp_l - spec.gamma, cw, -cl};
}

inline ReferenceLogprobs resolve_reference(const LossSpec& spec, const Example& e, const ReferenceLogprobs* cached) {
  if (spec.kind != LossKind::Dpo) return {};
  if (cached) return *cached;
  return reference_logprobs(*spec.reference, e);
}

}  // namespace detail

inline double dpo_loss(const ModelParams& params, const ModelParams& ref, const TokenSeq& x, const TokenSeq& y_w,
                       const TokenSeq& y_l, double beta) {
  if (!(beta > 0.0)) throw InvalidArgument("beta must be > 0");
  if (!params.congruent(ref)) throw InvalidArgument("reference parameters are not shape-congruent");
  const double m = beta * ((-nll_loss(params, x, y_w) + nll_loss(ref, x, y_w)) -
                           (-nll_loss(params, x, y_l) + nll_loss(ref, x, y_l)));
  return neg_log_sigmoid(m);
}

inline double simpo_loss(const ModelParams& params, const TokenSeq& x, const TokenSeq& y_w, const TokenSeq& y_l,
                         double beta, double gamma) {
  if (!(beta > 0.0)) throw InvalidArgument("beta must be > 0");
  if (!(gamma >= 0.0)) throw InvalidArgument("gamma must be >= 0");
  const double m = beta / static_cast<double>(y_w.size()) * -nll_loss(params, x, y_w) -
                   beta / static_cast<double>(y_l.size()) * -nll_loss(params, x, y_l) - gamma;
  return neg_log_sigmoid(m);
}

/// Loss of one example under `spec`, optionally conditioned on demonstrations.
/// Conditioning applies to the policy only; a DPO reference stays unconditional.
inline double example_loss(const ModelParams& params, const LossSpec& spec, const Example& e, const DemoSet& demos = {},
                           const ReferenceLogprobs* ref_cache = nullptr) {
  if (e.kind != spec.example_kind()) throw InvalidArgument("example kind does not match loss kind");
  const auto& cfg = params.config();
  if (spec.kind == LossKind::Sft) return -sequence_logprob(params, serialize(cfg, demos, e.prompt, e.response));
  const double lp_w = sequence_logprob(params, serialize(cfg, demos, e.prompt, e.chosen));
  const double lp_l = sequence_logprob(params, serialize(cfg, demos, e.prompt, e.rejected));
  const auto ref = detail::resolve_reference(spec, e, ref_cache);
  return neg_log_sigmoid(detail::preference_margin(spec, lp_w, lp_l, e.chosen.size(), e.rejected.size(), ref).value);
}

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

/// Exact reverse-mode gradient of example_loss with respect to `params`.
/// Never differentiates the reference model.
inline double accumulate_loss_grad(const ModelParams& params, const LossSpec& spec, const Example& e, Gradients& grads,
                                   const DemoSet& demos = {}, const ReferenceLogprobs* ref_cache = nullptr) {
  if (e.kind != spec.example_kind()) throw InvalidArgument("example kind does not match loss kind");
  if (!grads.congruent(params)) throw InvalidArgument("gradient buffer is not shape-congruent");
  const auto& cfg = params.config();
  if (spec.kind == LossKind::Sft) {
    return -sequence_logprob_grad(params, serialize(cfg, demos, e.prompt, e.response), -1.0, grads);
  }
  const auto sw = serialize(cfg, demos, e.prompt, e.chosen);
  const auto sl = serialize(cfg, demos, e.prompt, e.rejected);
  const auto ew = evaluate_sequence(params, sw);
  const auto el = evaluate_sequence(params, sl);
  const auto ref = detail::resolve_reference(spec, e, ref_cache);
  const auto m = detail::preference_margin(spec, ew.logprob, el.logprob, e.chosen.size(), e.rejected.size(), ref);
  const double dloss_dm = -sigmoid(-m.value);
  sequence_logprob_backward(params, sw, ew, dloss_dm * m.d_chosen, grads);
  sequence_logprob_backward(params, sl, el, dloss_dm * m.d_rejected, grads);
  return neg_log_sigmoid(m.value);
}

inline LossAndGrad loss_and_grad(const ModelParams& params, const LossSpec& spec, const Example& e,
                                 const DemoSet& demos = {}, const ReferenceLogprobs* ref_cache = nullptr) {
  LossAndGrad out{0.0, zero_gradients_like(params)};
  out.loss = accumulate_loss_grad(params, spec, e, out.grads, demos, ref_cache);
  return out;
}

}  // namespace ica
