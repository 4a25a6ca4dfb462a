#pragma once

// Bag-of-tokens example embeddings and exhaustive cosine kNN over the holdout
// set, used to pick in-context demonstrations per candidate.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ica/corpus.hpp"
#include "ica/error.hpp"
#include "ica/model.hpp"

namespace ica {

/// Unit-norm (or all-zero) vector of length V.
struct Embedding {
  std::vector<double> values;

  friend bool operator==(const Embedding&, const Embedding&) = default;
};

inline double dot(const Embedding& a, const Embedding& b) {
  if (a.values.size() != b.values.size()) throw InvalidArgument("embedding dimensions differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * b.values[i];
  return s;
}

/// Cosine similarity; zero when either side is the zero vector.
inline double cosine(const Embedding& a, const Embedding& b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline Embedding embed_tokens(const TokenSeq& tokens, int vocab) {
  Embedding e{std::vector<double>(static_cast<std::size_t>(vocab), 0.0)};
  for (Token t : tokens) {
    if (t < 0 || t >= vocab) throw InvalidArgument("token id out of vocabulary");
    e.values[static_cast<std::size_t>(t)] += 1.0;
  }
  double norm = 0.0;
  for (double v : e.values) norm += v * v;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& v : e.values) v /= norm;
  }
  return e;
}

/// L2-normalized token counts of prompt+response (prompt+chosen for preference pairs).
inline Embedding embed_example(const Example& e, int vocab) {
  TokenSeq all = e.prompt;
  const auto& tgt = e.target();
  all.insert(all.end(), tgt.begin(), tgt.end());
  return embed_tokens(all, vocab);
}

struct IndexEntry {
  std::size_t id;
  Embedding embedding;
};

struct EmbedIndex {
  std::vector<IndexEntry> entries;

  std::size_t size() const noexcept { return entries.size(); }
};

inline EmbedIndex build_index(const Dataset& holdout, int vocab) {
  if (holdout.empty()) throw InvalidArgument("cannot index an empty holdout set");
  EmbedIndex idx;
  idx.entries.reserve(holdout.size());
  for (std::size_t i = 0; i < holdout.size(); ++i) idx.entries.push_back({i, embed_example(holdout[i], vocab)});
  return idx;
}

struct Neighbor {
  std::size_t id;
  double similarity;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// The min(k, |index|) most similar entries, by descending cosine similarity;
/// ties go to the lower holdout id.
inline std::vector<Neighbor> knn(const EmbedIndex& index, const Embedding& query, std::size_t k) {
  if (k == 0) throw InvalidArgument("k must be >= 1");
  std::vector<Neighbor> all;
  all.reserve(index.size());
  for (const auto& e : index.entries) all.push_back({e.id, cosine(query, e.embedding)});
  auto better = [](const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.id < b.id;
  };
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), better);
  all.resize(k);
  return all;
}

inline DemoSet make_demos(const std::vector<Neighbor>& neighbors, const Dataset& holdout) {
  DemoSet demos;
  demos.reserve(neighbors.size());
  for (const auto& n : neighbors) {
    const auto& e = holdout.examples.at(n.id);
    demos.push_back({e.prompt, e.target()});
  }
  return demos;
}

/// Per-candidate demonstration lookup over a fixed holdout set. With caching
/// on, each candidate's neighbor list is computed once and reused.
class DemoSelector {
 public:
  DemoSelector(const Dataset& holdout, int vocab, std::size_t k, bool cache = false)
      : holdout_(&holdout), vocab_(vocab), k_(k), index_(build_index(holdout, vocab)), cache_enabled_(cache) {}

  const EmbedIndex& index() const noexcept { return index_; }
  std::size_t k() const noexcept { return k_; }

  std::vector<Neighbor> neighbors(const Example& candidate, std::optional<std::size_t> cache_key = std::nullopt) {
    if (cache_enabled_ && cache_key) {
      if (*cache_key >= cache_.size()) cache_.resize(*cache_key + 1);
      auto& slot = cache_[*cache_key];
      if (!slot) slot = knn(index_, embed_example(candidate, vocab_), k_);
      return *slot;
    }
    return knn(index_, embed_example(candidate, vocab_), k_);
  }

  DemoSet demos(const Example& candidate, std::optional<std::size_t> cache_key = std::nullopt) {
    return make_demos(neighbors(candidate, cache_key), *holdout_);
  }

 private:
  const Dataset* holdout_;
  int vocab_;
  std::size_t k_;
  EmbedIndex index_;
  bool cache_enabled_;
  std::vector<std::optional<std::vector<Neighbor>>> cache_;
};

/// CSV: train_id,demo_ids,similarities (ids and similarities ';'-joined).
inline void write_demo_csv(const std::string& path, const Dataset& train, DemoSelector& selector) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path);
  out << "train_id,demo_ids,similarities\n";
  out.precision(17);
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto nb = selector.neighbors(train[i]);
    out << i << ',';
    for (std::size_t j = 0; j < nb.size(); ++j) out << (j ? ";" : "") << nb[j].id;
    out << ',';
    for (std::size_t j = 0; j < nb.size(); ++j) out << (j ? ";" : "") << nb[j].similarity;
    out << '\n';
  }
}

}  // namespace ica
