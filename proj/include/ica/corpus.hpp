#pragma once

// Token-level data model, synthetic dataset generation, and JSONL I/O.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ica/error.hpp"

namespace ica {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

inline constexpr std::string_view kDefaultAlphabet = "abcdefghijklmnopqrstuvwxyz01234";

/// Character-level tokenizer over a fixed alphabet. Token ids follow alphabet
/// order; one extra id (the last) is reserved as the field separator.
class Tokenizer {
 public:
  explicit Tokenizer(std::string alphabet = std::string(kDefaultAlphabet)) : alphabet_(std::move(alphabet)) {
    if (alphabet_.empty()) throw InvalidArgument("tokenizer alphabet is empty");
    lookup_.fill(-1);
    for (std::size_t i = 0; i < alphabet_.size(); ++i) {
      auto c = static_cast<unsigned char>(alphabet_[i]);
      if (lookup_[c] != -1) throw InvalidArgument(std::string("duplicate alphabet character '") + alphabet_[i] + "'");
      lookup_[c] = static_cast<Token>(i);
    }
  }

  const std::string& alphabet() const noexcept { return alphabet_; }
  int vocab_size() const noexcept { return static_cast<int>(alphabet_.size()) + 1; }
  Token separator() const noexcept { return static_cast<Token>(alphabet_.size()); }

  TokenSeq tokenize(std::string_view text) const {
    TokenSeq out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      Token t = lookup_[static_cast<unsigned char>(text[i])];
      if (t < 0) {
        throw InvalidArgument("unknown character '" + std::string(1, text[i]) + "' at position " + std::to_string(i));
      }
      out.push_back(t);
    }
    return out;
  }

  std::string detokenize(const TokenSeq& tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
      if (t == separator()) {
        out.push_back('|');
      } else if (t >= 0 && static_cast<std::size_t>(t) < alphabet_.size()) {
        out.push_back(alphabet_[static_cast<std::size_t>(t)]);
      } else {
        throw InvalidArgument("token id " + std::to_string(t) + " out of range");
      }
    }
    return out;
  }

 private:
  std::string alphabet_;
  std::array<Token, 256> lookup_{};
};

enum class ExampleKind { Sft, Pref };

inline const char* to_string(ExampleKind k) { return k == ExampleKind::Sft ? "sft" : "pref"; }

inline ExampleKind example_kind_from_string(std::string_view s) {
  if (s == "sft") return ExampleKind::Sft;
  if (s == "pref") return ExampleKind::Pref;
  throw InvalidArgument("unknown example kind '" + std::string(s) + "'");
}

/// One training unit: an instruction-response pair or a preference triple.
struct Example {
  ExampleKind kind = ExampleKind::Sft;
  TokenSeq prompt;
  TokenSeq response;  // Sft only
  TokenSeq chosen;    // Pref only
  TokenSeq rejected;  // Pref only
  std::optional<int> domain;
  // Generator metadata. Scorers never read it.
  bool corrupted = false;

  /// The target the example teaches: response for Sft, chosen for Pref.
  const TokenSeq& target() const noexcept { return kind == ExampleKind::Sft ? response : chosen; }

  void validate() const {
    if (prompt.empty()) throw InvalidArgument("example prompt is empty");
    if (kind == ExampleKind::Sft) {
      if (response.empty()) throw InvalidArgument("sft example has empty response");
      if (!chosen.empty() || !rejected.empty()) throw InvalidArgument("sft example carries chosen/rejected");
    } else {
      if (chosen.empty() || rejected.empty()) throw InvalidArgument("pref example needs chosen and rejected");
      if (!response.empty()) throw InvalidArgument("pref example carries a response");
    }
  }

  friend bool operator==(const Example&, const Example&) = default;
};

/// Homogeneous, index-stable list of examples.
struct Dataset {
  ExampleKind kind = ExampleKind::Sft;
  std::vector<Example> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }
  const Example& operator[](std::size_t i) const { return examples[i]; }

  void push_back(Example e) {
    if (e.kind != kind) throw InvalidArgument("dataset mixes example kinds");
    e.validate();
    examples.push_back(std::move(e));
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic tasks

/// String transforms that define the synthetic tasks. Domain g uses transform g.
enum class Transform { Reverse = 0, ShiftLeft = 1, Sort = 2, Duplicate = 3, Identity = 4 };
inline constexpr int kNumTransforms = 5;

inline TokenSeq apply_transform(Transform t, const TokenSeq& s) {
  TokenSeq out = s;
  switch (t) {
    case Transform::Reverse:
      std::reverse(out.begin(), out.end());
      break;
    case Transform::ShiftLeft:
      if (!out.empty()) std::rotate(out.begin(), out.begin() + 1, out.end());
      break;
    case Transform::Sort:
      std::sort(out.begin(), out.end());
      break;
    case Transform::Duplicate:
      out.insert(out.end(), s.begin(), s.end());
      break;
    case Transform::Identity:
      break;
  }
  return out;
}

enum class Scenario { Noise, Domain };

struct GenConfig {
  Scenario scenario = Scenario::Noise;
  std::size_t train_size = 512;
  std::size_t holdout_size = 64;
  std::size_t test_size = 64;
  double noise_rate = 0.3;
  int num_domains = 4;
  int target_domain = 0;
  int min_len = 5;
  int max_len = 5;
  /// Prompts draw from the first `char_pool` alphabet characters.
  int char_pool = 16;

  void validate(const Tokenizer& tok) const {
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw InvalidArgument("noise rate must lie in [0,1]");
    if (num_domains < 1 || num_domains > kNumTransforms) {
      throw InvalidArgument("num_domains must be in [1," + std::to_string(kNumTransforms) + "]");
    }
    if (target_domain < 0 || target_domain >= num_domains) throw InvalidArgument("target_domain out of range");
    if (min_len < 1 || max_len < min_len) throw InvalidArgument("invalid string length range");
    if (char_pool < 2 || char_pool > static_cast<int>(tok.alphabet().size())) {
      throw InvalidArgument("char_pool must be in [2, alphabet size]");
    }
    if (scenario == Scenario::Domain && train_size % static_cast<std::size_t>(num_domains) != 0) {
      throw InvalidArgument("domain scenario needs train_size divisible by num_domains");
    }
  }
};

struct SplitDatasets {
  Dataset train;
  Dataset holdout;
  Dataset test;
};

/// Number of flagged train examples for a rate; floor with a guard against
/// representation error (0.3 * 200 must give 60).
inline std::size_t corruption_count(double rate, std::size_t n) {
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
}

namespace detail {

using Rng = std::mt19937_64;

inline TokenSeq random_string(Rng& rng, const GenConfig& cfg) {
  std::uniform_int_distribution<int> len_dist(cfg.min_len, cfg.max_len);
  std::uniform_int_distribution<Token> ch(0, cfg.char_pool - 1);
  TokenSeq s(static_cast<std::size_t>(len_dist(rng)));
  for (auto& t : s) t = ch(rng);
  return s;
}

/// Substitutes ceil(|s|/2) positions with a different pool character.
inline TokenSeq corrupt(Rng& rng, const TokenSeq& s, int char_pool) {
  TokenSeq out = s;
  std::vector<std::size_t> pos(s.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  std::shuffle(pos.begin(), pos.end(), rng);
  std::size_t n = (s.size() + 1) / 2;
  std::uniform_int_distribution<Token> off(1, char_pool - 1);
  for (std::size_t i = 0; i < n; ++i) {
    Token& t = out[pos[i]];
    t = static_cast<Token>((t + off(rng)) % char_pool);
  }
  return out;
}

inline std::vector<bool> corruption_flags(Rng& rng, std::size_t n, double rate) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> flags(n, false);
  std::size_t m = corruption_count(rate, n);
  for (std::size_t i = 0; i < m; ++i) flags[order[i]] = true;
  return flags;
}

inline Transform transform_for(const GenConfig& cfg, int domain) {
  return cfg.scenario == Scenario::Noise ? Transform::Reverse : static_cast<Transform>(domain);
}

struct RawItem {
  TokenSeq prompt;
  TokenSeq clean;
  std::optional<int> domain;
};

inline std::vector<RawItem> raw_split(Rng& rng, const GenConfig& cfg, std::size_t n, bool is_train) {
  std::vector<RawItem> items;
  items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    int domain = cfg.target_domain;
    if (cfg.scenario == Scenario::Domain && is_train) domain = static_cast<int>(i % static_cast<std::size_t>(cfg.num_domains));
    RawItem it;
    it.prompt = random_string(rng, cfg);
    it.clean = apply_transform(transform_for(cfg, domain), it.prompt);
    if (cfg.scenario == Scenario::Domain) it.domain = domain;
    items.push_back(std::move(it));
  }
  return items;
}

}  // namespace detail

/// Instruction-response datasets. NOISE: reversal task, floor(rate*|train|)
/// train responses corrupted. DOMAIN: train spans the first G transforms in
/// equal counts, uncorrupted; holdout/test use only the target domain.
inline SplitDatasets generate_synthetic_sft(const GenConfig& cfg, std::uint64_t seed, const Tokenizer& tok = Tokenizer()) {
  cfg.validate(tok);
  detail::Rng rng(seed);
  SplitDatasets out;
  out.train.kind = out.holdout.kind = out.test.kind = ExampleKind::Sft;

  auto make_split = [&](Dataset& ds, std::size_t n, bool is_train) {
    auto items = detail::raw_split(rng, cfg, n, is_train);
    std::vector<bool> flags(n, false);
    if (is_train && cfg.scenario == Scenario::Noise) flags = detail::corruption_flags(rng, n, cfg.noise_rate);
    for (std::size_t i = 0; i < n; ++i) {
      Example e;
      e.kind = ExampleKind::Sft;
      e.prompt = std::move(items[i].prompt);
      e.domain = items[i].domain;
      e.corrupted = flags[i];
      e.response = flags[i] ? detail::corrupt(rng, items[i].clean, cfg.char_pool) : std::move(items[i].clean);
      ds.push_back(std::move(e));
    }
  };
  make_split(out.train, cfg.train_size, true);
  make_split(out.holdout, cfg.holdout_size, false);
  make_split(out.test, cfg.test_size, false);
  return out;
}

/// Preference datasets: chosen is the clean transform output, rejected a
/// corrupted copy. Flagged train examples have the two swapped.
inline SplitDatasets generate_synthetic_pref(const GenConfig& cfg, std::uint64_t seed, const Tokenizer& tok = Tokenizer()) {
  cfg.validate(tok);
  detail::Rng rng(seed);
  SplitDatasets out;
  out.train.kind = out.holdout.kind = out.test.kind = ExampleKind::Pref;

  auto make_split = [&](Dataset& ds, std::size_t n, bool is_train) {
    auto items = detail::raw_split(rng, cfg, n, is_train);
    std::vector<bool> flags(n, false);
    if (is_train && cfg.scenario == Scenario::Noise) flags = detail::corruption_flags(rng, n, cfg.noise_rate);
    for (std::size_t i = 0; i < n; ++i) {
      Example e;
      e.kind = ExampleKind::Pref;
      e.prompt = std::move(items[i].prompt);
      e.domain = items[i].domain;
      e.corrupted = flags[i];
      TokenSeq bad = detail::corrupt(rng, items[i].clean, cfg.char_pool);
      if (flags[i]) {
        e.chosen = std::move(bad);
        e.rejected = std::move(items[i].clean);
      } else {
        e.chosen = std::move(items[i].clean);
        e.rejected = std::move(bad);
      }
      ds.push_back(std::move(e));
    }
  };
  make_split(out.train, cfg.train_size, true);
  make_split(out.holdout, cfg.holdout_size, false);
  make_split(out.test, cfg.test_size, false);
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::ordered_json to_json(const Example& e, const Tokenizer& tok) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(e.kind);
  j["prompt"] = tok.detokenize(e.prompt);
  if (e.kind == ExampleKind::Sft) {
    j["response"] = tok.detokenize(e.response);
  } else {
    j["chosen"] = tok.detokenize(e.chosen);
    j["rejected"] = tok.detokenize(e.rejected);
  }
  if (e.domain) j["domain"] = *e.domain;
  j["corrupted"] = e.corrupted;
  return j;
}

inline Example example_from_json(const nlohmann::json& j, const Tokenizer& tok) {
  static constexpr std::array<std::string_view, 7> kFields = {"kind", "prompt", "response", "chosen", "rejected", "domain", "corrupted"};
  if (!j.is_object()) throw InvalidArgument("record is not an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(kFields.begin(), kFields.end(), key) == kFields.end()) throw InvalidArgument("unknown field \"" + key + "\"");
  }
  auto text = [&](const char* field) -> TokenSeq {
    if (!j.contains(field)) throw InvalidArgument(std::string("missing \"") + field + "\"");
    if (!j.at(field).is_string()) throw InvalidArgument(std::string("\"") + field + "\" is not a string");
    return tok.tokenize(j.at(field).get<std::string>());
  };
  if (!j.contains("kind") || !j.at("kind").is_string()) throw InvalidArgument("missing \"kind\"");
  Example e;
  e.kind = example_kind_from_string(j.at("kind").get<std::string>());
  e.prompt = text("prompt");
  if (e.kind == ExampleKind::Sft) {
    e.response = text("response");
    if (j.contains("chosen") || j.contains("rejected")) throw InvalidArgument("sft record carries chosen/rejected");
  } else {
    e.chosen = text("chosen");
    e.rejected = text("rejected");
    if (j.contains("response")) throw InvalidArgument("pref record carries response");
  }
  if (j.contains("domain") && !j.at("domain").is_null()) {
    if (!j.at("domain").is_number_integer()) throw InvalidArgument("\"domain\" is not an integer");
    e.domain = j.at("domain").get<int>();
  }
  if (j.contains("corrupted")) {
    if (!j.at("corrupted").is_boolean()) throw InvalidArgument("\"corrupted\" is not a boolean");
    e.corrupted = j.at("corrupted").get<bool>();
  }
  e.validate();
  return e;
}

inline void save_jsonl(const Dataset& ds, const std::string& path, const Tokenizer& tok = Tokenizer()) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const auto& e : ds.examples) out << to_json(e, tok).dump() << '\n';
  if (!out) throw Error("write failed: " + path);
}

/// Reads one record per line. An empty file yields an empty dataset of
/// `declared` kind; a non-empty file must agree with `declared` when given.
inline Dataset load_jsonl(const std::string& path, const Tokenizer& tok = Tokenizer(),
                          std::optional<ExampleKind> declared = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  Dataset ds;
  ds.kind = declared.value_or(ExampleKind::Sft);
  bool kind_fixed = declared.has_value();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    Example e;
    try {
      e = example_from_json(nlohmann::json::parse(line), tok);
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(ex.what(), lineno);
    } catch (const InvalidArgument& ex) {
      throw ParseError(ex.what(), lineno);
    }
    if (!kind_fixed) {
      ds.kind = e.kind;
      kind_fixed = true;
    } else if (e.kind != ds.kind) {
      throw ParseError(std::string("mixed kinds: expected ") + to_string(ds.kind) + ", got " + to_string(e.kind), lineno);
    }
    ds.examples.push_back(std::move(e));
  }
  return ds;
}

}  // namespace ica
