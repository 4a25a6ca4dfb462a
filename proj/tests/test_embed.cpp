#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "ica/corpus.hpp"
#include "ica/embed.hpp"
#include "test_util.hpp"

using namespace ica;

namespace {

EmbedIndex index_of(std::vector<std::vector<double>> vs) {
  EmbedIndex idx;
  for (std::size_t i = 0; i < vs.size(); ++i) idx.entries.push_back({i, Embedding{std::move(vs[i])}});
  return idx;
}

Dataset random_holdout(std::size_t n, std::uint64_t seed) {
  GenConfig c;
  c.train_size = 4;
  c.holdout_size = n;
  c.test_size = 1;
  c.min_len = 3;
  c.max_len = 7;
  c.char_pool = 6;  // many collisions, many ties
  return generate_synthetic_sft(c, seed).holdout;
}

}  // namespace

TEST(Embed, DirectArithmetic) {
  const auto e = embed_tokens({0, 1, 0}, 3);
  ASSERT_EQ(e.values.size(), 3u);
  EXPECT_NEAR(e.values[0], 2.0 / std::sqrt(5.0), 1e-15);
  EXPECT_NEAR(e.values[1], 1.0 / std::sqrt(5.0), 1e-15);
  EXPECT_EQ(e.values[2], 0.0);
}

TEST(Embed, PermutationInvariantAndUnitNorm) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    auto s = ica::testing::random_tokens(rng, 1 + rng() % 12, 31);
    const auto a = embed_tokens(s, 32);
    std::shuffle(s.begin(), s.end(), rng);
    EXPECT_EQ(embed_tokens(s, 32), a);
    EXPECT_NEAR(std::sqrt(dot(a, a)), 1.0, 1e-9);
    EXPECT_NEAR(cosine(a, a), 1.0, 1e-12);
  }
}

TEST(Embed, EmptyIsZero) {
  const auto e = embed_tokens({}, 4);
  EXPECT_EQ(e.values, std::vector<double>(4, 0.0));
  EXPECT_EQ(cosine(e, embed_tokens({1}, 4)), 0.0);
}

TEST(Embed, ExampleUsesPromptAndTarget) {
  const auto sft = ica::testing::sft_example({0, 1}, {2});
  EXPECT_EQ(embed_example(sft, 4), embed_tokens({0, 1, 2}, 4));
  const auto pref = ica::testing::pref_example({0, 1}, {2}, {3, 3});
  EXPECT_EQ(embed_example(pref, 4), embed_tokens({0, 1, 2}, 4));
}

TEST(BuildIndex, OneEntryPerExample) {
  const auto h = random_holdout(25, 2);
  const auto idx = build_index(h, 32);
  ASSERT_EQ(idx.size(), 25u);
  for (std::size_t i = 0; i < h.size(); ++i) {
    EXPECT_EQ(idx.entries[i].id, i);
    EXPECT_EQ(idx.entries[i].embedding, embed_example(h[i], 32));
  }
  const auto again = build_index(h, 32);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(again.entries[i].embedding, idx.entries[i].embedding);
  EXPECT_THROW(build_index(Dataset{}, 32), InvalidArgument);
}

TEST(Knn, CosineArithmetic) {
  const auto idx = index_of({{1, 0}, {0, 1}, {0.6, 0.8}});
  const auto nb = knn(idx, Embedding{{1, 0}}, 2);
  ASSERT_EQ(nb.size(), 2u);
  EXPECT_EQ(nb[0].id, 0u);
  EXPECT_EQ(nb[1].id, 2u);
  EXPECT_NEAR(nb[0].similarity, 1.0, 1e-15);
  EXPECT_NEAR(nb[1].similarity, 0.6, 1e-15);
}

TEST(Knn, ClampsAndOrdersEverything) {
  const auto idx = index_of({{1, 0}, {0, 1}, {0.6, 0.8}});
  const auto nb = knn(idx, Embedding{{1, 0}}, 10);
  ASSERT_EQ(nb.size(), 3u);
  EXPECT_EQ(nb[2].id, 1u);
  EXPECT_THROW(knn(idx, Embedding{{1, 0}}, 0), InvalidArgument);
}

TEST(Knn, ZeroQueryUsesIdOrder) {
  const auto idx = index_of({{1, 0}, {0, 1}, {0.6, 0.8}});
  const auto nb = knn(idx, Embedding{{0, 0}}, 3);
  EXPECT_EQ(nb[0].id, 0u);
  EXPECT_EQ(nb[1].id, 1u);
  EXPECT_EQ(nb[2].id, 2u);
}

TEST(Knn, SelfRanksFirst) {
  const auto h = random_holdout(40, 3);
  const auto idx = build_index(h, 32);
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto nb = knn(idx, embed_example(h[i], 32), 1);
    // A duplicate with a lower id may tie; similarity must be maximal either way.
    EXPECT_NEAR(nb[0].similarity, 1.0, 1e-12);
    EXPECT_LE(nb[0].id, i);
  }
}

TEST(Knn, Properties) {
  const auto h = random_holdout(60, 4);
  const auto idx = build_index(h, 32);
  std::mt19937_64 rng(5);
  for (int q = 0; q < 30; ++q) {
    const auto query = embed_tokens(ica::testing::random_tokens(rng, 5, 6), 32);
    const auto full = knn(idx, query, idx.size());
    for (std::size_t i = 1; i < full.size(); ++i) {
      ASSERT_GE(full[i - 1].similarity, full[i].similarity);
      if (full[i - 1].similarity == full[i].similarity) {
        ASSERT_LT(full[i - 1].id, full[i].id);
      }
    }
    // Prefix stability in k.
    for (std::size_t k = 1; k <= 10; ++k) {
      const auto part = knn(idx, query, k);
      ASSERT_TRUE(std::equal(part.begin(), part.end(), full.begin()));
    }
    // Invariance to index entry order.
    auto shuffled = idx;
    std::shuffle(shuffled.entries.begin(), shuffled.entries.end(), rng);
    ASSERT_EQ(knn(shuffled, query, 7), knn(idx, query, 7));
  }
}

TEST(DemoSelector, DemosFollowNeighbors) {
  const auto h = random_holdout(20, 6);
  DemoSelector sel(h, 32, 3);
  const auto cand = ica::testing::sft_example({1, 2, 3}, {3, 2, 1});
  const auto nb = sel.neighbors(cand);
  const auto demos = sel.demos(cand);
  ASSERT_EQ(demos.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(demos[i].prompt, h[nb[i].id].prompt);
    EXPECT_EQ(demos[i].response, h[nb[i].id].response);
  }
}

TEST(DemoSelector, CacheReturnsSameNeighbors) {
  const auto h = random_holdout(20, 7);
  DemoSelector cached(h, 32, 4, true), fresh(h, 32, 4, false);
  const auto cand = ica::testing::sft_example({0, 4}, {4, 0});
  EXPECT_EQ(cached.neighbors(cand, 3), fresh.neighbors(cand));
  EXPECT_EQ(cached.neighbors(cand, 3), fresh.neighbors(cand));
}

TEST(DemoSelector, CsvDump) {
  ica::testing::TempDir dir;
  const auto h = random_holdout(10, 8);
  DemoSelector sel(h, 32, 2);
  write_demo_csv(dir.file("demos.csv"), h, sel);
  const auto text = ica::testing::slurp(dir.file("demos.csv"));
  EXPECT_EQ(text.rfind("train_id,demo_ids,similarities\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 11);
}
