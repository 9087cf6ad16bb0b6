#include <cmath>
#include <cstdio>
#include <vector>

#include "doctest.h"
#include "retroseq/embedder.hpp"
#include "retroseq/rng.hpp"

using namespace retroseq;

namespace {

double l2(const Embedding& a, const Embedding& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return std::sqrt(s);
}

std::vector<std::uint32_t> random_ids(Rng& rng, std::size_t n, std::uint32_t vocab) {
  std::vector<std::uint32_t> ids(n);
  for (auto& t : ids) t = 4 + static_cast<std::uint32_t>(rng.below(vocab));
  return ids;
}

}  // namespace

TEST_CASE("hashed embedder contract") {
  HashedEmbedder emb;
  Rng rng(1);
  const auto ids = random_ids(rng, 14, 300);

  SUBCASE("deterministic, unit norm, fixed dimension") {
    const Embedding a = emb.embed_code(ids);
    const Embedding b = HashedEmbedder().embed_code(ids);
    CHECK(a == b);
    REQUIRE(a.size() == kDefaultEmbeddingDim);
    double n = 0;
    for (float x : a) n += double(x) * x;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    const Embedding c = emb.embed_intent(ids);
    CHECK(c == emb.embed_intent(ids));
    double ni = 0;
    for (float x : c) ni += double(x) * x;
    CHECK(std::abs(std::sqrt(ni) - 1.0) < 1e-6);
  }
  SUBCASE("code and intent spaces differ; the id seeds the projection") {
    CHECK(emb.embed_code(ids) != emb.embed_intent(ids));
    CHECK(HashedEmbedder("other").embed_code(ids) != emb.embed_code(ids));
  }
  SUBCASE("padding is ignored and empty input is rejected") {
    auto padded = ids;
    padded.insert(padded.end(), 3, 0u);
    CHECK(emb.embed_code(padded) == emb.embed_code(ids));
    CHECK_THROWS_AS(emb.embed_code(std::vector<std::uint32_t>{}), std::invalid_argument);
    CHECK_THROWS_AS(emb.embed_code(std::vector<std::uint32_t>{0, 0}), std::invalid_argument);
  }
}

TEST_CASE("a snippet is its own nearest neighbour among 100") {
  HashedEmbedder emb;
  Rng rng(7);
  std::vector<std::vector<std::uint32_t>> pool;
  for (int i = 0; i < 100; ++i) pool.push_back(random_ids(rng, 6 + rng.below(12), 200));
  for (std::size_t probe = 0; probe < pool.size(); ++probe) {
    const Embedding q = emb.embed_code(pool[probe]);
    std::size_t best = 0;
    double best_d = 1e9;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      const double d = l2(q, emb.embed_code(pool[j]));
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    CHECK(best == probe);
    CHECK(best_d == 0.0);
  }
}

TEST_CASE("paraphrased intents are mutually nearer than unrelated intents") {
  HashedEmbedder emb;
  Rng rng(11);
  std::vector<std::vector<std::uint32_t>> intents;
  for (int i = 0; i < 25; ++i) {
    auto base = random_ids(rng, 10, 400);
    auto para = base;
    // Swap one or two tokens: at least 80% shared.
    const std::size_t swaps = 1 + rng.below(2);
    for (std::size_t s = 0; s < swaps; ++s) para[rng.below(para.size())] = 4 + 400 + static_cast<std::uint32_t>(rng.below(50));
    intents.push_back(base);
    intents.push_back(para);
  }
  REQUIRE(intents.size() == 50);
  std::vector<Embedding> e;
  for (const auto& t : intents) e.push_back(emb.embed_intent(t));
  std::size_t violations = 0;
  for (std::size_t p = 0; p < 50; p += 2) {
    const double dp = l2(e[p], e[p + 1]);
    for (std::size_t u = 0; u < 50; ++u) {
      if (u / 2 == p / 2) continue;
      if (l2(e[p], e[u]) <= dp || l2(e[p + 1], e[u]) <= dp) ++violations;
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("precomputed embedding file") {
  const std::string path = "precomputed_test.bin";
  const std::vector<std::uint32_t> a{5, 6, 7}, b{9};
  Embedding va(4), vb(4);
  for (int i = 0; i < 4; ++i) {
    va[i] = 0.5f * i;
    vb[i] = -1.0f - i;
  }
  PrecomputedEmbedder::write(path, {{sequence_hash(a), va}, {sequence_hash(b), vb}});
  auto emb = make_embedder("precomputed:" + path, 4);
  std::remove(path.c_str());
  CHECK(emb->dim() == 4);
  CHECK(emb->embed_code(a) == va);
  CHECK(emb->embed_intent(b) == vb);
  CHECK_THROWS_AS(emb->embed_code(std::vector<std::uint32_t>{1, 2}), std::out_of_range);
  CHECK(sequence_hash(a) != sequence_hash(b));
  CHECK(sequence_hash(std::vector<std::uint32_t>{1, 2}) != sequence_hash(std::vector<std::uint32_t>{2, 1}));
}
