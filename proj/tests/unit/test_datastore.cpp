#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "datastore_fixtures.hpp"
#include "doctest.h"
#include "retroseq/binio.hpp"
#include "retroseq/datastore.hpp"
#include "retroseq/lexer.hpp"
#include "retroseq/normalizer.hpp"

using namespace retroseq;

namespace {

std::vector<std::uint32_t> iota_ids(std::size_t n, std::uint32_t first = 10) {
  std::vector<std::uint32_t> v(n);
  std::iota(v.begin(), v.end(), first);
  return v;
}

std::vector<std::uint32_t> slice(const std::vector<std::uint32_t>& v, std::size_t a, std::size_t b,
                                 std::size_t m) {
  std::vector<std::uint32_t> out(m, kPad);
  for (std::size_t i = a; i < b && i < v.size(); ++i) out[i - a] = v[i];
  return out;
}

}  // namespace

TEST_CASE("chunk_sequence") {
  const auto t16 = iota_ids(16);
  auto c = chunk_sequence(t16, 8);
  REQUIRE(c.size() == 2);
  CHECK(c[0].neighbour == slice(t16, 0, 8, 8));
  CHECK(c[0].continuation == slice(t16, 8, 16, 8));
  CHECK(c[1].neighbour == slice(t16, 8, 16, 8));
  CHECK(c[1].continuation == std::vector<std::uint32_t>(8, kPad));

  c = chunk_sequence(iota_ids(8), 8);
  REQUIRE(c.size() == 1);
  CHECK(c[0].continuation == std::vector<std::uint32_t>(8, kPad));

  const auto t20 = iota_ids(20);
  c = chunk_sequence(t20, 8);
  REQUIRE(c.size() == 3);
  CHECK(c[2].neighbour == slice(t20, 16, 20, 8));
  CHECK(c[2].continuation == std::vector<std::uint32_t>(8, kPad));
  CHECK(c[1].continuation == slice(t20, 16, 20, 8));

  CHECK_THROWS_AS(chunk_sequence(std::vector<std::uint32_t>{}, 8), std::invalid_argument);
  CHECK_THROWS_AS(chunk_sequence(t16, 0), std::invalid_argument);
}

TEST_CASE("build_classic") {
  HashedEmbedder emb;
  SUBCASE("one 16-token snippet at m=8 gives two entries") {
    Vocab vocab;
    const std::string snippet = "x = foo(a, b, c, d, e) + 1";
    REQUIRE(code_tokens(snippet).size() == 16);
    const Database db = build_classic({snippet}, 8, false, emb, vocab);
    CHECK(db.size() == 2);
    CHECK(db.mode() == DbMode::classic);
    for (const auto& e : db.entries()) CHECK(e.key == emb.embed_code(e.neighbour));
  }
  SUBCASE("normalized keys are computed over placeholder forms") {
    Vocab vocab;
    const std::vector<std::string> table = {"json.dumps(geodata)", "getattr(a, 'print_test')()",
                                            "format(5e-10, 'f')"};
    BuildReport rep;
    const Database db = build_classic(table, 8, true, emb, vocab, &rep);
    CHECK(rep.skipped == 0);
    CHECK(vocab.contains("var0"));
    CHECK(vocab.contains("'var1'"));
    CHECK_FALSE(vocab.contains("geodata"));
    CHECK_FALSE(vocab.contains("'print_test'"));
    std::size_t i = 0;
    for (const auto& s : table) {
      const auto ids = vocab.encode(code_tokens(normalize_snippet(s).code));
      for (const auto& body : chunk_sequence(ids, 8)) {
        REQUIRE(i < db.size());
        CHECK(db.entry(i).neighbour == body.neighbour);
        CHECK(db.entry(i).key == emb.embed_code(body.neighbour));
        ++i;
      }
    }
    CHECK(i == db.size());
  }
  SUBCASE("entry count equals the sum of per-snippet chunk counts") {
    Vocab vocab;
    Rng rng(3);
    std::vector<std::string> snippets;
    std::size_t expected = 0, total_tokens = 0;
    for (int i = 0; i < 1000; ++i) {
      const std::size_t len = 1 + rng.below(27);
      std::string s;
      for (std::size_t t = 0; t < len; ++t) s += "t" + std::to_string(rng.below(50)) + " ";
      snippets.push_back(s);
      expected += (len + 7) / 8;
      total_tokens += len;
    }
    CHECK(static_cast<double>(total_tokens) / 1000.0 == doctest::Approx(14.0).epsilon(0.1));
    const Database db = build_classic(snippets, 8, false, emb, vocab);
    CHECK(db.size() == expected);
  }
  SUBCASE("unlexable snippets are skipped and counted") {
    Vocab vocab;
    BuildReport rep;
    const Database db = build_classic({"f(x)", "g('open", ""}, 4, false, emb, vocab, &rep);
    CHECK(rep.skipped == 2);
    CHECK(rep.errors.size() == 2);
    CHECK(db.size() == 1);
  }
}

TEST_CASE("build_hybrid") {
  HashedEmbedder emb;
  Vocab vocab;
  const std::string code20 = "x = foo(a, b, c, d, e) + g(-1)";
  REQUIRE(code_tokens(code20).size() == 20);
  BuildReport rep;
  const Database db = build_hybrid({{"call foo then g", code20}, {"nothing here", ""}}, 8, false, emb, vocab, &rep);
  CHECK(rep.skipped == 1);
  CHECK(db.mode() == DbMode::hybrid);
  CHECK(db.count(KeyKind::code) == 3);
  CHECK(db.count(KeyKind::intent) == 1);
  const auto ids = vocab.encode(code_tokens(code20));
  const ChunkRecord& intent_entry = db.entry(3);
  CHECK(intent_entry.kind == KeyKind::intent);
  CHECK(intent_entry.neighbour == slice(ids, 0, 8, 8));
  CHECK(intent_entry.continuation == slice(ids, 8, 16, 8));
  CHECK(intent_entry.source_id == db.entry(0).source_id);

  const auto query = emb.embed_intent(vocab.encode(intent_tokens("call foo then g")));
  const NeighbourSet hit = db.query_k(query, 1, {KeyKind::intent});
  REQUIRE(hit.size() == 1);
  CHECK(hit.records[0].ordinal == 3);
  CHECK(hit.records[0].distance == 0.0);
}

TEST_CASE("query_k exact backend") {
  Rng rng(5);
  Database db(DbMode::classic, 2, "test", 16);
  for (int i = 0; i < 30; ++i) db.add(fixtures::random_record(rng, 2, 16, 100 + i));

  SUBCASE("a stored key is its own nearest neighbour") {
    const NeighbourSet r = db.query_k(db.entry(7).key, 1);
    REQUIRE(r.size() == 1);
    CHECK(r.records[0].ordinal == 7);
    CHECK(r.records[0].distance == 0.0);
    CHECK(r.records[0].neighbour == db.entry(7).neighbour);
  }
  SUBCASE("k larger than the database returns everything ascending") {
    const NeighbourSet r = db.query_k(db.entry(0).key, 100);
    REQUIRE(r.size() == 30);
    for (std::size_t i = 1; i < r.size(); ++i) CHECK(r.records[i - 1].distance <= r.records[i].distance);
  }
  SUBCASE("ties break by source id then ordinal") {
    ChunkRecord twin = db.entry(4);
    twin.source_id = 1;  // lower than every other id
    db.add(twin);
    ChunkRecord twin2 = db.entry(4);
    db.add(twin2);  // same source as entry 4, higher ordinal
    const NeighbourSet r = db.query_k(db.entry(4).key, 3);
    REQUIRE(r.size() == 3);
    CHECK(r.records[0].ordinal == 30);
    CHECK(r.records[1].ordinal == 4);
    CHECK(r.records[2].ordinal == 31);
  }
  SUBCASE("self-exclusion skips the given source") {
    QueryOptions opts;
    opts.exclude_source = db.entry(7).source_id;
    const NeighbourSet r = db.query_k(db.entry(7).key, 1, opts);
    REQUIRE(r.size() == 1);
    CHECK(r.records[0].ordinal != 7);
  }
  SUBCASE("errors") {
    Database empty(DbMode::classic, 2, "test", 16);
    CHECK_THROWS_AS(empty.query_k(db.entry(0).key, 1), std::invalid_argument);
    CHECK_THROWS_AS(db.query_k(std::vector<float>(3), 1), std::invalid_argument);
    CHECK_THROWS_AS(db.query_k(db.entry(0).key, 0), std::invalid_argument);
    ChunkRecord bad = db.entry(0);
    bad.neighbour.push_back(1);
    CHECK_THROWS_AS(db.add(bad), std::invalid_argument);
  }
}

TEST_CASE("10,000 entries: exact matches brute force, approximate recall@2 >= 0.95") {
  Rng rng(42);
  const Database db = fixtures::random_database(rng, 10000, 256);
  const auto queries = fixtures::random_queries(rng, 100, 256);
  Database indexed = db;
  indexed.build_ivf();
  std::size_t agree = 0, hits = 0;
  for (const auto& q : queries) {
    const auto truth = fixtures::brute_force(db, q, 2);
    const NeighbourSet exact = db.query_k(q, 2, {KeyKind::code, Backend::exact});
    bool same = exact.size() == truth.size();
    for (std::size_t i = 0; same && i < truth.size(); ++i)
      same = exact.records[i].ordinal == truth[i].second && exact.records[i].distance == std::sqrt(truth[i].first);
    agree += same;
    const NeighbourSet approx = indexed.query_k(q, 2, {KeyKind::code, Backend::approximate});
    for (const auto& t : truth)
      for (const auto& a : approx.records) hits += a.ordinal == t.second;
  }
  CHECK(agree == queries.size());
  const double recall = static_cast<double>(hits) / (2.0 * static_cast<double>(queries.size()));
  MESSAGE("approximate recall@2 = " << recall);
  CHECK(recall >= 0.95);
}

TEST_CASE("append-only growth keeps earlier answers") {
  Rng rng(9);
  Database db = fixtures::random_database(rng, 2000, 32);
  const auto queries = fixtures::random_queries(rng, 50, 32);
  std::vector<NeighbourSet> before;
  for (const auto& q : queries) before.push_back(db.query_k(q, 2));
  std::vector<Embedding> old_keys;
  for (const auto& e : db.entries()) old_keys.push_back(e.key);

  const std::size_t old_size = db.size();
  for (int i = 0; i < 500; ++i) db.add(fixtures::random_record(rng, 4, 32, 900000 + i));
  for (std::size_t i = 0; i < old_size; ++i) CHECK(db.entry(i).key == old_keys[i]);

  std::size_t checked = 0;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto truth = fixtures::brute_force(db, queries[qi], 2);
    const bool disjoint = std::all_of(truth.begin(), truth.end(), [&](const auto& t) { return t.second < old_size; });
    if (!disjoint) continue;
    ++checked;
    const NeighbourSet after = db.query_k(queries[qi], 2);
    REQUIRE(after.size() == before[qi].size());
    for (std::size_t i = 0; i < after.size(); ++i) {
      CHECK(after.records[i].ordinal == before[qi].records[i].ordinal);
      CHECK(after.records[i].distance == before[qi].records[i].distance);
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("save and load") {
  Rng rng(12);
  Database db(DbMode::hybrid, 4, "hashed-ngram-v1", 8);
  db.add(fixtures::random_record(rng, 4, 8, 1));
  db.add(fixtures::random_record(rng, 4, 8, 2));
  ChunkRecord intent = fixtures::random_record(rng, 4, 8, 2);
  intent.kind = KeyKind::intent;
  db.add(intent);
  const std::string path = "db_roundtrip_test.rsdb";

  SUBCASE("round trip is bit-exact") {
    db.save(path);
    const Database back = Database::load(path);
    CHECK(back == db);
    CHECK(back.serialize() == db.serialize());
    CHECK(back.count(KeyKind::intent) == 1);
  }
  SUBCASE("layout follows the documented header") {
    const std::string b = db.serialize();
    CHECK(b.substr(0, 4) == "RSDB");
    CHECK(binio::load_u32(b.data() + 4) == 1);
    CHECK(static_cast<int>(b[8]) == 1);
    CHECK(binio::load_u32(b.data() + 9) == 4);
    CHECK(binio::load_u32(b.data() + 13) == 8);
    const std::size_t id_len = static_cast<unsigned char>(b[17]) | (static_cast<unsigned char>(b[18]) << 8);
    CHECK(id_len == std::string("hashed-ngram-v1").size());
    CHECK(binio::load_u64(b.data() + 19 + id_len) == 3);
    const std::size_t per_entry = 1 + 8 + 4 * 4 * 2 + 8 * 4;
    CHECK(b.size() == 19 + id_len + 8 + 3 * per_entry + 4);
    CHECK(binio::load_u32(b.data() + b.size() - 4) == binio::crc32(std::string_view(b).substr(0, b.size() - 4)));
  }
  SUBCASE("empty database") {
    Database empty(DbMode::classic, 8, "e", 4);
    const Database back = Database::deserialize(empty.serialize());
    CHECK(back.size() == 0);
    CHECK(back == empty);
  }
  SUBCASE("corruption is detected") {
    std::string b = db.serialize();
    std::string bad_magic = b;
    bad_magic[0] = 'X';
    try {
      Database::deserialize(bad_magic);
      FAIL("expected a format error");
    } catch (const binio::FormatError& e) {
      CHECK(std::string(e.what()).find("RSDB") != std::string::npos);
    }
    std::string flipped = b;
    flipped[flipped.size() - 12] ^= 0x10;
    CHECK_THROWS_WITH_AS(Database::deserialize(flipped), doctest::Contains("checksum"), binio::FormatError);
    CHECK_THROWS_WITH_AS(Database::deserialize(b.substr(0, b.size() - 10)), doctest::Contains("truncated"),
                         binio::FormatError);
    std::string version = b;
    version[4] = 2;
    CHECK_THROWS_WITH_AS(Database::deserialize(version), doctest::Contains("version"), binio::FormatError);
  }
  std::remove(path.c_str());
}
