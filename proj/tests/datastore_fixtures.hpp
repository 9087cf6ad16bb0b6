#pragma once
// Random datastores and an independent brute-force k-NN scan.

#include <algorithm>
#include <cmath>
#include <tuple>
#include <utility>
#include <vector>

#include "retroseq/datastore.hpp"
#include "retroseq/rng.hpp"

namespace fixtures {

inline retroseq::Embedding random_unit(retroseq::Rng& rng, std::size_t dim) {
  retroseq::Embedding v(dim);
  double n = 0;
  for (auto& x : v) {
    x = static_cast<float>(rng.normal());
    n += double(x) * x;
  }
  for (auto& x : v) x = static_cast<float>(x / std::sqrt(n));
  return v;
}

inline retroseq::ChunkRecord random_record(retroseq::Rng& rng, std::size_t m, std::size_t dim,
                                           std::uint64_t source) {
  retroseq::ChunkRecord r;
  r.source_id = source;
  r.neighbour.resize(m);
  r.continuation.resize(m);
  for (auto& t : r.neighbour) t = 4 + static_cast<std::uint32_t>(rng.below(1000));
  for (auto& t : r.continuation) t = 4 + static_cast<std::uint32_t>(rng.below(1000));
  r.key = random_unit(rng, dim);
  return r;
}

inline retroseq::Database random_database(retroseq::Rng& rng, std::size_t n, std::size_t dim,
                                          std::size_t m = 4) {
  retroseq::Database db(retroseq::DbMode::classic, m, "random", dim);
  for (std::size_t i = 0; i < n; ++i) db.add(random_record(rng, m, dim, 1000 + i));
  return db;
}

inline std::vector<retroseq::Embedding> random_queries(retroseq::Rng& rng, std::size_t n,
                                                       std::size_t dim) {
  std::vector<retroseq::Embedding> q;
  for (std::size_t i = 0; i < n; ++i) q.push_back(random_unit(rng, dim));
  return q;
}

/// (squared distance, ordinal) of the k nearest code-keyed entries, ties by (source, ordinal).
inline std::vector<std::pair<double, std::uint32_t>> brute_force(const retroseq::Database& db,
                                                                 const retroseq::Embedding& q,
                                                                 std::size_t k) {
  std::vector<std::tuple<double, std::uint64_t, std::uint32_t>> all;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto& e = db.entry(i);
    if (e.kind != retroseq::KeyKind::code) continue;
    double s = 0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      const double d = double(q[j]) - double(e.key[j]);
      s += d * d;
    }
    all.emplace_back(s, e.source_id, static_cast<std::uint32_t>(i));
  }
  std::sort(all.begin(), all.end());
  std::vector<std::pair<double, std::uint32_t>> out;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i)
    out.emplace_back(std::get<0>(all[i]), std::get<2>(all[i]));
  return out;
}

}  // namespace fixtures
