#include "retroseq/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <stdexcept>
#include <tuple>

#include "retroseq/binio.hpp"
#include "retroseq/lexer.hpp"
#include "retroseq/normalizer.hpp"
#include "retroseq/rng.hpp"

namespace retroseq {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'D', 'B'};
constexpr std::uint32_t kVersion = 1;

float fast_dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  for (; i < n; ++i) acc[0] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

float squared_norm(const float* a, std::size_t n) { return fast_dot(a, a, n); }

#if defined(__GNUC__) && defined(__x86_64__)
__attribute__((target_clones("avx2", "default")))
#endif
std::int32_t code_dot(const std::int8_t* a, const std::int8_t* b, std::size_t n) {
  std::int32_t s = 0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<std::int16_t>(a[i]) * static_cast<std::int16_t>(b[i]);
  return s;
}

std::int8_t quantize(float x, float scale) {
  const float v = std::nearbyint(x / scale * 127.0f);
  return static_cast<std::int8_t>(std::clamp(v, -127.0f, 127.0f));
}

// Exact squared L2 accumulated in double, coordinate order.
double exact_d2(const float* a, const float* b, std::size_t n) {
  double s = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = static_cast<double>(a[j]) - static_cast<double>(b[j]);
    s += d * d;
  }
  return s;
}

struct Candidate {
  double d2;
  std::uint64_t source;
  std::uint32_t ordinal;
  bool operator<(const Candidate& o) const {
    return std::tie(d2, source, ordinal) < std::tie(o.d2, o.source, o.ordinal);
  }
};

// Keeps the k best candidates under Candidate::operator<.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}
  void offer(const Candidate& c) {
    if (heap_.size() < k_) {
      heap_.push(c);
    } else if (c < heap_.top()) {
      heap_.pop();
      heap_.push(c);
    }
  }
  std::vector<Candidate> sorted() {
    std::vector<Candidate> out;
    while (!heap_.empty()) {
      out.push_back(heap_.top());
      heap_.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

 private:
  std::size_t k_;
  std::priority_queue<Candidate> heap_;
};

}  // namespace

const char* to_string(DbMode mode) { return mode == DbMode::classic ? "classic" : "hybrid"; }
const char* to_string(KeyKind kind) { return kind == KeyKind::code ? "code" : "intent"; }

std::vector<ChunkBody> chunk_sequence(std::span<const std::uint32_t> tokens, std::size_t m) {
  if (m == 0) throw std::invalid_argument("chunk size must be >= 1");
  if (tokens.empty()) throw std::invalid_argument("cannot chunk an empty token sequence");
  auto window = [&](std::size_t start) {
    std::vector<std::uint32_t> w(m, kPad);
    for (std::size_t i = 0; i < m && start + i < tokens.size(); ++i) w[i] = tokens[start + i];
    return w;
  };
  std::vector<ChunkBody> out;
  for (std::size_t start = 0; start < tokens.size(); start += m)
    out.push_back({window(start), window(start + m)});
  return out;
}

std::uint64_t source_id(std::string_view intent, std::string_view code) {
  std::uint64_t h = fnv1a64(intent);
  h = fnv1a64(std::string_view("\x1f", 1), h);
  return fnv1a64(code, h);
}

Database::Database(DbMode mode, std::size_t m, std::string embedder_id, std::size_t dim)
    : mode_(mode), m_(m), embedder_id_(std::move(embedder_id)), dim_(dim) {
  if (m_ == 0) throw std::invalid_argument("chunk size must be >= 1");
  if (dim_ == 0) throw std::invalid_argument("key dimension must be >= 1");
  if (embedder_id_.size() > 0xffff) throw std::invalid_argument("embedder id too long");
}

std::size_t Database::count(KeyKind kind) const { return slab(kind).ordinals.size(); }

void Database::add(ChunkRecord r) {
  if (r.neighbour.size() != m_ || r.continuation.size() != m_)
    throw std::invalid_argument("chunk record must hold exactly m=" + std::to_string(m_) +
                                " ids in N and F");
  if (r.key.size() != dim_)
    throw std::invalid_argument("key has dimension " + std::to_string(r.key.size()) +
                                ", database expects " + std::to_string(dim_));
  if (r.kind == KeyKind::intent && mode_ == DbMode::classic)
    throw std::invalid_argument("intent-keyed entries need a hybrid database");
  Slab& s = slabs_[static_cast<std::size_t>(r.kind)];
  const auto pos = static_cast<std::uint32_t>(s.ordinals.size());
  s.ordinals.push_back(static_cast<std::uint32_t>(entries_.size()));
  s.keys.insert(s.keys.end(), r.key.begin(), r.key.end());
  s.norms.push_back(squared_norm(r.key.data(), dim_));
  entries_.push_back(std::move(r));
  if (s.ivf) place(s, nearest_list(*s.ivf, entries_.back().key.data()), pos);
}

std::size_t Database::nearest_list(const Ivf& ivf, const float* x) const {
  std::size_t best = 0;
  float best_d = 0;
  for (std::size_t c = 0; c < ivf.n_lists; ++c) {
    const float* cen = ivf.centroids.data() + c * dim_;
    float d = 0;
    for (std::size_t j = 0; j < dim_; ++j) d += (x[j] - cen[j]) * (x[j] - cen[j]);
    if (c == 0 || d < best_d) {
      best = c;
      best_d = d;
    }
  }
  return best;
}

void Database::place(Slab& s, std::size_t list, std::uint32_t pos) const {
  Ivf& ivf = *s.ivf;
  ivf.lists[list].push_back(pos);
  const float* x = s.keys.data() + static_cast<std::size_t>(pos) * dim_;
  for (std::size_t j = 0; j < dim_; ++j) ivf.codes[list].push_back(quantize(x[j], ivf.code_scale));
  ivf.norms[list].push_back(s.norms[pos]);
  ivf.sources[list].push_back(entries_[s.ordinals[pos]].source_id);
}

void Database::build_ivf(const IvfOptions& options) {
  for (Slab& s : slabs_) {
    s.ivf.reset();
    const std::size_t n = s.ordinals.size();
    if (n == 0) continue;
    Ivf ivf;
    ivf.n_lists = options.n_lists ? options.n_lists
                                  : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n)))));
    ivf.n_lists = std::min(ivf.n_lists, n);
    ivf.n_probe = options.n_probe ? std::min(options.n_probe, ivf.n_lists)
                                  : std::max<std::size_t>(1, (4 * ivf.n_lists + 4) / 5);

    // Deterministic training sample.
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    Rng rng(options.seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const std::size_t sample = std::max(ivf.n_lists, std::min(n, options.sample));
    order.resize(sample);

    ivf.centroids.resize(ivf.n_lists * dim_);
    for (std::size_t c = 0; c < ivf.n_lists; ++c)
      std::copy_n(s.keys.data() + static_cast<std::size_t>(order[c]) * dim_, dim_,
                  ivf.centroids.data() + c * dim_);

    std::vector<std::uint32_t> assign(sample, 0);
    std::vector<float> cnorm(ivf.n_lists);
    auto assign_point = [&](const float* x, float xnorm) {
      std::size_t best = 0;
      float best_d = 0;
      for (std::size_t c = 0; c < ivf.n_lists; ++c) {
        const float d = cnorm[c] + xnorm - 2.0f * fast_dot(x, ivf.centroids.data() + c * dim_, dim_);
        if (c == 0 || d < best_d) {
          best = c;
          best_d = d;
        }
      }
      return best;
    };
    for (std::size_t it = 0; it < options.iterations; ++it) {
      for (std::size_t c = 0; c < ivf.n_lists; ++c)
        cnorm[c] = squared_norm(ivf.centroids.data() + c * dim_, dim_);
      for (std::size_t i = 0; i < sample; ++i)
        assign[i] = static_cast<std::uint32_t>(
            assign_point(s.keys.data() + static_cast<std::size_t>(order[i]) * dim_, s.norms[order[i]]));
      std::vector<double> sums(ivf.n_lists * dim_, 0.0);
      std::vector<std::size_t> counts(ivf.n_lists, 0);
      for (std::size_t i = 0; i < sample; ++i) {
        const float* x = s.keys.data() + static_cast<std::size_t>(order[i]) * dim_;
        double* acc = sums.data() + assign[i] * dim_;
        for (std::size_t j = 0; j < dim_; ++j) acc[j] += x[j];
        ++counts[assign[i]];
      }
      for (std::size_t c = 0; c < ivf.n_lists; ++c) {
        float* cen = ivf.centroids.data() + c * dim_;
        if (counts[c] == 0) {
          const std::uint32_t pick = order[rng.below(sample)];
          std::copy_n(s.keys.data() + static_cast<std::size_t>(pick) * dim_, dim_, cen);
          continue;
        }
        for (std::size_t j = 0; j < dim_; ++j)
          cen[j] = static_cast<float>(sums[c * dim_ + j] / static_cast<double>(counts[c]));
      }
    }
    for (std::size_t c = 0; c < ivf.n_lists; ++c)
      cnorm[c] = squared_norm(ivf.centroids.data() + c * dim_, dim_);
    float peak = 0;
    for (float x : s.keys) peak = std::max(peak, std::abs(x));
    ivf.code_scale = peak > 0 ? peak : 1.0f;
    ivf.lists.assign(ivf.n_lists, {});
    ivf.codes.assign(ivf.n_lists, {});
    ivf.norms.assign(ivf.n_lists, {});
    ivf.sources.assign(ivf.n_lists, {});
    std::vector<std::uint32_t> home(n);
    for (std::size_t p = 0; p < n; ++p)
      home[p] = static_cast<std::uint32_t>(assign_point(s.keys.data() + p * dim_, s.norms[p]));
    s.ivf = std::move(ivf);
    for (std::size_t p = 0; p < n; ++p) place(s, home[p], static_cast<std::uint32_t>(p));
  }
}

bool Database::has_ivf() const { return slabs_[0].ivf.has_value() || slabs_[1].ivf.has_value(); }

void Database::drop_ivf() {
  for (Slab& s : slabs_) s.ivf.reset();
}

NeighbourSet Database::query_k(std::span<const float> q, std::size_t k,
                               const QueryOptions& options) const {
  if (entries_.empty()) throw std::invalid_argument("query_k: database is empty");
  if (k == 0) throw std::invalid_argument("query_k: k must be >= 1");
  if (q.size() != dim_)
    throw std::invalid_argument("query_k: query has dimension " + std::to_string(q.size()) +
                                ", database keys have " + std::to_string(dim_));
  const Slab& s = slab(options.kind);
  NeighbourSet out;
  const std::size_t n = s.ordinals.size();
  if (n == 0) return out;

  bool approximate = false;
  if (options.backend == Backend::approximate) {
    if (!s.ivf) throw std::logic_error("query_k: approximate backend requested but no index built");
    approximate = true;
  } else if (options.backend == Backend::automatic) {
    approximate = s.ivf.has_value() && n >= kExactBackendLimit;
  }

  auto excluded = [&](std::uint32_t ordinal) {
    return options.exclude_source && entries_[ordinal].source_id == *options.exclude_source;
  };
  TopK top(k);
  auto score = [&](std::size_t p) {
    const std::uint32_t ord = s.ordinals[p];
    if (excluded(ord)) return;
    top.offer({exact_d2(q.data(), s.keys.data() + p * dim_, dim_), entries_[ord].source_id, ord});
  };

  if (!approximate) {
    for (std::size_t p = 0; p < n; ++p) score(p);
  } else {
    const Ivf& ivf = *s.ivf;
    const std::size_t probe = std::min(ivf.n_lists, options.n_probe ? options.n_probe : ivf.n_probe);
    const float qn = squared_norm(q.data(), dim_);
    std::vector<std::pair<float, std::uint32_t>> lists(ivf.n_lists);
    for (std::size_t c = 0; c < ivf.n_lists; ++c) {
      const float* cen = ivf.centroids.data() + c * dim_;
      lists[c] = {squared_norm(cen, dim_) + qn - 2.0f * fast_dot(q.data(), cen, dim_),
                  static_cast<std::uint32_t>(c)};
    }
    std::partial_sort(lists.begin(), lists.begin() + static_cast<std::ptrdiff_t>(probe), lists.end());
    // 8-bit pre-scan over the probed lists, then exact re-ranking of a short list.
    float qpeak = 0;
    for (float x : q) qpeak = std::max(qpeak, std::abs(x));
    if (qpeak == 0) qpeak = 1;
    std::vector<std::int8_t> qcode(dim_);
    for (std::size_t j = 0; j < dim_; ++j) qcode[j] = quantize(q[j], qpeak);
    const float dot_scale = ivf.code_scale * qpeak / (127.0f * 127.0f);
    const std::size_t shortlist = std::max<std::size_t>(64, 16 * k);
    std::vector<std::pair<float, std::uint32_t>> pre;
    pre.reserve(2 * shortlist);
    float bound = std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < probe; ++i) {
      const std::size_t c = lists[i].second;
      const std::int8_t* codes = ivf.codes[c].data();
      const std::size_t len = ivf.lists[c].size();
      for (std::size_t e = 0; e < len; ++e) {
        if (options.exclude_source && ivf.sources[c][e] == *options.exclude_source) continue;
        const float d = ivf.norms[c][e] -
                        2.0f * dot_scale * static_cast<float>(code_dot(qcode.data(), codes + e * dim_, dim_));
        if (d >= bound) continue;
        pre.emplace_back(d, ivf.lists[c][e]);
        if (pre.size() == 2 * shortlist) {
          std::nth_element(pre.begin(), pre.begin() + static_cast<std::ptrdiff_t>(shortlist - 1), pre.end());
          pre.resize(shortlist);
          bound = pre[shortlist - 1].first;
        }
      }
    }
    const std::size_t keep = std::min(shortlist, pre.size());
    std::partial_sort(pre.begin(), pre.begin() + static_cast<std::ptrdiff_t>(keep), pre.end());
    for (std::size_t i = 0; i < keep; ++i) score(pre[i].second);
  }

  for (const Candidate& c : top.sorted()) {
    const ChunkRecord& r = entries_[c.ordinal];
    out.records.push_back({c.ordinal, std::sqrt(c.d2), r.source_id, r.neighbour, r.continuation});
  }
  return out;
}

std::string Database::serialize() const {
  std::string b;
  const std::size_t per_entry = 1 + 8 + 8 * m_ + 4 * dim_;
  b.reserve(4 + 4 + 1 + 4 + 4 + 2 + embedder_id_.size() + 8 + entries_.size() * per_entry + 4);
  b.append(kMagic, 4);
  binio::put_u32(b, kVersion);
  binio::put_u8(b, static_cast<std::uint8_t>(mode_));
  binio::put_u32(b, static_cast<std::uint32_t>(m_));
  binio::put_u32(b, static_cast<std::uint32_t>(dim_));
  binio::put_u16(b, static_cast<std::uint16_t>(embedder_id_.size()));
  b += embedder_id_;
  binio::put_u64(b, entries_.size());
  for (const ChunkRecord& r : entries_) {
    binio::put_u8(b, static_cast<std::uint8_t>(r.kind));
    binio::put_u64(b, r.source_id);
    for (auto t : r.neighbour) binio::put_u32(b, t);
    for (auto t : r.continuation) binio::put_u32(b, t);
    for (float x : r.key) binio::put_f32(b, x);
  }
  binio::put_u32(b, binio::crc32(b));
  return b;
}

Database Database::deserialize(std::string_view bytes) {
  using binio::FormatError;
  if (bytes.size() < 4 || std::string_view(bytes.data(), 4) != std::string_view(kMagic, 4))
    throw FormatError("not a datastore file: expected magic \"RSDB\"");
  binio::Reader in(bytes, "datastore");
  in.take(4);
  const std::uint32_t version = in.u32();
  if (version != kVersion)
    throw FormatError("unsupported datastore version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")");
  const std::uint8_t mode = in.u8();
  if (mode > 1) throw FormatError("invalid datastore mode byte " + std::to_string(mode));
  const std::uint32_t m = in.u32();
  const std::uint32_t dim = in.u32();
  if (m == 0 || dim == 0) throw FormatError("datastore header has zero chunk size or key dimension");
  const std::uint16_t id_len = in.u16();
  const std::string id(in.take(id_len));
  const std::uint64_t count = in.u64();
  const std::size_t per_entry = 1 + 8 + 8 * static_cast<std::size_t>(m) + 4 * static_cast<std::size_t>(dim);
  if (in.remaining() < 4 || (in.remaining() - 4) / per_entry < count)
    throw FormatError("datastore: truncated (header announces " + std::to_string(count) +
                      " entries, file holds fewer)");
  if (in.remaining() != count * per_entry + 4)
    throw FormatError("datastore: " + std::to_string(in.remaining() - 4 - count * per_entry) +
                      " unexpected trailing bytes");
  const std::uint32_t stored = binio::load_u32(bytes.data() + bytes.size() - 4);
  const std::uint32_t actual = binio::crc32(bytes.substr(0, bytes.size() - 4));
  if (stored != actual) throw FormatError("datastore: checksum mismatch (file is corrupted)");

  Database db(static_cast<DbMode>(mode), m, id, dim);
  db.entries_.reserve(count);
  for (std::uint64_t e = 0; e < count; ++e) {
    ChunkRecord r;
    const std::uint8_t kind = in.u8();
    if (kind > 1) throw FormatError("datastore: invalid key kind " + std::to_string(kind));
    r.kind = static_cast<KeyKind>(kind);
    r.source_id = in.u64();
    r.neighbour.resize(m);
    r.continuation.resize(m);
    for (auto& t : r.neighbour) t = in.u32();
    for (auto& t : r.continuation) t = in.u32();
    r.key.resize(dim);
    for (auto& x : r.key) x = in.f32();
    db.add(std::move(r));
  }
  if (db.size() >= kExactBackendLimit) db.build_ivf();
  return db;
}

void Database::save(const std::string& path) const { binio::write_file(path, serialize()); }

Database Database::load(const std::string& path) { return deserialize(binio::read_file(path)); }

bool Database::operator==(const Database& o) const {
  return mode_ == o.mode_ && m_ == o.m_ && embedder_id_ == o.embedder_id_ && dim_ == o.dim_ &&
         entries_ == o.entries_;
}

namespace {

std::vector<std::uint32_t> intern(const std::vector<std::string>& tokens, Vocab& vocab) {
  std::vector<std::uint32_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.add(t));
  return ids;
}

void add_code_entries(Database& db, const std::vector<std::uint32_t>& ids, std::uint64_t sid,
                      const Embedder& embedder) {
  for (ChunkBody& body : chunk_sequence(ids, db.chunk_size())) {
    Embedding key = embedder.embed_code(body.neighbour);
    db.add({KeyKind::code, sid, std::move(body.neighbour), std::move(body.continuation), std::move(key)});
  }
}

}  // namespace

Database build_classic(const std::vector<std::pair<std::string, std::string>>& pairs, std::size_t m,
                       bool normalize, const Embedder& embedder, Vocab& vocab, BuildReport* report) {
  Database db(DbMode::classic, m, embedder.id(), embedder.dim());
  BuildReport local;
  BuildReport& rep = report ? *report : local;
  rep = {};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ++rep.snippets;
    const auto& [intent, code] = pairs[i];
    std::vector<std::string> toks;
    try {
      toks = code_tokens(normalize ? (intent.empty() ? normalize_snippet(code).code
                                                     : normalize_pair(intent, code).code)
                                   : code);
    } catch (const LexError& e) {
      ++rep.skipped;
      rep.errors.push_back("snippet " + std::to_string(i) + ": " + e.what());
      continue;
    }
    if (toks.empty()) {
      ++rep.skipped;
      rep.errors.push_back("snippet " + std::to_string(i) + ": no tokens");
      continue;
    }
    add_code_entries(db, intern(toks, vocab), source_id(intent, code), embedder);
  }
  if (db.size() >= kExactBackendLimit) db.build_ivf();
  rep.entries = db.size();
  return db;
}

Database build_classic(const std::vector<std::string>& snippets, std::size_t m, bool normalize,
                       const Embedder& embedder, Vocab& vocab, BuildReport* report) {
  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(snippets.size());
  for (const auto& s : snippets) pairs.emplace_back(std::string(), s);
  return build_classic(pairs, m, normalize, embedder, vocab, report);
}

Database build_hybrid(const std::vector<std::pair<std::string, std::string>>& pairs, std::size_t m,
                      bool normalize, const Embedder& embedder, Vocab& vocab, BuildReport* report) {
  Database db(DbMode::hybrid, m, embedder.id(), embedder.dim());
  BuildReport local;
  BuildReport& rep = report ? *report : local;
  rep = {};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ++rep.snippets;
    const auto& [intent, code] = pairs[i];
    std::vector<std::string> code_toks, intent_toks;
    try {
      if (normalize) {
        const NormalizedPair np = normalize_pair(intent, code);
        code_toks = code_tokens(np.code);
        intent_toks = intent_tokens(np.intent);
      } else {
        code_toks = code_tokens(code);
        intent_toks = intent_tokens(intent);
      }
    } catch (const LexError& e) {
      ++rep.skipped;
      rep.errors.push_back("pair " + std::to_string(i) + ": " + e.what());
      continue;
    }
    if (code_toks.empty()) {
      ++rep.skipped;
      rep.errors.push_back("pair " + std::to_string(i) + ": empty code");
      continue;
    }
    const std::uint64_t sid = source_id(intent, code);
    const std::vector<std::uint32_t> ids = intern(code_toks, vocab);
    add_code_entries(db, ids, sid, embedder);
    if (intent_toks.empty()) {
      rep.errors.push_back("pair " + std::to_string(i) + ": empty intent, no intent-keyed entry");
      continue;
    }
    ChunkBody first = chunk_sequence(ids, m).front();
    db.add({KeyKind::intent, sid, std::move(first.neighbour), std::move(first.continuation),
            embedder.embed_intent(intern(intent_toks, vocab))});
  }
  if (db.size() >= kExactBackendLimit) db.build_ivf();
  rep.entries = db.size();
  return db;
}

}  // namespace retroseq
