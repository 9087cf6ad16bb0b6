#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "retroseq/embedder.hpp"
#include "retroseq/vocab.hpp"

namespace retroseq {

enum class DbMode : std::uint8_t { classic = 0, hybrid = 1 };
enum class KeyKind : std::uint8_t { code = 0, intent = 1 };

const char* to_string(DbMode mode);
const char* to_string(KeyKind kind);

struct ChunkBody {
  std::vector<std::uint32_t> neighbour;     // N, m ids
  std::vector<std::uint32_t> continuation;  // F, m ids
  bool operator==(const ChunkBody&) const = default;
};

struct ChunkRecord {
  KeyKind kind = KeyKind::code;
  std::uint64_t source_id = 0;
  std::vector<std::uint32_t> neighbour;
  std::vector<std::uint32_t> continuation;
  Embedding key;
  bool operator==(const ChunkRecord&) const = default;
};

/// Consecutive non-overlapping m-windows, each paired with the next window;
/// short windows are PAD-filled.
std::vector<ChunkBody> chunk_sequence(std::span<const std::uint32_t> tokens, std::size_t m);

/// Stable 64-bit id of an (intent, code) pair; code-only snippets use an empty intent.
std::uint64_t source_id(std::string_view intent, std::string_view code);

struct Neighbour {
  std::uint32_t ordinal = 0;  // entry index in the database
  double distance = 0;        // L2
  std::uint64_t source_id = 0;
  std::vector<std::uint32_t> neighbour;
  std::vector<std::uint32_t> continuation;
};

struct NeighbourSet {
  std::vector<std::uint32_t> query;
  std::vector<Neighbour> records;  // ascending distance
  bool empty() const { return records.empty(); }
  std::size_t size() const { return records.size(); }
};

enum class Backend { automatic, exact, approximate };

struct QueryOptions {
  KeyKind kind = KeyKind::code;
  Backend backend = Backend::automatic;
  /// Entries from this source are skipped.
  std::optional<std::uint64_t> exclude_source;
  /// Inverted lists scanned by the approximate backend; 0 picks the index default.
  std::size_t n_probe = 0;
};

struct IvfOptions {
  /// 0 picks round(sqrt(entries)).
  std::size_t n_lists = 0;
  /// 0 probes 80% of the lists (rounded up).
  std::size_t n_probe = 0;
  std::size_t iterations = 12;
  std::size_t sample = 32768;
  std::uint64_t seed = 0x5eed;
};

inline constexpr std::size_t kExactBackendLimit = 50000;

class Database {
 public:
  Database() = default;
  Database(DbMode mode, std::size_t m, std::string embedder_id, std::size_t dim);

  DbMode mode() const { return mode_; }
  std::size_t chunk_size() const { return m_; }
  const std::string& embedder_id() const { return embedder_id_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t count(KeyKind kind) const;
  const std::vector<ChunkRecord>& entries() const { return entries_; }
  const ChunkRecord& entry(std::size_t i) const { return entries_.at(i); }

  /// Appends one entry; existing entries, keys and ordinals are never touched.
  /// When an inverted index exists the entry joins its nearest list.
  void add(ChunkRecord record);

  /// Trains the coarse quantizer over the current entries of every key kind.
  void build_ivf(const IvfOptions& options = {});
  bool has_ivf() const;
  void drop_ivf();

  NeighbourSet query_k(std::span<const float> query, std::size_t k,
                       const QueryOptions& options = {}) const;

  /// Serialized bytes (the on-disk format).
  std::string serialize() const;
  static Database deserialize(std::string_view bytes);
  void save(const std::string& path) const;
  static Database load(const std::string& path);

  /// Compares header fields and entries; the index is not part of identity.
  bool operator==(const Database& other) const;

 private:
  struct Ivf {
    std::size_t n_lists = 0;
    std::size_t n_probe = 0;
    std::vector<float> centroids;             // n_lists x dim
    std::vector<std::vector<std::uint32_t>> lists;  // positions into the kind slab
    // Per-list contiguous copies for the scan: 8-bit keys, squared norms, sources.
    std::vector<std::vector<std::int8_t>> codes;
    std::vector<std::vector<float>> norms;
    std::vector<std::vector<std::uint64_t>> sources;
    float code_scale = 1;
  };
  struct Slab {
    std::vector<std::uint32_t> ordinals;
    std::vector<float> keys;   // rows x dim
    std::vector<float> norms;  // squared norms
    std::optional<Ivf> ivf;
  };

  const Slab& slab(KeyKind kind) const { return slabs_[static_cast<std::size_t>(kind)]; }
  std::size_t nearest_list(const Ivf& ivf, const float* x) const;
  void place(Slab& s, std::size_t list, std::uint32_t pos) const;

  DbMode mode_ = DbMode::classic;
  std::size_t m_ = 0;
  std::string embedder_id_;
  std::size_t dim_ = 0;
  std::vector<ChunkRecord> entries_;
  Slab slabs_[2];
};

struct BuildReport {
  std::size_t snippets = 0;
  std::size_t skipped = 0;
  std::size_t entries = 0;
  std::vector<std::string> errors;
};

/// Tokenizes (optionally normalizing each snippet), grows `vocab` with new
/// tokens, chunks and embeds every snippet as code-keyed entries.
Database build_classic(const std::vector<std::string>& snippets, std::size_t m, bool normalize,
                       const Embedder& embedder, Vocab& vocab, BuildReport* report = nullptr);

/// Code-keyed entries only, with source ids taken from the (intent, code) pairs.
Database build_classic(const std::vector<std::pair<std::string, std::string>>& pairs, std::size_t m,
                       bool normalize, const Embedder& embedder, Vocab& vocab,
                       BuildReport* report = nullptr);

/// Classic entries for every code plus one intent-keyed entry per pair valued
/// by the code's first two chunks. Normalization rewrites each pair jointly.
Database build_hybrid(const std::vector<std::pair<std::string, std::string>>& pairs, std::size_t m,
                      bool normalize, const Embedder& embedder, Vocab& vocab,
                      BuildReport* report = nullptr);

}  // namespace retroseq
