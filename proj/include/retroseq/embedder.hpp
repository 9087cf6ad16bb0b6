#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace retroseq {

using Embedding = std::vector<float>;

/// Frozen sequence embedder used for datastore keys and queries. Holds no
/// trainable state; outputs depend only on the id and the input ids.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual const std::string& id() const = 0;
  virtual std::size_t dim() const = 0;
  virtual Embedding embed_code(std::span<const std::uint32_t> tokens) const = 0;
  virtual Embedding embed_intent(std::span<const std::uint32_t> tokens) const = 0;
};

inline constexpr std::size_t kDefaultEmbeddingDim = 256;
inline constexpr const char* kDefaultEmbedderId = "hashed-ngram-v1";

/// Hashed unigram + bigram counts projected through a fixed random matrix
/// that is regenerated row by row from (id, bucket), then L2-normalized.
/// Padding ids are ignored.
class HashedEmbedder final : public Embedder {
 public:
  explicit HashedEmbedder(std::string id = kDefaultEmbedderId,
                          std::size_t dim = kDefaultEmbeddingDim, std::size_t buckets = 1u << 16);

  const std::string& id() const override { return id_; }
  std::size_t dim() const override { return dim_; }
  std::size_t buckets() const { return buckets_; }
  Embedding embed_code(std::span<const std::uint32_t> tokens) const override;
  Embedding embed_intent(std::span<const std::uint32_t> tokens) const override;

 private:
  Embedding embed(std::span<const std::uint32_t> tokens, std::uint64_t space) const;

  std::string id_;
  std::size_t dim_;
  std::size_t buckets_;
  std::uint64_t seed_;
};

/// Hash of a token-id sequence (FNV-1a over little-endian u32s); the lookup
/// key of precomputed embedding files.
std::uint64_t sequence_hash(std::span<const std::uint32_t> tokens);

/// Vectors loaded from a file of records (u64 sequence hash, dim x f32), all
/// little-endian. Unknown sequences raise std::out_of_range.
class PrecomputedEmbedder final : public Embedder {
 public:
  PrecomputedEmbedder(const std::string& path, std::size_t dim);

  const std::string& id() const override { return id_; }
  std::size_t dim() const override { return dim_; }
  std::size_t size() const { return table_.size(); }
  Embedding embed_code(std::span<const std::uint32_t> tokens) const override;
  Embedding embed_intent(std::span<const std::uint32_t> tokens) const override;

  static void write(const std::string& path,
                    const std::vector<std::pair<std::uint64_t, Embedding>>& records);

 private:
  std::string id_;
  std::size_t dim_;
  std::unordered_map<std::uint64_t, Embedding> table_;
};

/// "precomputed:<path>" opens a file; anything else is a hashed embedder seeded by the id.
std::unique_ptr<Embedder> make_embedder(const std::string& id, std::size_t dim = kDefaultEmbeddingDim);

}  // namespace retroseq
