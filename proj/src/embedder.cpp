#include "retroseq/embedder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "retroseq/binio.hpp"
#include "retroseq/rng.hpp"
#include "retroseq/vocab.hpp"

namespace retroseq {

namespace {

constexpr std::uint64_t kCodeSpace = 0x636f6465;    // "code"
constexpr std::uint64_t kIntentSpace = 0x696e746e;  // "intn"

}  // namespace

HashedEmbedder::HashedEmbedder(std::string id, std::size_t dim, std::size_t buckets)
    : id_(std::move(id)), dim_(dim), buckets_(buckets), seed_(fnv1a64(id_)) {
  if (dim_ == 0 || buckets_ == 0) throw std::invalid_argument("embedder dim and buckets must be positive");
}

Embedding HashedEmbedder::embed(std::span<const std::uint32_t> tokens, std::uint64_t space) const {
  std::vector<std::uint32_t> ids;
  ids.reserve(tokens.size());
  for (auto t : tokens)
    if (t != kPad) ids.push_back(t);
  if (ids.empty()) throw std::invalid_argument("cannot embed an empty token sequence");

  // Ordered so the floating-point accumulation order is fixed.
  std::map<std::size_t, double> counts;
  const std::uint64_t base = mix64(seed_, space);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    counts[mix64(mix64(base, 1), ids[i]) % buckets_] += 1.0;
    if (i + 1 < ids.size())
      counts[mix64(mix64(mix64(base, 2), ids[i]), ids[i + 1]) % buckets_] += 1.0;
  }
  std::vector<double> acc(dim_, 0.0);
  for (const auto& [bucket, count] : counts) {
    std::uint64_t state = mix64(base, 0x100000000ULL + bucket);
    for (std::size_t j = 0; j < dim_; ++j) {
      const double r = static_cast<double>(Rng::splitmix64(state) >> 11) * 0x1.0p-53 * 2.0 - 1.0;
      acc[j] += count * r;
    }
  }
  double norm = 0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  Embedding out(dim_);
  for (std::size_t j = 0; j < dim_; ++j) out[j] = static_cast<float>(acc[j] / norm);
  return out;
}

Embedding HashedEmbedder::embed_code(std::span<const std::uint32_t> tokens) const {
  return embed(tokens, kCodeSpace);
}

Embedding HashedEmbedder::embed_intent(std::span<const std::uint32_t> tokens) const {
  return embed(tokens, kIntentSpace);
}

std::uint64_t sequence_hash(std::span<const std::uint32_t> tokens) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto t : tokens) {
    char bytes[4];
    binio::store_u32(bytes, t);
    h = fnv1a64(std::string_view(bytes, 4), h);
  }
  return h;
}

PrecomputedEmbedder::PrecomputedEmbedder(const std::string& path, std::size_t dim)
    : id_("precomputed:" + path), dim_(dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open embedding file " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t record = 8 + 4 * dim_;
  if (bytes.size() % record != 0)
    throw std::runtime_error("embedding file " + path + " is not a whole number of " +
                             std::to_string(record) + "-byte records");
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    const std::uint64_t h = binio::load_u64(bytes.data() + off);
    Embedding v(dim_);
    for (std::size_t j = 0; j < dim_; ++j) v[j] = binio::load_f32(bytes.data() + off + 8 + 4 * j);
    table_[h] = std::move(v);
  }
}

Embedding PrecomputedEmbedder::embed_code(std::span<const std::uint32_t> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("cannot embed an empty token sequence");
  auto it = table_.find(sequence_hash(tokens));
  if (it == table_.end())
    throw std::out_of_range("no precomputed embedding for sequence hash " +
                            std::to_string(sequence_hash(tokens)));
  return it->second;
}

Embedding PrecomputedEmbedder::embed_intent(std::span<const std::uint32_t> tokens) const {
  return embed_code(tokens);
}

void PrecomputedEmbedder::write(const std::string& path,
                                const std::vector<std::pair<std::uint64_t, Embedding>>& records) {
  std::string bytes;
  for (const auto& [h, v] : records) {
    binio::put_u64(bytes, h);
    for (float x : v) binio::put_f32(bytes, x);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::unique_ptr<Embedder> make_embedder(const std::string& id, std::size_t dim) {
  const std::string prefix = "precomputed:";
  if (id.rfind(prefix, 0) == 0)
    return std::make_unique<PrecomputedEmbedder>(id.substr(prefix.size()), dim);
  return std::make_unique<HashedEmbedder>(id, dim);
}

}  // namespace retroseq
