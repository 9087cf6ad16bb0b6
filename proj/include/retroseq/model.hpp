#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retroseq/datastore.hpp"
#include "retroseq/nn.hpp"
#include "retroseq/tensor.hpp"
#include "retroseq/vocab.hpp"

namespace retroseq {

/// Which decoder layers consume neighbours, and how. `none` is the baseline
/// decoder: every layer is SA, CA over the intent, FFW.
enum class Aggregation { none, sequential, parallel };
enum class NeighbourEncoderKind { classic, conditioned };

const char* to_string(Aggregation a);
const char* to_string(NeighbourEncoderKind k);
Aggregation parse_aggregation(const std::string& s);
NeighbourEncoderKind parse_neighbour_encoder(const std::string& s);

struct ModelConfig {
  std::size_t d_model = 256;
  std::size_t heads = 8;
  std::size_t nl_layers = 6;
  std::size_t nb_layers = 6;
  std::size_t dec_layers = 6;
  std::size_t ffw_hidden = 1024;
  std::size_t chunk_size = 8;
  std::size_t neighbours = 2;
  std::size_t period = 3;
  Aggregation aggregation = Aggregation::sequential;
  NeighbourEncoderKind neighbour_encoder = NeighbourEncoderKind::classic;
  nn::FirstChunkMode first_chunk = nn::FirstChunkMode::identity;
  double cross_dropout = 0.4;
  std::size_t beam = 15;
  std::size_t max_intent = 64;
  std::size_t max_code = 64;
  std::vector<std::string> vocab;

  /// Throws invalid_argument naming the offending field.
  void validate() const;
  /// Decoder layers are numbered from 1.
  bool aggregates(std::size_t layer) const {
    return aggregation != Aggregation::none && layer % period == 0;
  }
  bool uses_neighbours() const { return aggregation != Aggregation::none && period <= dec_layers; }

  /// Canonical JSON (sorted keys, no whitespace).
  std::string to_json() const;
  /// Unknown keys are rejected; missing keys keep their defaults.
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

struct OutputOptions {
  /// Forces the copy gate to a constant (tests).
  std::optional<double> gate;
};

/// Per-position hidden states of the last decoder layer and the head-averaged
/// intent attention weights of that layer (the pointer distribution).
struct DecoderOutput {
  Tensor states;
  Tensor nl_weights;
};

class Model {
 public:
  Model() = default;
  /// Every parameter group draws from its own stream derived from `seed` and
  /// its name, so models that differ only in aggregation share common weights.
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t vocab_size() const { return config_.vocab.size(); }

  /// E_nl: [|intent|, d].
  Tensor encode_nl(std::span<const std::uint32_t> intent, const nn::ForwardContext& ctx) const;

  /// States a conditioned neighbour encoder attends to: bidirectional
  /// self-attention over the embedded retrieving chunk.
  Tensor conditioning_states(std::span<const std::uint32_t> tokens,
                             const nn::ForwardContext& ctx) const;

  /// E_nb for one chunk: the k [N; F] encodings stacked, [k*2m, d]. An empty
  /// set gives an undefined tensor (no neighbours). The classic encoder
  /// ignores `conditioning`.
  Tensor encode_neighbours(const NeighbourSet& set, const Tensor& conditioning,
                           const nn::ForwardContext& ctx) const;
  /// Encodes set.query as the conditioning when the kind needs it.
  Tensor encode_neighbours(const NeighbourSet& set, const nn::ForwardContext& ctx) const;

  /// Per-chunk encodings for a decoder stream of `length` positions. Entry u
  /// comes from per_chunk[u]; entry 0 is skipped unless the first chunk is hybrid.
  nn::ChunkEncodings neighbour_encodings(std::span<const NeighbourSet> per_chunk, std::size_t length,
                                         const nn::ForwardContext& ctx) const;

  /// One decoder layer (1-based index). `nl_weights` receives the
  /// head-averaged weights of its intent cross-attention when non-null.
  Tensor decode_layer(std::size_t layer, const Tensor& c, const Tensor& e_nl,
                      const nn::ChunkEncodings* e_nb, const nn::ForwardContext& ctx,
                      Tensor* nl_weights = nullptr) const;

  /// Embeds the decoder input and runs every layer.
  DecoderOutput decode(std::span<const std::uint32_t> y_in, const Tensor& e_nl,
                       const nn::ChunkEncodings* e_nb, const nn::ForwardContext& ctx) const;

  /// Mixture g*softmax(vocab logits) + (1-g)*copy, rows are distributions over the vocab.
  Tensor output_distribution(const DecoderOutput& dec, std::span<const std::uint32_t> intent,
                             const OutputOptions& options = {}) const;

  /// Teacher-forced pass over y_in = [BOS] + code prefix. per_chunk[u] holds
  /// the neighbours used by decoder chunk u.
  Tensor forward(std::span<const std::uint32_t> intent, std::span<const std::uint32_t> y_in,
                 std::span<const NeighbourSet> per_chunk, const nn::ForwardContext& ctx) const;

  /// Parameters in declaration order.
  const nn::ParameterList& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  std::size_t parameter_count() const;
  /// Copies every parameter whose name and shape also exist in `other`.
  std::size_t transplant_from(const Model& other);

  std::string serialize() const;
  static Model deserialize(std::string_view bytes);
  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  struct EncoderLayer {
    nn::Sublayer sa, ca, ffw;
  };
  struct DecoderLayer {
    nn::Sublayer sa, ca, cca, ffw;
    Tensor merge_w, merge_b;
  };

  void build(std::uint64_t seed);
  void check_ids(std::span<const std::uint32_t> ids, const char* what) const;
  Tensor embed(std::span<const std::uint32_t> ids) const;

  ModelConfig config_;
  Tensor embedding_;  // [V, d], tied with the output projection
  Tensor out_bias_;   // [V]
  std::vector<EncoderLayer> nl_;
  nn::Sublayer cond_sa_;
  std::vector<EncoderLayer> nb_;
  std::vector<DecoderLayer> dec_;
  Tensor gate_w_, gate_b_;
  nn::ParameterList params_;
};

}  // namespace retroseq
