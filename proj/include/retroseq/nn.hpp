#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "retroseq/rng.hpp"
#include "retroseq/tensor.hpp"

namespace retroseq::nn {

inline constexpr double kRmsEpsilon = 1e-6;
inline constexpr double kRotaryBase = 10000.0;

struct NamedParameter {
  std::string name;
  Tensor tensor;
};
using ParameterList = std::vector<NamedParameter>;

/// Per-call switches. Dropout only fires when `training` is set and an Rng is given.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
  double cross_dropout = 0.0;
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
Tensor init_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                    DType dtype = default_dtype());

Tensor rms_norm(const Tensor& x, const Tensor& gain);

/// Rotary rotation of per-head vectors at the given absolute positions.
Tensor rotary_apply(const Tensor& x, std::span<const std::size_t> positions, std::size_t heads);

/// Projection weights for MultiHead(Q, K, V); no biases, so all-zero memories
/// produce all-zero outputs.
struct AttentionParams {
  AttentionParams() = default;
  AttentionParams(std::size_t d_model, std::size_t heads, Rng& rng);

  std::size_t d_model = 0;
  std::size_t heads = 0;
  Tensor wq, wk, wv, wo;

  std::size_t head_width() const { return d_model / heads; }
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct AttentionOptions {
  bool causal = false;
  /// Rotate Q and K by their absolute positions (self-attention only).
  bool rotary = false;
  /// Dropout rate applied to the attention-weight matrix in training mode.
  double weight_dropout = 0.0;
};

/// softmax(Q K^T / sqrt(d_head)) V per head, concatenated, output-projected.
/// When `mean_weights` is non-null it receives the head-averaged attention
/// weights (before dropout), [Lq, Lk].
Tensor multi_head_attention(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& params,
                            const AttentionOptions& options, const ForwardContext& ctx,
                            Tensor* mean_weights = nullptr);

struct FeedForwardParams {
  FeedForwardParams() = default;
  FeedForwardParams(std::size_t d_model, std::size_t hidden, Rng& rng);

  Tensor w1, b1, w2, b2;
  void collect(ParameterList& out, const std::string& prefix) const;
};

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params);

enum class SublayerKind { FFW, SA, CA, CCA };
const char* to_string(SublayerKind kind);

enum class FirstChunkMode { identity, hybrid };

/// Neighbour encodings consumed by the chunks of a decoder stream. Entry u
/// (0-based chunk index) is used by decoder positions [u*m, (u+1)*m); for
/// u >= 1 it holds encodings of neighbours retrieved with chunk u-1. Entry 0
/// is only read in hybrid mode. An undefined tensor means "no neighbours"
/// and yields a zero attention contribution.
struct ChunkEncodings {
  std::size_t chunk_size = 0;
  FirstChunkMode first_chunk = FirstChunkMode::identity;
  std::vector<Tensor> per_chunk;
};

/// Chunked cross-attention of stream rows against their chunk's neighbour
/// encodings. Chunk 0 is copied through unchanged in identity mode.
Tensor chunked_cross_attention(const Tensor& stream, const ChunkEncodings& memory,
                               const AttentionParams& params, const ForwardContext& ctx);

/// RMSNorm(residual + inner(...)) with the inner function selected by kind.
/// For CA/CCA the residual path and the queries come from the stream; keys
/// and values come from the memory.
class Sublayer {
 public:
  Sublayer() = default;
  Sublayer(SublayerKind kind, std::size_t d_model, std::size_t heads, std::size_t ffw_hidden,
           Rng& rng);

  SublayerKind kind() const { return kind_; }

  /// FFW and SA. Self-attention is causal unless `causal` is cleared (encoders).
  Tensor forward(const Tensor& x, const ForwardContext& ctx, bool causal = true) const;
  /// CA: Sublayer(memory, stream) = RMSNorm(stream + Ca(memory, stream)).
  Tensor forward(const Tensor& memory, const Tensor& stream, const ForwardContext& ctx,
                 Tensor* mean_weights = nullptr) const;
  /// CCA.
  Tensor forward(const ChunkEncodings& memory, const Tensor& stream,
                 const ForwardContext& ctx) const;

  void collect(ParameterList& out, const std::string& prefix) const;

  AttentionParams& attention() { return attention_; }
  const AttentionParams& attention() const { return attention_; }
  FeedForwardParams& ffw() { return ffw_; }
  const FeedForwardParams& ffw() const { return ffw_; }
  const Tensor& gain() const { return gain_; }

 private:
  SublayerKind kind_ = SublayerKind::FFW;
  AttentionParams attention_;
  FeedForwardParams ffw_;
  Tensor gain_;
};

}  // namespace retroseq::nn
