#include "retroseq/nn.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace retroseq::nn {

Tensor init_uniform(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                    DType dtype) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Buffer values(dtype, shape_numel(shape));
  for (std::size_t i = 0; i < values.size(); ++i) values.set(i, rng.uniform(-limit, limit));
  return parameter(shape, std::move(values));
}

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
  return retroseq::rms_norm(x, gain, kRmsEpsilon);
}

Tensor rotary_apply(const Tensor& x, std::span<const std::size_t> positions, std::size_t heads) {
  return retroseq::rotary(x, positions, heads, kRotaryBase);
}

AttentionParams::AttentionParams(std::size_t d, std::size_t h, Rng& rng)
    : d_model(d), heads(h) {
  if (h == 0 || d % h != 0)
    throw std::invalid_argument("attention: model width " + std::to_string(d) +
                                " not divisible by " + std::to_string(h) + " heads");
  wq = init_uniform({d, d}, d, d, rng);
  wk = init_uniform({d, d}, d, d, rng);
  wv = init_uniform({d, d}, d, d, rng);
  wo = init_uniform({d, d}, d, d, rng);
}

void AttentionParams::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".wq", wq});
  out.push_back({prefix + ".wk", wk});
  out.push_back({prefix + ".wv", wv});
  out.push_back({prefix + ".wo", wo});
}

Tensor multi_head_attention(const Tensor& q_src, const Tensor& kv_src, const AttentionParams& params,
                            const AttentionOptions& options, const ForwardContext& ctx,
                            Tensor* mean_weights) {
  if (q_src.cols() != params.d_model || kv_src.cols() != params.d_model)
    throw ShapeError("multi_head_attention: inputs " + shape_str(q_src.shape()) + " and " +
                     shape_str(kv_src.shape()) + " do not have width " +
                     std::to_string(params.d_model));
  Tensor q = matmul(q_src, params.wq);
  Tensor k = matmul(kv_src, params.wk);
  Tensor v = matmul(kv_src, params.wv);
  if (options.rotary) {
    std::vector<std::size_t> qpos(q.rows()), kpos(k.rows());
    std::iota(qpos.begin(), qpos.end(), std::size_t{0});
    std::iota(kpos.begin(), kpos.end(), std::size_t{0});
    q = rotary_apply(q, qpos, params.heads);
    k = rotary_apply(k, kpos, params.heads);
  }
  Tensor probs = attention_scores(q, k, params.heads, options.causal);
  if (mean_weights) *mean_weights = head_mean(probs, params.heads);
  if (ctx.training && ctx.rng && options.weight_dropout > 0.0)
    probs = dropout(probs, options.weight_dropout, *ctx.rng);
  return matmul(attention_apply(probs, v, params.heads), params.wo);
}

FeedForwardParams::FeedForwardParams(std::size_t d, std::size_t hidden, Rng& rng) {
  w1 = init_uniform({d, hidden}, d, hidden, rng);
  b1 = parameter({hidden}, Buffer(default_dtype(), hidden));
  w2 = init_uniform({hidden, d}, hidden, d, rng);
  b2 = parameter({d}, Buffer(default_dtype(), d));
}

void FeedForwardParams::collect(ParameterList& out, const std::string& prefix) const {
  out.push_back({prefix + ".w1", w1});
  out.push_back({prefix + ".b1", b1});
  out.push_back({prefix + ".w2", w2});
  out.push_back({prefix + ".b2", b2});
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  return add_row(matmul(gelu(add_row(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

const char* to_string(SublayerKind kind) {
  switch (kind) {
    case SublayerKind::FFW: return "FFW";
    case SublayerKind::SA: return "SA";
    case SublayerKind::CA: return "CA";
    case SublayerKind::CCA: return "CCA";
  }
  return "?";
}

Tensor chunked_cross_attention(const Tensor& stream, const ChunkEncodings& memory,
                               const AttentionParams& params, const ForwardContext& ctx) {
  const std::size_t m = memory.chunk_size;
  if (m == 0) throw std::invalid_argument("chunked_cross_attention: chunk size must be >= 1");
  const std::size_t length = stream.rows();
  const std::size_t chunks = (length + m - 1) / m;
  const AttentionOptions options{false, false, ctx.cross_dropout};
  std::vector<Tensor> parts;
  parts.reserve(chunks);
  for (std::size_t u = 0; u < chunks; ++u) {
    const std::size_t start = u * m;
    const std::size_t count = std::min(m, length - start);
    Tensor rows = slice_rows(stream, start, count);
    if (u == 0 && memory.first_chunk == FirstChunkMode::identity) {
      parts.push_back(rows);
      continue;
    }
    if (u >= memory.per_chunk.size())
      throw std::invalid_argument("chunked_cross_attention: no neighbour encoding for chunk " +
                                  std::to_string(u + 1));
    const Tensor& enc = memory.per_chunk[u];
    if (!enc.defined()) {
      parts.push_back(zeros({count, stream.cols()}, stream.dtype()));
      continue;
    }
    parts.push_back(multi_head_attention(rows, enc, params, options, ctx));
  }
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

Sublayer::Sublayer(SublayerKind kind, std::size_t d, std::size_t heads, std::size_t ffw_hidden,
                   Rng& rng)
    : kind_(kind) {
  if (kind == SublayerKind::FFW)
    ffw_ = FeedForwardParams(d, ffw_hidden, rng);
  else
    attention_ = AttentionParams(d, heads, rng);
  Buffer ones(default_dtype(), d);
  ones.fill(1.0);
  gain_ = parameter({d}, std::move(ones));
}

Tensor Sublayer::forward(const Tensor& x, const ForwardContext& ctx, bool causal) const {
  switch (kind_) {
    case SublayerKind::FFW:
      return nn::rms_norm(add(x, feed_forward(x, ffw_)), gain_);
    case SublayerKind::SA:
      return nn::rms_norm(add(x, multi_head_attention(x, x, attention_, {causal, true, 0.0}, ctx)),
                          gain_);
    default:
      throw std::invalid_argument(std::string("Sublayer ") + to_string(kind_) +
                                  ": missing secondary input");
  }
}

Tensor Sublayer::forward(const Tensor& memory, const Tensor& stream, const ForwardContext& ctx,
                         Tensor* mean_weights) const {
  if (kind_ != SublayerKind::CA)
    throw std::invalid_argument(std::string("Sublayer ") + to_string(kind_) +
                                ": does not take a dense memory");
  const AttentionOptions options{false, false, ctx.cross_dropout};
  return nn::rms_norm(
      add(stream, multi_head_attention(stream, memory, attention_, options, ctx, mean_weights)),
      gain_);
}

Tensor Sublayer::forward(const ChunkEncodings& memory, const Tensor& stream,
                         const ForwardContext& ctx) const {
  if (kind_ != SublayerKind::CCA)
    throw std::invalid_argument(std::string("Sublayer ") + to_string(kind_) +
                                ": does not take chunked memory");
  return nn::rms_norm(add(stream, chunked_cross_attention(stream, memory, attention_, ctx)), gain_);
}

void Sublayer::collect(ParameterList& out, const std::string& prefix) const {
  if (kind_ == SublayerKind::FFW)
    ffw_.collect(out, prefix + ".ffw");
  else
    attention_.collect(out, prefix + ".attn");
  out.push_back({prefix + ".gain", gain_});
}

}  // namespace retroseq::nn
