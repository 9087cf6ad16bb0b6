#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "retroseq/nn.hpp"

using namespace retroseq;
using namespace retroseq::nn;

namespace {

Tensor ones_gain(std::size_t d) { return full({d}, 1.0); }

oracle::Matrix weights(const Tensor& t) { return oracle::to_matrix(t); }

double pair_norm(const Tensor& t, std::size_t r, std::size_t c) {
  return std::hypot(t.at(r, c), t.at(r, c + 1));
}

}  // namespace

TEST_CASE("rms_norm examples") {
  const Tensor a = nn::rms_norm(from_values({1, 4}, {1, 1, 1, 1}), ones_gain(4));
  for (double v : a.to_vector()) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));

  const Tensor b = nn::rms_norm(from_values({1, 2}, {3, 3}), ones_gain(2));
  for (double v : b.to_vector()) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));

  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = oracle::random_matrix(3, 8, rng, 3.0);
    std::vector<double> gain(8);
    for (auto& g : gain) g = rng.uniform(0.5, 1.5);
    const Tensor got = nn::rms_norm(oracle::to_tensor(x), from_values({8}, gain));
    CHECK(oracle::max_rel_diff(oracle::to_matrix(got), oracle::rms_norm(x, gain)) < 1e-5);
    // Scale invariance, limited by epsilon.
    for (double alpha : {2.0, 10.0, 100.0}) {
      const Tensor scaled = nn::rms_norm(scale(oracle::to_tensor(x), alpha), from_values({8}, gain));
      CHECK(oracle::max_abs_diff(oracle::to_matrix(scaled), oracle::to_matrix(got)) < 1e-5);
    }
  }
  CHECK_THROWS_AS(nn::rms_norm(zeros({2, 3}), ones_gain(4)), ShapeError);
}

TEST_CASE("rotary_apply examples") {
  Rng rng(11);
  const auto x = oracle::random_matrix(3, 8, rng);
  const Tensor xt = oracle::to_tensor(x);
  std::vector<std::size_t> zero(3, 0);
  CHECK(rotary_apply(xt, zero, 2).to_vector() == xt.to_vector());

  std::vector<std::size_t> pos{0, 5, 17};
  const Tensor r = rotary_apply(xt, pos, 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 8; c += 2)
      CHECK(pair_norm(r, i, c) == doctest::Approx(pair_norm(xt, i, c)).epsilon(1e-6));

  // Relative-position property: <R(p1) q, R(p2) k> depends only on p1 - p2.
  PrecisionScope f64(DType::f64);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor q = oracle::to_tensor(oracle::random_matrix(1, 8, rng), false, DType::f64);
    const Tensor k = oracle::to_tensor(oracle::random_matrix(1, 8, rng), false, DType::f64);
    const std::size_t p1 = rng.below(30), p2 = rng.below(30), s = rng.below(100);
    auto dot_at = [&](std::size_t a, std::size_t b) {
      std::vector<std::size_t> pa{a}, pb{b};
      const auto qa = rotary_apply(q, pa, 1).to_vector(), kb = rotary_apply(k, pb, 1).to_vector();
      return std::inner_product(qa.begin(), qa.end(), kb.begin(), 0.0);
    };
    CHECK(std::abs(dot_at(p1, p2) - dot_at(p1 + s, p2 + s)) < 1e-5);
  }
  std::vector<std::size_t> one{0};
  CHECK_THROWS_AS(rotary_apply(zeros({1, 6}), one, 2), ShapeError);
}

TEST_CASE("multi_head_attention") {
  Rng rng(12);
  const ForwardContext eval;
  AttentionParams params(8, 2, rng);

  SUBCASE("a single key/value row is returned (projected) for any query") {
    const auto kv = oracle::random_matrix(1, 8, rng);
    const auto q = oracle::random_matrix(4, 8, rng);
    const Tensor out = multi_head_attention(oracle::to_tensor(q), oracle::to_tensor(kv), params, {}, eval);
    const auto expected =
        oracle::matmul(oracle::matmul(kv, weights(params.wv)), weights(params.wo));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 8; ++j) CHECK(out.at(i, j) == doctest::Approx(expected[0][j]).epsilon(1e-5));
  }

  SUBCASE("causal outputs ignore later rows exactly") {
    auto x = oracle::random_matrix(6, 8, rng);
    const AttentionOptions causal{true, true, 0.0};
    const Tensor base = multi_head_attention(oracle::to_tensor(x), oracle::to_tensor(x), params, causal, eval);
    for (std::size_t t = 0; t < 6; ++t) {
      auto y = x;
      for (std::size_t r = t + 1; r < 6; ++r)
        for (auto& v : y[r]) v += rng.uniform(-5, 5);
      const Tensor pert = multi_head_attention(oracle::to_tensor(y), oracle::to_tensor(y), params, causal, eval);
      for (std::size_t r = 0; r <= t; ++r)
        for (std::size_t j = 0; j < 8; ++j) CHECK(pert.at(r, j) == base.at(r, j));
    }
  }

  SUBCASE("random inputs match the per-position loop oracle") {
    for (int trial = 0; trial < 30; ++trial) {
      const bool self = trial % 2 == 0;
      const auto q = oracle::random_matrix(5, 8, rng);
      const auto kv = self ? q : oracle::random_matrix(3, 8, rng);
      const AttentionOptions opts{self, self, 0.0};
      const Tensor got = multi_head_attention(oracle::to_tensor(q), oracle::to_tensor(kv), params, opts, eval);
      const auto want = oracle::attention(q, kv, weights(params.wq), weights(params.wk), weights(params.wv),
                                          weights(params.wo), 2, self, self);
      CHECK(oracle::max_abs_diff(oracle::to_matrix(got), want) < 1e-5);
    }
  }

  SUBCASE("width mismatch") {
    CHECK_THROWS_AS(multi_head_attention(zeros({2, 6}), zeros({2, 8}), params, {}, eval), ShapeError);
  }
}

TEST_CASE("residual sublayers") {
  Rng rng(13);
  const ForwardContext eval;
  const auto x = oracle::random_matrix(4, 8, rng);
  const Tensor xt = oracle::to_tensor(x);
  const Tensor mem = oracle::to_tensor(oracle::random_matrix(3, 8, rng));

  SUBCASE("zero inner function reduces to rms_norm of the residual") {
    Sublayer sa(SublayerKind::SA, 8, 2, 16, rng);
    sa.attention().wo.mutable_buffer().fill(0.0);
    CHECK(sa.forward(xt, eval).to_vector() == nn::rms_norm(xt, sa.gain()).to_vector());
    Sublayer ca(SublayerKind::CA, 8, 2, 16, rng);
    ca.attention().wo.mutable_buffer().fill(0.0);
    CHECK(ca.forward(mem, xt, eval).to_vector() == nn::rms_norm(xt, ca.gain()).to_vector());
  }

  SUBCASE("FFW equals rms_norm(x + ffw(x)) composed by hand") {
    Sublayer ffw(SublayerKind::FFW, 8, 2, 16, rng);
    const auto& p = ffw.ffw();
    auto h = oracle::matmul(x, weights(p.w1));
    for (auto& row : h)
      for (std::size_t j = 0; j < row.size(); ++j) {
        const double z = row[j] + p.b1.at(j);
        row[j] = 0.5 * z * (1 + std::tanh(0.7978845608028654 * (z + 0.044715 * z * z * z)));
      }
    auto y = oracle::matmul(h, weights(p.w2));
    for (std::size_t i = 0; i < y.size(); ++i)
      for (std::size_t j = 0; j < 8; ++j) y[i][j] += p.b2.at(j) + x[i][j];
    const auto want = oracle::rms_norm(y, std::vector<double>(8, 1.0));
    CHECK(oracle::max_abs_diff(oracle::to_matrix(ffw.forward(xt, eval)), want) < 1e-5);
  }

  SUBCASE("output shape equals the residual input shape for all kinds") {
    ChunkEncodings chunks{2, FirstChunkMode::identity, {Tensor(), mem}};
    CHECK(Sublayer(SublayerKind::FFW, 8, 2, 16, rng).forward(xt, eval).shape() == xt.shape());
    CHECK(Sublayer(SublayerKind::SA, 8, 2, 16, rng).forward(xt, eval).shape() == xt.shape());
    CHECK(Sublayer(SublayerKind::CA, 8, 2, 16, rng).forward(mem, xt, eval).shape() == xt.shape());
    CHECK(Sublayer(SublayerKind::CCA, 8, 2, 16, rng).forward(chunks, xt, eval).shape() == xt.shape());
  }

  SUBCASE("CA and CCA require a secondary input") {
    CHECK_THROWS_AS(Sublayer(SublayerKind::CA, 8, 2, 16, rng).forward(xt, eval), std::invalid_argument);
    CHECK_THROWS_AS(Sublayer(SublayerKind::CCA, 8, 2, 16, rng).forward(xt, eval), std::invalid_argument);
  }
}

TEST_CASE("chunked_cross_attention") {
  Rng rng(14);
  const ForwardContext eval;
  const std::size_t d = 8, m = 4, k = 2, length = 12;
  AttentionParams params(d, 2, rng);
  const auto c = oracle::random_matrix(length, d, rng);
  std::vector<oracle::Matrix> enc;
  ChunkEncodings memory{m, FirstChunkMode::identity, {Tensor()}};
  for (std::size_t u = 1; u < 3; ++u) {
    enc.push_back(oracle::random_matrix(k * 2 * m, d, rng));
    memory.per_chunk.push_back(oracle::to_tensor(enc.back()));
  }
  const Tensor out = chunked_cross_attention(oracle::to_tensor(c), memory, params, eval);

  SUBCASE("identity mode copies the first chunk bitwise") {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) CHECK(out.at(i, j) == oracle::to_tensor(c).at(i, j));
  }

  SUBCASE("per-position reference applying plain cross-attention chunk by chunk") {
    for (std::size_t pos = m; pos < length; ++pos) {
      const std::size_t u = pos / m;
      const auto want = oracle::attention({c[pos]}, enc[u - 1], weights(params.wq), weights(params.wk),
                                          weights(params.wv), weights(params.wo), 2, false, false);
      for (std::size_t j = 0; j < d; ++j) CHECK(out.at(pos, j) == doctest::Approx(want[0][j]).epsilon(1e-5));
    }
  }

  SUBCASE("perturbing chunk u leaves earlier chunks unchanged") {
    for (std::size_t pos = 0; pos < length; ++pos) {
      auto y = c;
      for (auto& v : y[pos]) v += 3.0;
      const Tensor pert = chunked_cross_attention(oracle::to_tensor(y), memory, params, eval);
      for (std::size_t r = 0; r < (pos / m) * m; ++r)
        for (std::size_t j = 0; j < d; ++j) CHECK(pert.at(r, j) == out.at(r, j));
    }
  }

  SUBCASE("zeroed encodings with identity first chunk leave only the normalization") {
    ChunkEncodings zero = memory;
    for (std::size_t u = 1; u < zero.per_chunk.size(); ++u)
      zero.per_chunk[u] = zeros(zero.per_chunk[u].shape());
    Sublayer cca(SublayerKind::CCA, d, 2, 16, rng);
    const Tensor xt = oracle::to_tensor(c);
    const Tensor got = cca.forward(zero, xt, eval);
    // Chunk 1: RMSNorm(2x); later chunks: RMSNorm(x + 0).
    auto doubled = c;
    for (std::size_t i = 0; i < m; ++i)
      for (auto& v : doubled[i]) v *= 2;
    const auto want = oracle::rms_norm(doubled, std::vector<double>(d, 1.0));
    CHECK(oracle::max_abs_diff(oracle::to_matrix(got), want) < 1e-5);
  }

  SUBCASE("hybrid mode attends in the first chunk and needs its encoding") {
    ChunkEncodings hybrid = memory;
    hybrid.first_chunk = FirstChunkMode::hybrid;
    ChunkEncodings truncated{m, FirstChunkMode::hybrid, {}};
    CHECK_THROWS_AS(chunked_cross_attention(oracle::to_tensor(c), truncated, params, eval), std::invalid_argument);
    hybrid.per_chunk[0] = memory.per_chunk[1];
    const Tensor h = chunked_cross_attention(oracle::to_tensor(c), hybrid, params, eval);
    CHECK(h.at(0, 0) != out.at(0, 0));
  }

  SUBCASE("missing encoding for a required chunk") {
    ChunkEncodings short_memory{m, FirstChunkMode::identity, {Tensor(), memory.per_chunk[1]}};
    CHECK_THROWS_AS(chunked_cross_attention(oracle::to_tensor(c), short_memory, params, eval),
                    std::invalid_argument);
  }
}

TEST_CASE("gradients through every sublayer kind pass finite differences") {
  PrecisionScope f64(DType::f64);
  Rng rng(15);
  for (auto kind : {SublayerKind::FFW, SublayerKind::SA, SublayerKind::CA, SublayerKind::CCA}) {
    double worst = 0;
    for (int instance = 0; instance < 20; ++instance) {
      Sublayer layer(kind, 4, 2, 6, rng);
      Tensor x = oracle::to_tensor(oracle::random_matrix(5, 4, rng), true, DType::f64);
      Tensor mem = oracle::to_tensor(oracle::random_matrix(4, 4, rng), true, DType::f64);
      ParameterList named;
      layer.collect(named, "l");
      std::vector<Tensor> params{x, mem};
      for (auto& p : named) params.push_back(p.tensor);
      auto loss = [&] {
        ForwardContext eval;
        Tensor y;
        if (kind == SublayerKind::CA)
          y = layer.forward(mem, x, eval);
        else if (kind == SublayerKind::CCA)
          y = layer.forward(ChunkEncodings{2, FirstChunkMode::hybrid, {mem, mem, mem}}, x, eval);
        else
          y = layer.forward(x, eval);
        return oracle::random_readout(y, 99);
      };
      worst = std::max(worst, oracle::gradcheck(loss, params));
    }
    INFO(to_string(kind) << " worst " << worst);
    CHECK(worst < 1e-4);
  }
}
