#include <cmath>
#include <cstdio>
#include <set>
#include <vector>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "retroseq/binio.hpp"
#include "retroseq/model.hpp"

using namespace retroseq;
using fixtures::param;

namespace {

const nn::ForwardContext eval{};

bool same_values(const Tensor& a, const Tensor& b) { return a.buffer() == b.buffer() && a.shape() == b.shape(); }

std::vector<double> vec(const Tensor& t) { return t.to_vector(); }

oracle::Matrix mat(const Tensor& t) { return oracle::to_matrix(t); }

std::vector<double> gain_of(const Model& m, const std::string& name) { return vec(param(m, name)); }

oracle::Matrix gelu(oracle::Matrix x) {
  for (auto& row : x)
    for (auto& v : row) v = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
  return x;
}

oracle::Matrix add_bias(oracle::Matrix x, const std::vector<double>& b) {
  for (auto& row : x)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  return x;
}

oracle::Matrix plus(oracle::Matrix a, const oracle::Matrix& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

}  // namespace

TEST_CASE("model config") {
  ModelConfig c;
  SUBCASE("defaults follow the published hyperparameters") {
    CHECK(c.d_model == 256);
    CHECK(c.heads == 8);
    CHECK(c.nl_layers == 6);
    CHECK(c.nb_layers == 6);
    CHECK(c.dec_layers == 6);
    CHECK(c.neighbours == 2);
    CHECK(c.period == 3);
    CHECK(c.cross_dropout == 0.4);
    CHECK(c.beam == 15);
  }
  SUBCASE("aggregation schedule is every p-th layer") {
    std::vector<std::size_t> agg;
    for (std::size_t l = 1; l <= c.dec_layers; ++l)
      if (c.aggregates(l)) agg.push_back(l);
    CHECK(agg == std::vector<std::size_t>{3, 6});
    c.aggregation = Aggregation::none;
    for (std::size_t l = 1; l <= c.dec_layers; ++l) CHECK_FALSE(c.aggregates(l));
  }
  SUBCASE("JSON round trip, canonical text, unknown keys rejected") {
    c.vocab = fixtures::toy_vocab(10);
    c.aggregation = Aggregation::parallel;
    c.first_chunk = nn::FirstChunkMode::hybrid;
    const std::string text = c.to_json();
    CHECK(ModelConfig::from_json(text) == c);
    CHECK(ModelConfig::from_json(text).to_json() == text);
    CHECK(text.find(' ') == std::string::npos);
    CHECK_THROWS_AS(ModelConfig::from_json(R"({"d_model":8,"colour":1})"), std::invalid_argument);
    CHECK_THROWS_AS(ModelConfig::from_json(R"({"d_model":-8})"), std::invalid_argument);
    CHECK_THROWS_AS(ModelConfig::from_json(R"({"aggregation":"diagonal"})"), std::invalid_argument);
  }
  SUBCASE("validation") {
    c.vocab = fixtures::toy_vocab(10);
    c.heads = 7;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.heads = 8;
    c.period = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.period = 3;
    c.vocab = {"a", "b"};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  }
}

TEST_CASE("encode_nl") {
  Rng rng(1);
  ModelConfig c = fixtures::tiny_config();
  const Model model(c, 3);
  const auto x = fixtures::random_tokens(rng, 7, 24);

  SUBCASE("shape and evaluation determinism") {
    const Tensor e = model.encode_nl(x, eval);
    CHECK(e.shape() == Shape{7, 8});
    CHECK(same_values(e, model.encode_nl(x, eval)));
  }
  SUBCASE("out-of-vocabulary and empty intents are rejected") {
    CHECK_THROWS_AS(model.encode_nl(std::vector<std::uint32_t>{5, 24}, eval), std::invalid_argument);
    CHECK_THROWS_AS(model.encode_nl(std::vector<std::uint32_t>{}, eval), std::invalid_argument);
  }
  SUBCASE("1-layer, 1-head model matches a hand-composed chain") {
    PrecisionScope f64(DType::f64);
    ModelConfig one = c;
    one.heads = 1;
    const Model m(one, 5);
    oracle::Matrix h;
    const auto table = mat(param(m, "embedding"));
    for (auto id : x) h.push_back(table[id]);
    const auto sa = oracle::attention(h, h, mat(param(m, "nl.0.sa.attn.wq")), mat(param(m, "nl.0.sa.attn.wk")),
                                      mat(param(m, "nl.0.sa.attn.wv")), mat(param(m, "nl.0.sa.attn.wo")), 1,
                                      false, true);
    h = oracle::rms_norm(plus(h, sa), gain_of(m, "nl.0.sa.gain"));
    auto ffw = add_bias(oracle::matmul(gelu(add_bias(oracle::matmul(h, mat(param(m, "nl.0.ffw.ffw.w1"))),
                                                     gain_of(m, "nl.0.ffw.ffw.b1"))),
                                       mat(param(m, "nl.0.ffw.ffw.w2"))),
                        gain_of(m, "nl.0.ffw.ffw.b2"));
    h = oracle::rms_norm(plus(h, ffw), gain_of(m, "nl.0.ffw.gain"));
    CHECK(oracle::max_abs_diff(mat(m.encode_nl(x, eval)), h) < 1e-10);
  }
}

TEST_CASE("encode_neighbours") {
  Rng rng(2);
  const std::size_t m = 3, k = 2;
  SUBCASE("classic: shape k*2m x d, conditioning ignored") {
    const Model model(fixtures::tiny_config(), 7);
    const NeighbourSet set = fixtures::random_set(rng, k, m, 24);
    const Tensor a = model.encode_neighbours(set, Tensor(), eval);
    CHECK(a.shape() == Shape{k * 2 * m, 8});
    const Tensor cond = oracle::to_tensor(oracle::random_matrix(3, 8, rng));
    CHECK(same_values(a, model.encode_neighbours(set, cond, eval)));
    NeighbourSet other_query = set;
    other_query.query = fixtures::random_tokens(rng, m, 24);
    CHECK(same_values(a, model.encode_neighbours(other_query, eval)));
    CHECK_FALSE(model.encode_neighbours(NeighbourSet{}, eval).defined());
  }
  SUBCASE("conditioned: the conditioning states change the encoding") {
    ModelConfig c = fixtures::tiny_config();
    c.neighbour_encoder = NeighbourEncoderKind::conditioned;
    const Model model(c, 7);
    const NeighbourSet set = fixtures::random_set(rng, k, m, 24);
    const Tensor c1 = model.conditioning_states(fixtures::random_tokens(rng, m, 24), eval);
    const Tensor c2 = model.conditioning_states(fixtures::random_tokens(rng, m, 24), eval);
    const Tensor a = model.encode_neighbours(set, c1, eval);
    CHECK(a.shape() == Shape{k * 2 * m, 8});
    CHECK_FALSE(same_values(a, model.encode_neighbours(set, c2, eval)));
    CHECK_THROWS_AS(model.encode_neighbours(set, Tensor(), eval), std::invalid_argument);
  }
  SUBCASE("record length mismatch") {
    const Model model(fixtures::tiny_config(), 7);
    NeighbourSet set = fixtures::random_set(rng, k, m, 24);
    set.records[1].continuation.pop_back();
    CHECK_THROWS_AS(model.encode_neighbours(set, eval), std::invalid_argument);
  }
}

TEST_CASE("decode_layer") {
  Rng rng(3);
  const Model seq(fixtures::tiny_config(Aggregation::sequential), 11);
  const Model par(fixtures::tiny_config(Aggregation::parallel), 11);
  const auto x = fixtures::random_tokens(rng, 5, 24);
  const Tensor e_nl = seq.encode_nl(x, eval);
  const Tensor c = oracle::to_tensor(oracle::random_matrix(7, 8, rng));
  const auto sets = fixtures::random_sets(rng, 3, 2, 3, 24);
  const nn::ChunkEncodings e_nb = seq.neighbour_encodings(sets, 7, eval);

  SUBCASE("non-aggregation layers ignore the neighbour encodings") {
    CHECK(same_values(seq.decode_layer(1, c, e_nl, nullptr, eval), seq.decode_layer(1, c, e_nl, &e_nb, eval)));
  }
  SUBCASE("aggregation layers require encodings") {
    CHECK_THROWS_AS(seq.decode_layer(2, c, e_nl, nullptr, eval), std::invalid_argument);
    CHECK_THROWS_AS(seq.decode_layer(3, c, e_nl, &e_nb, eval), std::out_of_range);
  }
  SUBCASE("sequential and parallel share non-aggregation behaviour but differ where they aggregate") {
    CHECK(same_values(seq.decode_layer(1, c, e_nl, &e_nb, eval), par.decode_layer(1, c, e_nl, &e_nb, eval)));
    const nn::ChunkEncodings par_nb = par.neighbour_encodings(sets, 7, eval);
    CHECK_FALSE(same_values(seq.decode_layer(2, c, e_nl, &e_nb, eval), par.decode_layer(2, c, e_nl, &par_nb, eval)));
  }
  SUBCASE("parallel merge maps 2d to d") {
    CHECK(param(par, "dec.2.merge.w").shape() == Shape{16, 8});
    CHECK(param(par, "dec.2.merge.b").shape() == Shape{8});
    CHECK_THROWS_AS(param(seq, "dec.2.merge.w"), std::out_of_range);
  }
  SUBCASE("sequential layer composes CA then CCA then FFW") {
    PrecisionScope f64(DType::f64);
    const Model m(fixtures::tiny_config(Aggregation::sequential), 13);
    const Tensor c64 = oracle::to_tensor(oracle::random_matrix(7, 8, rng), false, DType::f64);
    const Tensor enl = m.encode_nl(x, eval);
    const nn::ChunkEncodings nb = m.neighbour_encodings(sets, 7, eval);
    auto h = mat(c64);
    auto A = [&](const std::string& p, const oracle::Matrix& q, const oracle::Matrix& kv, bool causal, bool rot) {
      return oracle::attention(q, kv, mat(param(m, p + ".attn.wq")), mat(param(m, p + ".attn.wk")),
                               mat(param(m, p + ".attn.wv")), mat(param(m, p + ".attn.wo")), 2, causal, rot);
    };
    h = oracle::rms_norm(plus(h, A("dec.2.sa", h, h, true, true)), gain_of(m, "dec.2.sa.gain"));
    h = oracle::rms_norm(plus(h, A("dec.2.ca", h, mat(enl), false, false)), gain_of(m, "dec.2.ca.gain"));
    oracle::Matrix cca(h.size(), std::vector<double>(8, 0.0));
    for (std::size_t u = 1; u * 3 < h.size(); ++u) {
      oracle::Matrix rows(h.begin() + u * 3, h.begin() + std::min(h.size(), u * 3 + 3));
      const auto out = A("dec.2.cca", rows, mat(nb.per_chunk[u]), false, false);
      for (std::size_t i = 0; i < out.size(); ++i) cca[u * 3 + i] = out[i];
    }
    for (std::size_t i = 0; i < 3; ++i) cca[i] = std::vector<double>(8, 0.0);
    oracle::Matrix pre = h;
    for (std::size_t i = 3; i < h.size(); ++i)
      for (std::size_t j = 0; j < 8; ++j) pre[i][j] += cca[i][j];
    // Identity first chunk: the sublayer still normalizes its pass-through rows.
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 8; ++j) pre[i][j] = 2 * h[i][j];
    h = oracle::rms_norm(pre, gain_of(m, "dec.2.cca.gain"));
    auto ffw = add_bias(oracle::matmul(gelu(add_bias(oracle::matmul(h, mat(param(m, "dec.2.ffw.ffw.w1"))),
                                                     gain_of(m, "dec.2.ffw.ffw.b1"))),
                                       mat(param(m, "dec.2.ffw.ffw.w2"))),
                        gain_of(m, "dec.2.ffw.ffw.b2"));
    h = oracle::rms_norm(plus(h, ffw), gain_of(m, "dec.2.ffw.gain"));
    CHECK(oracle::max_abs_diff(mat(m.decode_layer(2, c64, enl, &nb, eval)), h) < 1e-10);
  }
}

TEST_CASE("output_distribution") {
  Rng rng(4);
  const Model model(fixtures::tiny_config(), 17);
  const std::vector<std::uint32_t> x{5, 9, 9, 12};
  const std::vector<std::uint32_t> y{kBos, 6, 7, 8, 6};
  const Tensor e_nl = model.encode_nl(x, eval);
  const auto sets = fixtures::random_sets(rng, 2, 2, 3, 24);
  const nn::ChunkEncodings nb = model.neighbour_encodings(sets, y.size(), eval);
  const DecoderOutput dec = model.decode(y, e_nl, &nb, eval);

  SUBCASE("rows are distributions") {
    const Tensor p = model.output_distribution(dec, x);
    REQUIRE(p.shape() == Shape{y.size(), 24});
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double s = 0;
      for (std::size_t v = 0; v < p.cols(); ++v) s += p.at(i, v);
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  SUBCASE("gate 1 is the vocabulary softmax") {
    const Tensor p = model.output_distribution(dec, x, {1.0});
    const auto logits = oracle::matmul(mat(dec.states), mat(transpose(param(model, "embedding"))));
    const auto expect = oracle::softmax_rows(add_bias(logits, vec(param(model, "out_bias"))));
    CHECK(oracle::max_abs_diff(mat(p), expect) < 1e-6);
  }
  SUBCASE("gate 0 puts all mass on intent tokens, split by attention") {
    const Tensor p = model.output_distribution(dec, x, {0.0});
    const std::set<std::uint32_t> present(x.begin(), x.end());
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::uint32_t v = 0; v < 24; ++v) {
        if (!present.count(v)) {
          CHECK(p.at(i, v) == 0.0);
          continue;
        }
        double expect = 0;
        for (std::size_t j = 0; j < x.size(); ++j)
          if (x[j] == v) expect += dec.nl_weights.at(i, j);
        CHECK(std::abs(p.at(i, v) - expect) < 1e-6);
      }
  }
}

TEST_CASE("forward") {
  Rng rng(5);
  const Model model(fixtures::tiny_config(), 19);
  const auto x = fixtures::random_tokens(rng, 6, 24);
  std::vector<std::uint32_t> y{kBos};
  for (auto t : fixtures::random_tokens(rng, 10, 24)) y.push_back(t);
  const auto sets = fixtures::random_sets(rng, 4, 2, 3, 24);

  SUBCASE("one distribution per input position") {
    CHECK(model.forward(x, y, sets, eval).shape() == Shape{y.size(), 24});
  }
  SUBCASE("perturbing y at s only changes positions >= s") {
    const Tensor base = model.forward(x, y, sets, eval);
    for (std::size_t s = 1; s < y.size(); ++s) {
      auto z = y;
      z[s] = 4 + (z[s] - 4 + 1) % 20;
      auto zsets = sets;
      // Neighbours used by later chunks may change with the perturbation too.
      for (std::size_t u = s / 3 + 1; u < zsets.size(); ++u) zsets[u] = fixtures::random_set(rng, 2, 3, 24);
      const Tensor out = model.forward(x, z, zsets, eval);
      bool prefix_same = true, changed = false;
      for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t v = 0; v < 24; ++v) {
          if (i < s) prefix_same &= out.at(i, v) == base.at(i, v);
          else changed |= out.at(i, v) != base.at(i, v);
        }
      CHECK(prefix_same);
      CHECK(changed);
    }
  }
  SUBCASE("missing neighbour coverage") {
    std::vector<NeighbourSet> few(sets.begin(), sets.begin() + 2);
    CHECK_THROWS_AS(model.forward(x, y, few, eval), std::invalid_argument);
  }
  SUBCASE("empty neighbour sets give finite distributions") {
    std::vector<NeighbourSet> none(4);
    const Tensor p = model.forward(x, y, none, eval);
    CHECK(p.buffer().all_finite());
  }
  SUBCASE("the baseline needs no neighbours") {
    const Model base(fixtures::tiny_config(Aggregation::none), 19);
    CHECK(base.forward(x, y, {}, eval).shape() == Shape{y.size(), 24});
  }
}

TEST_CASE("parameter census and count") {
  Rng rng(6);
  SUBCASE("every parameter receives gradient on a smoke batch") {
    for (auto agg : {Aggregation::none, Aggregation::sequential, Aggregation::parallel}) {
      for (auto enc : {NeighbourEncoderKind::classic, NeighbourEncoderKind::conditioned}) {
        ModelConfig c = fixtures::tiny_config(agg);
        c.neighbour_encoder = enc;
        c.first_chunk = nn::FirstChunkMode::hybrid;
        const Model model(c, 23);
        Gradients total;
        for (int ex = 0; ex < 4; ++ex) {
          const auto x = fixtures::random_tokens(rng, 5, 24);
          std::vector<std::uint32_t> y{kBos};
          for (auto t : fixtures::random_tokens(rng, 8, 24)) y.push_back(t);
          const auto sets = fixtures::random_sets(rng, 3, 2, 3, 24);
          const Tensor p = model.forward(x, y, sets, eval);
          std::vector<std::uint32_t> gold(y.begin() + 1, y.end());
          gold.push_back(kEos);
          total.accumulate(grad(scale(sum(log(pick(p, gold))), -1.0)));
        }
        for (const auto& named : model.parameters()) {
          const Tensor g = total.get(named.tensor);
          double norm = 0;
          for (std::size_t i = 0; i < g.numel(); ++i) norm += g.at(i) * g.at(i);
          INFO(to_string(agg) << "/" << to_string(enc) << " " << named.name);
          CHECK(norm > 0.0);
        }
      }
    }
  }
  SUBCASE("default configuration parameter count matches the layer arithmetic") {
    ModelConfig c;
    c.vocab = fixtures::toy_vocab(1000);
    const std::size_t d = 256, f = 1024, V = 1000;
    const std::size_t attn = 4 * d * d + d, ffw = d * f + f + f * d + d + d;
    const std::size_t expect = V * d + V + 6 * (attn + ffw) + 6 * (attn + ffw) +
                               6 * (2 * attn + ffw) + 2 * attn + d + 1;
    const Model a(c, 1), b(c, 2);
    MESSAGE("default parameter count (vocab 1000): " << a.parameter_count());
    CHECK(a.parameter_count() == expect);
    CHECK(b.parameter_count() == expect);
    c.aggregation = Aggregation::parallel;
    CHECK(Model(c, 1).parameter_count() == expect + 2 * (2 * d * d + d));
  }
}

TEST_CASE("weight transplant") {
  Rng rng(7);
  const Model seq(fixtures::tiny_config(Aggregation::sequential), 31);
  Model par(fixtures::tiny_config(Aggregation::parallel), 99);
  const std::size_t copied = par.transplant_from(seq);
  CHECK(copied == seq.parameters().size());
  const auto x = fixtures::random_tokens(rng, 5, 24);
  const Tensor c = oracle::to_tensor(oracle::random_matrix(6, 8, rng));
  const Tensor e_nl = seq.encode_nl(x, eval);
  CHECK(same_values(e_nl, par.encode_nl(x, eval)));
  CHECK(same_values(seq.decode_layer(1, c, e_nl, nullptr, eval), par.decode_layer(1, c, e_nl, nullptr, eval)));
}

TEST_CASE("checkpoint round trip") {
  Rng rng(8);
  ModelConfig c = fixtures::tiny_config(Aggregation::parallel);
  c.first_chunk = nn::FirstChunkMode::hybrid;
  const Model model(c, 37);
  const std::string bytes = model.serialize();
  CHECK(bytes.substr(0, 4) == "RSMD");
  const Model back = Model::deserialize(bytes);
  CHECK(back.config() == model.config());
  CHECK(back.serialize() == bytes);
  const auto x = fixtures::random_tokens(rng, 5, 24);
  std::vector<std::uint32_t> y{kBos, 5, 6, 7, 8};
  const auto sets = fixtures::random_sets(rng, 2, 2, 3, 24);
  CHECK(same_values(model.forward(x, y, sets, eval), back.forward(x, y, sets, eval)));

  std::string flipped = bytes;
  flipped[bytes.size() - 9] ^= 0x40;
  CHECK_THROWS_AS(Model::deserialize(flipped), binio::FormatError);
  CHECK_THROWS_AS(Model::deserialize(bytes.substr(0, 30)), binio::FormatError);
  CHECK_THROWS_AS(Model::deserialize("RSDB" + bytes.substr(4)), binio::FormatError);
}

TEST_CASE("pointer head and aggregation layers pass finite differences") {
  PrecisionScope f64(DType::f64);
  Rng rng(9);
  for (auto agg : {Aggregation::sequential, Aggregation::parallel}) {
    double worst = 0;
    std::string worst_name;
    for (int instance = 0; instance < 5; ++instance) {
      ModelConfig c = fixtures::tiny_config(agg, 12);
      c.d_model = 4;
      c.ffw_hidden = 6;
      c.first_chunk = nn::FirstChunkMode::hybrid;
      const Model model(c, 40 + instance);
      const auto x = fixtures::random_tokens(rng, 3, 12);
      const std::vector<std::uint32_t> y{kBos, 5, 6, 7, 8};
      const std::vector<std::uint32_t> gold{5, 6, 7, 8, kEos};
      const auto sets = fixtures::random_sets(rng, 2, 1, 3, 12);
      std::vector<Tensor> params;
      std::vector<std::string> names;
      for (const auto& p : model.parameters()) {
        params.push_back(p.tensor);
        names.push_back(p.name);
      }
      auto loss = [&] { return scale(sum(log(pick(model.forward(x, y, sets, eval), gold))), -1.0); };
      std::string name;
      const double w = oracle::gradcheck(loss, params, 1e-5, &name, names);
      if (w > worst) {
        worst = w;
        worst_name = name;
      }
    }
    INFO(to_string(agg) << " worst " << worst << " at " << worst_name);
    CHECK(worst < 1e-4);
  }
}
