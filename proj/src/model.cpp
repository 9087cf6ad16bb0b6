#include "retroseq/model.hpp"

#include <json.hpp>

#include <map>
#include <stdexcept>

#include "retroseq/binio.hpp"
#include "retroseq/rng.hpp"

namespace retroseq {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'M', 'D'};
constexpr std::uint32_t kVersion = 1;

using nn::Sublayer;
using nn::SublayerKind;

const char* first_chunk_name(nn::FirstChunkMode m) {
  return m == nn::FirstChunkMode::identity ? "identity" : "hybrid";
}

nn::FirstChunkMode parse_first_chunk(const std::string& s) {
  if (s == "identity") return nn::FirstChunkMode::identity;
  if (s == "hybrid") return nn::FirstChunkMode::hybrid;
  throw std::invalid_argument("first_chunk must be identity or hybrid, got '" + s + "'");
}

}  // namespace

const char* to_string(Aggregation a) {
  switch (a) {
    case Aggregation::none: return "none";
    case Aggregation::sequential: return "sequential";
    case Aggregation::parallel: return "parallel";
  }
  return "?";
}

const char* to_string(NeighbourEncoderKind k) {
  return k == NeighbourEncoderKind::classic ? "classic" : "conditioned";
}

Aggregation parse_aggregation(const std::string& s) {
  if (s == "none" || s == "baseline") return Aggregation::none;
  if (s == "sequential") return Aggregation::sequential;
  if (s == "parallel") return Aggregation::parallel;
  throw std::invalid_argument("aggregation must be none, sequential or parallel, got '" + s + "'");
}

NeighbourEncoderKind parse_neighbour_encoder(const std::string& s) {
  if (s == "classic") return NeighbourEncoderKind::classic;
  if (s == "conditioned") return NeighbourEncoderKind::conditioned;
  throw std::invalid_argument("neighbour encoder must be classic or conditioned, got '" + s + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (d_model == 0) fail("d_model must be >= 1");
  if (heads == 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if ((d_model / heads) % 2 != 0) fail("per-head width must be even for rotary embedding");
  if (nl_layers == 0) fail("nl_layers must be >= 1");
  if (dec_layers == 0) fail("dec_layers must be >= 1");
  if (uses_neighbours() && nb_layers == 0) fail("nb_layers must be >= 1");
  if (ffw_hidden == 0) fail("ffw_hidden must be >= 1");
  if (chunk_size == 0) fail("chunk_size must be >= 1");
  if (neighbours == 0) fail("neighbours must be >= 1");
  if (period == 0) fail("period must be >= 1");
  if (!(cross_dropout >= 0.0 && cross_dropout < 1.0)) fail("cross_dropout must be in [0, 1)");
  if (beam == 0) fail("beam must be >= 1");
  if (max_intent == 0 || max_code == 0) fail("max lengths must be >= 1");
  Vocab::from_tokens(vocab);
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["d_model"] = d_model;
  j["heads"] = heads;
  j["nl_layers"] = nl_layers;
  j["nb_layers"] = nb_layers;
  j["dec_layers"] = dec_layers;
  j["ffw_hidden"] = ffw_hidden;
  j["chunk_size"] = chunk_size;
  j["neighbours"] = neighbours;
  j["period"] = period;
  j["aggregation"] = to_string(aggregation);
  j["neighbour_encoder"] = to_string(neighbour_encoder);
  j["first_chunk"] = first_chunk_name(first_chunk);
  j["cross_dropout"] = cross_dropout;
  j["beam"] = beam;
  j["max_intent"] = max_intent;
  j["max_code"] = max_code;
  j["vocab"] = vocab;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("model config: expected a JSON object");
  ModelConfig c;
  const std::map<std::string, std::size_t*> sizes{
      {"d_model", &c.d_model},       {"heads", &c.heads},         {"nl_layers", &c.nl_layers},
      {"nb_layers", &c.nb_layers},   {"dec_layers", &c.dec_layers}, {"ffw_hidden", &c.ffw_hidden},
      {"chunk_size", &c.chunk_size}, {"neighbours", &c.neighbours}, {"period", &c.period},
      {"beam", &c.beam},             {"max_intent", &c.max_intent}, {"max_code", &c.max_code}};
  for (const auto& [key, value] : j.items()) {
    try {
      if (auto it = sizes.find(key); it != sizes.end()) {
        if (!value.is_number_unsigned()) throw std::invalid_argument("must be a non-negative integer");
        *it->second = value.get<std::size_t>();
      } else if (key == "aggregation") {
        c.aggregation = parse_aggregation(value.get<std::string>());
      } else if (key == "neighbour_encoder") {
        c.neighbour_encoder = parse_neighbour_encoder(value.get<std::string>());
      } else if (key == "first_chunk") {
        c.first_chunk = parse_first_chunk(value.get<std::string>());
      } else if (key == "cross_dropout") {
        c.cross_dropout = value.get<double>();
      } else if (key == "vocab") {
        c.vocab = value.get<std::vector<std::string>>();
      } else {
        throw std::invalid_argument("unknown key");
      }
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("model config: field '" + key + "': " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("model config: field '" + key + "': " + e.what());
    }
  }
  return c;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  build(seed);
}

void Model::build(std::uint64_t seed) {
  const std::size_t d = config_.d_model, h = config_.heads, f = config_.ffw_hidden;
  const std::size_t V = config_.vocab.size();
  params_.clear();
  auto stream = [seed](const std::string& name) { return Rng(mix64(seed, fnv1a64(name))); };
  auto sublayer = [&](SublayerKind kind, const std::string& name) {
    Rng rng = stream(name);
    Sublayer s(kind, d, h, f, rng);
    s.collect(params_, name);
    return s;
  };

  {
    Rng rng = stream("embedding");
    embedding_ = nn::init_uniform({V, d}, V, d, rng);
    out_bias_ = parameter({V}, Buffer(default_dtype(), V));
    params_.push_back({"embedding", embedding_});
    params_.push_back({"out_bias", out_bias_});
  }
  nl_.clear();
  for (std::size_t i = 0; i < config_.nl_layers; ++i) {
    const std::string p = "nl." + std::to_string(i);
    EncoderLayer layer;
    layer.sa = sublayer(SublayerKind::SA, p + ".sa");
    layer.ffw = sublayer(SublayerKind::FFW, p + ".ffw");
    nl_.push_back(std::move(layer));
  }
  nb_.clear();
  if (config_.uses_neighbours()) {
    const bool conditioned = config_.neighbour_encoder == NeighbourEncoderKind::conditioned;
    if (conditioned) cond_sa_ = sublayer(SublayerKind::SA, "cond.sa");
    for (std::size_t i = 0; i < config_.nb_layers; ++i) {
      const std::string p = "nb." + std::to_string(i);
      EncoderLayer layer;
      layer.sa = sublayer(SublayerKind::SA, p + ".sa");
      if (conditioned) layer.ca = sublayer(SublayerKind::CA, p + ".ca");
      layer.ffw = sublayer(SublayerKind::FFW, p + ".ffw");
      nb_.push_back(std::move(layer));
    }
  }
  dec_.clear();
  for (std::size_t l = 1; l <= config_.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayer layer;
    layer.sa = sublayer(SublayerKind::SA, p + ".sa");
    layer.ca = sublayer(SublayerKind::CA, p + ".ca");
    if (config_.aggregates(l)) {
      layer.cca = sublayer(SublayerKind::CCA, p + ".cca");
      if (config_.aggregation == Aggregation::parallel) {
        Rng rng = stream(p + ".merge");
        layer.merge_w = nn::init_uniform({2 * d, d}, 2 * d, d, rng);
        layer.merge_b = parameter({d}, Buffer(default_dtype(), d));
        params_.push_back({p + ".merge.w", layer.merge_w});
        params_.push_back({p + ".merge.b", layer.merge_b});
      }
    }
    layer.ffw = sublayer(SublayerKind::FFW, p + ".ffw");
    dec_.push_back(std::move(layer));
  }
  {
    Rng rng = stream("gate");
    gate_w_ = nn::init_uniform({d, 1}, d, 1, rng);
    gate_b_ = parameter({1}, Buffer(default_dtype(), 1));
    params_.push_back({"gate.w", gate_w_});
    params_.push_back({"gate.b", gate_b_});
  }
}

void Model::check_ids(std::span<const std::uint32_t> ids, const char* what) const {
  if (ids.empty()) throw std::invalid_argument(std::string(what) + " is empty");
  for (std::uint32_t id : ids)
    if (id >= vocab_size())
      throw std::invalid_argument(std::string(what) + " holds out-of-vocabulary id " +
                                  std::to_string(id) + " (vocab size " +
                                  std::to_string(vocab_size()) + ")");
}

Tensor Model::embed(std::span<const std::uint32_t> ids) const { return gather_rows(embedding_, ids); }

Tensor Model::encode_nl(std::span<const std::uint32_t> intent, const nn::ForwardContext& ctx) const {
  check_ids(intent, "intent");
  Tensor x = embed(intent);
  for (const EncoderLayer& layer : nl_) {
    x = layer.sa.forward(x, ctx, false);
    x = layer.ffw.forward(x, ctx);
  }
  return x;
}

Tensor Model::conditioning_states(std::span<const std::uint32_t> tokens,
                                  const nn::ForwardContext& ctx) const {
  if (config_.neighbour_encoder != NeighbourEncoderKind::conditioned || !config_.uses_neighbours())
    return {};
  check_ids(tokens, "conditioning chunk");
  return cond_sa_.forward(embed(tokens), ctx, false);
}

Tensor Model::encode_neighbours(const NeighbourSet& set, const Tensor& conditioning,
                                const nn::ForwardContext& ctx) const {
  if (!config_.uses_neighbours())
    throw std::logic_error("encode_neighbours: this model has no neighbour encoder");
  if (set.empty()) return {};
  const std::size_t m = config_.chunk_size;
  const bool conditioned = config_.neighbour_encoder == NeighbourEncoderKind::conditioned;
  if (conditioned && !conditioning.defined())
    throw std::invalid_argument("encode_neighbours: conditioned encoder needs conditioning states");
  std::vector<Tensor> parts;
  for (const Neighbour& n : set.records) {
    if (n.neighbour.size() != m || n.continuation.size() != m)
      throw std::invalid_argument("encode_neighbours: record holds " +
                                  std::to_string(n.neighbour.size()) + "+" +
                                  std::to_string(n.continuation.size()) + " tokens, expected " +
                                  std::to_string(m) + "+" + std::to_string(m));
    std::vector<std::uint32_t> tokens(n.neighbour);
    tokens.insert(tokens.end(), n.continuation.begin(), n.continuation.end());
    check_ids(tokens, "neighbour record");
    Tensor x = embed(tokens);
    for (const EncoderLayer& layer : nb_) {
      x = layer.sa.forward(x, ctx, false);
      if (conditioned) x = layer.ca.forward(conditioning, x, ctx);
      x = layer.ffw.forward(x, ctx);
    }
    parts.push_back(x);
  }
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

Tensor Model::encode_neighbours(const NeighbourSet& set, const nn::ForwardContext& ctx) const {
  if (set.empty()) return {};
  Tensor cond;
  if (config_.neighbour_encoder == NeighbourEncoderKind::conditioned)
    cond = conditioning_states(set.query, ctx);
  return encode_neighbours(set, cond, ctx);
}

nn::ChunkEncodings Model::neighbour_encodings(std::span<const NeighbourSet> per_chunk,
                                              std::size_t length,
                                              const nn::ForwardContext& ctx) const {
  const std::size_t m = config_.chunk_size;
  nn::ChunkEncodings out{m, config_.first_chunk, {}};
  const std::size_t chunks = (length + m - 1) / m;
  if (per_chunk.size() < chunks)
    throw std::invalid_argument("neighbours cover " + std::to_string(per_chunk.size()) +
                                " chunks, the decoder stream has " + std::to_string(chunks));
  out.per_chunk.resize(chunks);
  for (std::size_t u = 0; u < chunks; ++u) {
    if (u == 0 && config_.first_chunk == nn::FirstChunkMode::identity) continue;
    out.per_chunk[u] = encode_neighbours(per_chunk[u], ctx);
  }
  return out;
}

Tensor Model::decode_layer(std::size_t l, const Tensor& c, const Tensor& e_nl,
                           const nn::ChunkEncodings* e_nb, const nn::ForwardContext& ctx,
                           Tensor* nl_weights) const {
  if (l == 0 || l > dec_.size())
    throw std::out_of_range("decoder layer " + std::to_string(l) + " outside 1.." +
                            std::to_string(dec_.size()));
  const DecoderLayer& layer = dec_[l - 1];
  const Tensor h = layer.sa.forward(c, ctx, true);
  const Tensor c_nl = layer.ca.forward(e_nl, h, ctx, nl_weights);
  if (!config_.aggregates(l)) return layer.ffw.forward(c_nl, ctx);
  if (!e_nb)
    throw std::invalid_argument("decoder layer " + std::to_string(l) +
                                " aggregates neighbours but none were supplied");
  if (config_.aggregation == Aggregation::sequential)
    return layer.ffw.forward(layer.cca.forward(*e_nb, c_nl, ctx), ctx);
  const Tensor c_nb = layer.cca.forward(*e_nb, h, ctx);
  const Tensor both[2] = {c_nb, c_nl};
  const Tensor merged = add_row(matmul(concat_cols(both), layer.merge_w), layer.merge_b);
  return layer.ffw.forward(merged, ctx);
}

DecoderOutput Model::decode(std::span<const std::uint32_t> y_in, const Tensor& e_nl,
                            const nn::ChunkEncodings* e_nb, const nn::ForwardContext& ctx) const {
  check_ids(y_in, "decoder input");
  DecoderOutput out;
  Tensor c = embed(y_in);
  for (std::size_t l = 1; l <= dec_.size(); ++l)
    c = decode_layer(l, c, e_nl, e_nb, ctx, l == dec_.size() ? &out.nl_weights : nullptr);
  out.states = c;
  return out;
}

Tensor Model::output_distribution(const DecoderOutput& dec, std::span<const std::uint32_t> intent,
                                  const OutputOptions& options) const {
  const std::size_t L = dec.states.rows();
  if (dec.nl_weights.cols() != intent.size())
    throw ShapeError("output_distribution: copy weights span " +
                     std::to_string(dec.nl_weights.cols()) + " intent positions, intent has " +
                     std::to_string(intent.size()));
  const Tensor vocab_probs =
      softmax(add_row(matmul(dec.states, transpose(embedding_)), out_bias_));
  const Tensor copy_probs = scatter_cols(dec.nl_weights, intent, vocab_size());
  const Tensor gate = options.gate
                          ? full({L, 1}, *options.gate, dec.states.dtype())
                          : sigmoid(add_row(matmul(dec.states, gate_w_), gate_b_));
  const Tensor keep = add_scalar(scale(gate, -1.0), 1.0);
  return add(mul_col(vocab_probs, gate), mul_col(copy_probs, keep));
}

Tensor Model::forward(std::span<const std::uint32_t> intent, std::span<const std::uint32_t> y_in,
                      std::span<const NeighbourSet> per_chunk, const nn::ForwardContext& ctx) const {
  const Tensor e_nl = encode_nl(intent, ctx);
  if (!config_.uses_neighbours()) return output_distribution(decode(y_in, e_nl, nullptr, ctx), intent);
  const nn::ChunkEncodings e_nb = neighbour_encodings(per_chunk, y_in.size(), ctx);
  return output_distribution(decode(y_in, e_nl, &e_nb, ctx), intent);
}

std::vector<Tensor> Model::parameter_tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t Model::transplant_from(const Model& other) {
  std::map<std::string, const Tensor*> theirs;
  for (const auto& p : other.params_) theirs[p.name] = &p.tensor;
  std::size_t copied = 0;
  for (auto& p : params_) {
    auto it = theirs.find(p.name);
    if (it == theirs.end() || it->second->shape() != p.tensor.shape()) continue;
    Buffer& dst = p.tensor.mutable_buffer();
    const Buffer& src = it->second->buffer();
    for (std::size_t i = 0; i < dst.size(); ++i) dst.set(i, src.get(i));
    ++copied;
  }
  return copied;
}

std::string Model::serialize() const {
  std::string b;
  b.append(kMagic, 4);
  binio::put_u32(b, kVersion);
  const std::string json = config_.to_json();
  binio::put_u32(b, static_cast<std::uint32_t>(json.size()));
  b += json;
  binio::put_u32(b, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    const Tensor& t = p.tensor;
    binio::put_u32(b, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t extent : t.shape()) binio::put_u32(b, static_cast<std::uint32_t>(extent));
    for (std::size_t i = 0; i < t.numel(); ++i) binio::put_f32(b, static_cast<float>(t.at(i)));
  }
  binio::put_u32(b, binio::crc32(b));
  return b;
}

Model Model::deserialize(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != std::string_view(kMagic, 4))
    throw binio::FormatError("not a model checkpoint (missing RSMD magic)");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  if (binio::load_u32(bytes.data() + body.size()) != binio::crc32(body))
    throw binio::FormatError("model checkpoint checksum mismatch");
  binio::Reader r(body, "model checkpoint");
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw binio::FormatError("unsupported model checkpoint version " + std::to_string(version));
  const std::uint32_t json_len = r.u32();
  const std::string_view json = r.take(json_len);
  Model model;
  model.config_ = ModelConfig::from_json(std::string(json));
  model.config_.validate();
  model.build(0);
  const std::uint32_t count = r.u32();
  if (count != model.params_.size())
    throw binio::FormatError("checkpoint holds " + std::to_string(count) +
                             " tensors, the configured model has " +
                             std::to_string(model.params_.size()));
  for (auto& p : model.params_) {
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    if (shape != p.tensor.shape())
      throw binio::FormatError("tensor " + p.name + " has shape " + shape_str(shape) +
                               ", expected " + shape_str(p.tensor.shape()));
    Buffer& dst = p.tensor.mutable_buffer();
    for (std::size_t i = 0; i < dst.size(); ++i) dst.set(i, r.f32());
  }
  if (r.remaining() != 0) throw binio::FormatError("trailing bytes after model parameters");
  return model;
}

void Model::save(const std::string& path) const { binio::write_file(path, serialize()); }

Model Model::load(const std::string& path) { return deserialize(binio::read_file(path)); }

}  // namespace retroseq
