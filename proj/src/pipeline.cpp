#include "retroseq/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <thread>
#include <unordered_set>

#include "retroseq/lexer.hpp"
#include "retroseq/optim.hpp"
#include "retroseq/rng.hpp"

namespace retroseq {

namespace {

constexpr double kProbFloor = 1e-12;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::uint32_t> slice(std::span<const std::uint32_t> v, std::size_t start, std::size_t n) {
  return {v.begin() + static_cast<std::ptrdiff_t>(start),
          v.begin() + static_cast<std::ptrdiff_t>(start + n)};
}

void check_vocab(const std::vector<EncodedExample>& data, std::size_t vocab, const char* what) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto bad = [&](const std::vector<std::uint32_t>& ids) {
      return std::any_of(ids.begin(), ids.end(), [&](std::uint32_t t) { return t >= vocab; });
    };
    if (bad(data[i].intent) || bad(data[i].code))
      throw std::invalid_argument(std::string("vocabulary mismatch: ") + what + " example " +
                                  std::to_string(i) + " has token ids beyond the model vocabulary (" +
                                  std::to_string(vocab) + ")");
  }
}

bool hybrid_model(const Model& model) {
  return model.config().first_chunk == nn::FirstChunkMode::hybrid;
}

struct VecHash {
  std::size_t operator()(const std::vector<std::uint32_t>& v) const {
    return static_cast<std::size_t>(sequence_hash(v));
  }
};

}  // namespace

const std::string& effective_intent(const Example& e) {
  return e.rewritten_intent && !e.rewritten_intent->empty() ? *e.rewritten_intent : e.intent;
}

std::vector<Example> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(where + ": " + ex.what());
    }
    if (!j.is_object()) throw DataError(where + ": expected a JSON object");
    auto text = [&](const char* key) -> std::optional<std::string> {
      auto it = j.find(key);
      if (it == j.end() || it->is_null()) return std::nullopt;
      if (!it->is_string()) throw DataError(where + ": field '" + key + "' is not a string");
      return it->get<std::string>();
    };
    Example e;
    auto intent = text("intent");
    auto snippet = text("snippet");
    if (!intent) throw DataError(where + ": missing field 'intent'");
    if (!snippet) throw DataError(where + ": missing field 'snippet'");
    e.intent = *intent;
    e.snippet = *snippet;
    e.rewritten_intent = text("rewritten_intent");
    out.push_back(std::move(e));
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& e : examples) {
    nlohmann::ordered_json j;
    j["intent"] = e.intent;
    if (e.rewritten_intent) j["rewritten_intent"] = *e.rewritten_intent;
    j["snippet"] = e.snippet;
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failed: " + path);
}

namespace {

template <class Lookup>
EncodedExample encode_with(const Example& e, bool normalize, std::size_t max_intent,
                           std::size_t max_code, Lookup&& lookup) {
  const std::string& raw_intent = effective_intent(e);
  EncodedExample out;
  out.source = source_id(raw_intent, e.snippet);
  std::vector<std::string> it, ct;
  if (normalize) {
    NormalizedPair np = normalize_pair(raw_intent, e.snippet);
    it = intent_tokens(np.intent);
    ct = code_tokens(np.code);
    out.map = std::move(np.map);
  } else {
    it = intent_tokens(raw_intent);
    ct = code_tokens(e.snippet);
  }
  if (max_intent && it.size() > max_intent) it.resize(max_intent);
  if (max_code && ct.size() > max_code) ct.resize(max_code);
  for (const auto& t : it) out.intent.push_back(lookup(t));
  for (const auto& t : ct) out.code.push_back(lookup(t));
  return out;
}

}  // namespace

EncodedExample encode_example(const Example& e, bool normalize, Vocab& vocab, bool grow,
                              std::size_t max_intent, std::size_t max_code) {
  return encode_with(e, normalize, max_intent, max_code, [&](const std::string& t) {
    return grow ? vocab.add(t) : vocab.id(t);
  });
}

EncodedExample encode_example(const Example& e, bool normalize, const Vocab& vocab,
                              std::size_t max_intent, std::size_t max_code) {
  return encode_with(e, normalize, max_intent, max_code,
                     [&](const std::string& t) { return vocab.id(t); });
}

std::vector<std::uint32_t> decoder_input(std::span<const std::uint32_t> code) {
  std::vector<std::uint32_t> out{kBos};
  out.insert(out.end(), code.begin(), code.end());
  return out;
}

std::vector<std::uint32_t> decoder_target(std::span<const std::uint32_t> code) {
  std::vector<std::uint32_t> out(code.begin(), code.end());
  out.push_back(kEos);
  return out;
}

NeighbourSet Retriever::code_neighbours(std::span<const std::uint32_t> chunk,
                                        std::optional<std::uint64_t> exclude) const {
  const Embedding q = embedder->embed_code(chunk);
  NeighbourSet s = db->query_k(q, k, {KeyKind::code, backend, exclude, 0});
  s.query.assign(chunk.begin(), chunk.end());
  return s;
}

NeighbourSet Retriever::intent_neighbours(std::span<const std::uint32_t> intent,
                                          std::optional<std::uint64_t> exclude) const {
  const Embedding q = embedder->embed_intent(intent);
  NeighbourSet s = db->query_k(q, k, {KeyKind::intent, backend, exclude, 0});
  s.query.assign(intent.begin(), intent.end());
  return s;
}

void check_compatible(const Model& model, const Retriever& r) {
  const ModelConfig& c = model.config();
  if (!r.db || !r.embedder) throw std::invalid_argument("retriever needs a database and an embedder");
  if (r.db->embedder_id() != r.embedder->id() || r.db->dim() != r.embedder->dim())
    throw std::invalid_argument("database keys come from embedder '" + r.db->embedder_id() + "' (" +
                                std::to_string(r.db->dim()) + "), the retriever uses '" +
                                r.embedder->id() + "' (" + std::to_string(r.embedder->dim()) + ")");
  if (r.db->chunk_size() != c.chunk_size)
    throw std::invalid_argument("database chunk size " + std::to_string(r.db->chunk_size()) +
                                " differs from the model's " + std::to_string(c.chunk_size));
  if (r.k != c.neighbours)
    throw std::invalid_argument("retriever k=" + std::to_string(r.k) + " but the model expects " +
                                std::to_string(c.neighbours) + " neighbours");
  if (c.first_chunk == nn::FirstChunkMode::hybrid && r.db->mode() != DbMode::hybrid)
    throw std::invalid_argument("hybrid first chunk needs a hybrid database");
  const std::size_t v = model.vocab_size();
  for (std::size_t i = 0; i < r.db->size(); ++i) {
    const ChunkRecord& e = r.db->entry(i);
    auto bad = [&](std::uint32_t t) { return t >= v; };
    if (std::any_of(e.neighbour.begin(), e.neighbour.end(), bad) ||
        std::any_of(e.continuation.begin(), e.continuation.end(), bad))
      throw std::invalid_argument("vocabulary mismatch: database entry " + std::to_string(i) +
                                  " has token ids beyond the model vocabulary (" +
                                  std::to_string(v) + ")");
  }
}

std::vector<NeighbourSet> teacher_neighbours(const Retriever& r, const EncodedExample& ex,
                                             bool hybrid_first_chunk,
                                             std::optional<std::uint64_t> exclude) {
  const std::size_t m = r.db->chunk_size();
  const std::size_t chunks = (ex.code.size() + 1 + m - 1) / m;
  std::vector<NeighbourSet> out(chunks);
  if (hybrid_first_chunk) out[0] = r.intent_neighbours(ex.intent, exclude);
  for (std::size_t u = 1; u < chunks; ++u)
    out[u] = r.code_neighbours(slice(ex.code, (u - 1) * m, m), exclude);
  return out;
}

NeighbourCache precompute_neighbours(const std::vector<EncodedExample>& data, const Retriever& r,
                                     bool hybrid_first_chunk) {
  if (!r.db || r.db->size() == 0) throw std::invalid_argument("precompute_neighbours: database is empty");
  NeighbourCache cache;
  cache.sets.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    cache.sets.push_back(teacher_neighbours(r, data[i], hybrid_first_chunk, data[i].source));
    const auto& sets = cache.sets.back();
    std::size_t starved = 0;
    for (std::size_t u = 0; u < sets.size(); ++u) {
      const KeyKind kind = u == 0 ? KeyKind::intent : KeyKind::code;
      if ((u > 0 || hybrid_first_chunk) && sets[u].empty() && r.db->count(kind) > 0) ++starved;
    }
    if (starved)
      cache.warnings.push_back("example " + std::to_string(i) + ": " + std::to_string(starved) +
                               " neighbour set(s) empty because every candidate entry shares its "
                               "source id (possible train/database leakage)");
  }
  return cache;
}

Tensor example_loss(const Model& model, const EncodedExample& ex,
                    std::span<const NeighbourSet> neighbours, const nn::ForwardContext& ctx) {
  const auto y_in = decoder_input(ex.code);
  const auto target = decoder_target(ex.code);
  const Tensor probs = model.forward(ex.intent, y_in, neighbours, ctx);
  return scale(sum(log(add_scalar(pick(probs, target), kProbFloor))), -1.0);
}

// Decoding.

namespace {

// Incremental state shared by greedy and beam search for one intent.
class Decoder {
 public:
  Decoder(const Model& model, const Retriever* retriever, std::span<const std::uint32_t> intent,
          const DecodeOptions& options)
      : model_(model), retriever_(retriever), intent_(intent.begin(), intent.end()), options_(options) {
    if (intent.empty()) throw std::invalid_argument("decode: empty intent");
    const auto& c = model.config();
    m_ = c.chunk_size;
    neighbours_ = c.uses_neighbours();
    if (neighbours_ && !retriever) throw std::invalid_argument("decode: model needs a retriever");
    e_nl_ = model.encode_nl(intent_, ctx_);
    if (neighbours_ && hybrid_model(model)) {
      const NeighbourSet s = retriever->intent_neighbours(intent_, options.exclude);
      first_ = model.encode_neighbours(s, ctx_);
    }
  }

  // Log-probabilities of the next token after `code`.
  std::vector<double> next_log_probs(const std::vector<std::uint32_t>& code) {
    const auto y_in = decoder_input(code);
    const std::size_t L = y_in.size();
    nn::ChunkEncodings enc{m_, model_.config().first_chunk, {}};
    if (neighbours_) {
      const std::size_t chunks = (L + m_ - 1) / m_;
      enc.per_chunk.resize(chunks);
      enc.per_chunk[0] = first_;
      for (std::size_t u = 1; u < chunks; ++u) enc.per_chunk[u] = chunk_encoding(slice(code, (u - 1) * m_, m_));
    }
    const DecoderOutput dec = model_.decode(y_in, e_nl_, neighbours_ ? &enc : nullptr, ctx_);
    const DecoderOutput last{slice_rows(dec.states, L - 1, 1), slice_rows(dec.nl_weights, L - 1, 1)};
    const Tensor p = model_.output_distribution(last, intent_);
    std::vector<double> out(p.numel());
    for (std::size_t v = 0; v < out.size(); ++v) out[v] = std::log(p.at(v) + kProbFloor);
    return out;
  }

 private:
  const Tensor& chunk_encoding(const std::vector<std::uint32_t>& chunk) {
    auto it = cache_.find(chunk);
    if (it != cache_.end()) return it->second;
    const NeighbourSet s = retriever_->code_neighbours(chunk, options_.exclude);
    return cache_.emplace(chunk, model_.encode_neighbours(s, ctx_)).first->second;
  }

  NoGradGuard no_grad_;
  const Model& model_;
  const Retriever* retriever_;
  std::vector<std::uint32_t> intent_;
  DecodeOptions options_;
  nn::ForwardContext ctx_{};
  std::size_t m_ = 0;
  bool neighbours_ = false;
  Tensor e_nl_;
  Tensor first_;
  std::map<std::vector<std::uint32_t>, Tensor> cache_;
};

bool generable(std::uint32_t v) { return v != kPad && v != kBos; }

double normalized(double lp, std::size_t scored) { return scored ? lp / static_cast<double>(scored) : lp; }

Hypothesis greedy_with(Decoder& dec, std::size_t max_len) {
  Hypothesis h;
  while (h.tokens.size() < max_len) {
    const auto lp = dec.next_log_probs(h.tokens);
    std::uint32_t best = kEos;
    double best_lp = -INFINITY;
    for (std::uint32_t v = 0; v < lp.size(); ++v)
      if (generable(v) && lp[v] > best_lp) best_lp = lp[v], best = v;
    h.log_prob += best_lp;
    if (best == kEos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(best);
  }
  h.score = normalized(h.log_prob, h.tokens.size() + (h.finished ? 1 : 0));
  return h;
}

}  // namespace

Hypothesis greedy_decode(const Model& model, const Retriever* retriever,
                         std::span<const std::uint32_t> intent, const DecodeOptions& options) {
  Decoder dec(model, retriever, intent, options);
  return greedy_with(dec, options.max_len);
}

Hypothesis beam_decode(const Model& model, const Retriever* retriever,
                       std::span<const std::uint32_t> intent, const DecodeOptions& options) {
  const std::size_t width = options.beam;
  if (width == 0) throw std::invalid_argument("beam_decode: width must be >= 1");
  Decoder dec(model, retriever, intent, options);
  std::vector<Hypothesis> finished;
  // The greedy path is always a candidate, so widening the beam never lowers the score.
  if (width > 1) finished.push_back(greedy_with(dec, options.max_len));
  std::vector<Hypothesis> live{Hypothesis{}};
  std::size_t found = 0;
  while (!live.empty() && found < width) {
    struct Cand {
      double lp;
      std::size_t hyp;
      std::uint32_t tok;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const auto lp = dec.next_log_probs(live[i].tokens);
      for (std::uint32_t v = 0; v < lp.size(); ++v)
        if (generable(v)) cands.push_back({live[i].log_prob + lp[v], i, v});
    }
    const std::size_t keep = std::min(cands.size(), 2 * width);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.lp != b.lp) return a.lp > b.lp;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.tok < b.tok;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t c = 0; c < keep && next.size() < width && found < width; ++c) {
      Hypothesis h = live[cands[c].hyp];
      h.log_prob = cands[c].lp;
      if (cands[c].tok == kEos) {
        h.finished = true;
        h.score = normalized(h.log_prob, h.tokens.size() + 1);
        finished.push_back(std::move(h));
        ++found;
        continue;
      }
      h.tokens.push_back(cands[c].tok);
      if (h.tokens.size() >= options.max_len) {
        h.score = normalized(h.log_prob, h.tokens.size());
        finished.push_back(std::move(h));
        ++found;
        continue;
      }
      next.push_back(std::move(h));
    }
    live = std::move(next);
  }
  const Hypothesis* best = nullptr;
  for (const auto& h : finished)
    if (!best || h.score > best->score) best = &h;
  return *best;
}

double sequence_log_prob(const Model& model, const Retriever* retriever,
                         std::span<const std::uint32_t> intent, std::span<const std::uint32_t> code,
                         const DecodeOptions& options) {
  NoGradGuard no_grad;
  EncodedExample ex;
  ex.intent.assign(intent.begin(), intent.end());
  ex.code.assign(code.begin(), code.end());
  std::vector<NeighbourSet> sets;
  if (model.config().uses_neighbours()) {
    if (!retriever) throw std::invalid_argument("sequence_log_prob: model needs a retriever");
    sets = teacher_neighbours(*retriever, ex, hybrid_model(model), options.exclude);
  }
  return -example_loss(model, ex, sets, {}).item();
}

// Training.

namespace {

double global_norm(const Gradients& g) {
  double s = 0;
  for (const auto& [id, buf] : g.raw())
    for (std::size_t i = 0; i < buf.size(); ++i) s += buf.get(i) * buf.get(i);
  return std::sqrt(s);
}

std::vector<std::string> token_strings(const std::vector<std::uint32_t>& ids, const Vocab& vocab) {
  return vocab.decode(ids);
}

double dev_bleu(const Model& model, const Retriever* retriever, const std::vector<EncodedExample>& dev,
                const TrainConfig& config, const Vocab& vocab) {
  const std::size_t n = config.dev_limit ? std::min(config.dev_limit, dev.size()) : dev.size();
  std::vector<std::vector<std::string>> hyps, refs;
  DecodeOptions opts;
  opts.beam = config.dev_beam;
  opts.max_len = model.config().max_code;
  for (std::size_t i = 0; i < n; ++i) {
    opts.exclude = dev[i].source;
    const Hypothesis h = opts.beam > 1 ? beam_decode(model, retriever, dev[i].intent, opts)
                                       : greedy_decode(model, retriever, dev[i].intent, opts);
    hyps.push_back(token_strings(h.tokens, vocab));
    refs.push_back(token_strings(dev[i].code, vocab));
  }
  return corpus_bleu(hyps, refs);
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<EncodedExample>& train_set,
                  const std::vector<EncodedExample>& dev_set, const Retriever* retriever,
                  std::ostream* metrics) {
  config.model.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (config.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
  Model model(config.model, config.seed);
  const Vocab vocab = Vocab::from_tokens(config.model.vocab);
  check_vocab(train_set, model.vocab_size(), "training");
  check_vocab(dev_set, model.vocab_size(), "dev");
  const bool neighbours = config.model.uses_neighbours();
  const bool hybrid = hybrid_model(model);
  if (neighbours) {
    if (!retriever) throw std::invalid_argument("train: this model needs a database");
    check_compatible(model, *retriever);
  }

  TrainResult result;
  NeighbourCache cache;
  if (neighbours && config.use_cache) {
    cache = precompute_neighbours(train_set, *retriever, hybrid);
    result.warnings = cache.warnings;
  }

  std::vector<Tensor> params = model.parameter_tensors();
  AdamOptions adam;
  adam.learning_rate = config.learning_rate;
  OptimizerState state = make_adam_state(params, adam);
  Rng order_rng(mix64(config.seed, 1));
  Rng drop_rng(mix64(config.seed, 2));
  const nn::ForwardContext ctx{true, &drop_rng, config.model.cross_dropout};

  std::vector<std::size_t> order(train_set.size());
  std::size_t steps = 0;
  bool stop = false;
  for (std::size_t epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    double epoch_loss = 0;
    std::size_t epoch_steps = 0;
    for (std::size_t b = 0; b < order.size() && !stop; b += config.batch_size) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                     order.begin() + static_cast<std::ptrdiff_t>(
                                                         std::min(order.size(), b + config.batch_size)));
      std::sort(batch.begin(), batch.end());
      Gradients total;
      double loss_sum = 0;
      std::size_t tokens = 0;
      for (std::size_t idx : batch) {
        const EncodedExample& ex = train_set[idx];
        std::vector<NeighbourSet> live;
        std::span<const NeighbourSet> sets;
        if (neighbours) {
          if (config.use_cache) {
            sets = cache.sets[idx];
          } else {
            live = teacher_neighbours(*retriever, ex, hybrid, ex.source);
            sets = live;
          }
        }
        const Tensor loss = example_loss(model, ex, sets, ctx);
        const double value = loss.item();
        if (!std::isfinite(value))
          throw NumericError("non-finite loss " + std::to_string(value) + " at epoch " +
                             std::to_string(epoch) + ", step " + std::to_string(steps + 1) +
                             ", training example " + std::to_string(idx) + " (" +
                             std::to_string(ex.code.size()) + " code tokens)");
        loss_sum += value;
        tokens += ex.code.size() + 1;
        total.accumulate(grad(loss));
      }
      total.scale(1.0 / static_cast<double>(tokens));
      if (config.clip_norm > 0) {
        const double norm = global_norm(total);
        if (norm > config.clip_norm) total.scale(config.clip_norm / norm);
      }
      adam_update(params, total, state);
      const double step_loss = loss_sum / static_cast<double>(tokens);
      result.step_losses.push_back(step_loss);
      epoch_loss += step_loss;
      ++epoch_steps;
      ++steps;
      if (config.max_steps && steps >= config.max_steps) stop = true;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.steps = steps;
    em.train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
    em.dev_bleu = dev_set.empty() ? -1.0 : dev_bleu(model, retriever, dev_set, config, vocab);
    em.seconds = seconds_since(t0);
    result.epochs.push_back(em);
    if (dev_set.empty() || em.dev_bleu > result.best_dev_bleu) {
      result.best_dev_bleu = em.dev_bleu;
      result.best_epoch = epoch;
      result.best = Model::deserialize(model.serialize());
    }
    if (metrics) {
      nlohmann::ordered_json j;
      j["epoch"] = em.epoch;
      j["steps"] = em.steps;
      j["train_loss"] = em.train_loss;
      j["dev_bleu"] = em.dev_bleu;
      j["seconds"] = em.seconds;
      *metrics << j.dump() << '\n' << std::flush;
    }
  }
  result.last = std::move(model);
  return result;
}

// Metrics.

double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) +
                                " hypotheses for " + std::to_string(references.size()) + " references");
  constexpr std::size_t N = 4;
  double matches[N] = {}, totals[N] = {};
  double hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& r = references[s];
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= N; ++n) {
      std::map<std::vector<std::string>, int> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[{r.begin() + i, r.begin() + i + n}];
      std::map<std::vector<std::string>, int> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + i, h.begin() + i + n}];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(c, it->second);
        totals[n - 1] += c;
      }
    }
  }
  if (hyp_len == 0 || matches[0] == 0) return 0.0;
  double log_p = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double num = matches[n], den = totals[n];
    if (n > 0 && num == 0) num += 1, den += 1;
    log_p += std::log(num / den) / N;
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_p);
}

double r_overlap(const Database& db, const std::vector<std::vector<std::uint32_t>>& codes) {
  if (codes.empty()) throw std::invalid_argument("r_overlap: empty test set");
  std::unordered_set<std::vector<std::uint32_t>, VecHash> stored;
  for (const auto& e : db.entries()) stored.insert(e.neighbour);
  std::size_t total = 0, hit = 0;
  for (const auto& code : codes)
    for (const auto& chunk : chunk_sequence(code, db.chunk_size())) {
      if (std::find(chunk.neighbour.begin(), chunk.neighbour.end(), kPad) != chunk.neighbour.end()) continue;
      ++total;
      hit += stored.count(chunk.neighbour);
    }
  if (total == 0) throw std::invalid_argument("r_overlap: test codes contain no chunks");
  return static_cast<double>(hit) / static_cast<double>(total);
}

std::string render_code(std::span<const std::uint32_t> ids, const Vocab& vocab,
                        const SubstitutionMap& map) {
  const auto tokens = vocab.decode({ids.begin(), ids.end()});
  return join_code(map.empty() ? tokens : denormalize_tokens(tokens, map));
}

std::size_t thread_cap() {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RETROSEQ_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) cap = static_cast<std::size_t>(v);
  }
  return cap;
}

EvalResult evaluate(const Model& model, const Retriever* retriever, const std::vector<Example>& test,
                    const Vocab& vocab, bool normalize, const DecodeOptions& options,
                    std::size_t threads) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (model.config().uses_neighbours()) {
    if (!retriever) throw std::invalid_argument("evaluate: this model needs a database");
    check_compatible(model, *retriever);
  }
  const std::size_t n = test.size();
  std::vector<EncodedExample> encoded(n);
  std::vector<std::vector<std::string>> refs(n), hyps(n);
  for (std::size_t i = 0; i < n; ++i) {
    try {
      encoded[i] = encode_example(test[i], normalize, vocab, model.config().max_intent, 0);
      refs[i] = code_tokens(test[i].snippet);
    } catch (const LexError& ex) {
      throw DataError("test example " + std::to_string(i) + ": " + ex.what());
    }
  }
  EvalResult out;
  out.outputs.resize(n);
  std::vector<std::exception_ptr> errors(std::max<std::size_t>(threads, 1));
  auto work = [&](std::size_t t, std::size_t stride) {
    try {
      for (std::size_t i = t; i < n; i += stride) {
        DecodeOptions opts = options;
        if (!opts.exclude) opts.exclude = encoded[i].source;
        const Hypothesis h = beam_decode(model, retriever, encoded[i].intent, opts);
        auto tokens = vocab.decode(h.tokens);
        if (!encoded[i].map.empty()) tokens = denormalize_tokens(tokens, encoded[i].map);
        out.outputs[i] = join_code(tokens);
        hyps[i] = std::move(tokens);
      }
    } catch (...) {
      errors[t] = std::current_exception();
    }
  };
  const auto t0 = Clock::now();
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, n);
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t, workers);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  out.seconds_per_example = seconds_since(t0) / static_cast<double>(n);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < n; ++i) exact += hyps[i] == refs[i];
  out.exact_match = static_cast<double>(exact) / static_cast<double>(n);
  out.bleu = corpus_bleu(hyps, refs);
  return out;
}

}  // namespace retroseq
