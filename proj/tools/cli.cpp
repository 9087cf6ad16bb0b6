#include "retroseq/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "retroseq/binio.hpp"
#include "retroseq/datastore.hpp"
#include "retroseq/embedder.hpp"
#include "retroseq/lexer.hpp"
#include "retroseq/model.hpp"
#include "retroseq/normalizer.hpp"
#include "retroseq/pipeline.hpp"
#include "retroseq/vocab.hpp"

namespace retroseq::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing ") + what + " path");
  if (!fs::is_regular_file(path)) throw DataError(std::string(what) + " not found: " + path);
}

std::string vocab_sidecar(const std::string& db_path) { return db_path + ".vocab"; }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

Database load_db(const std::string& path) {
  require_file(path, "database");
  return Database::load(path);
}

Vocab load_vocab(const std::string& path) {
  require_file(path, "vocabulary");
  return Vocab::load(path);
}

Model load_model(const std::string& path) {
  require_file(path, "model");
  return Model::load(path);
}

std::vector<Example> load_jsonl(const std::string& path, const char* what) {
  require_file(path, what);
  return read_jsonl(path);
}

Backend parse_backend(const std::string& s) {
  if (s == "automatic") return Backend::automatic;
  if (s == "exact") return Backend::exact;
  if (s == "approximate") return Backend::approximate;
  throw UsageError("unknown backend '" + s + "' (automatic, exact, approximate)");
}

// Owns the embedder a retriever points at.
struct Retrieval {
  Database db;
  std::unique_ptr<Embedder> embedder;
  Retriever retriever;
};

std::unique_ptr<Retrieval> open_retrieval(const std::string& db_path, std::size_t k, Backend backend) {
  auto r = std::make_unique<Retrieval>();
  r->db = load_db(db_path);
  r->embedder = make_embedder(r->db.embedder_id(), r->db.dim());
  r->retriever = Retriever{&r->db, r->embedder.get(), k, backend};
  return r;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw DataError("cannot write " + path);
}

// Run configuration: defaults, then the --config file, then explicit flags.

json run_defaults() {
  const ModelConfig m;
  json j;
  json model = json::parse(m.to_json());
  model.erase("vocab");
  j["model"] = model;
  const TrainConfig t;
  j["train"] = {{"epochs", t.epochs},       {"batch_size", t.batch_size}, {"max_steps", t.max_steps},
                {"learning_rate", t.learning_rate}, {"clip_norm", t.clip_norm},
                {"use_cache", t.use_cache}, {"dev_beam", t.dev_beam},     {"dev_limit", t.dev_limit}};
  j["seed"] = 0;
  j["normalize"] = false;
  j["backend"] = "automatic";
  j["paths"] = {{"train", ""}, {"dev", ""},          {"db", ""},
                {"vocab", ""}, {"out_dir", "run"}, {"vocab_data", json::array()}};
  return j;
}

void merge_checked(json& base, const json& over, const std::string& where) {
  if (!over.is_object()) throw UsageError("config" + where + ": expected an object");
  for (const auto& [key, value] : over.items()) {
    const std::string path = where + "." + key;
    if (!base.contains(key)) throw UsageError("config: unknown key '" + path.substr(1) + "'");
    if (base[key].is_object())
      merge_checked(base[key], value, path);
    else
      base[key] = value;
  }
}

class Flags {
 public:
  Flags(CLI::App* app, const json& defaults) : app_(app), defaults_(defaults) {}

  template <class T>
  void add(const std::string& name, const std::string& path, const std::string& help) {
    auto value = std::make_shared<T>(defaults_.at(json::json_pointer(path)).get<T>());
    CLI::Option* opt = app_->add_option(name, *value, help)->capture_default_str();
    appliers_.push_back([opt, value, path](json& j) {
      if (opt->count()) j[json::json_pointer(path)] = *value;
    });
  }

  void negate(const std::string& name, const std::string& path, const std::string& help) {
    CLI::Option* opt = app_->add_flag(name, help);
    appliers_.push_back([opt, path](json& j) {
      if (opt->count()) j[json::json_pointer(path)] = false;
    });
  }

  void set(const std::string& name, const std::string& path, const std::string& help) {
    CLI::Option* opt = app_->add_flag(name, help);
    appliers_.push_back([opt, path](json& j) {
      if (opt->count()) j[json::json_pointer(path)] = true;
    });
  }

  void apply(json& j) const {
    for (const auto& f : appliers_) f(j);
  }

 private:
  CLI::App* app_;
  const json& defaults_;
  std::vector<std::function<void(json&)>> appliers_;
};

template <class T>
T field(const json& j, const char* path) {
  try {
    return j.at(json::json_pointer(path)).get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config field ") + path + ": " + e.what());
  }
}

// Subcommands.

struct SynthArgs {
  std::string out_dir = "synth";
  std::size_t pairs = 2000;
  double duplicate_rate = 0.0;
  double pool_factor = 1.0;
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
};

int do_synth(const SynthArgs& a, std::uint64_t seed, std::ostream& out) {
  SynthOptions o;
  o.seed = seed;
  o.n_pairs = a.pairs;
  o.duplicate_rate = a.duplicate_rate;
  o.pool_factor = a.pool_factor;
  o.dev_fraction = a.dev_fraction;
  o.test_fraction = a.test_fraction;
  SynthCorpus c;
  try {
    c = synth_corpus(o);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  ensure_dir(a.out_dir);
  const fs::path dir(a.out_dir);
  write_jsonl((dir / "train.jsonl").string(), c.train);
  write_jsonl((dir / "dev.jsonl").string(), c.dev);
  write_jsonl((dir / "test.jsonl").string(), c.test);
  write_jsonl((dir / "pool.jsonl").string(), c.pool);
  out << "train " << c.train.size() << ", dev " << c.dev.size() << ", test " << c.test.size()
      << ", pool " << c.pool.size() << " -> " << a.out_dir << "\n";
  return kOk;
}

struct NormalizeArgs {
  std::string input, output, code, intent;
  bool snippets = false;
};

json substitutions(const SubstitutionMap& map) {
  json subs = json::array();
  for (const auto& [ph, original] : map.entries()) subs.push_back({ph, original});
  return subs;
}

int do_normalize(const NormalizeArgs& a, std::ostream& out, std::ostream& err) {
  if (!a.code.empty() || !a.intent.empty()) {
    if (!a.input.empty()) throw UsageError("give either --input or --code/--intent");
    json j;
    if (a.intent.empty()) {
      const NormalizedSnippet n = normalize_snippet(a.code);
      j = {{"snippet", n.code}, {"substitutions", substitutions(n.map)}};
    } else if (a.code.empty()) {
      const NormalizedPair n = normalize_intent(a.intent);
      j = {{"intent", n.intent}, {"substitutions", substitutions(n.map)}};
    } else {
      const NormalizedPair n = normalize_pair(a.intent, a.code);
      j = {{"intent", n.intent}, {"snippet", n.code}, {"substitutions", substitutions(n.map)}};
      if (!n.unmatched.empty()) j["unmatched"] = n.unmatched;
    }
    out << j.dump() << "\n";
    return kOk;
  }
  if (a.output.empty()) throw UsageError("--out is required with --input");
  const auto xs = load_jsonl(a.input, "input");
  std::ostringstream buf;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    try {
      nlohmann::ordered_json j;
      if (a.snippets) {
        const NormalizedSnippet n = normalize_snippet(xs[i].snippet);
        j["intent"] = effective_intent(xs[i]);
        j["snippet"] = n.code;
        j["substitutions"] = substitutions(n.map);
      } else {
        const NormalizedPair n = normalize_pair(effective_intent(xs[i]), xs[i].snippet);
        j["intent"] = n.intent;
        j["snippet"] = n.code;
        j["substitutions"] = substitutions(n.map);
        if (!n.unmatched.empty()) j["unmatched"] = n.unmatched;
      }
      buf << j.dump() << "\n";
    } catch (const LexError& e) {
      ++skipped;
      err << "warning: example " << i << " skipped: " << e.what() << "\n";
    }
  }
  write_text(a.output, buf.str());
  out << "normalized " << xs.size() - skipped << " of " << xs.size() << " examples -> " << a.output << "\n";
  return kOk;
}

struct BuildArgs {
  std::string input, output, vocab_in, vocab_out, mode = "hybrid", embedder = kDefaultEmbedderId;
  std::size_t chunk_size = 8;
  std::size_t dim = kDefaultEmbeddingDim;
  bool normalize = false;
  bool ivf = false;
  std::size_t n_lists = 0, n_probe = 0;
};

int do_build(const BuildArgs& a, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  if (a.output.empty()) throw UsageError("--out is required");
  if (a.mode != "classic" && a.mode != "hybrid") throw UsageError("--mode must be classic or hybrid");
  if (a.chunk_size == 0) throw UsageError("--chunk-size must be >= 1");
  const auto xs = load_jsonl(a.input, "input");
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& e : xs) pairs.emplace_back(effective_intent(e), e.snippet);
  Vocab vocab = a.vocab_in.empty() ? Vocab() : load_vocab(a.vocab_in);
  const auto embedder = make_embedder(a.embedder, a.dim);
  BuildReport report;
  Database db = a.mode == "hybrid" ? build_hybrid(pairs, a.chunk_size, a.normalize, *embedder, vocab, &report)
                                   : build_classic(pairs, a.chunk_size, a.normalize, *embedder, vocab, &report);
  for (const auto& e : report.errors) err << "warning: " << e << "\n";
  if (a.ivf) {
    IvfOptions o;
    o.n_lists = a.n_lists;
    o.n_probe = a.n_probe;
    o.seed = seed;
    db.build_ivf(o);
  }
  db.save(a.output);
  const std::string vpath = a.vocab_out.empty() ? vocab_sidecar(a.output) : a.vocab_out;
  vocab.save(vpath);
  out << "entries " << db.size() << " (code " << db.count(KeyKind::code) << ", intent "
      << db.count(KeyKind::intent) << ") from " << report.snippets << " examples, skipped "
      << report.skipped << " -> " << a.output << " (vocab " << vocab.size() << " -> " << vpath << ")\n";
  return kOk;
}

int do_train(const std::string& config_path, const Flags& flags, std::ostream& out, std::ostream& err) {
  json cfg = run_defaults();
  if (!config_path.empty()) {
    require_file(config_path, "config");
    json file;
    try {
      file = json::parse(binio::read_file(config_path));
    } catch (const json::exception& e) {
      throw DataError("config " + config_path + ": " + e.what());
    }
    merge_checked(cfg, file, "");
  }
  flags.apply(cfg);

  TrainConfig tc;
  try {
    tc.model = ModelConfig::from_json(cfg["model"].dump());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  tc.epochs = field<std::size_t>(cfg, "/train/epochs");
  tc.batch_size = field<std::size_t>(cfg, "/train/batch_size");
  tc.max_steps = field<std::size_t>(cfg, "/train/max_steps");
  tc.learning_rate = field<double>(cfg, "/train/learning_rate");
  tc.clip_norm = field<double>(cfg, "/train/clip_norm");
  tc.use_cache = field<bool>(cfg, "/train/use_cache");
  tc.dev_beam = field<std::size_t>(cfg, "/train/dev_beam");
  tc.dev_limit = field<std::size_t>(cfg, "/train/dev_limit");
  tc.seed = field<std::uint64_t>(cfg, "/seed");
  const bool normalize = field<bool>(cfg, "/normalize");
  const Backend backend = parse_backend(field<std::string>(cfg, "/backend"));
  const auto train_path = field<std::string>(cfg, "/paths/train");
  const auto dev_path = field<std::string>(cfg, "/paths/dev");
  const auto db_path = field<std::string>(cfg, "/paths/db");
  const auto out_dir = field<std::string>(cfg, "/paths/out_dir");
  auto vocab_path = field<std::string>(cfg, "/paths/vocab");
  const auto vocab_data = field<std::vector<std::string>>(cfg, "/paths/vocab_data");
  if (tc.batch_size == 0) throw UsageError("batch_size must be >= 1");
  if (train_path.empty()) throw UsageError("--train is required");

  const bool needs_db = tc.model.uses_neighbours();
  if (needs_db && db_path.empty()) throw UsageError("this aggregation needs --db");
  if (vocab_path.empty() && !db_path.empty() && fs::is_regular_file(vocab_sidecar(db_path)))
    vocab_path = vocab_sidecar(db_path);
  Vocab vocab = vocab_path.empty() ? Vocab() : load_vocab(vocab_path);

  const auto train_xs = load_jsonl(train_path, "training set");
  const auto dev_xs = dev_path.empty() ? std::vector<Example>{} : load_jsonl(dev_path, "dev set");
  auto encode_all = [&](const std::vector<Example>& xs, bool grow, const char* what) {
    std::vector<EncodedExample> enc;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      try {
        enc.push_back(encode_example(xs[i], normalize, vocab, grow, tc.model.max_intent, tc.model.max_code));
      } catch (const LexError& e) {
        err << "warning: " << what << " example " << i << " skipped: " << e.what() << "\n";
      }
    }
    return enc;
  };
  const auto train_set = encode_all(train_xs, true, "training");
  for (const auto& path : vocab_data) encode_all(load_jsonl(path, "vocabulary data"), true, "vocabulary data");
  const auto dev_set = encode_all(dev_xs, false, "dev");
  tc.model.vocab = vocab.tokens();
  try {
    tc.model.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  std::unique_ptr<Retrieval> retrieval;
  if (needs_db) retrieval = open_retrieval(db_path, tc.model.neighbours, backend);

  ensure_dir(out_dir);
  const fs::path dir(out_dir);
  cfg["paths"]["vocab"] = (dir / "vocab.txt").string();
  write_text((dir / "config.json").string(), cfg.dump(2) + "\n");
  vocab.save((dir / "vocab.txt").string());
  std::ofstream metrics((dir / "metrics.jsonl").string(), std::ios::binary);
  if (!metrics) throw DataError("cannot write " + (dir / "metrics.jsonl").string());

  err << "training " << to_string(tc.model.aggregation) << " model on " << train_set.size()
      << " examples, vocab " << vocab.size() << "\n";
  TrainResult res = train(tc, train_set, dev_set, retrieval ? &retrieval->retriever : nullptr, &metrics);
  for (const auto& w : res.warnings) err << "warning: " << w << "\n";
  res.best.save((dir / "model.bin").string());
  res.last.save((dir / "last.bin").string());
  out << "best epoch " << res.best_epoch << " dev BLEU " << std::fixed << std::setprecision(2)
      << res.best_dev_bleu << ", " << res.step_losses.size() << " steps -> " << (dir / "model.bin").string()
      << "\n";
  return kOk;
}

struct DecodeArgs {
  std::string model, db, intent, test, output, backend = "automatic";
  std::size_t beam = 0, max_len = 0, limit = 0;
  bool normalize = false;
};

DecodeOptions decode_options(const DecodeArgs& a, const Model& m) {
  DecodeOptions o;
  o.beam = a.beam ? a.beam : m.config().beam;
  o.max_len = a.max_len ? a.max_len : m.config().max_code;
  return o;
}

std::unique_ptr<Retrieval> model_retrieval(const DecodeArgs& a, const Model& m) {
  if (!m.config().uses_neighbours()) return nullptr;
  if (a.db.empty()) throw UsageError("this model needs --db");
  auto r = open_retrieval(a.db, m.config().neighbours, parse_backend(a.backend));
  check_compatible(m, r->retriever);
  return r;
}

int do_generate(const DecodeArgs& a, std::ostream& out) {
  if (a.intent.empty()) throw UsageError("--intent is required");
  const Model model = load_model(a.model);
  const auto retrieval = model_retrieval(a, model);
  const Vocab vocab = Vocab::from_tokens(model.config().vocab);
  SubstitutionMap map;
  std::string intent = a.intent;
  if (a.normalize) {
    NormalizedPair n = normalize_intent(intent);
    intent = n.intent;
    map = std::move(n.map);
  }
  auto tokens = intent_tokens(intent);
  if (tokens.size() > model.config().max_intent) tokens.resize(model.config().max_intent);
  if (tokens.empty()) throw UsageError("--intent has no tokens");
  const Hypothesis h = beam_decode(model, retrieval ? &retrieval->retriever : nullptr, vocab.encode(tokens),
                                   decode_options(a, model));
  out << render_code(h.tokens, vocab, map) << "\n";
  return kOk;
}

int do_evaluate(const DecodeArgs& a, std::ostream& out) {
  const Model model = load_model(a.model);
  const auto retrieval = model_retrieval(a, model);
  auto test = load_jsonl(a.test, "test set");
  if (a.limit && test.size() > a.limit) test.resize(a.limit);
  const Vocab vocab = Vocab::from_tokens(model.config().vocab);
  const EvalResult r = evaluate(model, retrieval ? &retrieval->retriever : nullptr, test, vocab, a.normalize,
                                decode_options(a, model), thread_cap());
  if (!a.output.empty()) {
    std::string text;
    for (const auto& o : r.outputs) text += o + "\n";
    write_text(a.output, text);
  }
  nlohmann::ordered_json j;
  j["examples"] = test.size();
  j["bleu"] = r.bleu;
  j["exact_match"] = r.exact_match;
  j["seconds_per_example"] = r.seconds_per_example;
  out << j.dump() << "\n";
  return kOk;
}

struct OverlapArgs {
  std::string db, test, vocab;
  bool normalize = false;
};

int do_overlap(const OverlapArgs& a, std::ostream& out) {
  const Database db = load_db(a.db);
  const Vocab vocab = load_vocab(a.vocab.empty() ? vocab_sidecar(a.db) : a.vocab);
  const auto test = load_jsonl(a.test, "test set");
  std::vector<std::vector<std::uint32_t>> codes;
  for (std::size_t i = 0; i < test.size(); ++i) {
    try {
      codes.push_back(encode_example(test[i], a.normalize, vocab).code);
    } catch (const LexError& e) {
      throw DataError("test example " + std::to_string(i) + ": " + e.what());
    }
  }
  if (codes.empty()) throw DataError("test set is empty");
  out << std::fixed << std::setprecision(4) << r_overlap(db, codes) << "\n";
  return kOk;
}

struct InspectArgs {
  std::string db, vocab;
  std::size_t n = 5;
};

int do_inspect(const InspectArgs& a, std::ostream& out) {
  const Database db = load_db(a.db);
  const std::string vpath = a.vocab.empty() ? vocab_sidecar(a.db) : a.vocab;
  const std::optional<Vocab> vocab =
      fs::is_regular_file(vpath) ? std::optional<Vocab>(Vocab::load(vpath)) : std::nullopt;
  out << "mode " << to_string(db.mode()) << "\nchunk_size " << db.chunk_size() << "\nembedder "
      << db.embedder_id() << "\ndim " << db.dim() << "\nentries " << db.size() << "\ncode_entries "
      << db.count(KeyKind::code) << "\nintent_entries " << db.count(KeyKind::intent) << "\nindex "
      << (db.has_ivf() ? "ivf" : "none") << "\n";
  auto render = [&](const std::vector<std::uint32_t>& ids) {
    std::string s;
    for (auto id : ids) {
      if (!s.empty()) s += ' ';
      s += vocab && id < vocab->size() ? vocab->token(id) : std::to_string(id);
    }
    return s;
  };
  for (std::size_t i = 0; i < std::min(a.n, db.size()); ++i) {
    const ChunkRecord& e = db.entry(i);
    char source[17];
    std::snprintf(source, sizeof source, "%016llx", static_cast<unsigned long long>(e.source_id));
    out << i << "\t" << to_string(e.kind) << "\t" << source << "\tN: " << render(e.neighbour)
        << "\tF: " << render(e.continuation) << "\n";
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Retrieval-augmented code generation: corpus, datastore, training and decoding", "retroseq"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Seed for every random choice")->capture_default_str();
  };

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a templated intent/code corpus with a snippet pool");
  s->add_option("--out-dir", synth.out_dir, "Directory for train/dev/test/pool .jsonl");
  s->add_option("--pairs", synth.pairs, "Intent/code pairs across the three splits");
  s->add_option("--duplicate-rate", synth.duplicate_rate,
                "Probability that a pair's code also enters the pool under a paraphrase");
  s->add_option("--pool-factor", synth.pool_factor, "Unrelated pool pairs as a multiple of --pairs");
  s->add_option("--dev-fraction", synth.dev_fraction, "Fraction of pairs in the dev split");
  s->add_option("--test-fraction", synth.test_fraction, "Fraction of pairs in the test split");
  add_seed(s);

  NormalizeArgs norm;
  auto* n = app.add_subcommand("normalize", "Rename identifiers and strings to placeholders");
  n->add_option("--input", norm.input, "JSON-lines dataset");
  n->add_option("--out", norm.output, "Normalized JSON-lines output");
  n->add_flag("--snippets", norm.snippets, "Normalize each snippet alone instead of intent/code pairs");
  n->add_option("--code", norm.code, "Normalize one snippet (with --intent: one pair)");
  n->add_option("--intent", norm.intent, "Normalize one intent (with --code: one pair)");
  add_seed(n);

  BuildArgs build;
  auto* b = app.add_subcommand("build-db", "Chunk, embed and store snippets as a datastore");
  b->add_option("--input", build.input, "JSON-lines dataset (intent, snippet)")->required();
  b->add_option("--out", build.output, "Database file")->required();
  b->add_option("--mode", build.mode, "classic (code keys) or hybrid (code and intent keys)");
  b->add_option("--chunk-size", build.chunk_size, "Chunk length m");
  b->add_flag("--normalize", build.normalize, "Normalize before chunking");
  b->add_option("--embedder", build.embedder, "Embedder id, or precomputed:<path>");
  b->add_option("--dim", build.dim, "Embedding dimension");
  b->add_option("--vocab", build.vocab_in, "Existing vocabulary to extend");
  b->add_option("--vocab-out", build.vocab_out, "Vocabulary output (default: <out>.vocab)");
  b->add_flag("--ivf", build.ivf, "Also build the approximate inverted-file index");
  b->add_option("--n-lists", build.n_lists, "Inverted lists (0: round(sqrt(entries)))");
  b->add_option("--n-probe", build.n_probe, "Lists probed per query (0: 80% of the lists)");
  add_seed(b);

  const json defaults = run_defaults();
  std::string config_path;
  auto* t = app.add_subcommand("train", "Train a model; writes the best checkpoint and per-epoch metrics");
  t->add_option("--config", config_path, "Run configuration JSON; explicit flags override it");
  Flags tf(t, defaults);
  tf.add<std::string>("--train", "/paths/train", "Training set (.jsonl)");
  tf.add<std::string>("--dev", "/paths/dev", "Dev set for per-epoch BLEU and checkpoint selection");
  tf.add<std::string>("--db", "/paths/db", "Datastore (required unless --aggregation none)");
  tf.add<std::string>("--vocab", "/paths/vocab", "Vocabulary to extend (default: <db>.vocab)");
  tf.add<std::vector<std::string>>("--vocab-data", "/paths/vocab_data",
                                   "Extra .jsonl files whose tokens join the vocabulary");
  tf.add<std::string>("--out-dir", "/paths/out_dir", "Output directory");
  tf.add<std::size_t>("--d-model", "/model/d_model", "Model width");
  tf.add<std::size_t>("--heads", "/model/heads", "Attention heads");
  tf.add<std::size_t>("--nl-layers", "/model/nl_layers", "Intent encoder layers");
  tf.add<std::size_t>("--nb-layers", "/model/nb_layers", "Neighbour encoder layers");
  tf.add<std::size_t>("--dec-layers", "/model/dec_layers", "Decoder layers");
  tf.add<std::size_t>("--ffw-hidden", "/model/ffw_hidden", "Feed-forward hidden width");
  tf.add<std::size_t>("--chunk-size", "/model/chunk_size", "Chunk length m");
  tf.add<std::size_t>("--neighbours", "/model/neighbours", "Neighbours per chunk k");
  tf.add<std::size_t>("--period", "/model/period", "Aggregation period p");
  tf.add<std::string>("--aggregation", "/model/aggregation", "none (baseline), sequential or parallel");
  tf.add<std::string>("--neighbour-encoder", "/model/neighbour_encoder", "classic or conditioned");
  tf.add<std::string>("--first-chunk", "/model/first_chunk", "identity or hybrid");
  tf.add<double>("--dropout", "/model/cross_dropout", "Dropout on cross-attention weights");
  tf.add<std::size_t>("--beam", "/model/beam", "Beam width stored with the model");
  tf.add<std::size_t>("--max-intent", "/model/max_intent", "Intent tokens kept");
  tf.add<std::size_t>("--max-code", "/model/max_code", "Code tokens kept and generated");
  tf.add<std::size_t>("--epochs", "/train/epochs", "Epochs");
  tf.add<std::size_t>("--batch-size", "/train/batch_size", "Examples per update");
  tf.add<std::size_t>("--max-steps", "/train/max_steps", "Stop after this many updates (0: no limit)");
  tf.add<double>("--lr", "/train/learning_rate", "Adam learning rate");
  tf.add<double>("--clip-norm", "/train/clip_norm", "Global gradient-norm clip (0: off)");
  tf.negate("--no-cache", "/train/use_cache", "Retrieve neighbours every step instead of precomputing them");
  tf.add<std::size_t>("--dev-beam", "/train/dev_beam", "Beam width of the dev evaluation");
  tf.add<std::size_t>("--dev-limit", "/train/dev_limit", "Dev examples decoded per epoch (0: all)");
  tf.add<std::uint64_t>("--seed", "/seed", "Seed for initialization, shuffling and dropout");
  tf.set("--normalize", "/normalize", "Normalize intent/code pairs");
  tf.add<std::string>("--backend", "/backend", "Retrieval backend: automatic, exact or approximate");

  DecodeArgs gen;
  auto* g = app.add_subcommand("generate", "Decode code for one intent");
  g->add_option("--model", gen.model, "Checkpoint")->required();
  g->add_option("--db", gen.db, "Datastore (retrieval models)");
  g->add_option("--intent", gen.intent, "Natural-language intent")->required();
  g->add_option("--beam", gen.beam, "Beam width (0: the model's, 15 by default)");
  g->add_option("--max-len", gen.max_len, "Generated tokens at most (0: the model's max_code)");
  g->add_flag("--normalize", gen.normalize, "Normalize the intent and restore names in the output");
  g->add_option("--backend", gen.backend, "Retrieval backend: automatic, exact or approximate");
  add_seed(g);

  DecodeArgs ev;
  auto* e = app.add_subcommand("evaluate", "Decode a test set and report corpus BLEU");
  e->add_option("--model", ev.model, "Checkpoint")->required();
  e->add_option("--db", ev.db, "Datastore (retrieval models)");
  e->add_option("--test", ev.test, "Test set (.jsonl)")->required();
  e->add_option("--beam", ev.beam, "Beam width (0: the model's, 15 by default)");
  e->add_option("--max-len", ev.max_len, "Generated tokens at most (0: the model's max_code)");
  e->add_option("--limit", ev.limit, "Evaluate only the first N examples (0: all)");
  e->add_option("--out", ev.output, "Write one generated snippet per line");
  e->add_flag("--normalize", ev.normalize, "Normalize pairs and restore names in the output");
  e->add_option("--backend", ev.backend, "Retrieval backend: automatic, exact or approximate");
  add_seed(e);

  OverlapArgs ov;
  auto* o = app.add_subcommand("overlap", "Fraction of test chunks stored verbatim in the datastore");
  o->add_option("--db", ov.db, "Datastore")->required();
  o->add_option("--test", ov.test, "Test set (.jsonl)")->required();
  o->add_option("--vocab", ov.vocab, "Vocabulary (default: <db>.vocab)");
  o->add_flag("--normalize", ov.normalize, "Normalize test pairs first");
  add_seed(o);

  InspectArgs in;
  auto* i = app.add_subcommand("inspect-db", "Print a datastore header and its first entries");
  i->add_option("--db", in.db, "Datastore")->required();
  i->add_option("--n", in.n, "Entries to print");
  i->add_option("--vocab", in.vocab, "Vocabulary for rendering tokens (default: <db>.vocab)");
  add_seed(i);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex, out, err);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex, err, err);
    return kUsageError;
  }

  try {
    if (s->parsed()) return do_synth(synth, seed, out);
    if (n->parsed()) return do_normalize(norm, out, err);
    if (b->parsed()) return do_build(build, seed, out, err);
    if (t->parsed()) return do_train(config_path, tf, out, err);
    if (g->parsed()) return do_generate(gen, out);
    if (e->parsed()) return do_evaluate(ev, out);
    if (o->parsed()) return do_overlap(ov, out);
    if (i->parsed()) return do_inspect(in, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsageError;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kDataError;
  } catch (const binio::FormatError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kDataError;
  } catch (const LexError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kDataError;
  } catch (const std::invalid_argument& ex) {
    err << "data error: " << ex.what() << "\n";
    return kDataError;
  } catch (const std::exception& ex) {
    err << "internal error: " << ex.what() << "\n";
    return kInternalError;
  }
  err << app.help();
  return kUsageError;
}

}  // namespace retroseq::cli
