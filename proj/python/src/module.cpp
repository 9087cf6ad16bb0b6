#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "retroseq/cli.hpp"
#include "retroseq/datastore.hpp"
#include "retroseq/embedder.hpp"
#include "retroseq/lexer.hpp"
#include "retroseq/model.hpp"
#include "retroseq/normalizer.hpp"
#include "retroseq/pipeline.hpp"
#include "retroseq/vocab.hpp"

namespace py = pybind11;
using namespace retroseq;

namespace {

using Pair = std::pair<std::string, std::string>;
using Subs = std::vector<Pair>;

SubstitutionMap to_map(const Subs& subs) {
  SubstitutionMap map;
  for (const auto& [ph, original] : subs) map.add(ph, original);
  return map;
}

std::vector<Example> to_examples(const std::vector<Pair>& pairs) {
  std::vector<Example> out;
  for (const auto& [intent, snippet] : pairs) out.push_back({intent, snippet, std::nullopt});
  return out;
}

std::vector<Pair> to_pairs(const std::vector<Example>& xs) {
  std::vector<Pair> out;
  for (const auto& e : xs) out.emplace_back(effective_intent(e), e.snippet);
  return out;
}

Backend parse_backend(const std::string& s) {
  if (s == "automatic") return Backend::automatic;
  if (s == "exact") return Backend::exact;
  if (s == "approximate") return Backend::approximate;
  throw std::invalid_argument("unknown backend '" + s + "'");
}

// A datastore with its vocabulary and the embedder its keys came from.
struct Store {
  Database db;
  Vocab vocab;
  std::unique_ptr<Embedder> embedder;

  static std::shared_ptr<Store> open(Database db, Vocab vocab) {
    auto s = std::make_shared<Store>();
    s->embedder = make_embedder(db.embedder_id(), db.dim());
    s->db = std::move(db);
    s->vocab = std::move(vocab);
    return s;
  }
};

std::shared_ptr<Store> build_store(const std::vector<Pair>& pairs, std::size_t chunk_size, const std::string& mode,
                                   bool normalize, const std::string& embedder, std::size_t dim) {
  Vocab vocab;
  const auto e = make_embedder(embedder, dim);
  Database db;
  {
    py::gil_scoped_release release;
    if (mode == "hybrid")
      db = build_hybrid(pairs, chunk_size, normalize, *e, vocab);
    else if (mode == "classic")
      db = build_classic(pairs, chunk_size, normalize, *e, vocab);
    else
      throw std::invalid_argument("mode must be classic or hybrid");
  }
  return Store::open(std::move(db), std::move(vocab));
}

// A checkpoint bound to an optional datastore.
struct Generator {
  Model model;
  Vocab vocab;
  std::shared_ptr<Store> store;
  Retriever retriever;

  Generator(const std::string& path, std::shared_ptr<Store> s, const std::string& backend)
      : model(Model::load(path)), vocab(Vocab::from_tokens(model.config().vocab)), store(std::move(s)) {
    if (model.config().uses_neighbours()) {
      if (!store) throw std::invalid_argument("this model needs a datastore");
      retriever = Retriever{&store->db, store->embedder.get(), model.config().neighbours, parse_backend(backend)};
      check_compatible(model, retriever);
    }
  }

  const Retriever* live() const { return model.config().uses_neighbours() ? &retriever : nullptr; }

  DecodeOptions options(std::size_t beam, std::size_t max_len) const {
    DecodeOptions o;
    o.beam = beam ? beam : model.config().beam;
    o.max_len = max_len ? max_len : model.config().max_code;
    return o;
  }

  std::tuple<std::string, double> generate(const std::string& intent, std::size_t beam, std::size_t max_len,
                                           bool normalize) const {
    SubstitutionMap map;
    std::string text = intent;
    if (normalize) {
      NormalizedPair n = normalize_intent(intent);
      text = n.intent;
      map = std::move(n.map);
    }
    auto tokens = intent_tokens(text);
    if (tokens.size() > model.config().max_intent) tokens.resize(model.config().max_intent);
    const auto ids = vocab.encode(tokens);
    Hypothesis h;
    {
      py::gil_scoped_release release;
      h = beam_decode(model, live(), ids, options(beam, max_len));
    }
    return {render_code(h.tokens, vocab, map), h.score};
  }

  py::dict evaluate(const std::vector<Pair>& test, std::size_t beam, std::size_t max_len, bool normalize,
                    std::size_t threads) const {
    EvalResult r;
    {
      py::gil_scoped_release release;
      r = retroseq::evaluate(model, live(), to_examples(test), vocab, normalize, options(beam, max_len),
                             threads ? threads : thread_cap());
    }
    py::dict d;
    d["bleu"] = r.bleu;
    d["exact_match"] = r.exact_match;
    d["seconds_per_example"] = r.seconds_per_example;
    d["outputs"] = r.outputs;
    return d;
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Retrieval-augmented code generation";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<LexError>(m, "LexError", PyExc_ValueError);

  m.def("code_tokens", [](const std::string& s) { return code_tokens(s); }, "Python-like lexical tokens of a snippet");
  m.def("intent_tokens", [](const std::string& s) { return intent_tokens(s); }, "Tokens of a natural-language intent");

  m.def(
      "normalize_snippet",
      [](const std::string& code) {
        auto n = normalize_snippet(code);
        return std::make_tuple(n.code, n.map.entries());
      },
      "Placeholder form of a snippet and its (placeholder, original) substitutions");
  m.def(
      "normalize_pair",
      [](const std::string& intent, const std::string& code) {
        auto n = normalize_pair(intent, code);
        return std::make_tuple(n.intent, n.code, n.map.entries(), n.unmatched);
      },
      "Joint placeholder form of an intent and its code: (intent, code, substitutions, unmatched)");
  m.def(
      "normalize_intent",
      [](const std::string& intent) {
        auto n = normalize_intent(intent);
        return std::make_tuple(n.intent, n.map.entries());
      },
      "Placeholder form of an intent alone");
  m.def(
      "denormalize", [](const std::string& code, const Subs& subs) { return denormalize(code, to_map(subs)); },
      "Restores the originals of a substitution list");

  m.def("corpus_bleu", &corpus_bleu, py::arg("hypotheses"), py::arg("references"),
        "Corpus-level 4-gram BLEU in [0, 100] over token lists");

  m.def(
      "synth_corpus",
      [](std::size_t pairs, double duplicate_rate, double pool_factor, std::uint64_t seed) {
        SynthOptions o;
        o.n_pairs = pairs;
        o.duplicate_rate = duplicate_rate;
        o.pool_factor = pool_factor;
        o.seed = seed;
        const SynthCorpus c = synth_corpus(o);
        py::dict d;
        d["train"] = to_pairs(c.train);
        d["dev"] = to_pairs(c.dev);
        d["test"] = to_pairs(c.test);
        d["pool"] = to_pairs(c.pool);
        return d;
      },
      py::arg("pairs") = 2000, py::arg("duplicate_rate") = 0.0, py::arg("pool_factor") = 1.0, py::arg("seed") = 0,
      "Templated (intent, code) splits and a datastore pool");

  m.def("read_jsonl", [](const std::string& path) { return to_pairs(read_jsonl(path)); });
  m.def("write_jsonl",
        [](const std::string& path, const std::vector<Pair>& pairs) { write_jsonl(path, to_examples(pairs)); });

  py::class_<Store, std::shared_ptr<Store>>(m, "Datastore")
      .def(py::init(&build_store), py::arg("pairs"), py::arg("chunk_size") = 8, py::arg("mode") = "hybrid",
           py::arg("normalize") = false, py::arg("embedder") = kDefaultEmbedderId,
           py::arg("dim") = kDefaultEmbeddingDim)
      .def_static(
          "load",
          [](const std::string& path, const std::string& vocab) {
            return Store::open(Database::load(path), Vocab::load(vocab.empty() ? path + ".vocab" : vocab));
          },
          py::arg("path"), py::arg("vocab") = "")
      .def(
          "save",
          [](const Store& s, const std::string& path) {
            s.db.save(path);
            s.vocab.save(path + ".vocab");
          },
          "Writes the database and its vocabulary sidecar <path>.vocab")
      .def("__len__", [](const Store& s) { return s.db.size(); })
      .def_property_readonly("chunk_size", [](const Store& s) { return s.db.chunk_size(); })
      .def_property_readonly("mode", [](const Store& s) { return std::string(to_string(s.db.mode())); })
      .def_property_readonly("vocab", [](const Store& s) { return s.vocab.tokens(); })
      .def("build_ivf",
           [](Store& s, std::size_t n_lists, std::size_t n_probe) {
             IvfOptions o;
             o.n_lists = n_lists;
             o.n_probe = n_probe;
             s.db.build_ivf(o);
           },
           py::arg("n_lists") = 0, py::arg("n_probe") = 0)
      .def(
          "query",
          [](const Store& s, const std::string& text, std::size_t k, const std::string& kind,
             const std::string& backend) {
            const bool intent = kind == "intent";
            if (!intent && kind != "code") throw std::invalid_argument("kind must be code or intent");
            const auto ids = s.vocab.encode(intent ? intent_tokens(text) : code_tokens(text));
            const Embedding q = intent ? s.embedder->embed_intent(ids) : s.embedder->embed_code(ids);
            const NeighbourSet set =
                s.db.query_k(q, k, {intent ? KeyKind::intent : KeyKind::code, parse_backend(backend), {}, 0});
            py::list out;
            for (const auto& n : set.records)
              out.append(py::make_tuple(n.distance, join_code(s.vocab.decode(n.neighbour)),
                                        join_code(s.vocab.decode(n.continuation))));
            return out;
          },
          py::arg("text"), py::arg("k") = 2, py::arg("kind") = "code", py::arg("backend") = "automatic",
          "(distance, N, F) of the k nearest entries to a code chunk or an intent")
      .def(
          "overlap",
          [](const Store& s, const std::vector<std::string>& snippets) {
            std::vector<std::vector<std::uint32_t>> codes;
            for (const auto& c : snippets) codes.push_back(s.vocab.encode(code_tokens(c)));
            return r_overlap(s.db, codes);
          },
          "Fraction of complete chunks of the snippets stored verbatim");

  py::class_<Generator>(m, "Generator")
      .def(py::init<const std::string&, std::shared_ptr<Store>, const std::string&>(), py::arg("model"),
           py::arg("datastore") = nullptr, py::arg("backend") = "automatic")
      .def_property_readonly("config", [](const Generator& g) { return g.model.config().to_json(); })
      .def("generate", &Generator::generate, py::arg("intent"), py::arg("beam") = 0, py::arg("max_len") = 0,
           py::arg("normalize") = false, "(code, length-normalized score) of the best hypothesis")
      .def("evaluate", &Generator::evaluate, py::arg("test"), py::arg("beam") = 0, py::arg("max_len") = 0,
           py::arg("normalize") = false, py::arg("threads") = 0);

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> all{"retroseq"};
        all.insert(all.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : all) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return std::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a command-line invocation in-process: (exit code, stdout, stderr)");
}
