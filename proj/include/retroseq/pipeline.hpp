#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "retroseq/datastore.hpp"
#include "retroseq/embedder.hpp"
#include "retroseq/model.hpp"
#include "retroseq/normalizer.hpp"
#include "retroseq/vocab.hpp"

namespace retroseq {

/// One intent/code pair, CoNaLa-shaped.
struct Example {
  std::string intent;
  std::string snippet;
  std::optional<std::string> rewritten_intent;
  bool operator==(const Example&) const = default;
};

/// rewritten_intent when present and non-empty, else intent.
const std::string& effective_intent(const Example& e);

/// JSON lines with fields intent, snippet and optional rewritten_intent.
/// Blank lines are skipped; malformed lines throw DataError naming the line.
std::vector<Example> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<Example>& examples);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Token ids of one example. `code` carries no BOS/EOS.
struct EncodedExample {
  std::vector<std::uint32_t> intent;
  std::vector<std::uint32_t> code;
  std::uint64_t source = 0;
  SubstitutionMap map;
};

/// Tokenizes (pair-normalizing when asked) and maps tokens to ids. With
/// `grow` unseen tokens are appended to the vocab, otherwise they become UNK.
/// Throws LexError for code the lexer rejects.
EncodedExample encode_example(const Example& e, bool normalize, Vocab& vocab, bool grow,
                              std::size_t max_intent = 0, std::size_t max_code = 0);
EncodedExample encode_example(const Example& e, bool normalize, const Vocab& vocab,
                              std::size_t max_intent = 0, std::size_t max_code = 0);

std::vector<std::uint32_t> decoder_input(std::span<const std::uint32_t> code);
std::vector<std::uint32_t> decoder_target(std::span<const std::uint32_t> code);

/// Read-only access to a datastore for a model.
struct Retriever {
  const Database* db = nullptr;
  const Embedder* embedder = nullptr;
  std::size_t k = 2;
  Backend backend = Backend::automatic;

  NeighbourSet code_neighbours(std::span<const std::uint32_t> chunk,
                               std::optional<std::uint64_t> exclude = std::nullopt) const;
  NeighbourSet intent_neighbours(std::span<const std::uint32_t> intent,
                                 std::optional<std::uint64_t> exclude = std::nullopt) const;
};

/// Checks embedder id/dimension, chunk size and vocabulary against the model.
void check_compatible(const Model& model, const Retriever& retriever);

/// Neighbour sets for every chunk of the decoder stream [BOS] + code: chunk u
/// >= 1 is keyed by code chunk u-1; chunk 0 by the intent in hybrid mode and
/// empty otherwise. Entries of `exclude` are skipped.
std::vector<NeighbourSet> teacher_neighbours(const Retriever& r, const EncodedExample& ex,
                                             bool hybrid_first_chunk,
                                             std::optional<std::uint64_t> exclude);

struct NeighbourCache {
  std::vector<std::vector<NeighbourSet>> sets;  // [example][chunk]
  std::vector<std::string> warnings;
};

/// teacher_neighbours for every example with self-exclusion by source id.
NeighbourCache precompute_neighbours(const std::vector<EncodedExample>& data, const Retriever& r,
                                     bool hybrid_first_chunk);

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  /// 0 runs every epoch to completion; otherwise training stops after this many updates.
  std::size_t max_steps = 0;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  /// Neighbours from the precomputed cache; otherwise retrieved per step.
  bool use_cache = true;
  /// Beam width of the per-epoch dev evaluation.
  std::size_t dev_beam = 1;
  /// Dev examples decoded per epoch (0 = all).
  std::size_t dev_limit = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double train_loss = 0;
  double dev_bleu = 0;
  double seconds = 0;
};

struct TrainResult {
  Model best;
  Model last;
  double best_dev_bleu = -1;
  std::size_t best_epoch = 0;
  std::vector<double> step_losses;
  std::vector<EpochMetrics> epochs;
  std::vector<std::string> warnings;
};

/// Loss per update is the summed NLL of the batch over its target-token count.
/// Without a dev set the last epoch counts as best. Metrics are also written as one JSON object per epoch to `metrics` when given.
TrainResult train(const TrainConfig& config, const std::vector<EncodedExample>& train_set,
                  const std::vector<EncodedExample>& dev_set, const Retriever* retriever,
                  std::ostream* metrics = nullptr);

/// Copy-aware negative log-likelihood of one example, summed over the
/// target tokens (code then EOS).
Tensor example_loss(const Model& model, const EncodedExample& ex,
                    std::span<const NeighbourSet> neighbours, const nn::ForwardContext& ctx);

struct DecodeOptions {
  std::size_t beam = 15;
  std::size_t max_len = 64;
  /// Entries from this source are never retrieved.
  std::optional<std::uint64_t> exclude;
};

struct Hypothesis {
  std::vector<std::uint32_t> tokens;  // generated code ids, without BOS/EOS
  double log_prob = 0;                // sum over generated tokens (EOS included when emitted)
  double score = 0;                   // log_prob / number of scored tokens
  bool finished = false;
};

/// Length-normalized beam search with live retrieval after every completed chunk.
Hypothesis beam_decode(const Model& model, const Retriever* retriever,
                       std::span<const std::uint32_t> intent, const DecodeOptions& options);
/// Argmax decoding with the same retrieval schedule.
Hypothesis greedy_decode(const Model& model, const Retriever* retriever,
                         std::span<const std::uint32_t> intent, const DecodeOptions& options);
/// Model log-probability of `code` followed by EOS under live retrieval.
double sequence_log_prob(const Model& model, const Retriever* retriever,
                         std::span<const std::uint32_t> intent, std::span<const std::uint32_t> code,
                         const DecodeOptions& options = {});

/// Corpus-level 4-gram BLEU in [0, 100] with brevity penalty.
double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references);

/// Fraction of the complete m-token chunks of `codes` that appear verbatim as
/// an entry's N. PAD-filled tail windows are not counted.
double r_overlap(const Database& db, const std::vector<std::vector<std::uint32_t>>& codes);

struct SynthOptions {
  std::uint64_t seed = 0;
  std::size_t n_pairs = 2000;
  /// Probability that a pair's code also enters the pool under a paraphrased intent.
  double duplicate_rate = 0.0;
  /// Unrelated pool-only pairs, as a multiple of n_pairs.
  double pool_factor = 1.0;
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
};

struct SynthCorpus {
  std::vector<Example> train, dev, test;
  /// Database material: the training pairs, paraphrase duplicates and unrelated pairs.
  std::vector<Example> pool;
};

SynthCorpus synth_corpus(const SynthOptions& options);

/// Evaluation over a test set.
struct EvalResult {
  double bleu = 0;
  double exact_match = 0;
  double seconds_per_example = 0;
  std::vector<std::string> outputs;  // denormalized code text per example
};

EvalResult evaluate(const Model& model, const Retriever* retriever, const std::vector<Example>& test,
                    const Vocab& vocab, bool normalize, const DecodeOptions& options,
                    std::size_t threads = 1);

/// Code text for generated ids: specials dropped, placeholders restored.
std::string render_code(std::span<const std::uint32_t> ids, const Vocab& vocab,
                        const SubstitutionMap& map);

/// Parallelism cap: RETROSEQ_THREADS when set, else the hardware concurrency.
std::size_t thread_cap();

}  // namespace retroseq
