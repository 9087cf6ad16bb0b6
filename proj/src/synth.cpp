#include <algorithm>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "retroseq/pipeline.hpp"
#include "retroseq/rng.hpp"

namespace retroseq {

namespace {

// Placeholders: $A $B $C names (backticked in the intent), $K string bodies and
// $F file names (quoted in the intent, literals in the code), $N numbers
// stated in the intent. $H hidden numbers, $S/$T hidden choices and $V loop
// variables appear only in the code, so only a stored copy of the snippet
// reveals them.
struct Template {
  std::vector<std::string> intents;  // phrasings differing by a word or two
  std::string code;
  std::vector<std::string> s = {}, t = {};
};

const std::vector<Template>& templates() {
  static const std::vector<Template> all = {
      {{"sort list `$A` by key '$K'", "sort the list `$A` by key '$K'", "order list `$A` by key '$K'"},
       "$A.sort(key=lambda $V: $V['$K'], reverse=$S)",
       {"True", "False"}},
      {{"get item $N of list `$A` into `$B`", "get element $N of list `$A` into `$B`",
        "fetch item $N of list `$A` into `$B`"},
       "$B = $A[$N] if len($A) > $N else $H"},
      {{"read file '$F' into list `$A`", "read the file '$F' into list `$A`",
        "load file '$F' into list `$A`"},
       "$A = open('$F', $S).read($H).split($T)",
       {"'r'", "'rb'", "'rt'", "'rU'"},
       {"'\\n'", "','", "';'", "'|'", "'\\t'"}},
      {{"count items equal to '$K' in `$A` as `$B`", "count elements equal to '$K' in `$A` as `$B`",
        "count the items equal to '$K' in `$A` as `$B`"},
       "$B = sum(1 for $V in $A if $V == '$K')"},
      {{"map each element of `$A` to its length in `$B`", "map every element of `$A` to its length in `$B`",
        "map each item of `$A` to its length in `$B`"},
       "$B = {$V: len($V) + $H for $V in $A}"},
      {{"keep numbers in `$A` greater than $N", "keep values in `$A` greater than $N",
        "keep numbers in `$A` larger than $N"},
       "$A = [$V for $V in $A if $V > $N or $V == $H]"},
      {{"add $N to every element of `$A`", "add $N to each element of `$A`", "add $N to every item of `$A`"},
       "$A = [$V + $N for $V in $A][:$H]"},
      {{"join list `$A` with separator '$K' into `$B`", "join the list `$A` with separator '$K' into `$B`",
        "join list `$A` using separator '$K' into `$B`"},
       "$B = '$K'.join(map($S, $A))",
       {"str", "repr", "ascii"}},
      {{"convert string `$A` to integer with base $N", "convert the string `$A` to integer with base $N",
        "parse string `$A` to integer with base $N"},
       "$B = int($A.strip($S), $N) - $H",
       {"'0'", "' '", "'x'", "'\\n'"}},
      {{"split string `$A` on '$K' at most $N times", "split the string `$A` on '$K' at most $N times",
        "split string `$A` by '$K' at most $N times"},
       "$B = $A.split('$K', $N)[$S]",
       {"0", "-1", "1", "2"}},
      {{"replace '$K' in string `$A` with spaces", "replace '$K' in the string `$A` with spaces",
        "substitute '$K' in string `$A` with spaces"},
       "$A = $A.replace('$K', ' ', $H).strip($S)",
       {"'.'", "','", "' '", "'_'"}},
      {{"create numpy array `$A` of zeros with $N rows", "create a numpy array `$A` of zeros with $N rows",
        "make numpy array `$A` of zeros with $N rows"},
       "$A = np.zeros(($N, $H), dtype=$S)",
       {"np.float32", "np.int64", "float", "int", "bool"}},
      {{"load json from file '$F' into `$A`", "load json data from file '$F' into `$A`",
        "read json from file '$F' into `$A`"},
       "$A = json.load(open('$F', $S))[$H]",
       {"'r'", "'rb'", "'rt'"}},
      {{"write list `$A` to file '$F'", "write the list `$A` to file '$F'", "save list `$A` to file '$F'"},
       "open('$F', $S).write($T.join($A[$H:]))",
       {"'w'", "'a'", "'w+'"},
       {"'\\n'", "','", "' '"}},
      {{"remove duplicates from list `$A`", "remove the duplicates from list `$A`",
        "drop duplicates from list `$A`"},
       "$A = sorted(set($A), reverse=$S)[:$H]",
       {"True", "False"}},
      {{"get keys of dict `$A` with value above $N", "get the keys of dict `$A` with value above $N",
        "get keys of dictionary `$A` with value above $N"},
       "$B = [k for k, v in $A.items() if v > $N]"},
      {{"read csv file '$F' into dataframe `$A`", "read the csv file '$F' into dataframe `$A`",
        "load csv file '$F' into dataframe `$A`"},
       "$A = pd.read_csv('$F', sep=$S, nrows=$H)",
       {"','", "';'", "'\\t'", "'|'"}},
      {{"select column '$K' of dataframe `$A` as list `$B`", "select the column '$K' of dataframe `$A` as list `$B`",
        "take column '$K' of dataframe `$A` as list `$B`"},
       "$B = $A['$K'].fillna($H).tolist()"},
      {{"find index of maximum value in list `$A`", "find the index of maximum value in list `$A`",
        "find index of largest value in list `$A`"},
       "$B = max(range(len($A)), key=$A.__getitem__)"},
      {{"concatenate lists `$A` and `$B` into `$C`", "concatenate the lists `$A` and `$B` into `$C`",
        "join lists `$A` and `$B` into `$C`"},
       "$C = ($A + $B)[:$H]"},
      {{"check if key '$K' exists in dict `$A` and increment it",
        "check whether key '$K' exists in dict `$A` and increment it",
        "check if key '$K' is in dict `$A` and increment it"},
       "if '$K' in $A: $A['$K'] += $H"},
      {{"sum column $N of matrix `$A`", "sum the column $N of matrix `$A`", "add up column $N of matrix `$A`"},
       "$B = sum(row[$N] for row in $A) / $H"},
      {{"reverse string `$A` into `$B`", "reverse the string `$A` into `$B`", "invert string `$A` into `$B`"},
       "$B = ''.join(reversed($A))"},
      {{"repeat list `$A` $N times", "repeat the list `$A` $N times", "duplicate list `$A` $N times"},
       "$B = $A * $N + [$H]"},
      {{"print elements of `$A` separated by '$K'", "print the elements of `$A` separated by '$K'",
        "print items of `$A` separated by '$K'"},
       "print(*$A, sep='$K', end=$S)",
       {"''", "'\\n'", "' '", "'.'"}},
      {{"get last $N characters of string `$A`", "get the last $N characters of string `$A`",
        "take last $N characters of string `$A`"},
       "$B = $A[-$N:].$S()",
       {"lower", "upper", "strip", "title"}},
      {{"make a request to url '$K' with timeout $N", "send a request to url '$K' with timeout $N",
        "make a request to the url '$K' with timeout $N"},
       "$A = requests.get('$K', params={'n': $H}, timeout=$N)"},
      {{"zip lists `$A` and `$B` into a dict", "zip the lists `$A` and `$B` into a dict",
        "combine lists `$A` and `$B` into a dict"},
       "$C = dict(zip($A, $B[$H:]))"},
      {{"flatten list of lists `$A`", "flatten the list of lists `$A`", "flatten nested list `$A`"},
       "$B = [$V for sub in $A for $V in sub][$H:]"},
      {{"round every value in `$A` to $N decimals", "round each value in `$A` to $N decimals",
        "round every number in `$A` to $N decimals"},
       "$A = [round($V, $N) for $V in $A if $V > $H]"},
      {{"open url '$K' and read content", "open the url '$K' and read content",
        "open url '$K' and read the content"},
       "$A = urllib.request.urlopen('$K', timeout=$H).read()"},
      {{"set environment variable '$K' to `$A`", "set the environment variable '$K' to `$A`",
        "assign environment variable '$K' to `$A`"},
       "os.environ['$K'] = $S($A)",
       {"str", "repr", "hex"}},
      {{"create directory '$F' if missing", "create the directory '$F' if missing",
        "make directory '$F' if missing"},
       "os.makedirs('$F', mode=$H, exist_ok=$S)",
       {"True", "False"}},
      {{"filter dict `$A` to keys starting with '$K'", "filter the dict `$A` to keys starting with '$K'",
        "filter dict `$A` to keys beginning with '$K'"},
       "$B = {k: v for k, v in $A.items() if k.startswith('$K')}"},
      {{"get the length of the longest string in `$A`", "get length of the longest string in `$A`",
        "find the length of the longest string in `$A`"},
       "$B = max(len($V) for $V in $A) + $H"},
      {{"shuffle list `$A` in place", "shuffle the list `$A` in place", "randomly shuffle list `$A` in place"},
       "random.seed($H); random.shuffle($A)"},
      {{"convert list `$A` to a numpy array", "convert the list `$A` to a numpy array",
        "turn list `$A` into a numpy array"},
       "$B = np.array($A, dtype=$S)[$H:].reshape(-1, 2)",
       {"np.float32", "np.int64", "float", "object"}},
      {{"group rows of dataframe `$A` by column '$K'", "group the rows of dataframe `$A` by column '$K'",
        "group rows of dataframe `$A` by the column '$K'"},
       "$B = $A.groupby('$K').$S().head($H)",
       {"sum", "mean", "count", "max", "min"}},
      {{"compile regex '$K' and find all matches in `$A`", "compile the regex '$K' and find all matches in `$A`",
        "compile regex '$K' and get all matches in `$A`"},
       "$B = re.compile('$K', $S).findall($A)",
       {"re.I", "re.M", "re.S", "0"}},
      {{"get dict `$A` value for key '$K' with default $N", "get value of dict `$A` for key '$K' with default $N",
        "get dict `$A` value for key '$K' defaulting to $N"},
       "$B = $A.get('$K', $N) * $H"},
  };
  return all;
}

const char* const kPrefixes[] = {"user", "item", "row", "col", "data", "order", "price", "file", "line",
                                 "word", "node", "key", "val", "score", "city", "name", "path", "tag",
                                 "msg", "token", "event", "color", "size", "page", "image", "step",
                                 "task", "job", "point", "edge", "cell", "batch", "frame", "query",
                                 "result", "record", "entry", "value", "count", "label"};
const char* const kNameSuffixes[] = {"s", "_list", "_map", "_ids", "_df", "_arr", "_set", "_dict",
                                     "_vals", "_tbl", "_buf", "_q", "1", "2", "3", "_new", "_old",
                                     "_all", "_tmp", "_raw", "_str", "_num", "_out", "_in", "_x"};
const char* const kStringSuffixes[] = {"_id", "_name", "_date", "_type", "_code", "_key", "_url", "_path"};
const char* const kFileSuffixes[] = {".txt", ".csv", ".json", ".log", ".dat"};
const char* const kLoopVars[] = {"x", "i", "v", "e", "item", "el", "n", "w"};

template <class T, std::size_t N>
const T& pick_from(Rng& rng, const T (&arr)[N]) {
  return arr[rng.below(N)];
}

const std::string& pick_from(Rng& rng, const std::vector<std::string>& v) { return v[rng.below(v.size())]; }

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t p = s.find(from); p != std::string::npos; p = s.find(from, p + to.size()))
    s.replace(p, from.size(), to);
}

struct Draw {
  std::size_t tmpl = 0;
  std::size_t phrasing = 0;
  std::vector<std::pair<std::string, std::string>> fill;
};

Draw draw(Rng& rng) {
  const auto& all = templates();
  Draw d;
  d.tmpl = rng.below(all.size());
  const Template& t = all[d.tmpl];
  d.phrasing = rng.below(t.intents.size());
  std::set<std::string> used;
  auto fresh_name = [&] {
    for (;;) {
      std::string n = std::string(pick_from(rng, kPrefixes)) + pick_from(rng, kNameSuffixes);
      if (rng.bernoulli(0.5)) n += std::to_string(rng.below(10));
      if (used.insert(n).second) return n;
    }
  };
  d.fill.emplace_back("$A", fresh_name());
  d.fill.emplace_back("$B", fresh_name());
  d.fill.emplace_back("$C", fresh_name());
  std::string str = std::string(pick_from(rng, kPrefixes)) + pick_from(rng, kStringSuffixes);
  if (rng.bernoulli(0.5)) str += std::to_string(rng.below(10));
  d.fill.emplace_back("$K", str);
  d.fill.emplace_back("$F", std::string(pick_from(rng, kPrefixes)) + pick_from(rng, kNameSuffixes) +
                                pick_from(rng, kFileSuffixes));
  d.fill.emplace_back("$N", std::to_string(2 + rng.below(98)));
  d.fill.emplace_back("$H", std::to_string(rng.below(1000)));
  d.fill.emplace_back("$S", t.s.empty() ? std::string() : pick_from(rng, t.s));
  d.fill.emplace_back("$T", t.t.empty() ? std::string() : pick_from(rng, t.t));
  d.fill.emplace_back("$V", pick_from(rng, kLoopVars));
  return d;
}

std::string render(std::string text, const Draw& d) {
  for (const auto& [ph, value] : d.fill) replace_all(text, ph, value);
  return text;
}

Example realize(const Draw& d, std::size_t phrasing) {
  const Template& t = templates()[d.tmpl];
  return {render(t.intents[phrasing], d), render(t.code, d), std::nullopt};
}

}  // namespace

SynthCorpus synth_corpus(const SynthOptions& o) {
  if (o.n_pairs < 30) throw std::invalid_argument("synth_corpus: n_pairs must be >= 30");
  if (o.duplicate_rate < 0 || o.duplicate_rate > 1)
    throw std::invalid_argument("synth_corpus: duplicate_rate must lie in [0, 1]");
  if (o.dev_fraction < 0 || o.test_fraction < 0 || o.dev_fraction + o.test_fraction >= 1)
    throw std::invalid_argument("synth_corpus: dev and test fractions must be >= 0 and sum below 1");
  Rng rng(mix64(o.seed, fnv1a64("synth")));
  std::set<std::pair<std::string, std::string>> seen;
  auto unique_draws = [&](std::size_t n) {
    std::vector<Draw> out;
    while (out.size() < n) {
      Draw d = draw(rng);
      const Example e = realize(d, d.phrasing);
      if (seen.emplace(e.intent, e.snippet).second) out.push_back(std::move(d));
    }
    return out;
  };
  const std::vector<Draw> pairs = unique_draws(o.n_pairs);
  const auto n_dev = static_cast<std::size_t>(o.dev_fraction * static_cast<double>(o.n_pairs) + 0.5);
  const auto n_test = static_cast<std::size_t>(o.test_fraction * static_cast<double>(o.n_pairs) + 0.5);
  const std::size_t n_train = o.n_pairs - n_dev - n_test;

  SynthCorpus c;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Example e = realize(pairs[i], pairs[i].phrasing);
    (i < n_train ? c.train : i < n_train + n_dev ? c.dev : c.test).push_back(e);
  }
  c.pool = c.train;
  for (const Draw& d : pairs) {
    if (!rng.bernoulli(o.duplicate_rate)) continue;
    const std::size_t phrasings = templates()[d.tmpl].intents.size();
    const std::size_t other = (d.phrasing + 1 + rng.below(phrasings - 1)) % phrasings;
    c.pool.push_back(realize(d, other));
  }
  const auto unrelated = static_cast<std::size_t>(o.pool_factor * static_cast<double>(o.n_pairs) + 0.5);
  for (const Draw& d : unique_draws(unrelated)) c.pool.push_back(realize(d, d.phrasing));
  return c;
}

}  // namespace retroseq
