#include "retroseq/normalizer.hpp"

#include <cctype>
#include <fstream>
#include <map>

#include "retroseq/lexer.hpp"

namespace retroseq {

namespace {

constexpr const char* kBuiltins[] = {
    "abs", "all", "any", "ascii", "bin", "bool", "bytearray", "bytes", "callable", "chr",
    "classmethod", "compile", "complex", "delattr", "dict", "dir", "divmod", "enumerate", "eval",
    "exec", "filter", "float", "format", "frozenset", "getattr", "globals", "hasattr", "hash",
    "help", "hex", "id", "input", "int", "isinstance", "issubclass", "iter", "len", "list",
    "locals", "map", "max", "memoryview", "min", "next", "object", "oct", "open", "ord", "pow",
    "print", "property", "range", "repr", "reversed", "round", "set", "setattr", "slice",
    "sorted", "staticmethod", "str", "sum", "super", "tuple", "type", "vars", "zip", "self",
    "unicode", "xrange", "raw_input", "basestring", "long", "reduce", "cmp", "Exception",
    "ValueError", "KeyError", "IndexError", "TypeError", "OSError", "IOError", "__name__",
    "__file__", "__init__", "__main__"};

constexpr const char* kModules[] = {
    "os", "sys", "re", "json", "math", "random", "time", "datetime", "collections", "itertools",
    "functools", "operator", "string", "struct", "subprocess", "shutil", "glob", "io", "csv",
    "pickle", "copy", "socket", "urllib", "urllib2", "requests", "hashlib", "base64", "codecs",
    "locale", "calendar", "decimal", "fractions", "statistics", "heapq", "bisect", "array",
    "argparse", "logging", "threading", "multiprocessing", "zipfile", "tarfile", "gzip", "sqlite3",
    "xml", "html", "http", "email", "uuid", "platform", "signal", "ctypes", "inspect", "ast",
    "unicodedata", "textwrap", "pprint", "traceback", "tempfile", "pathlib", "numpy", "np",
    "pandas", "pd", "scipy", "sklearn", "matplotlib", "plt", "pylab", "seaborn", "sns", "torch",
    "tensorflow", "tf", "django", "flask", "bs4", "BeautifulSoup", "lxml", "PIL", "Image", "cv2",
    "yaml", "nltk", "sympy", "networkx", "nx", "wx", "tkinter", "Tkinter", "pygame", "boto3",
    "selenium", "webdriver", "scrapy", "sqlalchemy", "mechanize", "urlparse", "defaultdict",
    "Counter", "OrderedDict", "namedtuple", "deque", "partial", "chain", "product", "groupby"};

bool identifier_like(std::string_view s) {
  if (s.empty()) return false;
  const unsigned char c0 = static_cast<unsigned char>(s.front());
  if (!(std::isalpha(c0) || c0 == '_')) return false;
  for (unsigned char c : s)
    if (!(std::isalnum(c) || c == '_')) return false;
  return true;
}

// Per-token syntactic context needed by both directions of the mapping.
struct TokenRoles {
  std::vector<bool> attribute;  // identifier right after '.'
  std::vector<bool> keyword_arg;  // name in f(name=...)
  std::unordered_set<std::string> bound;  // comprehension targets and lambda params
};

TokenRoles analyse(const std::vector<Token>& toks) {
  TokenRoles roles;
  roles.attribute.assign(toks.size(), false);
  roles.keyword_arg.assign(toks.size(), false);
  std::vector<char> brackets;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const Token& t = toks[i];
    if (t.kind == TokenKind::op) {
      const std::string& s = t.text;
      if (s == "(" || s == "[" || s == "{") brackets.push_back(s[0]);
      if ((s == ")" || s == "]" || s == "}") && !brackets.empty()) brackets.pop_back();
      continue;
    }
    if (t.kind != TokenKind::identifier) continue;
    if (i > 0 && toks[i - 1].kind == TokenKind::op && toks[i - 1].text == ".")
      roles.attribute[i] = true;
    if (!brackets.empty() && brackets.back() == '(' && i + 1 < toks.size() &&
        toks[i + 1].text == "=" && i > 0 && (toks[i - 1].text == "(" || toks[i - 1].text == ","))
      roles.keyword_arg[i] = true;
    if (t.text == "for" && !brackets.empty()) {
      for (std::size_t j = i + 1; j < toks.size() && toks[j].text != "in"; ++j)
        if (toks[j].kind == TokenKind::identifier) roles.bound.insert(toks[j].text);
    }
    if (t.text == "lambda") {
      for (std::size_t j = i + 1; j < toks.size() && toks[j].text != ":"; ++j)
        if (toks[j].kind == TokenKind::identifier && toks[j - 1].text != "=")
          roles.bound.insert(toks[j].text);
    }
  }
  return roles;
}

bool renamable(const Token& t, std::size_t i, const TokenRoles& roles, const Allowlist& allow) {
  return t.kind == TokenKind::identifier && !roles.attribute[i] && !roles.keyword_arg[i] &&
         !roles.bound.count(t.text) && !is_keyword(t.text) && !allow.contains(t.text);
}

struct Edit {
  std::size_t begin, end;
  std::string text;
};

std::string apply_edits(std::string_view source, const std::vector<Edit>& edits) {
  std::string out;
  std::size_t pos = 0;
  for (const Edit& e : edits) {
    out.append(source.substr(pos, e.begin - pos));
    out += e.text;
    pos = e.end;
  }
  out.append(source.substr(pos));
  return out;
}

struct Entity {
  std::size_t begin, end;  // span in the intent, delimiters included
  std::string body;
  char delimiter;
};

std::vector<Entity> find_entities(std::string_view s) {
  auto word = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  };
  std::vector<Entity> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if ((c == '`' || c == '\'' || c == '"') && (i == 0 || !word(s[i - 1]))) {
      std::size_t j = i + 1;
      bool found = false;
      for (; j < s.size() && s[j] != '\n'; ++j)
        if (s[j] == c && (j + 1 == s.size() || !word(s[j + 1]))) {
          found = true;
          break;
        }
      if (found && j > i + 1) {
        out.push_back({i, j + 1, std::string(s.substr(i + 1, j - i - 1)), c});
        i = j + 1;
        continue;
      }
    }
    ++i;
  }
  return out;
}

}  // namespace

Allowlist Allowlist::defaults() {
  Allowlist a;
  for (const char* n : kBuiltins) a.add(n);
  for (const char* n : kModules) a.add(n);
  return a;
}

Allowlist Allowlist::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open allowlist " + path);
  Allowlist a = defaults();
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    std::size_t start = 0;
    while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start]))) ++start;
    line.erase(0, start);
    if (line.empty() || line.front() == '#') continue;
    a.add(line);
  }
  return a;
}

void SubstitutionMap::add(std::string placeholder, std::string original) {
  entries_.emplace_back(std::move(placeholder), std::move(original));
}

std::optional<std::string> SubstitutionMap::original(std::string_view placeholder) const {
  for (const auto& [p, o] : entries_)
    if (p == placeholder) return o;
  return std::nullopt;
}

std::optional<std::string> SubstitutionMap::placeholder_for(std::string_view original) const {
  for (const auto& [p, o] : entries_)
    if (o == original) return p;
  return std::nullopt;
}

bool SubstitutionMap::is_identity() const {
  for (const auto& [p, o] : entries_)
    if (p != o) return false;
  return true;
}

bool is_placeholder(std::string_view w) {
  if (w.size() < 4) return false;
  const auto head = w.substr(0, 3);
  if (head != "var" && head != "str" && head != "lst") return false;
  for (char c : w.substr(3))
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
  return w.size() == 4 || w[3] != '0';
}

NormalizedSnippet normalize_snippet(std::string_view code, const Allowlist& allow) {
  const std::vector<Token> toks = lex_code(code);
  const TokenRoles roles = analyse(toks);
  NormalizedSnippet out;
  std::map<std::string, std::string> assigned;
  auto name_for = [&](const std::string& original) {
    auto it = assigned.find(original);
    if (it != assigned.end()) return it->second;
    std::string p = "var" + std::to_string(assigned.size());
    assigned.emplace(original, p);
    out.map.add(p, original);
    return p;
  };
  std::vector<Edit> edits;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const Token& t = toks[i];
    if (t.kind == TokenKind::string) {
      const StringBody b = string_body(t.text);
      if (b.end <= b.begin) continue;
      const std::string body = t.text.substr(b.begin, b.end - b.begin);
      edits.push_back({t.offset + b.begin, t.offset + b.end, name_for(body)});
    } else if (renamable(t, i, roles, allow)) {
      edits.push_back({t.offset, t.offset + t.text.size(), name_for(t.text)});
    }
  }
  out.code = apply_edits(code, edits);
  return out;
}

NormalizedPair normalize_pair(std::string_view intent, std::string_view code) {
  const std::vector<Token> toks = lex_code(code);
  const TokenRoles roles = analyse(toks);
  NormalizedPair out;
  std::map<std::string, std::string> ident_names, string_names;
  std::size_t n_var = 0, n_str = 0, n_lst = 0;

  auto string_match = [&](const std::string& body) {
    for (const Token& t : toks) {
      if (t.kind != TokenKind::string) continue;
      const StringBody b = string_body(t.text);
      if (b.end > b.begin && t.text.compare(b.begin, b.end - b.begin, body) == 0) return true;
    }
    return false;
  };
  auto ident_match = [&](const std::string& name) {
    for (std::size_t i = 0; i < toks.size(); ++i)
      if (toks[i].kind == TokenKind::identifier && !roles.attribute[i] && toks[i].text == name)
        return true;
    return false;
  };
  auto list_bound = [&](const std::string& name) {
    for (std::size_t i = 0; i + 2 < toks.size(); ++i)
      if (toks[i].kind == TokenKind::identifier && !roles.attribute[i] && toks[i].text == name &&
          toks[i + 1].text == "=" && toks[i + 2].text == "[")
        return true;
    return false;
  };

  std::vector<Edit> intent_edits;
  for (const Entity& e : find_entities(intent)) {
    std::string placeholder;
    if (auto it = string_names.find(e.body); it != string_names.end()) placeholder = it->second;
    if (auto it = ident_names.find(e.body); it != ident_names.end()) placeholder = it->second;
    if (placeholder.empty()) {
      const bool as_string = string_match(e.body);
      const bool as_ident = identifier_like(e.body) && !is_keyword(e.body) && ident_match(e.body);
      const bool prefer_ident = e.delimiter == '`';
      if (as_ident && (prefer_ident || !as_string)) {
        placeholder = list_bound(e.body) ? "lst" + std::to_string(n_lst++)
                                         : "var" + std::to_string(n_var++);
        ident_names.emplace(e.body, placeholder);
      } else if (as_string) {
        placeholder = "str" + std::to_string(n_str++);
        string_names.emplace(e.body, placeholder);
      } else {
        out.unmatched.push_back(e.body);
        continue;
      }
      out.map.add(placeholder, e.body);
    }
    intent_edits.push_back({e.begin, e.end, placeholder});
  }

  std::vector<Edit> code_edits;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const Token& t = toks[i];
    if (t.kind == TokenKind::identifier && !roles.attribute[i]) {
      if (auto it = ident_names.find(t.text); it != ident_names.end())
        code_edits.push_back({t.offset, t.offset + t.text.size(), it->second});
    } else if (t.kind == TokenKind::string) {
      const StringBody b = string_body(t.text);
      if (b.end <= b.begin) continue;
      if (auto it = string_names.find(t.text.substr(b.begin, b.end - b.begin));
          it != string_names.end())
        code_edits.push_back({t.offset + b.begin, t.offset + b.end, it->second});
    }
  }
  out.intent = apply_edits(intent, intent_edits);
  out.code = apply_edits(code, code_edits);
  return out;
}

NormalizedPair normalize_intent(std::string_view intent) {
  NormalizedPair out;
  std::map<std::string, std::string> names;
  std::size_t n_var = 0, n_str = 0;
  std::vector<Edit> edits;
  for (const Entity& e : find_entities(intent)) {
    auto it = names.find(e.body);
    if (it == names.end()) {
      const bool ident = e.delimiter == '`' && identifier_like(e.body) && !is_keyword(e.body);
      const std::string placeholder =
          ident ? "var" + std::to_string(n_var++) : "str" + std::to_string(n_str++);
      it = names.emplace(e.body, placeholder).first;
      out.map.add(placeholder, e.body);
    }
    edits.push_back({e.begin, e.end, it->second});
  }
  out.intent = apply_edits(intent, edits);
  return out;
}

namespace {

std::string restore(std::string_view placeholder, const SubstitutionMap& map, bool strict) {
  if (auto original = map.original(placeholder)) return *original;
  if (strict) throw UnknownPlaceholder("unknown placeholder '" + std::string(placeholder) + "'");
  return std::string(placeholder);
}

}  // namespace

std::string denormalize(std::string_view code, const SubstitutionMap& map) {
  const std::vector<Token> toks = lex_code(code);
  const TokenRoles roles = analyse(toks);
  std::vector<Edit> edits;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const Token& t = toks[i];
    if (t.kind == TokenKind::identifier && !roles.attribute[i] && is_placeholder(t.text)) {
      edits.push_back({t.offset, t.offset + t.text.size(), restore(t.text, map, true)});
    } else if (t.kind == TokenKind::string) {
      const StringBody b = string_body(t.text);
      if (b.end <= b.begin) continue;
      const std::string body = t.text.substr(b.begin, b.end - b.begin);
      if (is_placeholder(body))
        edits.push_back({t.offset + b.begin, t.offset + b.end, restore(body, map, true)});
    }
  }
  return apply_edits(code, edits);
}

std::vector<std::string> denormalize_tokens(const std::vector<std::string>& tokens,
                                            const SubstitutionMap& map) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    const bool after_dot = i > 0 && tokens[i - 1] == ".";
    if (!after_dot && is_placeholder(t)) {
      out.push_back(restore(t, map, false));
    } else if (!t.empty() && (t.back() == '\'' || t.back() == '"') && t.size() >= 2) {
      const StringBody b = string_body(t);
      std::string s = t;
      if (b.end > b.begin && is_placeholder(t.substr(b.begin, b.end - b.begin)))
        s = t.substr(0, b.begin) + restore(t.substr(b.begin, b.end - b.begin), map, false) +
            t.substr(b.end);
      out.push_back(std::move(s));
    } else {
      out.push_back(t);
    }
  }
  return out;
}

}  // namespace retroseq
