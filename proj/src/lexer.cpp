#include "retroseq/lexer.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstring>

namespace retroseq {

namespace {

bool word_start(unsigned char c) { return std::isalpha(c) || c == '_' || c >= 0x80; }
bool word_char(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

constexpr std::array<std::string_view, 35> kKeywords = {
    "False", "None",   "True",    "and",      "as",       "assert", "async",
    "await", "break",  "class",   "continue", "def",      "del",    "elif",
    "else",  "except", "finally", "for",      "from",     "global", "if",
    "import", "in",    "is",      "lambda",   "nonlocal", "not",    "or",
    "pass",  "raise",  "return",  "try",      "while",    "with",   "yield"};

constexpr std::array<std::string_view, 5> kThreeCharOps = {"**=", "//=", ">>=", "<<=", "..."};
constexpr std::array<std::string_view, 20> kTwoCharOps = {
    "==", "!=", "<=", ">=", "**", "//", "->", "+=", "-=", "*=",
    "/=", "%=", "&=", "|=", "^=", "<<", ">>", ":=", "@=", "<>"};
constexpr std::string_view kSingleOps = "+-*/%@&|^~<>()[]{},:;.=!";

bool is_string_prefix(std::string_view p) {
  if (p.size() > 2) return false;
  std::string lower;
  for (char c : p) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return lower == "r" || lower == "b" || lower == "u" || lower == "f" || lower == "rb" ||
         lower == "br" || lower == "fr" || lower == "rf";
}

// Returns the end offset of the string literal whose quote starts at `q`.
std::size_t scan_string(std::string_view s, std::size_t start, std::size_t q) {
  const char quote = s[q];
  const bool triple = q + 2 < s.size() && s[q + 1] == quote && s[q + 2] == quote;
  std::size_t i = q + (triple ? 3 : 1);
  while (i < s.size()) {
    const char c = s[i];
    if (c == '\\') {
      i += 2;
      continue;
    }
    if (triple) {
      if (c == quote && i + 2 < s.size() && s[i + 1] == quote && s[i + 2] == quote) return i + 3;
    } else {
      if (c == quote) return i + 1;
      if (c == '\n') break;
    }
    ++i;
  }
  throw LexError("unterminated string literal", start);
}

std::size_t scan_number(std::string_view s, std::size_t i) {
  const std::size_t n = s.size();
  if (s[i] == '0' && i + 1 < n && std::strchr("xXoObB", s[i + 1]) != nullptr) {
    i += 2;
    while (i < n && (std::isxdigit(static_cast<unsigned char>(s[i])) || s[i] == '_')) ++i;
    return i;
  }
  while (i < n && (std::isdigit(static_cast<unsigned char>(s[i])) || s[i] == '_')) ++i;
  if (i < n && s[i] == '.') {
    ++i;
    while (i < n && (std::isdigit(static_cast<unsigned char>(s[i])) || s[i] == '_')) ++i;
  }
  if (i < n && (s[i] == 'e' || s[i] == 'E')) {
    std::size_t j = i + 1;
    if (j < n && (s[j] == '+' || s[j] == '-')) ++j;
    if (j < n && std::isdigit(static_cast<unsigned char>(s[j]))) {
      i = j;
      while (i < n && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    }
  }
  if (i < n && (s[i] == 'j' || s[i] == 'J' || s[i] == 'L' || s[i] == 'l')) ++i;
  return i;
}

}  // namespace

LexError::LexError(const std::string& what, std::size_t position)
    : std::runtime_error(what + " at offset " + std::to_string(position)), position_(position) {}

bool is_keyword(std::string_view word) {
  return std::find(kKeywords.begin(), kKeywords.end(), word) != kKeywords.end();
}

std::vector<Token> lex_code(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  const std::size_t n = s.size();
  while (i < n) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (c == '#') {
      while (i < n && s[i] != '\n') ++i;
      continue;
    }
    if (c == '\\' && i + 1 < n && (s[i + 1] == '\n' || s[i + 1] == '\r')) {
      i += 2;
      continue;
    }
    const std::size_t start = i;
    if (word_start(c)) {
      while (i < n && word_char(static_cast<unsigned char>(s[i]))) ++i;
      if (i < n && (s[i] == '\'' || s[i] == '"') && is_string_prefix(s.substr(start, i - start))) {
        i = scan_string(s, start, i);
        out.push_back({TokenKind::string, std::string(s.substr(start, i - start)), start});
      } else {
        out.push_back({TokenKind::identifier, std::string(s.substr(start, i - start)), start});
      }
      continue;
    }
    if (c == '\'' || c == '"') {
      i = scan_string(s, start, i);
      out.push_back({TokenKind::string, std::string(s.substr(start, i - start)), start});
      continue;
    }
    if (std::isdigit(c) || (c == '.' && i + 1 < n && std::isdigit(static_cast<unsigned char>(s[i + 1])))) {
      i = scan_number(s, i);
      out.push_back({TokenKind::number, std::string(s.substr(start, i - start)), start});
      continue;
    }
    std::size_t len = 0;
    for (auto op : kThreeCharOps)
      if (s.substr(i, 3) == op) len = 3;
    if (len == 0)
      for (auto op : kTwoCharOps)
        if (s.substr(i, 2) == op) len = 2;
    if (len == 0 && kSingleOps.find(static_cast<char>(c)) != std::string_view::npos) len = 1;
    if (len == 0)
      throw LexError(std::string("unexpected character '") + static_cast<char>(c) + "'", i);
    out.push_back({TokenKind::op, std::string(s.substr(i, len)), start});
    i += len;
  }
  return out;
}

std::vector<std::string> code_tokens(std::string_view source) {
  std::vector<std::string> out;
  for (auto& t : lex_code(source)) out.push_back(std::move(t.text));
  return out;
}

std::vector<std::string> intent_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (word_char(c)) {
      const std::size_t start = i;
      while (i < text.size() && word_char(static_cast<unsigned char>(text[i]))) ++i;
      out.emplace_back(text.substr(start, i - start));
    } else if ((c == '\'' || c == '"') && (i == 0 || !word_char(static_cast<unsigned char>(text[i - 1])))) {
      // A delimited quoted span stays one token, like a string literal in code.
      std::size_t j = i + 1;
      while (j < text.size() && text[j] != static_cast<char>(c) && text[j] != '\n') ++j;
      const bool closed = j < text.size() && text[j] == static_cast<char>(c) && j > i + 1 &&
                          (j + 1 == text.size() || !word_char(static_cast<unsigned char>(text[j + 1])));
      if (closed) {
        out.emplace_back(text.substr(i, j + 1 - i));
        i = j + 1;
      } else {
        out.emplace_back(1, static_cast<char>(c));
        ++i;
      }
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return out;
}

StringBody string_body(std::string_view lit) {
  std::size_t q = 0;
  while (q < lit.size() && lit[q] != '\'' && lit[q] != '"') ++q;
  const char quote = lit[q];
  const bool triple = q + 2 < lit.size() && lit[q + 1] == quote && lit[q + 2] == quote &&
                      lit.size() >= q + 6;
  const std::size_t width = triple ? 3 : 1;
  return {q + width, lit.size() - width};
}

std::string join_code(const std::vector<std::string>& tokens) {
  auto wordy = [](const std::string& t) {
    const unsigned char c = static_cast<unsigned char>(t.front());
    return word_char(c) || c == '\'' || c == '"' ||
           (c == '.' && t.size() > 1 && std::isdigit(static_cast<unsigned char>(t[1])));
  };
  auto spaced_op = [](const std::string& t) {
    static const std::array<std::string_view, 17> ops = {
        "=", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=", "//=", "**=", ":=", "<", ">",
        "->", "|="};
    return std::find(ops.begin(), ops.end(), t) != ops.end();
  };
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t.empty()) continue;
    if (i > 0 && !out.empty()) {
      const std::string& prev = tokens[i - 1];
      const bool space = (wordy(prev) && wordy(t)) || prev == "," || spaced_op(prev) ||
                         spaced_op(t);
      if (space) out.push_back(' ');
    }
    out += t;
  }
  return out;
}

}  // namespace retroseq
