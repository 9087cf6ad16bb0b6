#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace retroseq {

enum class TokenKind { identifier, number, string, op };

struct Token {
  TokenKind kind;
  std::string text;
  std::size_t offset = 0;  // byte offset into the source
};

class LexError : public std::runtime_error {
 public:
  LexError(const std::string& what, std::size_t position);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

/// Python-flavoured code lexer. Whitespace, comments and line continuations
/// are skipped; each string literal (prefix and quotes included) is one token.
std::vector<Token> lex_code(std::string_view source);

/// Token texts only.
std::vector<std::string> code_tokens(std::string_view source);

/// Intent tokenizer: runs of word characters, quoted spans whose opening quote
/// follows a non-word character, and every other visible character alone.
std::vector<std::string> intent_tokens(std::string_view text);

bool is_keyword(std::string_view word);

/// Renders code tokens back to text with conventional spacing.
std::string join_code(const std::vector<std::string>& tokens);

/// For a string token: the [begin, end) byte range of its body inside `text`.
struct StringBody {
  std::size_t begin;
  std::size_t end;
};
StringBody string_body(std::string_view literal);

}  // namespace retroseq
