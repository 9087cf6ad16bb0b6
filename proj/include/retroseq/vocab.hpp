#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace retroseq {

inline constexpr std::uint32_t kPad = 0;
inline constexpr std::uint32_t kUnk = 1;
inline constexpr std::uint32_t kBos = 2;
inline constexpr std::uint32_t kEos = 3;

/// One token table shared by intents and code. Append-only: ids never move,
/// so files written against an older table stay valid after growth.
class Vocab {
 public:
  Vocab();

  std::uint32_t add(const std::string& token);
  /// kUnk when absent.
  std::uint32_t id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(std::uint32_t id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::uint32_t> encode(const std::vector<std::string>& tokens) const;
  /// Specials are dropped.
  std::vector<std::string> decode(const std::vector<std::uint32_t>& ids) const;

  static Vocab from_tokens(const std::vector<std::string>& tokens);
  /// One token per line, in id order; the four specials come first.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

}  // namespace retroseq
