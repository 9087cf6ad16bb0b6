#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace retroseq {

/// Names that are never renamed: keywords, builtins and library roots.
class Allowlist {
 public:
  /// Keywords, builtins and common module roots.
  static Allowlist defaults();
  /// Defaults plus one name per line from `path` (blank lines and '#' lines skipped).
  static Allowlist from_file(const std::string& path);

  void add(std::string name) { names_.insert(std::move(name)); }
  bool contains(std::string_view name) const { return names_.count(std::string(name)) != 0; }
  std::size_t size() const { return names_.size(); }

 private:
  std::unordered_set<std::string> names_;
};

/// Placeholder -> original surface form, in assignment order. For string
/// placeholders the original is the literal's body without quotes.
class SubstitutionMap {
 public:
  void add(std::string placeholder, std::string original);
  std::optional<std::string> original(std::string_view placeholder) const;
  std::optional<std::string> placeholder_for(std::string_view original) const;
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  /// Every placeholder maps to itself.
  bool is_identity() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

class UnknownPlaceholder : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// True for var<N>, str<N> and lst<N>.
bool is_placeholder(std::string_view word);

struct NormalizedSnippet {
  std::string code;
  SubstitutionMap map;
};

/// Renames free identifiers and string bodies to var0, var1, ... sharing one
/// counter in order of first appearance. Attribute names, keyword-argument
/// names, comprehension targets, lambda parameters and allowlisted names stay.
/// Whitespace and everything else is preserved byte for byte.
NormalizedSnippet normalize_snippet(std::string_view code,
                                    const Allowlist& allow = Allowlist::defaults());

struct NormalizedPair {
  std::string intent;
  std::string code;
  SubstitutionMap map;
  /// Delimited intent entities with no matching identifier or string in the code.
  std::vector<std::string> unmatched;
};

/// Replaces the entities quoted or backticked in the intent, and their
/// occurrences in the code. Strings matched in the code become strN;
/// identifiers become lstN when assigned a bracketed literal, varN otherwise.
NormalizedPair normalize_pair(std::string_view intent, std::string_view code);

/// Intent-only form for generation, where no code is available: backticked
/// identifiers become varN and every other entity strN.
NormalizedPair normalize_intent(std::string_view intent);

/// Restores original identifiers and string bodies.
std::string denormalize(std::string_view code, const SubstitutionMap& map);
std::vector<std::string> denormalize_tokens(const std::vector<std::string>& tokens,
                                            const SubstitutionMap& map);

}  // namespace retroseq
