#include "retroseq/vocab.hpp"

#include <fstream>
#include <stdexcept>

namespace retroseq {

namespace {

const char* const kSpecials[] = {"<pad>", "<unk>", "<s>", "</s>"};

}  // namespace

Vocab::Vocab() {
  for (const char* s : kSpecials) add(s);
}

std::uint32_t Vocab::add(const std::string& token) {
  if (token.empty() || token.find('\n') != std::string::npos)
    throw std::invalid_argument("vocab tokens must be non-empty single-line strings");
  auto [it, inserted] = index_.emplace(token, static_cast<std::uint32_t>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::uint32_t Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::uint32_t id) const {
  if (id >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  return tokens_[id];
}

std::vector<std::uint32_t> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::uint32_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(const std::vector<std::uint32_t>& ids) const {
  std::vector<std::string> out;
  for (auto id : ids)
    if (id > kEos) out.push_back(token(id));
  return out;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i < 4) {
      if (tokens[i] != kSpecials[i])
        throw std::invalid_argument("vocab must start with <pad> <unk> <s> </s>");
      continue;
    }
    if (v.contains(tokens[i])) throw std::invalid_argument("duplicate vocab token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocab " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return from_tokens(tokens);
}

}  // namespace retroseq
