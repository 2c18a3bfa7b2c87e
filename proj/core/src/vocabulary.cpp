#include "mdsm/vocabulary.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "mdsm/errors.hpp"

namespace mdsm {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto uch = static_cast<unsigned char>(ch);
    if (std::isalnum(uch)) {
      current.push_back(static_cast<char>(std::tolower(uch)));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
}

void Vocabulary::add(std::string token) {
  if (index_.contains(token)) return;
  index_.emplace(token, static_cast<std::int64_t>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& text : texts) {
    for (auto& w : split_words(text)) words.insert(std::move(w));
  }
  Vocabulary vocab;
  for (const auto& w : words) vocab.add(w);
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read vocabulary " + path.string());
  Vocabulary vocab;
  vocab.tokens_.clear();
  vocab.index_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (vocab.index_.contains(line)) throw ConfigError("duplicate vocabulary entry '" + line + "'");
    vocab.add(line);
  }
  if (vocab.size() < 2 || vocab.tokens_[0] != "<pad>" || vocab.tokens_[1] != "<unk>") {
    throw ConfigError("vocabulary must start with <pad> and <unk>: " + path.string());
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

std::int64_t Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    for (char c : t) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    h ^= '\n';
    h *= 0x100000001b3ULL;
  }
  return h;
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::int64_t max_length) {
  if (max_length < 1) throw ConfigError("max token length must be at least 1");
  TokenSequence seq;
  seq.ids.assign(static_cast<std::size_t>(max_length), kPadId);
  const auto words = split_words(text);
  const auto n = std::min<std::int64_t>(max_length, static_cast<std::int64_t>(words.size()));
  for (std::int64_t i = 0; i < n; ++i) seq.ids[static_cast<std::size_t>(i)] = vocab.id(words[static_cast<std::size_t>(i)]);
  seq.valid_length = n;
  return seq;
}

}  // namespace mdsm
