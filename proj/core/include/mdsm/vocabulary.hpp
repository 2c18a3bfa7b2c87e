#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mdsm {

inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kUnkId = 1;

/// Fixed-length token ids; positions at or beyond `valid_length` hold kPadId.
struct TokenSequence {
  std::vector<std::int64_t> ids;
  std::int64_t valid_length = 0;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Lowercases and splits on anything that is not a letter or digit.
std::vector<std::string> split_words(std::string_view text);

class Vocabulary {
 public:
  /// Only the reserved <pad> and <unk> entries.
  Vocabulary();

  /// Sorted, de-duplicated words of `texts` after the reserved ids.
  static Vocabulary build(const std::vector<std::string>& texts);

  /// One token per line; line number is the id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::int64_t id(std::string_view token) const;
  const std::string& token(std::int64_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }

  /// Stable 64-bit FNV-1a digest of the token list.
  std::uint64_t hash() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
};

/// Truncates at `max_length` and pads with kPadId. OOV words map to kUnkId.
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::int64_t max_length);

}  // namespace mdsm
