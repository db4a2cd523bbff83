#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "laip/rng.hpp"

namespace laip::text {

using TokenId = std::size_t;

enum class Tag { DT, JJ, NN, NNS, VBG, VB, IN, CC, PRP, OTHER };

std::string_view tag_name(Tag tag);
std::optional<Tag> parse_tag(std::string_view name);

struct TaggedToken {
  std::string text;
  Tag tag;
  friend bool operator==(const TaggedToken&, const TaggedToken&) = default;
};

// Open-class word -> tag table.
class Lexicon {
 public:
  // Lines are "word<TAB>tag"; blank lines and lines starting with '#' are skipped.
  static Lexicon parse(std::string_view contents, std::string_view source = "<memory>");
  static Lexicon load(const std::filesystem::path& path);
  // The lexicon shipped with the project, compiled in.
  static const Lexicon& builtin();

  std::optional<Tag> lookup(std::string_view word) const;
  std::vector<std::string> words() const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<std::string, Tag> entries_;
};

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kMask = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  // Ordinary words get ids kReserved.. in the given order (duplicates dropped).
  explicit Vocabulary(const std::vector<std::string>& words);
  // Closed-class words, lexicon words and punctuation, sorted.
  static Vocabulary from_lexicon(const Lexicon& lexicon);

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  std::vector<TokenId> encode(const std::vector<std::string>& tokens) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::unordered_map<std::string, TokenId> ids_;
  std::vector<std::string> tokens_;
};

inline constexpr std::size_t kMaxTextTokens = 50;

// Lowercases, splits on whitespace and splits every ASCII punctuation
// character into its own token. Keeps at most max_tokens tokens.
std::vector<std::string> tokenize(std::string_view text, std::size_t max_tokens = kMaxTextTokens);

std::vector<TaggedToken> pos_tag(const std::vector<std::string>& tokens, const Lexicon& lexicon);

struct Phrase {
  std::vector<TokenId> tokens;
  std::vector<std::string> words;
  // [start, end) over the sentence token stream, including a leading determiner.
  std::size_t start = 0;
  std::size_t end = 0;

  std::string text() const;
};

// Left-to-right maximal matches of DT? (JJ|VBG)* (NN|NNS)+; the determiner is
// kept in the span but dropped from the phrase tokens.
std::vector<Phrase> chunk_noun_phrases(const std::vector<TaggedToken>& tagged, const Vocabulary& vocab);

struct MaskedPhrase {
  std::vector<TokenId> tokens;
  std::size_t mask_index = 0;
  TokenId target_id = 0;
};

MaskedPhrase mask_phrase(const Phrase& phrase, Rng& rng);
MaskedPhrase mask_phrase_at(const Phrase& phrase, std::size_t index);

std::vector<Phrase> extract_phrases(std::string_view text, const Lexicon& lexicon, const Vocabulary& vocab);

}  // namespace laip::text
