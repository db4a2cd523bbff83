#include <doctest.h>

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "laip/errors.hpp"
#include "laip/textproc.hpp"

using namespace laip;
using namespace laip::text;

namespace {

std::vector<Tag> tags_of(const std::vector<TaggedToken>& tagged) {
  std::vector<Tag> out;
  for (const auto& t : tagged) out.push_back(t.tag);
  return out;
}

std::vector<std::string> phrase_texts(std::string_view sentence) {
  const auto& lex = Lexicon::builtin();
  const auto vocab = Vocabulary::from_lexicon(lex);
  std::vector<std::string> out;
  for (const auto& p : extract_phrases(sentence, lex, vocab)) out.push_back(p.text());
  return out;
}

}  // namespace

TEST_CASE("tokenize examples") {
  CHECK(tokenize("Black hair.") == std::vector<std::string>{"black", "hair", "."});
  CHECK(tokenize("").empty());
  std::string sixty;
  for (int i = 0; i < 60; ++i) sixty += "w" + std::to_string(i) + " ";
  const auto t = tokenize(sixty);
  REQUIRE(t.size() == 50);
  CHECK(t.front() == "w0");
  CHECK(t.back() == "w49");
}

TEST_CASE("tokenize splits punctuation and is idempotent on its own output") {
  CHECK(tokenize("t-shirt,jeans!") == std::vector<std::string>{"t", "-", "shirt", ",", "jeans", "!"});
  for (const char* s : {"A man, in a RED jacket.", "she's  walking\tfast", "blue knee-length dress"}) {
    const auto once = tokenize(s);
    std::string joined;
    for (const auto& w : once) joined += w + " ";
    CHECK(tokenize(joined) == once);
  }
}

TEST_CASE("pos_tag examples") {
  const auto lex = Lexicon::parse("black\tJJ\nhair\tNN\n");
  CHECK(tags_of(pos_tag({"black", "hair"}, lex)) == std::vector<Tag>{Tag::JJ, Tag::NN});
  CHECK(tags_of(pos_tag({"the", "man"}, lex)) == std::vector<Tag>{Tag::DT, Tag::NN});
  CHECK(tags_of(pos_tag({"zxqw"}, lex)) == std::vector<Tag>{Tag::NN});
  CHECK(tags_of(pos_tag({"jogging"}, lex)) == std::vector<Tag>{Tag::VBG});
  CHECK(tags_of(pos_tag({"is", "and", "with", "she"}, lex)) ==
        std::vector<Tag>{Tag::VB, Tag::CC, Tag::IN, Tag::PRP});
}

TEST_CASE("lexicon parsing") {
  const auto lex = Lexicon::parse("# comment\n\nred\tJJ\nshirts\tNNS\n");
  CHECK(lex.size() == 2);
  CHECK(lex.lookup("shirts") == Tag::NNS);
  CHECK_FALSE(lex.lookup("blue").has_value());
  CHECK_THROWS_AS(Lexicon::parse("red JJ\n"), FormatError);
  CHECK_THROWS_AS(Lexicon::parse("red\tXX\n"), FormatError);
}

TEST_CASE("vocabulary reserves the special ids") {
  const auto vocab = Vocabulary::from_lexicon(Lexicon::builtin());
  CHECK(vocab.token(Vocabulary::kPad) == "[PAD]");
  CHECK(vocab.token(Vocabulary::kMask) == "[MASK]");
  CHECK(vocab.token(Vocabulary::kCls) == "[CLS]");
  CHECK(vocab.token(Vocabulary::kUnk) == "[UNK]");
  std::set<std::string> seen;
  for (TokenId id = 0; id < vocab.size(); ++id) {
    CHECK(vocab.id(vocab.token(id)) == id);
    CHECK(seen.insert(vocab.token(id)).second);
  }
  for (const auto& w : tokenize("The man wears a red shirt and black shoes."))
    CHECK(vocab.id(w) >= Vocabulary::kReserved);
  CHECK(vocab.id("zxqw") == Vocabulary::kUnk);
}

TEST_CASE("chunker examples") {
  CHECK(phrase_texts("a short sleeve dress shirt") == std::vector<std::string>{"short sleeve dress shirt"});
  CHECK(phrase_texts("blue knee length dress") == std::vector<std::string>{"blue knee length dress"});
  CHECK(phrase_texts("he walks").empty());
}

TEST_CASE("chunker keeps the determiner in the span only") {
  const auto& lex = Lexicon::builtin();
  const auto vocab = Vocabulary::from_lexicon(lex);
  const auto phrases = extract_phrases("a short sleeve dress shirt", lex, vocab);
  REQUIRE(phrases.size() == 1);
  CHECK(phrases[0].start == 0);
  CHECK(phrases[0].end == 5);
  CHECK(phrases[0].tokens.size() == 4);
}

TEST_CASE("chunker fixture corpus") {
  std::ifstream in(std::string(LAIP_FIXTURE_DIR) + "/chunker_fixture.json");
  REQUIRE(in);
  const auto fixture = nlohmann::json::parse(in);
  REQUIRE(fixture.size() == 20);
  const auto& lex = Lexicon::builtin();
  const auto vocab = Vocabulary::from_lexicon(lex);
  for (const auto& entry : fixture) {
    const std::string sentence = entry["text"];
    CAPTURE(sentence);
    CHECK(phrase_texts(sentence) == entry["expected_phrases"].get<std::vector<std::string>>());

    const auto tokens = tokenize(sentence);
    const auto tagged = pos_tag(tokens, lex);
    std::size_t prev_end = 0;
    for (const auto& p : chunk_noun_phrases(tagged, vocab)) {
      CHECK(!p.tokens.empty());
      CHECK(p.start >= prev_end);
      CHECK(p.end <= tokens.size());
      const Tag last = tagged[p.end - 1].tag;
      CHECK((last == Tag::NN || last == Tag::NNS));
      prev_end = p.end;
    }
  }
}

TEST_CASE("mask_phrase examples") {
  const auto& lex = Lexicon::builtin();
  const auto vocab = Vocabulary::from_lexicon(lex);
  const auto single = extract_phrases("hair", lex, vocab).at(0);
  Rng rng(0);
  for (int i = 0; i < 20; ++i) {
    const auto m = mask_phrase(single, rng);
    CHECK(m.mask_index == 0);
    CHECK(m.tokens == std::vector<TokenId>{Vocabulary::kMask});
    CHECK(m.target_id == vocab.id("hair"));
  }

  const auto four = extract_phrases("blue knee length dress", lex, vocab).at(0);
  std::vector<int> counts(4);
  Rng draws(17);
  for (int i = 0; i < 10000; ++i) {
    const auto m = mask_phrase(four, draws);
    ++counts[m.mask_index];
    CHECK(std::count(m.tokens.begin(), m.tokens.end(), Vocabulary::kMask) == 1);
    CHECK(m.target_id == four.tokens[m.mask_index]);
    CHECK(m.target_id != Vocabulary::kMask);
  }
  for (int c : counts) CHECK(std::abs(c / 10000.0 - 0.25) <= 0.02);

  Rng a(5), b(5);
  for (int i = 0; i < 50; ++i) CHECK(mask_phrase(four, a).mask_index == mask_phrase(four, b).mask_index);
  CHECK_THROWS_AS((void)mask_phrase_at(four, 4), std::out_of_range);
}
