#include "laip/textproc.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "laip/default_lexicon.hpp"
#include "laip/errors.hpp"

namespace laip::text {

namespace {

constexpr std::array<std::pair<Tag, std::string_view>, 10> kTagNames{{
    {Tag::DT, "DT"},
    {Tag::JJ, "JJ"},
    {Tag::NN, "NN"},
    {Tag::NNS, "NNS"},
    {Tag::VBG, "VBG"},
    {Tag::VB, "VB"},
    {Tag::IN, "IN"},
    {Tag::CC, "CC"},
    {Tag::PRP, "PRP"},
    {Tag::OTHER, "OTHER"},
}};

const std::unordered_map<std::string_view, Tag>& closed_class() {
  static const std::unordered_map<std::string_view, Tag> table{
      {"the", Tag::DT},   {"a", Tag::DT},     {"an", Tag::DT},    {"this", Tag::DT},
      {"that", Tag::DT},  {"his", Tag::DT},   {"her", Tag::DT},   {"their", Tag::DT},
      {"is", Tag::VB},    {"are", Tag::VB},   {"was", Tag::VB},   {"were", Tag::VB},
      {"and", Tag::CC},   {"or", Tag::CC},    {"but", Tag::CC},   {"in", Tag::IN},
      {"on", Tag::IN},    {"with", Tag::IN},  {"of", Tag::IN},    {"at", Tag::IN},
      {"over", Tag::IN},  {"under", Tag::IN}, {"he", Tag::PRP},   {"she", Tag::PRP},
      {"it", Tag::PRP},   {"they", Tag::PRP},
  };
  return table;
}

constexpr std::array<std::string_view, 6> kPunctuation{".", ",", "-", "'", "!", "?"};

bool is_punct(unsigned char c) { return c < 128 && std::ispunct(c); }

}  // namespace

std::string_view tag_name(Tag tag) {
  for (const auto& [t, name] : kTagNames)
    if (t == tag) return name;
  return "OTHER";
}

std::optional<Tag> parse_tag(std::string_view name) {
  for (const auto& [t, n] : kTagNames)
    if (n == name) return t;
  return std::nullopt;
}

Lexicon Lexicon::parse(std::string_view contents, std::string_view source) {
  Lexicon lex;
  std::istringstream in{std::string(contents)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    const auto where = std::string(source) + ":" + std::to_string(lineno);
    if (tab == std::string::npos) throw FormatError("lexicon " + where + ": expected word<TAB>tag");
    std::string word = line.substr(0, tab);
    const auto tag = parse_tag(line.substr(tab + 1));
    if (word.empty() || !tag) throw FormatError("lexicon " + where + ": bad entry '" + line + "'");
    std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
    lex.entries_[word] = *tag;
  }
  return lex;
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open lexicon " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

const Lexicon& Lexicon::builtin() {
  static const Lexicon lex = parse(detail::kDefaultLexicon, "builtin lexicon");
  return lex;
}

std::optional<Tag> Lexicon::lookup(std::string_view word) const {
  auto it = entries_.find(std::string(word));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> Lexicon::words() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [w, t] : entries_) out.push_back(w);
  std::sort(out.begin(), out.end());
  return out;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  tokens_ = {"[PAD]", "[MASK]", "[CLS]", "[UNK]"};
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = i;
  for (const auto& w : words) {
    if (ids_.contains(w)) continue;
    ids_[w] = tokens_.size();
    tokens_.push_back(w);
  }
}

Vocabulary Vocabulary::from_lexicon(const Lexicon& lexicon) {
  std::set<std::string> all;
  for (const auto& [w, t] : closed_class()) all.emplace(w);
  for (auto& w : lexicon.words()) all.insert(std::move(w));
  for (auto p : kPunctuation) all.emplace(p);
  return Vocabulary(std::vector<std::string>(all.begin(), all.end()));
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) return tokens_[kUnk];
  return tokens_[id];
}

std::vector<TokenId> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> tokenize(std::string_view text, std::size_t max_tokens) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (out.size() >= max_tokens) break;
    if (std::isspace(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(c < 128 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
  }
  flush();
  if (out.size() > max_tokens) out.resize(max_tokens);
  return out;
}

std::vector<TaggedToken> pos_tag(const std::vector<std::string>& tokens, const Lexicon& lexicon) {
  std::vector<TaggedToken> out;
  out.reserve(tokens.size());
  const auto& closed = closed_class();
  for (const auto& t : tokens) {
    Tag tag = Tag::NN;
    if (auto it = closed.find(t); it != closed.end()) {
      tag = it->second;
    } else if (auto lex = lexicon.lookup(t)) {
      tag = *lex;
    } else if (t.size() == 1 && is_punct(static_cast<unsigned char>(t[0]))) {
      tag = Tag::OTHER;
    } else if (t.size() > 3 && t.ends_with("ing")) {
      tag = Tag::VBG;
    }
    out.push_back({t, tag});
  }
  return out;
}

std::string Phrase::text() const {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s.push_back(' ');
    s += w;
  }
  return s;
}

std::vector<Phrase> chunk_noun_phrases(const std::vector<TaggedToken>& tagged, const Vocabulary& vocab) {
  std::vector<Phrase> out;
  const std::size_t n = tagged.size();
  auto is = [&](std::size_t i, std::initializer_list<Tag> tags) {
    return i < n && std::find(tags.begin(), tags.end(), tagged[i].tag) != tags.end();
  };
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    if (is(j, {Tag::DT})) ++j;
    const std::size_t body = j;
    while (is(j, {Tag::JJ, Tag::VBG})) ++j;
    std::size_t k = j;
    while (is(k, {Tag::NN, Tag::NNS})) ++k;
    if (k == j) {
      ++i;
      continue;
    }
    Phrase p;
    p.start = i;
    p.end = k;
    for (std::size_t t = body; t < k; ++t) {
      p.words.push_back(tagged[t].text);
      p.tokens.push_back(vocab.id(tagged[t].text));
    }
    out.push_back(std::move(p));
    i = k;
  }
  return out;
}

MaskedPhrase mask_phrase_at(const Phrase& phrase, std::size_t index) {
  if (phrase.tokens.empty()) throw ContractError("mask_phrase: empty phrase");
  if (index >= phrase.tokens.size()) throw std::out_of_range("mask_phrase: index outside phrase");
  MaskedPhrase m;
  m.tokens = phrase.tokens;
  m.mask_index = index;
  m.target_id = phrase.tokens[index];
  m.tokens[index] = Vocabulary::kMask;
  return m;
}

MaskedPhrase mask_phrase(const Phrase& phrase, Rng& rng) {
  if (phrase.tokens.empty()) throw ContractError("mask_phrase: empty phrase");
  return mask_phrase_at(phrase, static_cast<std::size_t>(rng.below(phrase.tokens.size())));
}

std::vector<Phrase> extract_phrases(std::string_view text, const Lexicon& lexicon, const Vocabulary& vocab) {
  return chunk_noun_phrases(pos_tag(tokenize(text), lexicon), vocab);
}

}  // namespace laip::text
