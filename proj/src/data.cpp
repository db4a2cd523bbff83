#include "laip/data.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <map>

#include <json.hpp>

#include "laip/errors.hpp"

namespace laip::data {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'A', 'I', 'P', 'R', 'E', 'C', '1'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::array<double, 3> kBackground{0.30, 0.32, 0.38};

const std::vector<std::string> kColors{"red", "blue", "green", "yellow", "white", "black", "purple", "orange"};

const std::map<std::string, std::array<double, 3>>& palette() {
  static const std::map<std::string, std::array<double, 3>> p{
      {"red", {0.90, 0.10, 0.10}},    {"blue", {0.10, 0.20, 0.90}},   {"green", {0.10, 0.70, 0.20}},
      {"yellow", {0.95, 0.90, 0.10}}, {"white", {0.95, 0.95, 0.95}},  {"black", {0.05, 0.05, 0.05}},
      {"purple", {0.50, 0.10, 0.60}}, {"orange", {1.00, 0.55, 0.00}}, {"brown", {0.45, 0.25, 0.10}},
      {"blond", {0.90, 0.80, 0.45}},  {"gray", {0.60, 0.60, 0.60}},
  };
  return p;
}

std::string render_caption(const PersonRecord& r, Rng& rng) {
  static const std::vector<std::string> kPeople{"person", "man", "woman", "pedestrian"};
  const auto& person = kPeople[rng.below(kPeople.size())];
  std::string pronoun = person == "man" ? "he" : person == "woman" ? "she" : (rng.below(2) ? "he" : "she");
  const auto hc = r.attribute(kHairColor), tc = r.attribute(kTopColor), tt = r.attribute(kTopType);
  const auto bc = r.attribute(kBottomColor), bt = r.attribute(kBottomType);
  switch (rng.below(4)) {
    case 0:
      return "the " + person + " is wearing a " + tc + " " + tt + " and " + bc + " " + bt + ". " + pronoun +
             " has " + hc + " hair.";
    case 1:
      return "a " + person + " with " + hc + " hair is wearing a " + tc + " " + tt + " and " + bc + " " + bt + ".";
    case 2:
      return "this " + person + " wears a " + tc + " " + tt + " with " + bc + " " + bt + " and has " + hc +
             " hair.";
    default:
      return "a " + person + " in a " + tc + " " + tt + " and " + bc + " " + bt + ", with " + hc + " hair.";
  }
}

Tensor render_image(const PersonRecord& r, Rng& rng) {
  Tensor img({kGridRows, kGridCols, kPatchPixels});
  for (std::size_t pr = 0; pr < kGridRows; ++pr) {
    for (std::size_t pc = 0; pc < kGridCols; ++pc) {
      std::array<double, 3> base = kBackground;
      std::string garment = "solid";
      if (slot_region(kHairColor).contains(pr, pc)) {
        base = color_rgb(r.attribute(kHairColor));
      } else if (slot_region(kTopColor).contains(pr, pc)) {
        base = color_rgb(r.attribute(kTopColor));
        garment = r.attribute(kTopType);
      } else if (slot_region(kBottomColor).contains(pr, pc)) {
        base = color_rgb(r.attribute(kBottomColor));
        garment = r.attribute(kBottomType);
      }
      for (std::size_t y = 0; y < kPatchSide; ++y)
        for (std::size_t x = 0; x < kPatchSide; ++x) {
          const double k = pattern_intensity(garment, y, x);
          for (std::size_t ch = 0; ch < kChannels; ++ch) {
            const double v = std::clamp(base[ch] * k + kPixelNoise * rng.normal(), 0.0, 1.0);
            img[(pr * kGridCols + pc) * kPatchPixels + (y * kPatchSide + x) * kChannels + ch] = v;
          }
        }
    }
  }
  return img;
}

// Little-endian byte writer/reader.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > buf_.size()) throw FormatError(std::string("records.bin truncated while reading ") + what, pos_);
  }
  template <typename T>
  T uint(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace

const std::vector<AttributeSlot>& attribute_schema() {
  static const std::vector<AttributeSlot> schema{
      {"hair_color", {"black", "brown", "blond", "gray"}},
      {"top_color", kColors},
      {"top_type", {"shirt", "jacket", "sweater", "coat"}},
      {"bottom_color", kColors},
      {"bottom_type", {"pants", "shorts", "skirt", "jeans"}},
  };
  return schema;
}

std::array<double, 3> color_rgb(const std::string& name) {
  auto it = palette().find(name);
  if (it == palette().end()) throw ConfigError("unknown color '" + name + "'");
  return it->second;
}

Region slot_region(Slot slot) {
  switch (slot) {
    case kHairColor:
      return {0, 2, 2, 6};
    case kTopColor:
    case kTopType:
      return {2, 5, 1, 7};
    case kBottomColor:
    case kBottomType:
      return {5, 8, 2, 6};
    default:
      throw ContractError("slot_region: not an attribute slot");
  }
}

double pattern_intensity(const std::string& garment, std::size_t y, std::size_t x) {
  constexpr double kDim = 0.55;
  if (garment == "jacket" || garment == "jeans") return x % 2 ? kDim : 1.0;
  if (garment == "sweater" || garment == "skirt") return y % 2 ? kDim : 1.0;
  if (garment == "coat" || garment == "shorts") return (x + y) % 2 ? kDim : 1.0;
  return 1.0;
}

Tensor PersonRecord::patches() const { return image.reshaped({kGridRows * kGridCols, kPatchPixels}); }

Dataset generate_dataset(std::size_t n_identities, std::size_t images_per_identity, Rng& rng) {
  if (n_identities < 2) throw ConfigError("generate_dataset: need at least 2 identities");
  if (images_per_identity < 2)
    throw ConfigError("generate_dataset: need at least 2 images per identity to populate both splits");
  const auto& schema = attribute_schema();
  std::uint64_t combos = 1;
  for (const auto& s : schema) combos *= s.values.size();
  if (n_identities > combos)
    throw ConfigError("generate_dataset: " + std::to_string(n_identities) + " identities exceed the " +
                      std::to_string(combos) + " distinct attribute tuples");

  // Partial Fisher-Yates over tuple codes gives distinct tuples.
  std::vector<std::uint64_t> codes(combos);
  for (std::uint64_t i = 0; i < combos; ++i) codes[i] = i;
  for (std::size_t i = 0; i < n_identities; ++i) std::swap(codes[i], codes[i + rng.below(combos - i)]);

  Dataset ds;
  ds.n_identities = n_identities;
  ds.images_per_identity = images_per_identity;
  for (std::size_t id = 0; id < n_identities; ++id) {
    std::vector<std::uint32_t> attrs(schema.size());
    std::uint64_t code = codes[id];
    for (std::size_t s = 0; s < schema.size(); ++s) {
      attrs[s] = static_cast<std::uint32_t>(code % schema[s].values.size());
      code /= schema[s].values.size();
    }
    for (std::size_t k = 0; k < images_per_identity; ++k) {
      PersonRecord r;
      r.identity = id;
      r.attributes = attrs;
      r.image = render_image(r, rng);
      r.caption = render_caption(r, rng);
      (k + 1 == images_per_identity ? ds.test : ds.train).push_back(ds.records.size());
      ds.records.push_back(std::move(r));
    }
  }
  return ds;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint<std::uint32_t>(kFormatVersion);
  w.uint<std::uint64_t>(ds.records.size());
  for (const auto& r : ds.records) {
    w.uint<std::uint64_t>(r.identity);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(r.attributes.size()));
    for (auto a : r.attributes) w.uint<std::uint32_t>(a);
    w.uint<std::uint64_t>(r.image.size());
    for (double v : r.image.data()) w.f64(v);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(r.caption.size()));
    w.bytes(r.caption.data(), r.caption.size());
  }
  std::ofstream bin(dir / "records.bin", std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(w.buffer().data()), static_cast<std::streamsize>(w.buffer().size()));
  if (!bin) throw FormatError("failed writing " + (dir / "records.bin").string());

  json slots = json::array();
  for (const auto& s : attribute_schema()) slots.push_back({{"name", s.name}, {"values", s.values}});
  json manifest{{"format", "laip-dataset"},
                {"version", kFormatVersion},
                {"seed", ds.seed},
                {"counts",
                 {{"records", ds.records.size()},
                  {"identities", ds.n_identities},
                  {"images_per_identity", ds.images_per_identity}}},
                {"grid", {{"rows", kGridRows}, {"cols", kGridCols}, {"patch_pixels", kPatchPixels}}},
                {"attribute_schema", slots},
                {"splits", {{"train", ds.train}, {"test", ds.test}}},
                {"records_file", "records.bin"}};
  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  man << manifest.dump(2) << '\n';
  if (!man) throw FormatError("failed writing " + (dir / "manifest.json").string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.json");
  if (!man) throw FormatError("missing dataset manifest in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(man);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("dataset manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("format", "") != "laip-dataset") throw FormatError("not a laip dataset manifest");
  if (manifest.value("version", 0u) != kFormatVersion)
    throw FormatError("unsupported dataset version " + manifest.value("version", json()).dump());

  std::ifstream bin(dir / manifest.value("records_file", "records.bin"), std::ios::binary);
  if (!bin) throw FormatError("missing records.bin in " + dir.string());
  Reader r(std::vector<unsigned char>((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>()));

  if (r.str(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) throw FormatError("bad magic bytes", 0);
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kFormatVersion) throw FormatError("records.bin version " + std::to_string(version), 8);
  const auto count = r.uint<std::uint64_t>("record count");
  const auto grid = manifest.at("grid");
  const std::size_t expected_values =
      grid.at("rows").get<std::size_t>() * grid.at("cols").get<std::size_t>() * grid.at("patch_pixels").get<std::size_t>();

  Dataset ds;
  ds.seed = manifest.value("seed", std::uint64_t{0});
  ds.n_identities = manifest.at("counts").at("identities").get<std::uint64_t>();
  ds.images_per_identity = manifest.at("counts").at("images_per_identity").get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    PersonRecord rec;
    rec.identity = r.uint<std::uint64_t>("identity");
    const auto n_attr = r.uint<std::uint32_t>("attribute count");
    if (n_attr != attribute_schema().size()) throw FormatError("attribute count mismatch", r.pos());
    for (std::uint32_t a = 0; a < n_attr; ++a) {
      const auto v = r.uint<std::uint32_t>("attribute");
      if (v >= attribute_schema()[a].values.size()) throw FormatError("attribute value out of range", r.pos());
      rec.attributes.push_back(v);
    }
    const auto n_values = r.uint<std::uint64_t>("image size");
    if (n_values != expected_values) throw FormatError("image size does not match the grid", r.pos());
    std::vector<double> px(n_values);
    for (auto& v : px) v = r.f64("image");
    rec.image = Tensor({kGridRows, kGridCols, kPatchPixels}, std::move(px));
    const auto len = r.uint<std::uint32_t>("caption length");
    rec.caption = r.str(len, "caption");
    ds.records.push_back(std::move(rec));
  }
  if (!r.done()) throw FormatError("trailing bytes after last record", r.pos());
  if (manifest.at("counts").at("records").get<std::uint64_t>() != count)
    throw FormatError("manifest record count disagrees with records.bin");
  ds.train = manifest.at("splits").at("train").get<std::vector<std::uint64_t>>();
  ds.test = manifest.at("splits").at("test").get<std::vector<std::uint64_t>>();
  for (auto idx : ds.train)
    if (idx >= count) throw FormatError("train split index out of range");
  for (auto idx : ds.test)
    if (idx >= count) throw FormatError("test split index out of range");
  return ds;
}

std::vector<Batch> make_batches(const Dataset& ds, const std::vector<std::uint64_t>& indices, std::size_t batch_size,
                                Rng& rng, const text::Lexicon& lexicon, const text::Vocabulary& vocab) {
  std::map<std::uint64_t, std::vector<std::uint64_t>> by_identity;
  for (auto idx : indices) by_identity[ds.records.at(idx).identity].push_back(idx);
  if (batch_size == 0 || batch_size > by_identity.size())
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds the " +
                      std::to_string(by_identity.size()) + " identities available");

  std::vector<std::vector<std::uint64_t>> pools;
  for (auto& [id, recs] : by_identity) {
    rng.shuffle(recs);
    pools.push_back(recs);
  }

  std::vector<Batch> batches;
  std::size_t remaining = indices.size();
  while (remaining > 0) {
    // Draw from the identities with the most records left, random among ties,
    // so that every batch stays identity-disjoint and as full as possible.
    std::vector<std::size_t> order(pools.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pools[a].size() > pools[b].size(); });
    Batch b;
    for (std::size_t i = 0; i < order.size() && b.records.size() < batch_size; ++i) {
      auto& pool = pools[order[i]];
      if (pool.empty()) break;
      b.records.push_back(pool.back());
      pool.pop_back();
    }
    remaining -= b.records.size();
    for (auto idx : b.records) {
      const auto& rec = ds.records[idx];
      b.identities.push_back(rec.identity);
      b.images.push_back(rec.patches());
      const auto tokens = text::tokenize(rec.caption);
      b.texts.push_back(vocab.encode(tokens));
      auto phrases = text::chunk_noun_phrases(text::pos_tag(tokens, lexicon), vocab);
      std::vector<text::MaskedPhrase> masks;
      for (const auto& p : phrases) masks.push_back(text::mask_phrase(p, rng));
      b.phrases.push_back(std::move(phrases));
      b.masks.push_back(std::move(masks));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace laip::data
