#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "laip/data.hpp"
#include "laip/errors.hpp"

using namespace laip;
using namespace laip::data;

namespace {

double cosine(const Tensor& a, const Tensor& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

Dataset small_corpus(std::uint64_t seed = 0) {
  Rng rng(seed);
  return generate_dataset(8, 4, rng);
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("generate_dataset shape and splits") {
  const auto ds = small_corpus();
  CHECK(ds.records.size() == 32);
  std::set<std::vector<std::uint32_t>> tuples;
  for (const auto& r : ds.records) {
    tuples.insert(r.attributes);
    CHECK(r.image.shape() == Shape{kGridRows, kGridCols, kPatchPixels});
    CHECK(r.patches().shape() == Shape{64, kPatchPixels});
    for (double v : r.image.data()) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK(tuples.size() == 8);
  for (const auto& a : ds.records)
    for (const auto& b : ds.records) CHECK((a.identity == b.identity) == (a.attributes == b.attributes));

  CHECK(ds.train.size() == 24);
  CHECK(ds.test.size() == 8);
  std::set<std::uint64_t> test_ids;
  for (auto i : ds.test) test_ids.insert(ds.records[i].identity);
  CHECK(test_ids.size() == 8);
  std::vector<std::uint64_t> all(ds.train);
  all.insert(all.end(), ds.test.begin(), ds.test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);

  CHECK(small_corpus(3) == small_corpus(3));
  CHECK_FALSE(small_corpus(3) == small_corpus(4));
}

TEST_CASE("generate_dataset rejects degenerate sizes") {
  Rng rng(0);
  CHECK_THROWS_AS(generate_dataset(1, 4, rng), ConfigError);
  CHECK_THROWS_AS(generate_dataset(4, 1, rng), ConfigError);
  CHECK_THROWS_AS(generate_dataset(1'000'000, 2, rng), ConfigError);
}

TEST_CASE("images of one identity differ only by pixel noise") {
  const auto ds = small_corpus();
  double same_min = 1.0, other_max = 0.0;
  for (const auto& a : ds.records)
    for (const auto& b : ds.records) {
      if (&a == &b) continue;
      const double c = cosine(a.image, b.image);
      if (a.identity == b.identity)
        same_min = std::min(same_min, c);
      else
        other_max = std::max(other_max, c);
    }
  CHECK(same_min > 0.9);
  CHECK(same_min > other_max);
}

TEST_CASE("rendered regions carry the attribute colors and patterns") {
  const auto ds = small_corpus();
  const std::array<double, 3> background{0.30, 0.32, 0.38};
  for (const auto& r : ds.records) {
    for (std::size_t pr = 0; pr < kGridRows; ++pr)
      for (std::size_t pc = 0; pc < kGridCols; ++pc) {
        std::array<double, 3> base = background;
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
          for (std::size_t x = 0; x < kPatchSide; ++x)
            for (std::size_t ch = 0; ch < kChannels; ++ch) {
              const double clean = std::clamp(base[ch] * pattern_intensity(garment, y, x), 0.0, 1.0);
              const double v = r.image[(pr * kGridCols + pc) * kPatchPixels + (y * kPatchSide + x) * kChannels + ch];
              // Six sigma of the pixel noise.
              if (std::abs(v - clean) > 6 * kPixelNoise) FAIL_CHECK("pixel off its clean value");
            }
      }
  }
}

TEST_CASE("pattern intensity") {
  CHECK(pattern_intensity("shirt", 1, 3) == 1.0);
  CHECK(pattern_intensity("jacket", 0, 1) == 0.55);
  CHECK(pattern_intensity("jacket", 1, 0) == 1.0);
  CHECK(pattern_intensity("skirt", 1, 0) == 0.55);
  CHECK(pattern_intensity("shorts", 1, 1) == 1.0);
  CHECK(pattern_intensity("coat", 0, 1) == 0.55);
  CHECK_THROWS_AS(color_rgb("teal"), ConfigError);
}

TEST_CASE("captions name every attribute and chunk into phrases") {
  const auto ds = small_corpus();
  const auto& lex = text::Lexicon::builtin();
  const auto vocab = text::Vocabulary::from_lexicon(lex);
  for (const auto& r : ds.records) {
    CAPTURE(r.caption);
    for (std::size_t s = 0; s < kNumSlots; ++s) CHECK(r.caption.find(r.attribute(Slot(s))) != std::string::npos);
    const auto phrases = text::extract_phrases(r.caption, lex, vocab);
    CHECK(phrases.size() >= 2);
    bool has_top = false;
    for (const auto& p : phrases) has_top |= p.text() == r.attribute(kTopColor) + " " + r.attribute(kTopType);
    CHECK(has_top);
  }
}

TEST_CASE("dataset round trip") {
  const auto ds = small_corpus(7);
  const auto dir = scratch("laip_test_data");
  save_dataset(dir, ds);
  CHECK(load_dataset(dir) == ds);

  Dataset empty;
  const auto edir = scratch("laip_test_data_empty");
  save_dataset(edir, empty);
  CHECK(load_dataset(edir) == empty);

  {
    std::fstream f(dir / "records.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(load_dataset(dir), FormatError);
  save_dataset(dir, ds);
  std::filesystem::resize_file(dir / "records.bin", std::filesystem::file_size(dir / "records.bin") - 3);
  CHECK_THROWS_AS(load_dataset(dir), FormatError);
  CHECK_THROWS_AS(load_dataset(scratch("laip_test_data_missing")), FormatError);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(edir);
}

TEST_CASE("make_batches") {
  const auto ds = small_corpus();
  const auto& lex = text::Lexicon::builtin();
  const auto vocab = text::Vocabulary::from_lexicon(lex);
  Rng rng(11);
  const auto batches = make_batches(ds, ds.train, 4, rng, lex, vocab);
  std::vector<std::uint64_t> seen;
  for (const auto& b : batches) {
    CHECK(b.records.size() <= 4);
    CHECK(std::set<std::uint64_t>(b.identities.begin(), b.identities.end()).size() == b.identities.size());
    REQUIRE(b.images.size() == b.records.size());
    REQUIRE(b.masks.size() == b.records.size());
    for (std::size_t i = 0; i < b.records.size(); ++i) {
      CHECK(b.identities[i] == ds.records[b.records[i]].identity);
      CHECK(b.images[i] == ds.records[b.records[i]].patches());
      CHECK(b.masks[i].size() == b.phrases[i].size());
      CHECK(b.phrases[i].size() >= 2);
    }
    seen.insert(seen.end(), b.records.begin(), b.records.end());
  }
  std::sort(seen.begin(), seen.end());
  auto train = ds.train;
  std::sort(train.begin(), train.end());
  CHECK(seen == train);
  // 24 records over 8 identities pack into full batches of 4.
  CHECK(batches.size() == 6);

  Rng a(5), b(5);
  const auto x = make_batches(ds, ds.train, 4, a, lex, vocab);
  const auto y = make_batches(ds, ds.train, 4, b, lex, vocab);
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].records == y[i].records);
    for (std::size_t j = 0; j < x[i].masks.size(); ++j)
      for (std::size_t k = 0; k < x[i].masks[j].size(); ++k)
        CHECK(x[i].masks[j][k].mask_index == y[i].masks[j][k].mask_index);
  }

  Rng c(0);
  CHECK_THROWS_AS(make_batches(ds, ds.train, 9, c, lex, vocab), ConfigError);
  CHECK_THROWS_AS(make_batches(ds, ds.train, 0, c, lex, vocab), ConfigError);
}
