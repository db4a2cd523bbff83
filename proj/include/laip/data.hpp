#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "laip/rng.hpp"
#include "laip/tensor.hpp"
#include "laip/textproc.hpp"

// Synthetic person-attribute corpus. Each attribute slot is rendered into a
// fixed block of the patch grid (its color as the block color, garment type
// as a pixel pattern), and the caption names the same attribute values, so
// the true patch/phrase alignment is known by construction.
namespace laip::data {

struct AttributeSlot {
  std::string name;
  std::vector<std::string> values;
};

// Patch-grid rectangle [row0, row1) x [col0, col1).
struct Region {
  std::size_t row0, row1, col0, col1;
  bool contains(std::size_t row, std::size_t col) const {
    return row >= row0 && row < row1 && col >= col0 && col < col1;
  }
};

enum Slot : std::size_t { kHairColor = 0, kTopColor, kTopType, kBottomColor, kBottomType, kNumSlots };

const std::vector<AttributeSlot>& attribute_schema();
std::array<double, 3> color_rgb(const std::string& name);
// Region of the 8x8 layout rendering the given slot.
Region slot_region(Slot slot);
// Pattern intensity of a garment type at pixel (y, x) of a patch: 1 or 0.55.
double pattern_intensity(const std::string& garment, std::size_t y, std::size_t x);

inline constexpr std::size_t kGridRows = 8;
inline constexpr std::size_t kGridCols = 8;
inline constexpr std::size_t kPatchSide = 4;
inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kPatchPixels = kPatchSide * kPatchSide * kChannels;
inline constexpr double kPixelNoise = 0.05;

struct PersonRecord {
  std::uint64_t identity = 0;
  std::vector<std::uint32_t> attributes;  // value index per slot
  Tensor image;                           // grid_rows x grid_cols x patch_pixels, values in [0, 1]
  std::string caption;

  std::string attribute(Slot slot) const { return attribute_schema()[slot].values[attributes[slot]]; }
  // The image as an L_I x patch_pixels matrix in raster order.
  Tensor patches() const;

  friend bool operator==(const PersonRecord&, const PersonRecord&) = default;
};

struct Dataset {
  std::uint64_t n_identities = 0;
  std::uint64_t images_per_identity = 0;
  std::uint64_t seed = 0;
  std::vector<PersonRecord> records;
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> test;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Distinct attribute tuples per identity; the last image of every identity
// goes to the test split, the rest to train.
Dataset generate_dataset(std::size_t n_identities, std::size_t images_per_identity, Rng& rng);

// Directory with manifest.json and records.bin:
//   records.bin = "LAIPREC1" | u32 version | u64 count | count x record
//   record      = u64 identity | u32 n_attr | n_attr x u32 | u64 n_values |
//                 n_values x f64 image | u32 caption_bytes | caption (UTF-8)
// All integers and floats little-endian.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

struct Batch {
  std::vector<std::uint64_t> records;
  std::vector<std::uint64_t> identities;
  std::vector<Tensor> images;  // patch matrices
  std::vector<std::vector<text::TokenId>> texts;
  std::vector<std::vector<text::Phrase>> phrases;
  std::vector<std::vector<text::MaskedPhrase>> masks;  // one per phrase
};

// Shuffled, identity-disjoint batches covering `indices` exactly once.
std::vector<Batch> make_batches(const Dataset& dataset, const std::vector<std::uint64_t>& indices,
                                std::size_t batch_size, Rng& rng, const text::Lexicon& lexicon,
                                const text::Vocabulary& vocab);

}  // namespace laip::data
