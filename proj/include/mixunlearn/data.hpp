#pragma once

#include "mixunlearn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mixunlearn {

/// Labeled samples stored as one flat row-major buffer.
struct Dataset {
  Shape sample_shape;                       // {dim} for vectors, {C, H, W} for images
  std::vector<double> inputs;               // size() * sample_size() values
  std::vector<int> labels;                  // each in [0, num_classes)
  std::size_t num_classes = 0;
  std::vector<std::size_t> source_index;    // position in the dataset this one was cut from
  std::optional<std::vector<int>> original_labels; // pre-corruption labels (noisy setup only)
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t sample_size() const { return shape_numel(sample_shape); }

  /// Constant tensor [k, sample_shape...] holding the listed samples.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all() const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// New dataset of the listed samples; source_index is inherited.
  Dataset subset(std::span<const std::size_t> indices, std::string tag) const;
  std::size_t count_label(int label) const;

  /// Throws InputError unless the size/label invariants hold.
  void validate() const;
};

enum class SetupTag { class_level, data_level, noisy };

std::string to_string(SetupTag tag);
SetupTag setup_from_string(const std::string& s);

/// Partition of a dataset into forgetting and remaining parts, by index.
struct ForgetSplit {
  Dataset forget;
  Dataset retain;
  SetupTag setup = SetupTag::class_level;
  std::uint64_t seed = 0;

  /// forget and retain merged back into source order (noisy labels kept).
  Dataset full() const;
  /// CSV rows "index,part" sorted by index.
  void write_manifest(const std::filesystem::path& path) const;
};

// --- IDX ------------------------------------------------------------------

/// Raw unsigned-byte IDX payload.
struct IdxArray {
  std::uint8_t type_code = 0x08;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  bool operator==(const IdxArray&) const = default;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Parses an unsigned-byte IDX file; throws ParseError naming the byte offset.
IdxArray read_idx(const std::filesystem::path& path);
IdxArray parse_idx(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
void write_idx(const std::filesystem::path& path, const IdxArray& array);
std::vector<std::uint8_t> encode_idx(const IdxArray& array);

/// Reads an images/labels pair (magic 0x803 / 0x801) into a dataset with
/// pixels scaled to [0, 1] and sample shape {1, rows, cols}.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// --- synthetic --------------------------------------------------------------

/// Isotropic unit-variance Gaussian clusters. Class means sit on a circle in
/// the first two coordinates with adjacent means `separation` apart (on a line
/// when dim == 1); the layout is seed-independent so train/test draws with
/// different seeds share geometry.
Dataset make_blobs(int classes, int per_class, int dim, double separation, std::uint64_t seed);

/// Uniform random subset of n samples (without replacement), kept in source order.
Dataset random_subset(const Dataset& d, std::size_t n, std::uint64_t seed);

// --- splits -----------------------------------------------------------------

ForgetSplit split_class_level(const Dataset& d, int forgotten_class);

/// floor(fraction * count) samples of each listed class go to the forget set.
ForgetSplit split_data_level(const Dataset& d, std::span<const int> classes, double fraction,
                             std::uint64_t seed);

/// Like split_data_level, but the selected samples receive a uniformly drawn
/// wrong label and their originals are kept in original_labels.
ForgetSplit split_noisy(const Dataset& d, std::span<const int> classes, double fraction,
                        std::uint64_t seed);

} // namespace mixunlearn
