#include "mixunlearn/data.hpp"

#include "mixunlearn/errors.hpp"
#include "mixunlearn/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

namespace mixunlearn {

// ---------------------------------------------------------------------------
// Dataset

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t s = sample_size();
  std::vector<double> values(indices.size() * s);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw InputError("batch: index " + std::to_string(indices[k]) + " out of range");
    std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(indices[k] * s), s,
                values.begin() + static_cast<std::ptrdiff_t>(k * s));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor(std::move(shape), std::move(values));
}

Tensor Dataset::all() const {
  Shape shape{size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  return Tensor(std::move(shape), inputs);
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) out[k] = labels.at(indices[k]);
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string tag) const {
  Dataset out;
  out.sample_shape = sample_shape;
  out.num_classes = num_classes;
  out.provenance = std::move(tag);
  const std::size_t s = sample_size();
  out.inputs.reserve(indices.size() * s);
  for (std::size_t i : indices) {
    if (i >= size()) throw InputError("subset: index " + std::to_string(i) + " out of range");
    out.inputs.insert(out.inputs.end(), inputs.begin() + static_cast<std::ptrdiff_t>(i * s),
                      inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * s));
    out.labels.push_back(labels[i]);
    out.source_index.push_back(source_index.empty() ? i : source_index[i]);
  }
  if (original_labels) {
    out.original_labels.emplace();
    for (std::size_t i : indices) out.original_labels->push_back((*original_labels)[i]);
  }
  return out;
}

std::size_t Dataset::count_label(int label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

void Dataset::validate() const {
  if (inputs.size() != size() * sample_size()) {
    throw InputError("dataset '" + provenance + "': " + std::to_string(inputs.size()) + " input values for " +
                     std::to_string(size()) + " samples of shape " + shape_str(sample_shape));
  }
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw InputError("dataset '" + provenance + "': label " + std::to_string(y) + " outside [0, " +
                       std::to_string(num_classes) + ")");
  if (!source_index.empty() && source_index.size() != size())
    throw InputError("dataset '" + provenance + "': source_index length mismatch");
  if (original_labels && original_labels->size() != size())
    throw InputError("dataset '" + provenance + "': original_labels length mismatch");
}

std::string to_string(SetupTag tag) {
  switch (tag) {
  case SetupTag::class_level: return "class_level";
  case SetupTag::data_level: return "data_level";
  case SetupTag::noisy: return "noisy";
  }
  return "unknown";
}

SetupTag setup_from_string(const std::string& s) {
  if (s == "class_level") return SetupTag::class_level;
  if (s == "data_level") return SetupTag::data_level;
  if (s == "noisy") return SetupTag::noisy;
  throw ConfigError("unknown setup '" + s + "' (expected class_level, data_level or noisy)");
}

Dataset ForgetSplit::full() const {
  std::vector<std::pair<std::size_t, std::pair<int, std::size_t>>> order; // (source, (part, row))
  for (std::size_t i = 0; i < forget.size(); ++i) order.push_back({forget.source_index[i], {0, i}});
  for (std::size_t i = 0; i < retain.size(); ++i) order.push_back({retain.source_index[i], {1, i}});
  std::sort(order.begin(), order.end());

  Dataset out;
  out.sample_shape = retain.empty() ? forget.sample_shape : retain.sample_shape;
  out.num_classes = std::max(forget.num_classes, retain.num_classes);
  out.provenance = "full";
  const bool noisy = forget.original_labels.has_value() || retain.original_labels.has_value();
  if (noisy) out.original_labels.emplace();
  const std::size_t s = out.sample_size();
  for (const auto& [src, where] : order) {
    const Dataset& part = where.first == 0 ? forget : retain;
    const std::size_t row = where.second;
    out.inputs.insert(out.inputs.end(), part.inputs.begin() + static_cast<std::ptrdiff_t>(row * s),
                      part.inputs.begin() + static_cast<std::ptrdiff_t>((row + 1) * s));
    out.labels.push_back(part.labels[row]);
    out.source_index.push_back(src);
    if (noisy)
      out.original_labels->push_back(part.original_labels ? (*part.original_labels)[row] : part.labels[row]);
  }
  return out;
}

void ForgetSplit::write_manifest(const std::filesystem::path& path) const {
  std::vector<std::pair<std::size_t, const char*>> rows;
  for (std::size_t i : forget.source_index) rows.emplace_back(i, "forget");
  for (std::size_t i : retain.source_index) rows.emplace_back(i, "retain");
  std::sort(rows.begin(), rows.end());
  std::ofstream os(path);
  if (!os) throw InputError("cannot write split manifest " + path.string());
  os << "index,part\n";
  for (const auto& [i, part] : rows) os << i << ',' << part << '\n';
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError(path.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 4) throw ParseError(origin + ": truncated header at offset 0 (need 4 bytes, have " + std::to_string(bytes.size()) + ")");
  if (bytes[0] != 0 || bytes[1] != 0) throw ParseError(origin + ": bad magic at offset 0 (leading bytes must be zero)");
  IdxArray out;
  out.type_code = bytes[2];
  if (out.type_code != 0x08) throw ParseError(origin + ": unsupported element type 0x" + std::to_string(out.type_code) + " at offset 2 (only unsigned byte)");
  const std::size_t rank = bytes[3];
  if (rank == 0) throw ParseError(origin + ": zero rank at offset 3");
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) throw ParseError(origin + ": truncated dimension table at offset " + std::to_string(bytes.size()));
  std::size_t count = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    out.dims.push_back(read_be32(bytes, 4 + 4 * d));
    count *= out.dims.back();
  }
  if (bytes.size() < header + count) {
    throw ParseError(origin + ": truncated payload at offset " + std::to_string(bytes.size()) + " (expected " +
                     std::to_string(header + count) + " bytes)");
  }
  if (bytes.size() > header + count) {
    throw ParseError(origin + ": trailing bytes at offset " + std::to_string(header + count));
  }
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return out;
}

IdxArray read_idx(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  return parse_idx(bytes, path.string());
}

std::vector<std::uint8_t> encode_idx(const IdxArray& array) {
  std::vector<std::uint8_t> out{0, 0, array.type_code, static_cast<std::uint8_t>(array.dims.size())};
  for (auto d : array.dims) put_be32(out, d);
  out.insert(out.end(), array.data.begin(), array.data.end());
  return out;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
  const auto bytes = encode_idx(array);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto image_bytes = slurp(images_path);
  const auto label_bytes = slurp(labels_path);
  if (image_bytes.size() >= 4 && read_be32(image_bytes, 0) != kIdxImagesMagic)
    throw ParseError(images_path.string() + ": bad magic at offset 0 (expected 0x00000803)");
  if (label_bytes.size() >= 4 && read_be32(label_bytes, 0) != kIdxLabelsMagic)
    throw ParseError(labels_path.string() + ": bad magic at offset 0 (expected 0x00000801)");
  const IdxArray images = parse_idx(image_bytes, images_path.string());
  const IdxArray labels = parse_idx(label_bytes, labels_path.string());
  if (images.dims[0] != labels.dims[0]) {
    throw ParseError(labels_path.string() + ": count mismatch at offset 4 (" + std::to_string(labels.dims[0]) +
                     " labels vs " + std::to_string(images.dims[0]) + " images)");
  }

  Dataset d;
  d.sample_shape = {1, images.dims[1], images.dims[2]};
  d.inputs.resize(images.data.size());
  for (std::size_t i = 0; i < images.data.size(); ++i) d.inputs[i] = images.data[i] / 255.0;
  int max_label = 0;
  d.labels.reserve(labels.data.size());
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    d.labels.push_back(labels.data[i]);
    max_label = std::max(max_label, static_cast<int>(labels.data[i]));
  }
  d.num_classes = static_cast<std::size_t>(std::max(max_label + 1, 10));
  d.source_index.resize(d.size());
  std::iota(d.source_index.begin(), d.source_index.end(), std::size_t{0});
  d.provenance = images_path.filename().string();
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic blobs

Dataset make_blobs(int classes, int per_class, int dim, double separation, std::uint64_t seed) {
  if (classes < 2) throw InputError("make_blobs: classes must be >= 2, got " + std::to_string(classes));
  if (per_class < 1) throw InputError("make_blobs: per_class must be >= 1, got " + std::to_string(per_class));
  if (dim < 1) throw InputError("make_blobs: dim must be >= 1, got " + std::to_string(dim));
  if (!(separation > 0.0)) throw InputError("make_blobs: separation must be positive");

  const auto C = static_cast<std::size_t>(classes);
  const auto D = static_cast<std::size_t>(dim);
  std::vector<double> means(C * D, 0.0);
  constexpr double pi = 3.14159265358979323846;
  const double radius = separation / (2.0 * std::sin(pi / static_cast<double>(classes)));
  for (std::size_t c = 0; c < C; ++c) {
    if (D == 1) {
      means[c] = separation * static_cast<double>(c);
    } else {
      const double angle = 2.0 * pi * static_cast<double>(c) / static_cast<double>(classes);
      means[c * D] = radius * std::cos(angle);
      means[c * D + 1] = radius * std::sin(angle);
    }
  }

  Rng rng(seed);
  Dataset d;
  d.sample_shape = {D};
  d.num_classes = C;
  d.provenance = "blobs";
  for (std::size_t c = 0; c < C; ++c)
    for (int k = 0; k < per_class; ++k) {
      for (std::size_t j = 0; j < D; ++j) d.inputs.push_back(means[c * D + j] + normal01(rng));
      d.labels.push_back(static_cast<int>(c));
    }
  d.source_index.resize(d.size());
  std::iota(d.source_index.begin(), d.source_index.end(), std::size_t{0});
  return d;
}

Dataset random_subset(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n > d.size())
    throw InputError("random_subset: cannot draw " + std::to_string(n) + " of " + std::to_string(d.size()));
  Rng rng(seed);
  auto perm = permutation(d.size(), rng);
  perm.resize(n);
  std::sort(perm.begin(), perm.end());
  Dataset out = d.subset(perm, d.provenance + "/subset");
  // Subsets become their own index space.
  std::iota(out.source_index.begin(), out.source_index.end(), std::size_t{0});
  return out;
}

// ---------------------------------------------------------------------------
// Splits

namespace {

ForgetSplit partition(const Dataset& d, const std::vector<bool>& in_forget, SetupTag tag, std::uint64_t seed) {
  std::vector<std::size_t> f, r;
  for (std::size_t i = 0; i < d.size(); ++i) (in_forget[i] ? f : r).push_back(i);
  ForgetSplit s;
  s.forget = d.subset(f, "forget");
  s.retain = d.subset(r, "retain");
  s.setup = tag;
  s.seed = seed;
  return s;
}

std::vector<bool> pick_fraction(const Dataset& d, std::span<const int> classes, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw InputError("split: fraction must lie in (0, 1), got " + std::to_string(fraction));
  if (classes.empty()) throw InputError("split: class set is empty");
  const std::set<int> unique(classes.begin(), classes.end());
  std::vector<bool> chosen(d.size(), false);
  Rng rng(seed);
  for (int c : unique) {
    if (c < 0 || static_cast<std::size_t>(c) >= d.num_classes)
      throw InputError("split: class " + std::to_string(c) + " out of range");
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d.labels[i] == c) members.push_back(i);
    shuffle_in_place(std::span<std::size_t>(members), rng);
    const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(members.size())));
    for (std::size_t k = 0; k < take; ++k) chosen[members[k]] = true;
  }
  return chosen;
}

} // namespace

ForgetSplit split_class_level(const Dataset& d, int forgotten_class) {
  if (d.count_label(forgotten_class) == 0)
    throw InputError("split_class_level: class " + std::to_string(forgotten_class) + " not present");
  std::vector<bool> in_forget(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) in_forget[i] = d.labels[i] == forgotten_class;
  return partition(d, in_forget, SetupTag::class_level, 0);
}

ForgetSplit split_data_level(const Dataset& d, std::span<const int> classes, double fraction, std::uint64_t seed) {
  return partition(d, pick_fraction(d, classes, fraction, seed), SetupTag::data_level, seed);
}

ForgetSplit split_noisy(const Dataset& d, std::span<const int> classes, double fraction, std::uint64_t seed) {
  if (d.num_classes < 2) throw InputError("split_noisy: need at least two classes");
  const auto chosen = pick_fraction(d, classes, fraction, seed);
  Dataset noisy = d;
  noisy.original_labels = d.labels;
  Rng rng(derive_seed(seed, 0x6e6f697379)); // "noisy"
  const std::size_t L = d.num_classes;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!chosen[i]) continue;
    // Uniform over the L - 1 wrong classes.
    const auto draw = static_cast<int>(uniform_index(rng, L - 1));
    noisy.labels[i] = draw >= d.labels[i] ? draw + 1 : draw;
  }
  ForgetSplit s = partition(noisy, chosen, SetupTag::noisy, seed);
  s.retain.original_labels.reset();
  return s;
}

} // namespace mixunlearn
