#include "mixunlearn/checkpoint.hpp"

#include "mixunlearn/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mixunlearn {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'X', 'U', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is, const std::filesystem::path& path) {
  T v{};
  const auto offset = is.tellg();
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw ParseError(path.string() + ": truncated at offset " + std::to_string(static_cast<long long>(offset)));
  return v;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  const std::string meta = ckpt.meta.dump();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    const auto v = t.values();
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  }
  if (!os) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError(path.string() + ": cannot open");
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ParseError(path.string() + ": bad magic at offset 0");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw ParseError(path.string() + ": unsupported version " + std::to_string(version) + " at offset 8");
  const auto meta_len = get<std::uint32_t>(is, path);
  std::string meta(meta_len, '\0');
  if (!is.read(meta.data(), meta_len)) throw ParseError(path.string() + ": truncated metadata");
  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": metadata is not JSON: " + e.what());
  }
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto rank = get<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is, path));
    std::vector<double> values(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double))))
      throw ParseError(path.string() + ": truncated tensor " + std::to_string(k));
    ckpt.tensors.emplace_back(std::move(shape), std::move(values));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ParseError(path.string() + ": trailing bytes after tensors");
  return ckpt;
}

} // namespace mixunlearn
