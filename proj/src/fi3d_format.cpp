#include "fi3det/fi3d_format.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace fi3det {

namespace {

// Payloads are written with plain memory copies; the format is defined as
// little-endian, which this build requires.
static_assert(std::endian::native == std::endian::little,
              "container payload I/O assumes a little-endian host");

constexpr char kMagic[4] = {'F', 'I', '3', 'D'};

// All multi-byte fields are little-endian on disk. The helpers below
// assemble values bytewise, so the code is endian-agnostic.
template <typename T>
T read_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T)))
    throw FormatError(std::string("container truncated reading ") + what);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

template <typename T>
void write_le(std::ostream& out, T value) {
  auto v = static_cast<std::uint64_t>(value);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

std::uint64_t checked_element_count(const Fi3dBlock& block) {
  std::uint64_t n = 1;
  for (std::uint64_t d : block.dims) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d)
      throw FormatError("block dimension product overflows");
    n *= d;
  }
  return n;
}

}  // namespace

std::uint64_t Fi3dBlock::element_count() const {
  std::uint64_t n = 1;
  for (std::uint64_t d : dims) n *= d;
  return n;
}

bool Fi3dFile::has(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name == name) return true;
  return false;
}

const Fi3dBlock& Fi3dFile::at(const std::string& name) const {
  for (const auto& b : blocks)
    if (b.name == name) return b;
  throw FormatError("missing block: " + name);
}

Fi3dFile read_fi3d(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());

  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad magic in " + path.string());
  const auto version = read_le<std::uint16_t>(in, "version");
  if (version != kFi3dVersion)
    throw FormatError("unsupported container version " + std::to_string(version));
  const auto count = read_le<std::uint32_t>(in, "block count");

  Fi3dFile file;
  file.blocks.reserve(count);
  for (std::uint32_t bi = 0; bi < count; ++bi) {
    Fi3dBlock block;
    const auto name_len = read_le<std::uint16_t>(in, "name length");
    block.name.resize(name_len);
    if (name_len > 0 && !in.read(block.name.data(), name_len))
      throw FormatError("container truncated reading block name");
    const auto dtype = read_le<std::uint8_t>(in, "dtype");
    if (dtype > 2) throw FormatError("unknown dtype " + std::to_string(dtype));
    const auto ndim = read_le<std::uint8_t>(in, "ndim");
    block.dims.resize(ndim);
    for (auto& d : block.dims) d = read_le<std::uint64_t>(in, "dim");
    const std::uint64_t n = checked_element_count(block);

    auto read_payload = [&](auto& vec, std::size_t elem_size) {
      vec.resize(n);
      if (n > 0 && !in.read(reinterpret_cast<char*>(vec.data()),
                            static_cast<std::streamsize>(n * elem_size)))
        throw FormatError("container truncated reading block '" + block.name + "'");
    };
    switch (static_cast<Fi3dDtype>(dtype)) {
      case Fi3dDtype::kF32: {
        std::vector<float> v;
        read_payload(v, 4);
        block.data = std::move(v);
        break;
      }
      case Fi3dDtype::kU8: {
        std::vector<std::uint8_t> v;
        read_payload(v, 1);
        block.data = std::move(v);
        break;
      }
      case Fi3dDtype::kU32: {
        std::vector<std::uint32_t> v;
        read_payload(v, 4);
        block.data = std::move(v);
        break;
      }
    }
    file.blocks.push_back(std::move(block));
  }
  return file;
}

void write_fi3d(const std::filesystem::path& path, const Fi3dFile& file) {
  for (const auto& block : file.blocks) {
    if (checked_element_count(block) != block.element_count() ||
        block.element_count() != std::visit([](const auto& v) { return static_cast<std::uint64_t>(v.size()); },
                                            block.data))
      throw FormatError("block '" + block.name + "' dims do not match payload");
    if (block.name.size() > std::numeric_limits<std::uint16_t>::max())
      throw FormatError("block name too long");
    if (block.dims.size() > std::numeric_limits<std::uint8_t>::max())
      throw FormatError("too many dims");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMagic, 4);
  write_le<std::uint16_t>(out, kFi3dVersion);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.blocks.size()));
  for (const auto& block : file.blocks) {
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(block.name.size()));
    out.write(block.name.data(), static_cast<std::streamsize>(block.name.size()));
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(block.dtype()));
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(block.dims.size()));
    for (std::uint64_t d : block.dims) write_le<std::uint64_t>(out, d);
    std::visit(
        [&out](const auto& vec) {
          using T = typename std::decay_t<decltype(vec)>::value_type;
          if (!vec.empty())
            out.write(reinterpret_cast<const char*>(vec.data()),
                      static_cast<std::streamsize>(vec.size() * sizeof(T)));
        },
        block.data);
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

}  // namespace fi3det
