#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "fi3det/errors.hpp"

namespace fi3det {

// Container for dense numeric arrays, used for depth frames and point cloud
// scenes. Layout, all little-endian:
//
//   magic   "FI3D" (4 bytes)
//   version u16, currently 1
//   count   u32 number of blocks
//   blocks  repeated: u16 name length, name bytes (UTF-8),
//           u8 dtype (0 = f32, 1 = u8, 2 = u32), u8 ndim,
//           ndim x u64 dims, then the raw values row-major.
enum class Fi3dDtype : std::uint8_t { kF32 = 0, kU8 = 1, kU32 = 2 };

inline constexpr std::uint16_t kFi3dVersion = 1;

struct Fi3dBlock {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::variant<std::vector<float>, std::vector<std::uint8_t>, std::vector<std::uint32_t>> data;

  Fi3dDtype dtype() const { return static_cast<Fi3dDtype>(data.index()); }
  std::uint64_t element_count() const;
  const std::vector<float>& f32() const { return std::get<std::vector<float>>(data); }
  const std::vector<std::uint8_t>& u8() const { return std::get<std::vector<std::uint8_t>>(data); }
  const std::vector<std::uint32_t>& u32() const { return std::get<std::vector<std::uint32_t>>(data); }
};

struct Fi3dFile {
  std::vector<Fi3dBlock> blocks;

  bool has(const std::string& name) const;
  // Throws FormatError when the block is missing.
  const Fi3dBlock& at(const std::string& name) const;
};

// Throws FormatError on bad magic, unsupported version, unknown dtype,
// malformed headers, or truncated payloads.
Fi3dFile read_fi3d(const std::filesystem::path& path);

// Throws FormatError when a block's dims do not match its payload size.
void write_fi3d(const std::filesystem::path& path, const Fi3dFile& file);

}  // namespace fi3det
