#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deshadow/numerics/tensor.hpp"

namespace deshadow {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Binary container: "DSHWARCH" magic, u32 version, u64-length JSON header,
// u32 blob count, then per blob (u32 name length, name, u32 rank, u64 dims,
// little-endian f64 data).
struct Archive {
  static constexpr std::uint32_t kVersion = 1;
  std::string header_json;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_archive(const Archive& archive);
Archive parse_archive(std::span<const std::uint8_t> bytes, const std::string& context = "archive");

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace deshadow
