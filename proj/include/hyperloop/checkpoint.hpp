#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperloop/tensor.hpp"

namespace hyperloop {

/// Container layout (all integers little-endian):
///   "HLTC" | u32 version | u32 n + n bytes UTF-8 JSON document
///   | u32 count + tensor records | u32 count + optimizer records
/// Record: u32 name length + name | u8 dtype | u8 rank | u32 dims[rank] | payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t {
  f32 = 1,
  f64 = 2,
  i32 = 3,
  u8 = 4,
  int4 = 5,  // two codes per byte, low nibble = even column; ceil(cols/2) bytes per row
};

std::size_t payload_size(DType dtype, const Shape& shape);

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json document = nlohmann::json::object();
  std::vector<TensorRecord> tensors;
  std::vector<TensorRecord> optimizer;

  const TensorRecord* find(std::string_view name) const;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
/// Throws IoError on truncation, bad magic or unknown dtype codes.
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

TensorRecord float_record(std::string name, const Shape& shape, std::span<const float> values);
std::vector<float> float_values(const TensorRecord& rec);

}  // namespace hyperloop
