#pragma once

// Binary container shared by checkpoints ("TCKP") and plugin sets ("TCPL").
//
//   magic[4] | u32 version | u32 meta_len | meta (UTF-8 JSON)
//   u32 count | count x { u32 name_len | name | u32 dtype | u32 rank | u64 dims[rank] | u64 offset }
//   u64 payload_len | payload (little-endian f32, row-major) | u32 crc32(payload)
//
// Offsets are relative to the start of the payload.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tocom/tensor.hpp"

namespace tocom {

inline constexpr std::string_view kCheckpointMagic = "TCKP";
inline constexpr std::string_view kPluginMagic = "TCPL";
inline constexpr std::uint32_t kArtifactVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Artifact {
  std::string magic;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor<float>& tensor(const std::string& name) const;
};

std::vector<std::uint8_t> encode_artifact(const Artifact& a);
// Throws FormatError on any structural problem; nothing is returned partially.
Artifact decode_artifact(std::span<const std::uint8_t> bytes, std::string_view expected_magic);

void write_artifact(const std::string& path, const Artifact& a);
Artifact read_artifact(const std::string& path, std::string_view expected_magic);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace tocom
