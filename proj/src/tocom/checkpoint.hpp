#pragma once

#include <optional>
#include <string>

#include "json.hpp"
#include "tocom/plugins.hpp"
#include "tocom/vit.hpp"

namespace tocom {

enum class TuneMode { pretrain, full, adaptformer, arith };

std::string to_string(TuneMode m);
TuneMode parse_tune_mode(const std::string& s);

struct CheckpointMeta {
  std::size_t source_r = 0;
  std::size_t rmax = 3;
  std::string dataset;
  std::uint64_t seed = 0;
  TuneMode mode = TuneMode::pretrain;
  CompressionMode compression = CompressionMode::merge;
};

struct ModelCheckpoint {
  ModelConfig config;
  WeightSet<float> weights;
  std::optional<AdapterWeights<float>> adapter;
  CheckpointMeta meta;

  void validate() const;
};

nlohmann::json config_to_json(const ModelConfig& cfg);
// Missing keys keep the values already in base.
ModelConfig config_from_json(const nlohmann::json& j, ModelConfig base = {});

std::string to_string(CompressionMode m);
CompressionMode parse_compression(const std::string& s);

void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::string& path);
std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_plugins(const std::string& path, const ToComSet& set, const nlohmann::json& extra = {});
ToComSet load_plugins(const std::string& path, nlohmann::json* metadata = nullptr);
std::vector<std::uint8_t> encode_plugins(const ToComSet& set, const nlohmann::json& extra = {});
ToComSet decode_plugins(std::span<const std::uint8_t> bytes, nlohmann::json* metadata = nullptr);

}  // namespace tocom
