#pragma once

// Checkpoint file: "PDSECKPT", u32 format version, u64 header length, the
// JSON header (model config, metadata, tensor table), then one PDSET1 blob
// per tensor in table order. All integers little-endian.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "pdse/network.hpp"

namespace pdse {

constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A model rebuilt from its configuration with every tensor overwritten by
/// the stored values.
struct LoadedModel {
  ModelConfig config;
  ParameterStore<float> store;
  ModelParams<float> params;
  nlohmann::ordered_json metadata;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ParameterStore<float>& store,
                     const nlohmann::ordered_json& metadata);

/// Throws CheckpointError on a bad magic, a version mismatch, truncation, or
/// a tensor table that does not match the configuration.
LoadedModel load_checkpoint(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const LoadedModel& model);

/// FNV-1a 64 of the file bytes, hex.
std::string file_hash(const std::filesystem::path& path);

}  // namespace pdse
