#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace zeco {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

/// Named float32 arrays plus the manifest that describes them. Every model
/// in the pipeline (autoencoder, denoiser, control branch) persists through
/// this one type.
class ParameterStore {
 public:
  std::string kind;
  std::string config_hash;
  std::int64_t step = 0;
  std::string parent_hash;
  std::string frozen_backbone_hash;
  nlohmann::json meta = nlohmann::json::object();

  void set(const std::string& name, const torch::Tensor& value);
  const torch::Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t size() const { return arrays_.size(); }
  const std::vector<std::pair<std::string, torch::Tensor>>& arrays() const { return arrays_; }

  /// SHA-256 over names, shapes and little-endian payload, in insertion order.
  std::string checksum() const;

  /// Copies every parameter and buffer of `module` under `prefix`.
  void capture(const torch::nn::Module& module, const std::string& prefix = "");
  /// Writes stored arrays back into `module`; every module tensor must exist here.
  void restore(torch::nn::Module& module, const std::string& prefix = "") const;

 private:
  std::vector<std::pair<std::string, torch::Tensor>> arrays_;
};

/// Checksum of a module's current parameters and buffers (as float32).
std::string module_checksum(const torch::nn::Module& module);

/// Single-file archive: 16-byte header ("ZECOCKPT", u32 version, u32 reserved),
/// u64 manifest length, JSON manifest, then the arrays as contiguous
/// little-endian float32. Written atomically.
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path);

/// Verifies the payload checksum and, when given, the expected config hash.
ParameterStore load_checkpoint(const std::filesystem::path& path,
                               const std::optional<std::string>& expected_config_hash = std::nullopt);

/// Atomic write helper shared by every artifact writer (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace zeco
