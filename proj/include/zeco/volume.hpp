#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace zeco {

// Axis convention everywhere: (channel, depth, height, width). Slices for
// metrics are taken along depth.

struct NormalizationRecord {
  std::string method = "none";  // "none" | "minmax_sym"
  double lo = 0.0;              // source minimum mapped to -1
  double hi = 0.0;              // source maximum mapped to +1

  bool operator==(const NormalizationRecord&) const = default;
};

struct Volume3D {
  torch::Tensor data;  // float32, (C, D, H, W), contiguous
  std::pair<double, double> intensity_range{0.0, 1.0};
  std::string modality_tag;
  NormalizationRecord normalization;

  std::int64_t channels() const { return data.size(0); }
  std::int64_t depth() const { return data.size(1); }
  std::int64_t height() const { return data.size(2); }
  std::int64_t width() const { return data.size(3); }
  std::array<std::int64_t, 3> spatial_shape() const { return {depth(), height(), width()}; }

  /// Throws on wrong rank/dtype, any spatial extent below 8, or non-finite values.
  void validate() const;
};

struct SegMask3D {
  torch::Tensor labels;  // uint8, (D, H, W), contiguous
  int num_classes = 1;   // K + 1, background label 0 included

  std::array<std::int64_t, 3> spatial_shape() const {
    return {labels.size(0), labels.size(1), labels.size(2)};
  }
  void validate() const;
};

enum class NormalizationMethod { minmax_sym };

/// Symmetric min-max to [-1, 1]: y = 2 (x - lo) / (hi - lo) - 1 over the whole
/// volume. Constant volumes map to zeros. The (lo, hi) pair is recorded.
Volume3D normalize(const Volume3D& v, NormalizationMethod method = NormalizationMethod::minmax_sym);
/// Inverse of normalize using the recorded parameters.
Volume3D denormalize(const Volume3D& v);

struct PhantomSpec {
  std::array<std::int64_t, 3> grid_shape{32, 32, 32};
  std::array<double, 3> head_axes{12.0, 14.0, 13.0};
  std::pair<int, int> tumor_count_range{1, 2};
  std::pair<double, double> tumor_radius_range{3.5, 5.0};
  double smooth_noise_scale = 0.08;
  std::string modality_tag = "flair-like";

  void validate() const;
  int num_classes() const { return tumor_count_range.second + 1; }
};

/// Deterministic synthetic head phantom: textured ellipsoid on a background of
/// intensity 0 with up to tumor_count_range.second spherical lesions, brighter
/// than tissue for "flair-like" and darker for "t1-like". Label k covers lesion
/// k exactly. Raw intensities lie in [0, 1].
std::pair<Volume3D, SegMask3D> generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

/// Boolean grid of voxels inside the phantom head ellipsoid.
torch::Tensor head_region(const PhantomSpec& spec);

// Volume container: 16-byte header ("ZECOVOL" NUL, u32 version, u32 metadata
// length), JSON metadata, little-endian payload (float32 volumes, uint8 masks).
void save_volume(const Volume3D& v, const std::filesystem::path& path);
void save_mask(const SegMask3D& m, const std::filesystem::path& path);
std::variant<Volume3D, SegMask3D> load_any(const std::filesystem::path& path);
Volume3D load_volume(const std::filesystem::path& path);
SegMask3D load_mask(const std::filesystem::path& path);

/// Reads a NIfTI-1 (.nii or .nii.gz) scalar volume into a single-channel Volume3D.
/// NIfTI x/y/z map to width/height/depth.
Volume3D import_nifti(const std::filesystem::path& path);

struct DatasetEntry {
  std::string volume_path;
  std::string mask_path;
  std::uint64_t seed = 0;
  std::string modality_tag;
  NormalizationRecord normalization;

  bool operator==(const DatasetEntry&) const = default;
};

struct DatasetManifest {
  std::vector<DatasetEntry> entries;
  std::string normalization_method = "minmax_sym";
  std::array<std::int64_t, 3> grid_shape{0, 0, 0};

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);

  /// Checks that paths and seeds are unique.
  void validate() const;
  /// Loads every entry (paths relative to manifest_dir) and checks volume and
  /// mask shapes against grid_shape.
  void verify_files(const std::filesystem::path& manifest_dir) const;

  bool operator==(const DatasetManifest&) const = default;
};

/// Writes n normalized phantom pairs into out_dir and returns their manifest
/// (also saved as out_dir/manifest.json). Entry i uses derive_seed(seed, "phantom", i).
DatasetManifest build_dataset(const PhantomSpec& spec, int n, std::uint64_t seed,
                              const std::filesystem::path& out_dir);

/// Resolves a manifest-relative path.
std::filesystem::path resolve_entry_path(const std::filesystem::path& manifest_dir, const std::string& p);

}  // namespace zeco
