#pragma once

// Image-quality and distribution metrics over volumes in normalized
// intensity space. SSIM-family metrics are computed per depth slice and
// averaged; all arithmetic is in double precision.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "zeco/volume.hpp"

namespace zeco::metrics {

struct SsimParams {
  int window = 7;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 2.0;

  nlohmann::json to_json() const;
};

/// Mean SSIM over the valid window positions of one 2-d slice (row major, h x w).
double ssim_slice(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                  const SsimParams& p = {});

/// Mean over channels and depth slices of ssim_slice.
double ssim_volume(const Volume3D& a, const Volume3D& b, const SsimParams& p = {});

inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Largest scale count m <= 5 with side >= 2^(m-1) * window; throws when m < 2.
int ms_ssim_scales(int side, int window = 7);

struct MsSsimResult {
  double value;
  int scales;
};

/// Multi-scale SSIM of one slice: contrast-structure terms at every scale,
/// luminance at the coarsest, weights renormalized to the scale count, 2x2
/// average pooling between scales. Negative terms are clamped to zero.
MsSsimResult ms_ssim_slice(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                           const SsimParams& p = {});
MsSsimResult ms_ssim_volume(const Volume3D& a, const Volume3D& b, const SsimParams& p = {});

/// 10 log10(range^2 / MSE); +infinity when the volumes are identical.
double psnr_volume(const Volume3D& a, const Volume3D& b, double data_range = 2.0);

struct MmdResult {
  double mmd2;
  double bandwidth;
  int grid;
};

/// Unbiased MMD^2 with a Gaussian kernel exp(-d^2 / (2 sigma^2)) on volumes
/// box-averaged to grid^3 and flattened; sigma is the median pairwise distance
/// of the pooled sample (1 if that median is zero). Equal-sized sets use the
/// pair-aligned U-statistic, which is exactly zero for identical sets.
MmdResult mmd_sets(const std::vector<Volume3D>& gen, const std::vector<Volume3D>& real, int grid = 8);

struct Summary {
  double mean = 0;
  double std = 0;  // population standard deviation
};
Summary summarize(const std::vector<double>& values);

struct MetricReport {
  Summary ssim, ms_ssim, psnr;
  bool psnr_infinite = false;  // at least one pair was identical
  double mmd = 0;
  int n_pairs = 0;
  nlohmann::json params;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row(const std::string& label) const;
};

/// Index-paired comparison of gen[i] with real[i] plus set-level MMD
/// (skipped, reported as NaN, when either set has fewer than 2 volumes).
MetricReport evaluate_pairs(const std::vector<Volume3D>& gen, const std::vector<Volume3D>& real,
                            const SsimParams& p = {});

/// Pairs generated and real entries by mask identity (resolved mask path)
/// for SSIM / MS-SSIM / PSNR and compares whole sets for MMD. Any entry
/// without a partner raises UnpairedEntries naming every orphan.
MetricReport evaluate(const DatasetManifest& gen, const std::filesystem::path& gen_dir, const DatasetManifest& real,
                      const std::filesystem::path& real_dir, const SsimParams& p = {});

/// Writes the JSON report and a header+row CSV.
void write_report(const MetricReport& r, const std::filesystem::path& json_path,
                  const std::filesystem::path& csv_path, const std::string& label);

/// Between-class-variance maximizing threshold over a 256-bin histogram.
double otsu_threshold(const std::vector<double>& values, int bins = 256);

/// Voxels above a second Otsu threshold computed over the voxels above the
/// first one (background / head, then head / bright region). Channel 0.
torch::Tensor high_intensity_region(const Volume3D& v);

/// 2|A n B| / (|A| + |B|) over boolean grids; 1 when both are empty.
double dice(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace zeco::metrics
