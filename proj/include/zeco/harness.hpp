#pragma once

// Stage runner. Every stage reads and writes under the run's output
// directory:
//
//   data/train, data/test   phantom datasets with manifest.json
//   checkpoints/            stm.ckpt, diffusion.ckpt, zerofusion.ckpt, concat_baseline.ckpt
//   samples/                generated volumes, manifest.json, montage PNGs
//   reports/                metrics and ablation tables
//   logs/                   per-stage CSV logs and resolved config snapshots

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "zeco/config.hpp"
#include "zeco/diffusion.hpp"
#include "zeco/metrics.hpp"
#include "zeco/stm.hpp"
#include "zeco/volume.hpp"
#include "zeco/zerofusion.hpp"

namespace zeco::harness {

struct Layout {
  std::filesystem::path root;

  std::filesystem::path train_dir() const { return root / "data" / "train"; }
  std::filesystem::path test_dir() const { return root / "data" / "test"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path samples() const { return root / "samples"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path logs() const { return root / "logs"; }
};

// Pipeline helpers shared by the stages, the ablation runner and the tests.

/// Quantized latents of normalized volumes (N, C, D, H, W) -> (N, c, d, h, w).
torch::Tensor encode_latents(stm::Model& stm, const torch::Tensor& volumes);
/// 1 / std of the latents (1 when the std is zero).
double latent_scale_for(const torch::Tensor& latents);
/// Snaps a latent to the codebook and decodes it.
Volume3D decode_latent(stm::Model& stm, const LatentGrid& z);
/// Mask labels (N, D, H, W) of every entry; class count from the masks.
std::pair<torch::Tensor, int> load_mask_batch(const DatasetManifest& manifest, const std::filesystem::path& dir);

// Checkpoint loading with stage-chain checks: a missing file raises
// MissingCheckpoint; a checkpoint written under a different model config or
// derived from a different parent raises ConfigHashMismatch.
ParameterStore require_checkpoint(const std::filesystem::path& path,
                                  const std::optional<std::string>& expected_config_hash);
stm::Model load_stm(const RunConfig& cfg, std::string* checksum = nullptr);
diffusion::Model load_diffusion(const RunConfig& cfg, const std::string& stm_checksum);
std::unique_ptr<zerofusion::ConditionalDenoiser> load_conditional(const RunConfig& cfg, const diffusion::Model& frozen,
                                                                  int condition_channels);

void make_phantoms(const RunConfig& cfg);
void train_stm_stage(const RunConfig& cfg);
void train_diffusion_stage(const RunConfig& cfg);
void train_zerofusion_stage(const RunConfig& cfg);

struct SampleOptions {
  std::optional<std::filesystem::path> mask;  // single conditional sample
  std::optional<std::filesystem::path> out;   // output volume path for the single sample
};
/// With a mask: one sample written to opts.out (default samples/sample.vol).
/// Without: one sample per test-set mask plus samples/manifest.json.
void sample_stage(const RunConfig& cfg, const SampleOptions& opts);
metrics::MetricReport evaluate_stage(const RunConfig& cfg);

struct AblationRow {
  std::string arm;
  std::uint64_t seed = 0;
  metrics::MetricReport report;
};

struct AblationResult {
  std::vector<AblationRow> runs;   // one per (seed, arm)
  std::vector<AblationRow> table;  // one per arm, means over seeds
  int seeds = 0;
  int wins = 0;                    // seeds with zerofusion SSIM >= baseline SSIM
  bool trend_holds = false;        // wins form a strict majority

  nlohmann::json to_json() const;
  std::string table_csv() const;
};

struct AblationInputs {
  diffusion::Model frozen;
  stm::Model stm;
  torch::Tensor train_latents;     // scaled, (N, c, d, h, w)
  torch::Tensor train_conditions;  // (N, k, d, h, w)
  std::vector<zerofusion::ConditionEmbedding> test_conditions;
  std::vector<Volume3D> test_volumes;
};

/// Trains both arms for each derived seed under identical budgets and data
/// order, samples one volume per test condition and scores it against the
/// matching test volume. UnequalBudgets when the arms' steps or batch sizes differ.
AblationResult run_ablation(AblationInputs& in, const zerofusion::ConditionalRunConfig& zf_run,
                            const zerofusion::ConditionalRunConfig& baseline_run, int seeds,
                            std::uint64_t master_seed);
AblationResult ablate_stage(const RunConfig& cfg);

/// Grid of depth slices (channel 0) mapped from [-1, 1] to 8-bit grey.
void write_montage(const Volume3D& v, const std::filesystem::path& png, int columns = 8);

/// Runs one named stage, writing logs/<stage>.config.ini first. Returns 0 on
/// success; prints the diagnostic and returns nonzero on failure.
int run_stage(const std::string& stage, const RunConfig& cfg, const SampleOptions& opts = {});

}  // namespace zeco::harness
