#pragma once

// Mask-conditioned generation on top of a frozen latent denoiser. A trainable
// copy of the denoiser's down path and middle block reads the noisy latent
// together with the condition; its deepest features reach the frozen noise
// prediction through two zero-initialized 1x1x1 convolutions:
//
//   eps_z = eps_frozen(z_t, t) + up(h_out(f_d + h_in(f_m)))
//
// A concatenation baseline (condition stacked onto the noisy latent, U-Net
// trained from scratch) shares the training and sampling plumbing.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "zeco/checkpoint.hpp"
#include "zeco/diffusion.hpp"
#include "zeco/latent.hpp"
#include "zeco/volume.hpp"

namespace zeco::zerofusion {

/// 1x1x1 convolution whose weight and bias start at exactly zero.
class ZeroModuleImpl : public torch::nn::Module {
 public:
  ZeroModuleImpl(int in_channels, int out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv3d conv{nullptr};
};
TORCH_MODULE(ZeroModule);

/// Per-class occupancy fractions at latent resolution, (k_c, d, h, w).
struct ConditionEmbedding {
  torch::Tensor data;
  std::string source;
};

/// One-hot expansion of `mask` followed by box averaging over cells of
/// (mask extent / latent extent) voxels; every axis must divide evenly.
ConditionEmbedding encode_condition(const SegMask3D& mask, const std::array<std::int64_t, 3>& latent_shape);
/// Batched form for uint8 label grids (N, D, H, W) -> (N, k_c, d, h, w).
torch::Tensor encode_condition(const torch::Tensor& labels, int num_classes,
                               const std::array<std::int64_t, 3>& latent_shape);

struct ControlFeatures {
  torch::Tensor f_d;
  torch::Tensor f_m;
};

/// eps_frozen + up(h_out(f_d + h_in(f_m))), trilinear `up` to eps_frozen's
/// spatial shape (skipped when the shapes already agree).
torch::Tensor fuse(const torch::Tensor& eps_frozen, const ControlFeatures& feats, ZeroModule& h_in,
                   ZeroModule& h_out);

class ControlBranchImpl : public torch::nn::Module {
 public:
  ControlBranchImpl(const diffusion::UNet3DConfig& backbone, int condition_channels);

  /// Copies the time embedding, down path and middle block from `frozen`.
  void copy_from(const diffusion::UNet3DImpl& frozen);
  /// Stem over concat(z_t, c), then the copied down path and middle block.
  ControlFeatures forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& c);

  int condition_channels() const { return condition_channels_; }

  diffusion::TimeMlp time_mlp{nullptr};
  torch::nn::Conv3d stem{nullptr};
  torch::nn::ModuleList down{nullptr};
  diffusion::MidBlock mid{nullptr};
  ZeroModule h_in{nullptr};
  ZeroModule h_out{nullptr};

 private:
  diffusion::UNet3DConfig cfg_;
  int condition_channels_;
};
TORCH_MODULE(ControlBranch);

enum class ConditionMode { zerofusion, concat_baseline, none };
std::string to_string(ConditionMode mode);
ConditionMode parse_condition_mode(const std::string& s);

/// Common surface of the conditional denoisers: fused noise prediction for a
/// batch and ancestral sampling from a condition embedding.
class ConditionalDenoiser {
 public:
  virtual ~ConditionalDenoiser() = default;

  /// Noise prediction for scaled latents z_t (N, c, d, h, w), steps t (N),
  /// condition (N, k_c, d, h, w). Gradients flow into trainable parts only.
  virtual torch::Tensor eps(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& c) = 0;
  virtual std::vector<torch::Tensor> trainable_parameters() = 0;
  virtual const diffusion::NoiseSchedule& schedule() const = 0;
  virtual double latent_scale() const = 0;
  virtual ParameterStore to_store(std::int64_t step = 0) const = 0;

  /// Ancestral sampling conditioned on `c` (k_c, d, h, w); returns the
  /// unscaled latent (c, d, h, w).
  LatentGrid sample(const ConditionEmbedding& c, int latent_channels, std::uint64_t seed);
};

/// Frozen backbone plus control branch.
class ZeroFusionModel : public ConditionalDenoiser {
 public:
  /// Fresh branch: copy initialized from `frozen`, stem seeded from the global
  /// torch generator, zero modules at zero.
  ZeroFusionModel(diffusion::Model frozen, int condition_channels);

  /// Rejects a branch trained against a different backbone (BackboneMismatch).
  static ZeroFusionModel from_store(const ParameterStore& store, diffusion::Model frozen);
  ParameterStore to_store(std::int64_t step = 0) const override;

  torch::Tensor eps(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& c) override;
  /// Frozen prediction and control features for one call, gradients only through the branch.
  torch::Tensor frozen_eps(const torch::Tensor& z_t, const torch::Tensor& t);
  std::vector<torch::Tensor> trainable_parameters() override { return branch_->parameters(); }
  const diffusion::NoiseSchedule& schedule() const override { return frozen_.schedule(); }
  double latent_scale() const override { return frozen_.latent_scale; }

  diffusion::Model& frozen() { return frozen_; }
  ControlBranch& branch() { return branch_; }
  const std::string& backbone_hash() const { return backbone_hash_; }
  std::string config_hash() const;

 private:
  diffusion::Model frozen_;
  ControlBranch branch_{nullptr};
  std::string backbone_hash_;
};

/// U-Net over concat(z_t, c) trained from scratch; same schedule and latent
/// scale as the backbone it is compared against.
class ConcatBaselineModel : public ConditionalDenoiser {
 public:
  ConcatBaselineModel(const diffusion::DiffusionConfig& backbone, int condition_channels, double latent_scale);

  static ConcatBaselineModel from_store(const ParameterStore& store);
  ParameterStore to_store(std::int64_t step = 0) const override;

  torch::Tensor eps(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& c) override;
  std::vector<torch::Tensor> trainable_parameters() override { return net_.unet()->parameters(); }
  const diffusion::NoiseSchedule& schedule() const override { return net_.schedule(); }
  double latent_scale() const override { return net_.latent_scale; }

  int condition_channels() const { return condition_channels_; }

 private:
  diffusion::Model net_;
  int condition_channels_;
};

struct ConditionalRunConfig {
  int steps = 2000;
  int batch_size = 6;
  double lr = 2.5e-5;
  int checkpoint_interval = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::string ckpt_name = "zerofusion";
};

/// Trains `model` on scaled latents (N, c, d, h, w) with conditions
/// (N, k_c, d, h, w) by epsilon-MSE, updating trainable_parameters() only.
/// The batch/step/noise stream depends only on run.seed, so every arm with the
/// same seed sees identical draws. For a ZeroFusionModel the log's
/// reference_loss is the frozen model's loss on the same batch, and the frozen
/// checksum is verified after training (FrozenWeightMutation).
std::vector<diffusion::LossLogRow> train_conditional(ConditionalDenoiser& model, const torch::Tensor& latents,
                                                     const torch::Tensor& conditions,
                                                     const ConditionalRunConfig& run);

}  // namespace zeco::zerofusion
