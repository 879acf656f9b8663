#pragma once

// Spatial transformation module: 3-d convolutional encoder, vector
// quantization against a learned codebook, 3-d decoder, and the patch
// discriminator used for its adversarial and feature-matching losses.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "zeco/checkpoint.hpp"
#include "zeco/latent.hpp"
#include "zeco/volume.hpp"

namespace zeco::stm {

struct LossWeights {
  double lambda_a = 0.1;
  double lambda_p = 1.0;
  double lambda_cb = 1.0;
  double lambda_cm = 0.25;

  void validate() const;
};

struct STMConfig {
  int in_channels = 1;
  int base_channels = 16;
  /// One entry per resolution; size() - 1 stride-2 stages, factor 2^(size()-1).
  std::vector<int> channel_multipliers{1, 2, 4};
  int res_blocks = 1;  // residual blocks per downsampled resolution
  int latent_channels = 4;
  int codebook_size = 64;
  int embedding_dim = 4;
  int disc_base_channels = 16;
  int disc_patch_level = 3;  // stride-2 stages in the patch discriminator
  LossWeights loss_weights;

  int levels() const { return static_cast<int>(channel_multipliers.size()) - 1; }
  int downsample_factor() const { return 1 << levels(); }
  int channels_at(int level) const { return base_channels * channel_multipliers.at(level); }

  void validate() const;
  /// Throws ShapeMismatch naming the first axis not divisible by 2^L.
  void check_input_shape(const std::array<std::int64_t, 3>& spatial) const;

  nlohmann::json to_json() const;
  static STMConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct QuantizationResult {
  torch::Tensor quantized;  // straight-through value z + stopgrad(q - z), (N, c, d, h, w)
  torch::Tensor indices;    // int64, (N, d, h, w)
  torch::Tensor loss_cb;    // mean over positions of ||stopgrad(z) - q||^2
  torch::Tensor loss_cm;    // mean over positions of ||z - stopgrad(q)||^2
};

/// Nearest codebook row for every row of `flat` (M x dim) by exhaustive
/// squared-distance search in float64; ties resolve to the lowest index.
torch::Tensor nearest_codes(const torch::Tensor& flat, const torch::Tensor& entries);

/// Quantizes a batched latent (N, c, d, h, w) against codebook `entries` (K x c).
QuantizationResult quantize(const torch::Tensor& z, const torch::Tensor& entries);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_channels, int out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
};
TORCH_MODULE(ResBlock);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const STMConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv3d conv_in{nullptr};
  torch::nn::ModuleList down{nullptr};
  ResBlock mid{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Conv3d conv_out{nullptr};
};
TORCH_MODULE(Encoder);

class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const STMConfig& cfg);
  /// Output is bounded to [-1, 1] by a final tanh.
  torch::Tensor forward(const torch::Tensor& z);

 private:
  torch::nn::Conv3d conv_in{nullptr};
  ResBlock mid{nullptr};
  torch::nn::ModuleList up{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Conv3d conv_out{nullptr};
};
TORCH_MODULE(Decoder);

struct DiscriminatorOutput {
  torch::Tensor logits;                // (N, 1, d', h', w'), one per patch
  std::vector<torch::Tensor> features; // activation after every stride-2 stage
};

/// Patch discriminator: disc_patch_level stride-2 4^3 convolutions with leaky
/// ReLU, then a 3^3 convolution to one logit per patch. No normalization
/// layers, so every logit depends only on its receptive field.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const STMConfig& cfg);
  DiscriminatorOutput forward(const torch::Tensor& x);

 private:
  torch::nn::ModuleList stages{nullptr};
  torch::nn::Conv3d head{nullptr};
};
TORCH_MODULE(Discriminator);

class AutoencoderImpl : public torch::nn::Module {
 public:
  explicit AutoencoderImpl(const STMConfig& cfg);

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  torch::Tensor codebook;  // (K, embedding_dim)
};
TORCH_MODULE(Autoencoder);

struct StmLossTerms {
  torch::Tensor total;
  double loss_r = 0, loss_a = 0, loss_p = 0, loss_cb = 0, loss_cm = 0;
};

/// total = L_r + la*L_a + lp*L_p + lcb*L_cb + lcm*L_cm with L_r = mean|v - v_rec|,
/// L_a = -mean(D(v_rec)), L_p = mean over stages of the mean squared distance
/// between discriminator activations on v and v_rec.
StmLossTerms stm_loss(const torch::Tensor& v, const torch::Tensor& v_rec, const QuantizationResult& qr,
                      const DiscriminatorOutput& real, const DiscriminatorOutput& fake, const LossWeights& w);

/// mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))
torch::Tensor discriminator_hinge_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);

/// Autoencoder plus discriminator for one config; the value type behind
/// encode/quantize/decode/discriminate.
class Model {
 public:
  explicit Model(STMConfig cfg);

  static Model from_store(const ParameterStore& store);
  ParameterStore to_store(std::int64_t step = 0) const;

  LatentGrid encode(const Volume3D& v);
  QuantizationResult quantize(const LatentGrid& z);
  Volume3D decode(const LatentGrid& zq);
  torch::Tensor discriminate(const Volume3D& v);

  /// encode -> quantize -> decode on a batch (N, C, D, H, W) without gradients.
  torch::Tensor reconstruct(const torch::Tensor& x);
  /// Quantized latents for a batch, no gradients.
  torch::Tensor encode_quantized(const torch::Tensor& x);

  const STMConfig& config() const { return config_; }
  Autoencoder& autoencoder() { return ae_; }
  Discriminator& discriminator() { return disc_; }

 private:
  STMConfig config_;
  Autoencoder ae_{nullptr};
  Discriminator disc_{nullptr};
};

struct StmRunConfig {
  int steps = 3000;
  int batch_size = 6;
  double lr = 5e-4;
  double disc_lr = 2e-4;
  int warmup_steps = 500;
  int checkpoint_interval = 1000;
  int dead_code_window = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;  // empty: keep everything in memory
  /// Called every monitor_interval steps with the number of completed steps;
  /// returning true ends training early.
  std::function<bool(std::int64_t, Model&)> monitor;
  int monitor_interval = 0;
};

struct StmLogRow {
  std::int64_t step;
  double loss_total, loss_r, loss_a, loss_p, loss_cb, loss_cm, disc_loss;
};

struct StmTrainResult {
  ParameterStore store;
  std::vector<StmLogRow> log;
};

/// Alternating generator/discriminator updates with Adam. The generator's
/// adversarial weight is zero before warmup_steps. The codebook is seeded from
/// encoder outputs of the first batch; codes unused for dead_code_window steps
/// are re-seeded from random encoder outputs. With out_dir set, writes
/// stm_last.ckpt every checkpoint_interval steps and stm_train.csv.
StmTrainResult train_stm(const torch::Tensor& volumes, const STMConfig& cfg, const StmRunConfig& run);
StmTrainResult train_stm(const DatasetManifest& manifest, const std::filesystem::path& manifest_dir,
                         const STMConfig& cfg, const StmRunConfig& run);

void write_stm_log(const std::vector<StmLogRow>& log, const std::filesystem::path& path);

/// Stacks every normalized volume of a manifest into (N, C, D, H, W).
torch::Tensor load_volume_batch(const DatasetManifest& manifest, const std::filesystem::path& manifest_dir);

}  // namespace zeco::stm
