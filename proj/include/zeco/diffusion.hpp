#pragma once

// Latent DDPM: noise schedule, closed-form forward process, 3-d U-Net noise
// predictor, reverse-process mean and ancestral sampling, epsilon-MSE training.
// Timesteps are 0-based: t = 0 .. T-1.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "zeco/checkpoint.hpp"
#include "zeco/latent.hpp"

namespace zeco::diffusion {

struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;          // 1 - beta
  std::vector<double> alpha_bar;      // running product of alpha
  std::vector<double> posterior_var;  // beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)

  int steps() const { return static_cast<int>(beta.size()); }

  /// Derives every array from betas in (0, 1). For t = 0 the missing
  /// alpha_bar_{-1} is taken as alpha_0, which gives posterior_var[0] = beta_0.
  static NoiseSchedule from_betas(std::vector<double> betas);
  void check_step(int t) const;
};

enum class ScheduleKind { linear };

/// Linearly spaced betas from beta_start to beta_end (inclusive), T >= 2.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::linear);

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
LatentGrid q_sample(const LatentGrid& z0, int t, const LatentGrid& eps, const NoiseSchedule& s);
/// Batched form; `t` holds one int64 step per batch item.
torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& s);

/// (1 / sqrt(alpha_t)) (z_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat).
torch::Tensor posterior_mean(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& s);

/// posterior_mean plus sqrt(posterior_var[t]) g, g ~ N(0, I); no noise when t == 0.
torch::Tensor reverse_step_from_eps(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int t,
                                    const NoiseSchedule& s, torch::Generator& gen);

/// Noise prediction for a batched latent at a single step t.
using EpsFn = std::function<torch::Tensor(const torch::Tensor& z_t, int t)>;

/// z_{T-1} ~ N(0, I) from a generator seeded with `seed`, then T reverse steps
/// down to t = 0. Every caller that passes the same seed and an equal eps_fn
/// consumes identical random numbers.
torch::Tensor ancestral_sample(const std::vector<std::int64_t>& shape, const EpsFn& eps_fn, const NoiseSchedule& s,
                               std::uint64_t seed);

struct UNet3DConfig {
  int levels = 4;
  int res_blocks = 3;         // per encoder/decoder level
  int attention_per_level = 1;
  int mid_res_blocks = 2;
  int mid_attention = 1;
  int base_channels = 16;
  std::vector<int> channel_multipliers{1, 1, 1, 1};
  /// downsample[i]: stride-2 transition after level i (size levels - 1).
  std::vector<bool> downsample{false, false, false};
  int time_embedding_dim = 64;
  int in_channels = 4;
  int out_channels = 4;

  int channels_at(int level) const { return base_channels * channel_multipliers.at(static_cast<std::size_t>(level)); }
  int downsample_factor() const;
  /// Spatial shape of f_d / f_m (deepest level) for a latent of `spatial`.
  std::array<std::int64_t, 3> deepest_shape(const std::array<std::int64_t, 3>& spatial) const;

  void validate() const;
  void check_input(const torch::Tensor& z) const;
  nlohmann::json to_json() const;
  static UNet3DConfig from_json(const nlohmann::json& j);
};

/// Sinusoidal embedding of integer steps, (N) -> (N, dim).
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

class TimeMlpImpl : public torch::nn::Module {
 public:
  explicit TimeMlpImpl(int dim);
  torch::Tensor forward(const torch::Tensor& t);

 private:
  int dim_;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TimeMlp);

class UResBlockImpl : public torch::nn::Module {
 public:
  UResBlockImpl(int in_channels, int out_channels, int temb_channels);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear temb_proj{nullptr};
};
TORCH_MODULE(UResBlock);

/// Single-head dot-product self-attention over flattened spatial positions.
class AttentionBlockImpl : public torch::nn::Module {
 public:
  explicit AttentionBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv3d qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(AttentionBlock);

class DownLevelImpl : public torch::nn::Module {
 public:
  DownLevelImpl(int in_channels, int out_channels, int temb_channels, const UNet3DConfig& cfg, bool downsample);
  /// Returns (level output kept as skip, input to the next level).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::ModuleList res{nullptr}, attn{nullptr};
  torch::nn::Conv3d down{nullptr};
};
TORCH_MODULE(DownLevel);

class MidBlockImpl : public torch::nn::Module {
 public:
  MidBlockImpl(int channels, int temb_channels, const UNet3DConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::ModuleList res{nullptr}, attn{nullptr};
};
TORCH_MODULE(MidBlock);

class UpLevelImpl : public torch::nn::Module {
 public:
  UpLevelImpl(int in_channels, int skip_channels, int out_channels, int temb_channels, const UNet3DConfig& cfg,
              bool upsample);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip, const torch::Tensor& temb);

 private:
  torch::nn::ModuleList res{nullptr}, attn{nullptr};
  torch::nn::Conv3d up{nullptr};
};
TORCH_MODULE(UpLevel);

struct DenoiserOutput {
  torch::Tensor eps_hat;  // same shape as z_t
  torch::Tensor f_d;      // deepest encoder-level output (kept when requested)
  torch::Tensor f_m;      // middle-block output (kept when requested)
};

/// 3-d U-Net: `levels` encoder and decoder levels of res_blocks residual blocks
/// plus attention, a middle block of residual blocks and attention, and the
/// timestep entering every residual block through a sinusoidal embedding.
class UNet3DImpl : public torch::nn::Module {
 public:
  explicit UNet3DImpl(const UNet3DConfig& cfg);
  DenoiserOutput forward(const torch::Tensor& z_t, const torch::Tensor& t, bool keep_features = false);
  const UNet3DConfig& config() const { return cfg_; }

  UNet3DConfig cfg_;
  TimeMlp time_mlp{nullptr};
  torch::nn::Conv3d conv_in{nullptr};
  torch::nn::ModuleList down{nullptr};
  MidBlock mid{nullptr};
  torch::nn::ModuleList up{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Conv3d conv_out{nullptr};
};
TORCH_MODULE(UNet3D);

struct DiffusionConfig {
  UNet3DConfig unet;
  int T = 200;
  double beta_start = 5e-4;
  double beta_end = 0.1;

  NoiseSchedule schedule() const { return make_schedule(T, beta_start, beta_end); }
  nlohmann::json to_json() const;
  static DiffusionConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

/// Trained denoiser with its schedule and the latent scale applied before
/// diffusion (latents are multiplied by latent_scale on the way in).
class Model {
 public:
  explicit Model(DiffusionConfig cfg);

  static Model from_store(const ParameterStore& store);
  ParameterStore to_store(std::int64_t step = 0) const;

  DenoiserOutput denoise(const LatentGrid& z_t, int t);
  torch::Tensor eps(const torch::Tensor& z_t, int t);
  LatentGrid reverse_step(const LatentGrid& z_t, int t, torch::Generator& gen);
  /// Samples in scaled latent space and returns the unscaled latent.
  LatentGrid sample_unconditional(const std::array<std::int64_t, 4>& shape, std::uint64_t seed);

  const DiffusionConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  UNet3D& unet() { return unet_; }
  double latent_scale = 1.0;
  std::string parent_hash;

 private:
  DiffusionConfig cfg_;
  NoiseSchedule schedule_;
  UNet3D unet_{nullptr};
};

struct DiffusionRunConfig {
  int steps = 2000;
  int batch_size = 6;
  double lr = 1e-4;
  int checkpoint_interval = 1000;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::string ckpt_name = "diffusion";
};

struct LossLogRow {
  std::int64_t step;
  double loss;
  double reference_loss;  // frozen/unconditional loss on the same batch where meaningful, else NaN
};

struct DiffusionTrainResult {
  Model model;
  std::vector<LossLogRow> log;
};

/// Epsilon-prediction training on already scaled latents (N, c, d, h, w):
/// per step t ~ U{0..T-1}, eps ~ N(0, I), minimize mean (eps - eps_theta(q_sample(z0, t, eps), t))^2.
DiffusionTrainResult train_diffusion(const torch::Tensor& latents, const DiffusionConfig& cfg,
                                     const DiffusionRunConfig& run, double latent_scale = 1.0,
                                     const std::string& parent_hash = "");

void write_loss_log(const std::vector<LossLogRow>& log, const std::filesystem::path& path);

/// One training draw (indices, t, eps) shared by every trainer so that arms
/// with the same seed see identical data order and noise.
struct TrainingDraw {
  torch::Tensor indices;
  torch::Tensor t;
  torch::Tensor eps;
};
TrainingDraw draw_batch(std::int64_t n, int batch, const std::vector<std::int64_t>& latent_shape, int T,
                        torch::Generator& gen);

}  // namespace zeco::diffusion
