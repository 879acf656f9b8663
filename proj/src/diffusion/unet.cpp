#include <cmath>

#include "zeco/diffusion.hpp"
#include "zeco/error.hpp"

namespace zeco::diffusion {

namespace nn = torch::nn;

namespace {

nn::GroupNorm group_norm(int channels) {
  return nn::GroupNorm(nn::GroupNormOptions(norm_groups(channels), channels).eps(1e-6));
}

nn::Conv3d conv3(int in, int out, int stride = 1) {
  return nn::Conv3d(nn::Conv3dOptions(in, out, 3).stride(stride).padding(1));
}

}  // namespace

int UNet3DConfig::downsample_factor() const {
  int f = 1;
  for (bool d : downsample) f *= d ? 2 : 1;
  return f;
}

std::array<std::int64_t, 3> UNet3DConfig::deepest_shape(const std::array<std::int64_t, 3>& spatial) const {
  const int f = downsample_factor();
  return {spatial[0] / f, spatial[1] / f, spatial[2] / f};
}

void UNet3DConfig::validate() const {
  if (levels != 4) throw Error(ErrorCode::InvalidArgument, "the U-Net has exactly 4 encoder/decoder levels");
  if (static_cast<int>(channel_multipliers.size()) != levels) {
    throw Error(ErrorCode::InvalidArgument, "need one channel multiplier per level");
  }
  if (static_cast<int>(downsample.size()) != levels - 1) {
    throw Error(ErrorCode::InvalidArgument, "need one downsample flag per level transition");
  }
  if (res_blocks < 1 || mid_res_blocks < 1 || base_channels < 1 || in_channels < 1 || out_channels < 1) {
    throw Error(ErrorCode::InvalidArgument, "U-Net block and channel counts must be positive");
  }
  if (attention_per_level < 1 || mid_attention < 1) {
    throw Error(ErrorCode::InvalidArgument, "every level and the middle block carry attention");
  }
  if (time_embedding_dim < 2 || time_embedding_dim % 2 != 0) {
    throw Error(ErrorCode::InvalidArgument, "time_embedding_dim must be even");
  }
}

void UNet3DConfig::check_input(const torch::Tensor& z) const {
  if (z.dim() != 5 || z.size(1) != in_channels) {
    throw Error(ErrorCode::ShapeMismatch, "denoiser expects (N, " + std::to_string(in_channels) +
                                              ", d, h, w), got " + c10::str(z.sizes()));
  }
  const int f = downsample_factor();
  for (int a = 2; a < 5; ++a) {
    if (z.size(a) % f != 0) {
      throw Error(ErrorCode::ShapeMismatch, "latent extent " + std::to_string(z.size(a)) +
                                                " not divisible by U-Net factor " + std::to_string(f));
    }
  }
}

nlohmann::json UNet3DConfig::to_json() const {
  return {{"levels", levels},
          {"res_blocks", res_blocks},
          {"attention_per_level", attention_per_level},
          {"mid_res_blocks", mid_res_blocks},
          {"mid_attention", mid_attention},
          {"base_channels", base_channels},
          {"channel_multipliers", channel_multipliers},
          {"downsample", downsample},
          {"time_embedding_dim", time_embedding_dim},
          {"in_channels", in_channels},
          {"out_channels", out_channels}};
}

UNet3DConfig UNet3DConfig::from_json(const nlohmann::json& j) {
  UNet3DConfig c;
  c.levels = j.at("levels").get<int>();
  c.res_blocks = j.at("res_blocks").get<int>();
  c.attention_per_level = j.at("attention_per_level").get<int>();
  c.mid_res_blocks = j.at("mid_res_blocks").get<int>();
  c.mid_attention = j.at("mid_attention").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
  c.downsample = j.at("downsample").get<std::vector<bool>>();
  c.time_embedding_dim = j.at("time_embedding_dim").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.validate();
  return c;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  const auto freqs =
      torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / static_cast<double>(half));
  const auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

TimeMlpImpl::TimeMlpImpl(int dim) : dim_(dim) {
  fc1 = register_module("fc1", nn::Linear(dim, dim));
  fc2 = register_module("fc2", nn::Linear(dim, dim));
}

torch::Tensor TimeMlpImpl::forward(const torch::Tensor& t) {
  const auto emb = timestep_embedding(t, dim_).to(fc1->weight.dtype());
  return fc2(torch::silu(fc1(emb)));
}

UResBlockImpl::UResBlockImpl(int in_channels, int out_channels, int temb_channels) {
  norm1 = register_module("norm1", group_norm(in_channels));
  conv1 = register_module("conv1", conv3(in_channels, out_channels));
  temb_proj = register_module("temb_proj", nn::Linear(temb_channels, out_channels));
  norm2 = register_module("norm2", group_norm(out_channels));
  conv2 = register_module("conv2", conv3(out_channels, out_channels));
  if (in_channels != out_channels) {
    skip = register_module("skip", nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor UResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + temb_proj(torch::silu(temb)).view({h.size(0), h.size(1), 1, 1, 1});
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

AttentionBlockImpl::AttentionBlockImpl(int channels) {
  norm = register_module("norm", group_norm(channels));
  qkv = register_module("qkv", nn::Conv3d(nn::Conv3dOptions(channels, 3 * channels, 1)));
  proj = register_module("proj", nn::Conv3d(nn::Conv3dOptions(channels, channels, 1)));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
  const auto n = x.size(0), c = x.size(1);
  const auto qkv_out = qkv(norm(x)).view({n, 3 * c, -1});
  const auto q = qkv_out.slice(1, 0, c);
  const auto k = qkv_out.slice(1, c, 2 * c);
  const auto v = qkv_out.slice(1, 2 * c, 3 * c);
  const auto weights = torch::softmax(torch::bmm(q.transpose(1, 2), k) / std::sqrt(static_cast<double>(c)), -1);
  const auto out = torch::bmm(v, weights.transpose(1, 2)).view(x.sizes());
  return x + proj(out);
}

DownLevelImpl::DownLevelImpl(int in_channels, int out_channels, int temb_channels, const UNet3DConfig& cfg,
                             bool downsample) {
  res = register_module("res", nn::ModuleList());
  attn = register_module("attn", nn::ModuleList());
  for (int r = 0; r < cfg.res_blocks; ++r) {
    res->push_back(UResBlock(r == 0 ? in_channels : out_channels, out_channels, temb_channels));
  }
  for (int a = 0; a < cfg.attention_per_level; ++a) attn->push_back(AttentionBlock(out_channels));
  if (downsample) down = register_module("down", conv3(out_channels, out_channels, 2));
}

std::pair<torch::Tensor, torch::Tensor> DownLevelImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = x;
  for (const auto& m : *res) h = m->as<UResBlockImpl>()->forward(h, temb);
  for (const auto& m : *attn) h = m->as<AttentionBlockImpl>()->forward(h);
  return {h, down ? down(h) : h};
}

MidBlockImpl::MidBlockImpl(int channels, int temb_channels, const UNet3DConfig& cfg) {
  res = register_module("res", nn::ModuleList());
  attn = register_module("attn", nn::ModuleList());
  for (int r = 0; r < cfg.mid_res_blocks; ++r) res->push_back(UResBlock(channels, channels, temb_channels));
  for (int a = 0; a < cfg.mid_attention; ++a) attn->push_back(AttentionBlock(channels));
}

torch::Tensor MidBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  // res, attention, res, ... : attention blocks sit between residual blocks.
  auto h = res[0]->as<UResBlockImpl>()->forward(x, temb);
  const auto n_res = res->size();
  const auto n_attn = attn->size();
  for (std::size_t i = 1; i < std::max(n_res, n_attn + 1); ++i) {
    if (i - 1 < n_attn) h = attn[i - 1]->as<AttentionBlockImpl>()->forward(h);
    if (i < n_res) h = res[i]->as<UResBlockImpl>()->forward(h, temb);
  }
  return h;
}

UpLevelImpl::UpLevelImpl(int in_channels, int skip_channels, int out_channels, int temb_channels,
                         const UNet3DConfig& cfg, bool upsample) {
  res = register_module("res", nn::ModuleList());
  attn = register_module("attn", nn::ModuleList());
  for (int r = 0; r < cfg.res_blocks; ++r) {
    res->push_back(UResBlock(r == 0 ? in_channels + skip_channels : out_channels, out_channels, temb_channels));
  }
  for (int a = 0; a < cfg.attention_per_level; ++a) attn->push_back(AttentionBlock(out_channels));
  if (upsample) up = register_module("up", conv3(out_channels, out_channels));
}

torch::Tensor UpLevelImpl::forward(const torch::Tensor& x, const torch::Tensor& skip, const torch::Tensor& temb) {
  auto h = torch::cat({x, skip}, 1);
  for (const auto& m : *res) h = m->as<UResBlockImpl>()->forward(h, temb);
  for (const auto& m : *attn) h = m->as<AttentionBlockImpl>()->forward(h);
  if (up) {
    h = torch::nn::functional::interpolate(
        h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2, 2, 2}).mode(torch::kNearest));
    h = up(h);
  }
  return h;
}

UNet3DImpl::UNet3DImpl(const UNet3DConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int temb = cfg.time_embedding_dim;
  time_mlp = register_module("time_mlp", TimeMlp(temb));
  conv_in = register_module("conv_in", conv3(cfg.in_channels, cfg.channels_at(0)));
  down = register_module("down", nn::ModuleList());
  for (int i = 0; i < cfg.levels; ++i) {
    const int in = i == 0 ? cfg.channels_at(0) : cfg.channels_at(i - 1);
    const bool ds = i < cfg.levels - 1 && cfg.downsample[static_cast<std::size_t>(i)];
    down->push_back(DownLevel(in, cfg.channels_at(i), temb, cfg, ds));
  }
  const int deepest = cfg.channels_at(cfg.levels - 1);
  mid = register_module("mid", MidBlock(deepest, temb, cfg));
  up = register_module("up", nn::ModuleList());
  for (int i = cfg.levels - 1; i >= 0; --i) {
    const int in = i == cfg.levels - 1 ? deepest : cfg.channels_at(i + 1);
    const bool us = i > 0 && cfg.downsample[static_cast<std::size_t>(i - 1)];
    up->push_back(UpLevel(in, cfg.channels_at(i), cfg.channels_at(i), temb, cfg, us));
  }
  norm_out = register_module("norm_out", group_norm(cfg.channels_at(0)));
  conv_out = register_module("conv_out", conv3(cfg.channels_at(0), cfg.out_channels));
}

DenoiserOutput UNet3DImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, bool keep_features) {
  cfg_.check_input(z_t);
  if (t.dim() != 1 || t.size(0) != z_t.size(0)) {
    throw Error(ErrorCode::ShapeMismatch, "need one timestep per batch item");
  }
  const auto temb = time_mlp(t);
  auto h = conv_in(z_t);
  std::vector<torch::Tensor> skips;
  for (const auto& level : *down) {
    auto [skip, next] = level->as<DownLevelImpl>()->forward(h, temb);
    skips.push_back(skip);
    h = next;
  }
  DenoiserOutput out;
  if (keep_features) out.f_d = h;
  h = mid(h, temb);
  if (keep_features) out.f_m = h;
  for (std::size_t j = 0; j < up->size(); ++j) {
    h = up[j]->as<UpLevelImpl>()->forward(h, skips[skips.size() - 1 - j], temb);
  }
  out.eps_hat = conv_out(torch::silu(norm_out(h)));
  return out;
}

}  // namespace zeco::diffusion
