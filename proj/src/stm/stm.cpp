#include "zeco/stm.hpp"

#include "zeco/error.hpp"

namespace zeco::stm {

namespace nn = torch::nn;

void LossWeights::validate() const {
  if (lambda_a < 0 || lambda_p < 0 || lambda_cb < 0 || lambda_cm < 0) {
    throw Error(ErrorCode::InvalidArgument, "loss weights must be non-negative");
  }
}

void STMConfig::validate() const {
  if (channel_multipliers.empty()) throw Error(ErrorCode::InvalidArgument, "channel_multipliers must be nonempty");
  if (in_channels < 1 || base_channels < 1 || latent_channels < 1 || res_blocks < 0) {
    throw Error(ErrorCode::InvalidArgument, "channel counts must be positive");
  }
  if (embedding_dim != latent_channels) {
    throw Error(ErrorCode::InvalidArgument, "embedding_dim must equal latent_channels");
  }
  if (codebook_size < 2) throw Error(ErrorCode::InvalidArgument, "codebook needs at least 2 entries");
  if (disc_patch_level < 1 || disc_base_channels < 1) {
    throw Error(ErrorCode::InvalidArgument, "discriminator needs at least one stride-2 stage");
  }
  loss_weights.validate();
}

void STMConfig::check_input_shape(const std::array<std::int64_t, 3>& spatial) const {
  static constexpr const char* kAxis[] = {"depth", "height", "width"};
  const int f = downsample_factor();
  for (int a = 0; a < 3; ++a) {
    if (spatial[a] % f != 0) {
      throw Error(ErrorCode::ShapeMismatch, std::string(kAxis[a]) + " extent " + std::to_string(spatial[a]) +
                                                " is not divisible by the downsampling factor " + std::to_string(f));
    }
  }
}

nlohmann::json STMConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"base_channels", base_channels},
          {"channel_multipliers", channel_multipliers},
          {"res_blocks", res_blocks},
          {"latent_channels", latent_channels},
          {"codebook_size", codebook_size},
          {"embedding_dim", embedding_dim},
          {"disc_base_channels", disc_base_channels},
          {"disc_patch_level", disc_patch_level},
          {"loss_weights",
           {{"lambda_a", loss_weights.lambda_a},
            {"lambda_p", loss_weights.lambda_p},
            {"lambda_cb", loss_weights.lambda_cb},
            {"lambda_cm", loss_weights.lambda_cm}}}};
}

STMConfig STMConfig::from_json(const nlohmann::json& j) {
  STMConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
  c.res_blocks = j.at("res_blocks").get<int>();
  c.latent_channels = j.at("latent_channels").get<int>();
  c.codebook_size = j.at("codebook_size").get<int>();
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.disc_base_channels = j.at("disc_base_channels").get<int>();
  c.disc_patch_level = j.at("disc_patch_level").get<int>();
  const auto& w = j.at("loss_weights");
  c.loss_weights = {w.at("lambda_a").get<double>(), w.at("lambda_p").get<double>(), w.at("lambda_cb").get<double>(),
                    w.at("lambda_cm").get<double>()};
  c.validate();
  return c;
}

std::string STMConfig::hash() const { return sha256_hex(to_json().dump()); }

torch::Tensor nearest_codes(const torch::Tensor& flat, const torch::Tensor& entries) {
  const auto z = flat.detach().to(torch::kFloat64);
  const auto e = entries.detach().to(torch::kFloat64);
  const auto dist = (z.unsqueeze(1) - e.unsqueeze(0)).pow(2).sum(-1);
  return dist.argmin(1);  // first minimum on ties
}

QuantizationResult quantize(const torch::Tensor& z, const torch::Tensor& entries) {
  if (z.dim() != 5 || z.size(1) != entries.size(1)) {
    throw Error(ErrorCode::ShapeMismatch, "latent channels " + std::to_string(z.dim() == 5 ? z.size(1) : -1) +
                                              " do not match embedding_dim " + std::to_string(entries.size(1)));
  }
  const auto n = z.size(0), c = z.size(1), d = z.size(2), h = z.size(3), w = z.size(4);
  const auto flat = z.permute({0, 2, 3, 4, 1}).reshape({-1, c});
  const auto idx = nearest_codes(flat, entries);
  const auto q = entries.index_select(0, idx).view({n, d, h, w, c}).permute({0, 4, 1, 2, 3});

  QuantizationResult r;
  r.indices = idx.view({n, d, h, w});
  r.loss_cb = (z.detach() - q).pow(2).sum(1).mean();
  r.loss_cm = (z - q.detach()).pow(2).sum(1).mean();
  r.quantized = z + (q - z).detach();
  return r;
}

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels) {
  norm1 = register_module("norm1", nn::GroupNorm(nn::GroupNormOptions(norm_groups(in_channels), in_channels).eps(1e-6)));
  conv1 = register_module("conv1", nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 3).padding(1)));
  norm2 = register_module("norm2", nn::GroupNorm(nn::GroupNormOptions(norm_groups(out_channels), out_channels).eps(1e-6)));
  conv2 = register_module("conv2", nn::Conv3d(nn::Conv3dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels) {
    skip = register_module("skip", nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1(torch::silu(norm1(x)));
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

EncoderImpl::EncoderImpl(const STMConfig& cfg) {
  conv_in = register_module("conv_in", nn::Conv3d(nn::Conv3dOptions(cfg.in_channels, cfg.channels_at(0), 3).padding(1)));
  down = register_module("down", nn::ModuleList());
  for (int i = 0; i < cfg.levels(); ++i) {
    nn::Sequential stage;
    stage->push_back(nn::Conv3d(nn::Conv3dOptions(cfg.channels_at(i), cfg.channels_at(i + 1), 3).stride(2).padding(1)));
    for (int r = 0; r < cfg.res_blocks; ++r) stage->push_back(ResBlock(cfg.channels_at(i + 1), cfg.channels_at(i + 1)));
    down->push_back(stage);
  }
  const int top = cfg.channels_at(cfg.levels());
  mid = register_module("mid", ResBlock(top, top));
  norm_out = register_module("norm_out", nn::GroupNorm(nn::GroupNormOptions(norm_groups(top), top).eps(1e-6)));
  conv_out = register_module("conv_out", nn::Conv3d(nn::Conv3dOptions(top, cfg.latent_channels, 1)));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) {
  auto h = conv_in(x);
  for (const auto& stage : *down) h = stage->as<nn::Sequential>()->forward(h);
  h = mid(h);
  return conv_out(torch::silu(norm_out(h)));
}

DecoderImpl::DecoderImpl(const STMConfig& cfg) {
  const int top = cfg.channels_at(cfg.levels());
  conv_in = register_module("conv_in", nn::Conv3d(nn::Conv3dOptions(cfg.latent_channels, top, 3).padding(1)));
  mid = register_module("mid", ResBlock(top, top));
  up = register_module("up", nn::ModuleList());
  for (int i = cfg.levels() - 1; i >= 0; --i) {
    nn::Sequential stage;
    for (int r = 0; r < cfg.res_blocks; ++r) stage->push_back(ResBlock(cfg.channels_at(i + 1), cfg.channels_at(i + 1)));
    stage->push_back(nn::ConvTranspose3d(
        nn::ConvTranspose3dOptions(cfg.channels_at(i + 1), cfg.channels_at(i), 4).stride(2).padding(1)));
    up->push_back(stage);
  }
  const int base = cfg.channels_at(0);
  norm_out = register_module("norm_out", nn::GroupNorm(nn::GroupNormOptions(norm_groups(base), base).eps(1e-6)));
  conv_out = register_module("conv_out", nn::Conv3d(nn::Conv3dOptions(base, cfg.in_channels, 3).padding(1)));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& z) {
  auto h = mid(conv_in(z));
  for (const auto& stage : *up) h = stage->as<nn::Sequential>()->forward(h);
  return torch::tanh(conv_out(torch::silu(norm_out(h))));
}

DiscriminatorImpl::DiscriminatorImpl(const STMConfig& cfg) {
  stages = register_module("stages", nn::ModuleList());
  int in = cfg.in_channels;
  int out = cfg.disc_base_channels;
  for (int s = 0; s < cfg.disc_patch_level; ++s) {
    stages->push_back(nn::Conv3d(nn::Conv3dOptions(in, out, 4).stride(2).padding(1)));
    in = out;
    out = std::min(out * 2, cfg.disc_base_channels * 8);
  }
  head = register_module("head", nn::Conv3d(nn::Conv3dOptions(in, 1, 3).padding(1)));
}

DiscriminatorOutput DiscriminatorImpl::forward(const torch::Tensor& x) {
  DiscriminatorOutput out;
  auto h = x;
  for (const auto& stage : *stages) {
    h = torch::leaky_relu(stage->as<nn::Conv3d>()->forward(h), 0.2);
    out.features.push_back(h);
  }
  out.logits = head(h);
  return out;
}

AutoencoderImpl::AutoencoderImpl(const STMConfig& cfg) {
  encoder = register_module("encoder", Encoder(cfg));
  decoder = register_module("decoder", Decoder(cfg));
  const double bound = 1.0 / cfg.codebook_size;
  codebook = register_parameter("codebook",
                                torch::rand({cfg.codebook_size, cfg.embedding_dim}) * (2 * bound) - bound);
}

StmLossTerms stm_loss(const torch::Tensor& v, const torch::Tensor& v_rec, const QuantizationResult& qr,
                      const DiscriminatorOutput& real, const DiscriminatorOutput& fake, const LossWeights& w) {
  w.validate();
  if (v.sizes() != v_rec.sizes()) throw Error(ErrorCode::ShapeMismatch, "reconstruction shape differs from input");
  if (real.features.size() != fake.features.size()) {
    throw Error(ErrorCode::ShapeMismatch, "discriminator outputs have different depths");
  }
  const auto l_r = (v - v_rec).abs().mean();
  const auto l_a = -fake.logits.mean();
  auto l_p = torch::zeros({}, v.options());
  for (std::size_t i = 0; i < fake.features.size(); ++i) {
    l_p = l_p + (real.features[i].detach() - fake.features[i]).pow(2).mean();
  }
  if (!fake.features.empty()) l_p = l_p / static_cast<double>(fake.features.size());

  StmLossTerms t;
  t.total = l_r + w.lambda_a * l_a + w.lambda_p * l_p + w.lambda_cb * qr.loss_cb + w.lambda_cm * qr.loss_cm;
  t.loss_r = l_r.item<double>();
  t.loss_a = l_a.item<double>();
  t.loss_p = l_p.item<double>();
  t.loss_cb = qr.loss_cb.item<double>();
  t.loss_cm = qr.loss_cm.item<double>();
  return t;
}

torch::Tensor discriminator_hinge_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return torch::relu(1.0 - real_logits).mean() + torch::relu(1.0 + fake_logits).mean();
}

Model::Model(STMConfig cfg) : config_(std::move(cfg)) {
  config_.validate();
  ae_ = Autoencoder(config_);
  disc_ = Discriminator(config_);
}

Model Model::from_store(const ParameterStore& store) {
  if (store.kind != "stm") throw Error(ErrorCode::InvalidArgument, "expected an stm checkpoint, got " + store.kind);
  Model m(STMConfig::from_json(store.meta.at("config")));
  if (m.config_.hash() != store.config_hash) {
    throw Error(ErrorCode::ConfigHashMismatch, "stm checkpoint config hash does not match its embedded config");
  }
  store.restore(*m.ae_, "ae.");
  store.restore(*m.disc_, "disc.");
  return m;
}

ParameterStore Model::to_store(std::int64_t step) const {
  ParameterStore s;
  s.kind = "stm";
  s.config_hash = config_.hash();
  s.step = step;
  s.meta = {{"config", config_.to_json()}};
  s.capture(*ae_, "ae.");
  s.capture(*disc_, "disc.");
  return s;
}

LatentGrid Model::encode(const Volume3D& v) {
  config_.check_input_shape(v.spatial_shape());
  if (v.channels() != config_.in_channels) {
    throw Error(ErrorCode::ShapeMismatch, "volume has " + std::to_string(v.channels()) + " channels, model expects " +
                                              std::to_string(config_.in_channels));
  }
  torch::NoGradGuard no_grad;
  const auto x = v.data.unsqueeze(0).to(ae_->codebook.dtype());
  return {ae_->encoder(x)[0]};
}

QuantizationResult Model::quantize(const LatentGrid& z) {
  torch::NoGradGuard no_grad;
  return stm::quantize(z.batched().to(ae_->codebook.dtype()), ae_->codebook);
}

Volume3D Model::decode(const LatentGrid& zq) {
  if (zq.data.dim() != 4 || zq.channels() != config_.latent_channels) {
    throw Error(ErrorCode::ShapeMismatch, "latent must be (" + std::to_string(config_.latent_channels) + ", d, h, w)");
  }
  torch::NoGradGuard no_grad;
  Volume3D v;
  v.data = ae_->decoder(zq.batched().to(ae_->codebook.dtype()))[0].to(torch::kFloat32).contiguous();
  v.intensity_range = {-1.0, 1.0};
  return v;
}

torch::Tensor Model::discriminate(const Volume3D& v) {
  torch::NoGradGuard no_grad;
  return disc_(v.data.unsqueeze(0).to(ae_->codebook.dtype())).logits[0][0];
}

torch::Tensor Model::encode_quantized(const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  return stm::quantize(ae_->encoder(x.to(ae_->codebook.dtype())), ae_->codebook).quantized;
}

torch::Tensor Model::reconstruct(const torch::Tensor& x) {
  torch::NoGradGuard no_grad;
  return ae_->decoder(encode_quantized(x));
}

}  // namespace zeco::stm
