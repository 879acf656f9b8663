#include "zeco/zerofusion.hpp"

#include <cmath>
#include <limits>

#include "zeco/error.hpp"
#include "zeco/seed.hpp"

namespace zeco::zerofusion {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

ZeroModuleImpl::ZeroModuleImpl(int in_channels, int out_channels) {
  conv = register_module("conv", nn::Conv3d(nn::Conv3dOptions(in_channels, out_channels, 1)));
  torch::NoGradGuard no_grad;
  conv->weight.zero_();
  conv->bias.zero_();
}

torch::Tensor ZeroModuleImpl::forward(const torch::Tensor& x) { return conv(x); }

torch::Tensor encode_condition(const torch::Tensor& labels, int num_classes,
                               const std::array<std::int64_t, 3>& latent_shape) {
  if (labels.dim() != 4) throw Error(ErrorCode::ShapeMismatch, "condition labels must be (N, D, H, W)");
  if (num_classes < 1) throw Error(ErrorCode::InvalidArgument, "num_classes must be positive");
  std::vector<std::int64_t> kernel;
  for (int a = 0; a < 3; ++a) {
    const auto extent = labels.size(a + 1);
    const auto target = latent_shape[static_cast<std::size_t>(a)];
    if (target < 1 || extent % target != 0) {
      throw Error(ErrorCode::ShapeMismatch, "mask extent " + std::to_string(extent) + " on axis " +
                                                std::to_string(a) + " is not a multiple of latent extent " +
                                                std::to_string(target));
    }
    kernel.push_back(extent / target);
  }
  const auto l = labels.to(torch::kInt64);
  if (l.numel() > 0 && l.max().item<std::int64_t>() >= num_classes) {
    throw Error(ErrorCode::InvalidArgument, "mask label exceeds num_classes");
  }
  const auto onehot = F::one_hot(l, num_classes).permute({0, 4, 1, 2, 3}).to(torch::kFloat32);
  return F::avg_pool3d(onehot, F::AvgPool3dFuncOptions(kernel).stride(kernel));
}

ConditionEmbedding encode_condition(const SegMask3D& mask, const std::array<std::int64_t, 3>& latent_shape) {
  mask.validate();
  ConditionEmbedding c;
  c.data = encode_condition(mask.labels.unsqueeze(0), mask.num_classes, latent_shape)[0];
  c.source = "one-hot occupancy, classes=" + std::to_string(mask.num_classes) + ", cell=" +
             std::to_string(mask.labels.size(0) / latent_shape[0]) + "x" +
             std::to_string(mask.labels.size(1) / latent_shape[1]) + "x" +
             std::to_string(mask.labels.size(2) / latent_shape[2]);
  return c;
}

torch::Tensor fuse(const torch::Tensor& eps_frozen, const ControlFeatures& feats, ZeroModule& h_in,
                   ZeroModule& h_out) {
  if (feats.f_d.dim() != 5 || feats.f_m.dim() != 5 ||
      feats.f_d.sizes().slice(2) != feats.f_m.sizes().slice(2)) {
    throw Error(ErrorCode::ShapeMismatch, "f_d and f_m must share spatial dims");
  }
  auto injected = h_out(feats.f_d + h_in(feats.f_m));
  if (injected.sizes().slice(2) != eps_frozen.sizes().slice(2)) {
    injected = F::interpolate(injected, F::InterpolateFuncOptions()
                                            .size(std::vector<std::int64_t>(eps_frozen.sizes().slice(2).vec()))
                                            .mode(torch::kTrilinear)
                                            .align_corners(false));
  }
  if (injected.sizes() != eps_frozen.sizes()) {
    throw Error(ErrorCode::ShapeMismatch, "fused features " + c10::str(injected.sizes()) +
                                              " do not match the noise prediction " + c10::str(eps_frozen.sizes()));
  }
  return eps_frozen + injected;
}

ControlBranchImpl::ControlBranchImpl(const diffusion::UNet3DConfig& backbone, int condition_channels)
    : cfg_(backbone), condition_channels_(condition_channels) {
  cfg_.validate();
  if (condition_channels < 1) throw Error(ErrorCode::InvalidArgument, "condition needs at least one channel");
  const int temb = cfg_.time_embedding_dim;
  time_mlp = register_module("time_mlp", diffusion::TimeMlp(temb));
  stem = register_module("stem", nn::Conv3d(nn::Conv3dOptions(cfg_.in_channels + condition_channels,
                                                              cfg_.channels_at(0), 3)
                                                .padding(1)));
  down = register_module("down", nn::ModuleList());
  for (int i = 0; i < cfg_.levels; ++i) {
    const int in = i == 0 ? cfg_.channels_at(0) : cfg_.channels_at(i - 1);
    const bool ds = i < cfg_.levels - 1 && cfg_.downsample[static_cast<std::size_t>(i)];
    down->push_back(diffusion::DownLevel(in, cfg_.channels_at(i), temb, cfg_, ds));
  }
  const int deepest = cfg_.channels_at(cfg_.levels - 1);
  mid = register_module("mid", diffusion::MidBlock(deepest, temb, cfg_));
  h_in = register_module("h_in", ZeroModule(deepest, deepest));
  h_out = register_module("h_out", ZeroModule(deepest, cfg_.out_channels));
}

namespace {

void copy_parameters(const nn::Module& from, nn::Module& to) {
  const auto src = from.named_parameters();
  auto dst = to.named_parameters();
  if (src.size() != dst.size()) throw Error(ErrorCode::ShapeMismatch, "module structures differ");
  torch::NoGradGuard no_grad;
  for (const auto& item : src) {
    auto* target = dst.find(item.key());
    if (target == nullptr || target->sizes() != item.value().sizes()) {
      throw Error(ErrorCode::ShapeMismatch, "cannot copy parameter " + item.key());
    }
    target->copy_(item.value());
  }
}

}  // namespace

void ControlBranchImpl::copy_from(const diffusion::UNet3DImpl& frozen) {
  copy_parameters(*frozen.time_mlp, *time_mlp);
  copy_parameters(*frozen.down, *down);
  copy_parameters(*frozen.mid, *mid);
}

ControlFeatures ControlBranchImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& c) {
  if (c.dim() != 5 || c.size(1) != condition_channels_ || c.size(0) != z_t.size(0) ||
      c.sizes().slice(2) != z_t.sizes().slice(2)) {
    throw Error(ErrorCode::ShapeMismatch, "condition " + c10::str(c.sizes()) + " does not align with latent " +
                                              c10::str(z_t.sizes()) + " and " +
                                              std::to_string(condition_channels_) + " condition channels");
  }
  cfg_.check_input(z_t);
  const auto temb = time_mlp(t);
  auto h = stem(torch::cat({z_t, c.to(z_t.dtype())}, 1));
  for (const auto& level : *down) h = level->as<diffusion::DownLevelImpl>()->forward(h, temb).second;
  ControlFeatures f;
  f.f_d = h;
  f.f_m = mid(h, temb);
  return f;
}

std::string to_string(ConditionMode mode) {
  switch (mode) {
    case ConditionMode::zerofusion: return "zerofusion";
    case ConditionMode::concat_baseline: return "concat_baseline";
    case ConditionMode::none: return "none";
  }
  return "none";
}

ConditionMode parse_condition_mode(const std::string& s) {
  if (s == "zerofusion") return ConditionMode::zerofusion;
  if (s == "concat_baseline") return ConditionMode::concat_baseline;
  if (s == "none") return ConditionMode::none;
  throw Error(ErrorCode::InvalidArgument, "unknown condition_mode '" + s + "'");
}

LatentGrid ConditionalDenoiser::sample(const ConditionEmbedding& c, int latent_channels, std::uint64_t seed) {
  const auto cb = c.data.unsqueeze(0).to(torch::kFloat32);
  const auto z = diffusion::ancestral_sample(
      {1, latent_channels, cb.size(2), cb.size(3), cb.size(4)},
      [&](const torch::Tensor& z_t, int t) { return eps(z_t, torch::full({z_t.size(0)}, t, torch::kInt64), cb); },
      schedule(), seed);
  return {z[0] / latent_scale()};
}

ZeroFusionModel::ZeroFusionModel(diffusion::Model frozen, int condition_channels)
    : frozen_(std::move(frozen)),
      branch_(ControlBranch(frozen_.config().unet, condition_channels)),
      backbone_hash_(frozen_.to_store().checksum()) {
  branch_->copy_from(*frozen_.unet());
}

std::string ZeroFusionModel::config_hash() const {
  const nlohmann::json j{{"condition_channels", branch_->condition_channels()},
                         {"backbone", frozen_.config().to_json()}};
  return sha256_hex(j.dump());
}

ParameterStore ZeroFusionModel::to_store(std::int64_t step) const {
  ParameterStore s;
  s.kind = "zerofusion";
  s.config_hash = config_hash();
  s.step = step;
  s.parent_hash = backbone_hash_;
  s.frozen_backbone_hash = backbone_hash_;
  s.meta = {{"condition_channels", branch_->condition_channels()}, {"backbone", frozen_.config().to_json()}};
  s.capture(*branch_, "branch.");
  return s;
}

ZeroFusionModel ZeroFusionModel::from_store(const ParameterStore& store, diffusion::Model frozen) {
  if (store.kind != "zerofusion") {
    throw Error(ErrorCode::InvalidArgument, "expected a zerofusion checkpoint, got " + store.kind);
  }
  const auto backbone = frozen.to_store().checksum();
  if (backbone != store.frozen_backbone_hash) {
    throw Error(ErrorCode::BackboneMismatch, "control branch was trained against backbone " +
                                                 store.frozen_backbone_hash + ", given " + backbone);
  }
  ZeroFusionModel m(std::move(frozen), store.meta.at("condition_channels").get<int>());
  if (m.config_hash() != store.config_hash) {
    throw Error(ErrorCode::ConfigHashMismatch, "zerofusion checkpoint config hash does not match");
  }
  store.restore(*m.branch_, "branch.");
  return m;
}

torch::Tensor ZeroFusionModel::frozen_eps(const torch::Tensor& z_t, const torch::Tensor& t) {
  torch::NoGradGuard no_grad;
  auto& unet = frozen_.unet();
  return unet->forward(z_t.to(unet->conv_in->weight.dtype()), t).eps_hat.to(z_t.dtype());
}

torch::Tensor ZeroFusionModel::eps(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& c) {
  const auto e = frozen_eps(z_t, t);
  const auto feats = branch_->forward(z_t, t, c);
  return fuse(e, feats, branch_->h_in, branch_->h_out);
}

ConcatBaselineModel::ConcatBaselineModel(const diffusion::DiffusionConfig& backbone, int condition_channels,
                                         double latent_scale)
    : net_([&] {
        auto cfg = backbone;
        cfg.unet.in_channels = backbone.unet.in_channels + condition_channels;
        cfg.unet.out_channels = backbone.unet.out_channels;
        return diffusion::Model(cfg);
      }()),
      condition_channels_(condition_channels) {
  if (condition_channels < 1) throw Error(ErrorCode::InvalidArgument, "condition needs at least one channel");
  net_.latent_scale = latent_scale;
}

ParameterStore ConcatBaselineModel::to_store(std::int64_t step) const {
  auto s = net_.to_store(step);
  s.kind = "concat_baseline";
  s.meta["condition_channels"] = condition_channels_;
  return s;
}

ConcatBaselineModel ConcatBaselineModel::from_store(const ParameterStore& store) {
  if (store.kind != "concat_baseline") {
    throw Error(ErrorCode::InvalidArgument, "expected a concat_baseline checkpoint, got " + store.kind);
  }
  auto as_diffusion = store;
  as_diffusion.kind = "diffusion";
  auto net = diffusion::Model::from_store(as_diffusion);
  const int k = store.meta.at("condition_channels").get<int>();
  auto backbone = net.config();
  backbone.unet.in_channels -= k;
  ConcatBaselineModel m(backbone, k, net.latent_scale);
  m.net_ = std::move(net);
  return m;
}

torch::Tensor ConcatBaselineModel::eps(const torch::Tensor& z_t, const torch::Tensor& t, const torch::Tensor& c) {
  auto& unet = net_.unet();
  const auto dtype = unet->conv_in->weight.dtype();
  return unet->forward(torch::cat({z_t.to(dtype), c.to(dtype)}, 1), t).eps_hat.to(z_t.dtype());
}

std::vector<diffusion::LossLogRow> train_conditional(ConditionalDenoiser& model, const torch::Tensor& latents,
                                                     const torch::Tensor& conditions,
                                                     const ConditionalRunConfig& run) {
  if (latents.dim() != 5 || conditions.dim() != 5 || latents.size(0) < 1 ||
      latents.size(0) != conditions.size(0) || latents.sizes().slice(2) != conditions.sizes().slice(2)) {
    throw Error(ErrorCode::ShapeMismatch, "latents and conditions must pair up as (N, c, d, h, w) and (N, k, d, h, w)");
  }
  if (run.batch_size < 1 || run.steps < 0) throw Error(ErrorCode::InvalidArgument, "invalid batch size or step count");

  auto* zf = dynamic_cast<ZeroFusionModel*>(&model);
  const std::string frozen_before = zf ? module_checksum(*zf->frozen().unet()) : std::string();

  auto gen = make_generator(derive_seed(run.seed, "conditional-batches"));
  torch::optim::Adam opt(model.trainable_parameters(),
                         torch::optim::AdamOptions(run.lr).betas({0.9, 0.999}).eps(1e-8));
  const auto& s = model.schedule();
  const auto data = latents.to(torch::kFloat32);
  const auto cond = conditions.to(torch::kFloat32);
  const std::vector<std::int64_t> latent_shape(data.sizes().begin() + 1, data.sizes().end());
  std::vector<diffusion::LossLogRow> log;

  auto save = [&](std::int64_t step, const std::string& name) {
    if (run.out_dir.empty()) return;
    save_checkpoint(model.to_store(step), run.out_dir / (name + ".ckpt"));
    diffusion::write_loss_log(log, run.out_dir / (run.ckpt_name + "_loss.csv"));
  };

  for (int step = 0; step < run.steps; ++step) {
    const auto d = diffusion::draw_batch(data.size(0), run.batch_size, latent_shape, s.steps(), gen);
    const auto z0 = data.index_select(0, d.indices);
    const auto c = cond.index_select(0, d.indices);
    const auto z_t = diffusion::q_sample(z0, d.t, d.eps, s);
    const auto loss = torch::mse_loss(model.eps(z_t, d.t, c), d.eps);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      throw Error(ErrorCode::NonFiniteLoss, run.ckpt_name + " loss became non-finite at step " +
                                                std::to_string(step) + "; last good checkpoint retained");
    }
    double reference = std::numeric_limits<double>::quiet_NaN();
    if (zf) reference = torch::mse_loss(zf->frozen_eps(z_t, d.t), d.eps).item<double>();
    opt.zero_grad();
    loss.backward();
    opt.step();
    log.push_back({step, value, reference});
    if (run.checkpoint_interval > 0 && (step + 1) % run.checkpoint_interval == 0) {
      save(step + 1, run.ckpt_name + "_last");
    }
  }

  if (zf && module_checksum(*zf->frozen().unet()) != frozen_before) {
    throw Error(ErrorCode::FrozenWeightMutation, "frozen backbone weights changed during conditional training");
  }
  save(run.steps, run.ckpt_name);
  return log;
}

}  // namespace zeco::zerofusion
