#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "zeco/diffusion.hpp"
#include "zeco/error.hpp"
#include "zeco/seed.hpp"

namespace zeco::diffusion {

nlohmann::json DiffusionConfig::to_json() const {
  return {{"unet", unet.to_json()}, {"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
}

DiffusionConfig DiffusionConfig::from_json(const nlohmann::json& j) {
  DiffusionConfig c;
  c.unet = UNet3DConfig::from_json(j.at("unet"));
  c.T = j.at("T").get<int>();
  c.beta_start = j.at("beta_start").get<double>();
  c.beta_end = j.at("beta_end").get<double>();
  return c;
}

std::string DiffusionConfig::hash() const { return sha256_hex(to_json().dump()); }

Model::Model(DiffusionConfig cfg) : cfg_(std::move(cfg)), schedule_(cfg_.schedule()), unet_(UNet3D(cfg_.unet)) {}

Model Model::from_store(const ParameterStore& store) {
  if (store.kind != "diffusion") {
    throw Error(ErrorCode::InvalidArgument, "expected a diffusion checkpoint, got " + store.kind);
  }
  Model m(DiffusionConfig::from_json(store.meta.at("config")));
  if (m.cfg_.hash() != store.config_hash) {
    throw Error(ErrorCode::ConfigHashMismatch, "diffusion checkpoint config hash does not match its embedded config");
  }
  store.restore(*m.unet_, "unet.");
  m.latent_scale = store.meta.value("latent_scale", 1.0);
  m.parent_hash = store.parent_hash;
  return m;
}

ParameterStore Model::to_store(std::int64_t step) const {
  ParameterStore s;
  s.kind = "diffusion";
  s.config_hash = cfg_.hash();
  s.step = step;
  s.parent_hash = parent_hash;
  s.meta = {{"config", cfg_.to_json()}, {"latent_scale", latent_scale}};
  s.capture(*unet_, "unet.");
  return s;
}

DenoiserOutput Model::denoise(const LatentGrid& z_t, int t) {
  schedule_.check_step(t);
  torch::NoGradGuard no_grad;
  const auto x = z_t.batched().to(unet_->conv_in->weight.dtype());
  auto out = unet_->forward(x, torch::full({1}, t, torch::kInt64), true);
  out.eps_hat = out.eps_hat[0];
  return out;
}

torch::Tensor Model::eps(const torch::Tensor& z_t, int t) {
  schedule_.check_step(t);
  torch::NoGradGuard no_grad;
  const auto x = z_t.to(unet_->conv_in->weight.dtype());
  return unet_->forward(x, torch::full({x.size(0)}, t, torch::kInt64)).eps_hat.to(z_t.dtype());
}

LatentGrid Model::reverse_step(const LatentGrid& z_t, int t, torch::Generator& gen) {
  const auto e = eps(z_t.batched(), t);
  return {reverse_step_from_eps(z_t.batched(), e, t, schedule_, gen)[0]};
}

LatentGrid Model::sample_unconditional(const std::array<std::int64_t, 4>& shape, std::uint64_t seed) {
  const auto z = ancestral_sample({1, shape[0], shape[1], shape[2], shape[3]},
                                  [this](const torch::Tensor& z_t, int t) { return eps(z_t, t); }, schedule_, seed);
  return {z[0] / latent_scale};
}

TrainingDraw draw_batch(std::int64_t n, int batch, const std::vector<std::int64_t>& latent_shape, int T,
                        torch::Generator& gen) {
  TrainingDraw d;
  d.indices = batch <= n ? torch::randperm(n, gen, torch::kInt64).slice(0, 0, batch)
                         : torch::randint(0, n, {batch}, gen, torch::kInt64);
  d.t = torch::randint(0, T, {batch}, gen, torch::kInt64);
  std::vector<std::int64_t> shape{batch};
  shape.insert(shape.end(), latent_shape.begin(), latent_shape.end());
  d.eps = torch::randn(shape, gen, torch::kFloat32);
  return d;
}

void write_loss_log(const std::vector<LossLogRow>& log, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "step,loss,reference_loss\n" << std::setprecision(9);
  for (const auto& r : log) {
    os << r.step << ',' << r.loss << ',';
    if (std::isfinite(r.reference_loss)) os << r.reference_loss;
    os << '\n';
  }
  write_text_atomic(path, os.str());
}

DiffusionTrainResult train_diffusion(const torch::Tensor& latents, const DiffusionConfig& cfg,
                                     const DiffusionRunConfig& run, double latent_scale,
                                     const std::string& parent_hash) {
  if (latents.dim() != 5 || latents.size(0) < 1) {
    throw Error(ErrorCode::InvalidArgument, "training latents must be a nonempty (N, c, d, h, w) batch");
  }
  if (run.batch_size < 1 || run.steps < 0) throw Error(ErrorCode::InvalidArgument, "invalid batch size or step count");
  cfg.unet.check_input(latents);

  torch::manual_seed(derive_seed(run.seed, "diffusion-init"));
  Model model(cfg);
  model.latent_scale = latent_scale;
  model.parent_hash = parent_hash;
  auto gen = make_generator(derive_seed(run.seed, "diffusion-batches"));
  auto& unet = model.unet();
  torch::optim::Adam opt(unet->parameters(), torch::optim::AdamOptions(run.lr).betas({0.9, 0.999}).eps(1e-8));

  const auto& s = model.schedule();
  const std::vector<std::int64_t> latent_shape(latents.sizes().begin() + 1, latents.sizes().end());
  std::vector<LossLogRow> log;
  const auto data = latents.to(torch::kFloat32);

  for (int step = 0; step < run.steps; ++step) {
    const auto d = draw_batch(data.size(0), run.batch_size, latent_shape, cfg.T, gen);
    const auto z0 = data.index_select(0, d.indices);
    const auto z_t = q_sample(z0, d.t, d.eps, s);
    const auto loss = torch::mse_loss(unet->forward(z_t, d.t).eps_hat, d.eps);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      throw Error(ErrorCode::NonFiniteLoss, "diffusion loss became non-finite at step " + std::to_string(step) +
                                                "; last good checkpoint retained");
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    log.push_back({step, value, std::numeric_limits<double>::quiet_NaN()});
    if (!run.out_dir.empty() && run.checkpoint_interval > 0 && (step + 1) % run.checkpoint_interval == 0) {
      save_checkpoint(model.to_store(step + 1), run.out_dir / (run.ckpt_name + "_last.ckpt"));
      write_loss_log(log, run.out_dir / (run.ckpt_name + "_loss.csv"));
    }
  }

  if (!run.out_dir.empty()) {
    save_checkpoint(model.to_store(run.steps), run.out_dir / (run.ckpt_name + ".ckpt"));
    write_loss_log(log, run.out_dir / (run.ckpt_name + "_loss.csv"));
  }
  return {std::move(model), std::move(log)};
}

}  // namespace zeco::diffusion
