#include <cmath>
#include <fstream>
#include <iomanip>

#include "zeco/error.hpp"
#include "zeco/seed.hpp"
#include "zeco/stm.hpp"

namespace zeco::stm {

namespace {

torch::Tensor batch_indices(std::int64_t n, int batch, torch::Generator& gen) {
  if (batch <= n) return torch::randperm(n, gen, torch::kInt64).slice(0, 0, batch);
  return torch::randint(0, n, {batch}, gen, torch::kInt64);
}

torch::Tensor flat_latents(const torch::Tensor& z) {
  return z.detach().permute({0, 2, 3, 4, 1}).reshape({-1, z.size(1)});
}

}  // namespace

torch::Tensor load_volume_batch(const DatasetManifest& manifest, const std::filesystem::path& manifest_dir) {
  std::vector<torch::Tensor> vols;
  for (const auto& e : manifest.entries) {
    vols.push_back(load_volume(resolve_entry_path(manifest_dir, e.volume_path)).data);
  }
  if (vols.empty()) throw Error(ErrorCode::InvalidArgument, "dataset is empty");
  return torch::stack(vols);
}

void write_stm_log(const std::vector<StmLogRow>& log, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "step,loss_total,loss_r,loss_a,loss_p,loss_cb,loss_cm,disc_loss\n" << std::setprecision(9);
  for (const auto& r : log) {
    os << r.step << ',' << r.loss_total << ',' << r.loss_r << ',' << r.loss_a << ',' << r.loss_p << ','
       << r.loss_cb << ',' << r.loss_cm << ',' << r.disc_loss << '\n';
  }
  write_text_atomic(path, os.str());
}

StmTrainResult train_stm(const torch::Tensor& volumes, const STMConfig& cfg, const StmRunConfig& run) {
  if (volumes.dim() != 5 || volumes.size(0) < 1) {
    throw Error(ErrorCode::InvalidArgument, "training set must be a nonempty (N, C, D, H, W) batch");
  }
  cfg.validate();
  cfg.check_input_shape({volumes.size(2), volumes.size(3), volumes.size(4)});
  if (run.batch_size < 1 || run.steps < 0) throw Error(ErrorCode::InvalidArgument, "invalid batch size or step count");

  torch::manual_seed(derive_seed(run.seed, "stm-init"));
  Model model(cfg);
  auto& ae = model.autoencoder();
  auto& disc = model.discriminator();
  auto gen = make_generator(derive_seed(run.seed, "stm-batches"));

  using torch::optim::Adam;
  using torch::optim::AdamOptions;
  Adam opt_g(ae->parameters(), AdamOptions(run.lr).betas({0.9, 0.999}).eps(1e-8));
  Adam opt_d(disc->parameters(), AdamOptions(run.disc_lr).betas({0.9, 0.999}).eps(1e-8));

  const auto n = volumes.size(0);
  std::vector<std::int64_t> last_used(static_cast<std::size_t>(cfg.codebook_size), 0);
  StmTrainResult result;

  auto save_last = [&](std::int64_t step) {
    if (run.out_dir.empty()) return;
    save_checkpoint(model.to_store(step), run.out_dir / "stm_last.ckpt");
    write_stm_log(result.log, run.out_dir / "stm_train.csv");
  };

  std::int64_t done = run.steps;
  for (int step = 0; step < run.steps; ++step) {
    const auto x = volumes.index_select(0, batch_indices(n, run.batch_size, gen));
    const auto z = ae->encoder(x);

    if (step == 0) {
      // Data-dependent codebook initialization from encoder outputs.
      torch::NoGradGuard no_grad;
      const auto flat = flat_latents(z);
      const auto pick = torch::randint(0, flat.size(0), {cfg.codebook_size}, gen, torch::kInt64);
      ae->codebook.copy_(flat.index_select(0, pick) + 1e-3 * torch::randn(ae->codebook.sizes(), gen));
    }

    const auto qr = quantize(z, ae->codebook);
    const auto x_rec = ae->decoder(qr.quantized);
    const auto real = disc(x);
    const auto fake = disc(x_rec);

    LossWeights w = cfg.loss_weights;
    if (step < run.warmup_steps) w.lambda_a = 0.0;
    const auto terms = stm_loss(x, x_rec, qr, real, fake, w);
    if (!std::isfinite(terms.total.item<double>())) {
      throw Error(ErrorCode::NonFiniteLoss, "stm loss became non-finite at step " + std::to_string(step) +
                                                "; last good checkpoint retained");
    }
    opt_g.zero_grad();
    terms.total.backward();
    opt_g.step();

    opt_d.zero_grad();
    const auto d_loss = discriminator_hinge_loss(real.logits, disc(x_rec.detach()).logits);
    d_loss.backward();
    opt_d.step();

    {
      torch::NoGradGuard no_grad;
      const auto used = std::get<0>(torch::_unique(qr.indices.flatten()));
      const auto* u = used.data_ptr<std::int64_t>();
      for (std::int64_t i = 0; i < used.numel(); ++i) last_used[static_cast<std::size_t>(u[i])] = step;
      const auto flat = flat_latents(z);
      for (std::size_t k = 0; k < last_used.size(); ++k) {
        if (step - last_used[k] >= run.dead_code_window) {
          const auto pick = torch::randint(0, flat.size(0), {1}, gen, torch::kInt64);
          ae->codebook[static_cast<std::int64_t>(k)].copy_(flat.index_select(0, pick)[0]);
          last_used[k] = step;
        }
      }
    }

    result.log.push_back({step, terms.total.item<double>(), terms.loss_r, terms.loss_a, terms.loss_p, terms.loss_cb,
                          terms.loss_cm, d_loss.item<double>()});
    if (run.checkpoint_interval > 0 && (step + 1) % run.checkpoint_interval == 0) save_last(step + 1);
    if (run.monitor && run.monitor_interval > 0 && (step + 1) % run.monitor_interval == 0 &&
        run.monitor(step + 1, model)) {
      done = step + 1;
      break;
    }
  }

  result.store = model.to_store(done);
  if (!run.out_dir.empty()) {
    save_checkpoint(result.store, run.out_dir / "stm.ckpt");
    write_stm_log(result.log, run.out_dir / "stm_train.csv");
  }
  return result;
}

StmTrainResult train_stm(const DatasetManifest& manifest, const std::filesystem::path& manifest_dir,
                         const STMConfig& cfg, const StmRunConfig& run) {
  return train_stm(load_volume_batch(manifest, manifest_dir), cfg, run);
}

}  // namespace zeco::stm
