#include <doctest.h>

#include <cmath>
#include <fstream>

#include "test_util.hpp"
#include "zeco/seed.hpp"
#include "zeco/stm.hpp"

using namespace zeco;
using namespace zeco::stm;
using zeco::test::error_code_of;
using zeco::test::TempDir;

namespace {

STMConfig toy_config() {
  STMConfig c;
  c.in_channels = 1;
  c.base_channels = 1;
  c.channel_multipliers = {1, 1};
  c.res_blocks = 0;
  c.latent_channels = 2;
  c.embedding_dim = 2;
  c.codebook_size = 4;
  c.disc_base_channels = 1;
  c.disc_patch_level = 1;
  return c;
}

STMConfig small_config() {
  STMConfig c;
  c.base_channels = 4;
  c.channel_multipliers = {1, 2};
  c.codebook_size = 8;
  c.disc_base_channels = 4;
  c.disc_patch_level = 2;
  return c;
}

std::int64_t count_params(torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

// Exhaustive nearest neighbor, lowest index on ties, plain loops in double.
std::vector<std::int64_t> brute_force_nn(const torch::Tensor& flat, const torch::Tensor& entries) {
  const auto z = flat.to(torch::kFloat64).contiguous();
  const auto e = entries.to(torch::kFloat64).contiguous();
  const auto* zp = z.data_ptr<double>();
  const auto* ep = e.data_ptr<double>();
  const auto M = z.size(0), K = e.size(0), C = z.size(1);
  std::vector<std::int64_t> out(static_cast<std::size_t>(M));
  for (std::int64_t m = 0; m < M; ++m) {
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t k = 0; k < K; ++k) {
      double d = 0;
      for (std::int64_t c = 0; c < C; ++c) d += (zp[m * C + c] - ep[k * C + c]) * (zp[m * C + c] - ep[k * C + c]);
      if (d < best) {
        best = d;
        out[static_cast<std::size_t>(m)] = k;
      }
    }
  }
  return out;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  return 10.0 * std::log10(4.0 / mse);
}

}  // namespace

TEST_CASE("encode and decode shapes for the desk configuration") {
  torch::manual_seed(0);
  Model m(STMConfig{});
  Volume3D v{torch::zeros({1, 32, 32, 32}), {-1, 1}, "x", {}};
  const auto z = m.encode(v);
  CHECK(z.data.sizes() == torch::IntArrayRef({4, 8, 8, 8}));
  CHECK(torch::isfinite(z.data).all().item<bool>());
  const auto out = m.decode(LatentGrid{m.quantize(z).quantized.squeeze(0)});
  CHECK(out.data.sizes() == torch::IntArrayRef({1, 32, 32, 32}));
  CHECK(torch::equal(m.encode(v).data, z.data));
}

TEST_CASE("encode rejects extents not divisible by the downsampling factor") {
  torch::manual_seed(0);
  Model m(STMConfig{});
  Volume3D v{torch::zeros({1, 32, 30, 32}), {-1, 1}, "x", {}};
  try {
    m.encode(v);
    FAIL("expected a shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
    CHECK(std::string(e.what()).find("height") != std::string::npos);
  }
  CHECK(error_code_of([&] { m.decode(LatentGrid{torch::zeros({3, 8, 8, 8})}); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("config validation") {
  auto c = STMConfig{};
  c.embedding_dim = 5;
  CHECK(error_code_of([&] { c.validate(); }) == ErrorCode::InvalidArgument);
  c = STMConfig{};
  c.codebook_size = 1;
  CHECK(error_code_of([&] { c.validate(); }) == ErrorCode::InvalidArgument);
  c = STMConfig{};
  c.loss_weights.lambda_p = -1;
  CHECK(error_code_of([&] { c.validate(); }) == ErrorCode::InvalidArgument);
  CHECK(STMConfig::from_json(STMConfig{}.to_json()).hash() == STMConfig{}.hash());
}

TEST_CASE("decoder output stays within [-1, 1] for random parameters") {
  for (int s = 0; s < 3; ++s) {
    torch::manual_seed(s);
    Model m(small_config());
    for (auto& p : m.autoencoder()->decoder->parameters()) {
      torch::NoGradGuard ng;
      p.mul_(10.0);
    }
    const auto out = m.decode(LatentGrid{torch::randn({4, 8, 8, 8}) * 20});
    CHECK(out.data.min().item<float>() >= -1.0f);
    CHECK(out.data.max().item<float>() <= 1.0f);
  }
}

TEST_CASE("quantizer matches exhaustive nearest-neighbor search on 100 latents with K=64") {
  auto g = make_generator(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto entries = torch::randn({64, 4}, g);
    const auto z = torch::randn({1, 4, 2, 2, 2}, g);
    const auto r = quantize(z, entries);
    const auto flat = z.permute({0, 2, 3, 4, 1}).reshape({-1, 4});
    const auto expected = brute_force_nn(flat, entries);
    const auto idx = r.indices.flatten();
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(idx[static_cast<std::int64_t>(i)].item<std::int64_t>() == expected[i]);
    const auto qflat = r.quantized.permute({0, 2, 3, 4, 1}).reshape({-1, 4});
    CHECK(torch::allclose(qflat, entries.index_select(0, idx), 0, 1e-6));
  }
}

TEST_CASE("quantizer exact match and tie-breaking") {
  auto g = make_generator(6);
  auto entries = torch::randn({4, 3}, g);
  auto z = torch::randn({1, 3, 2, 2, 2}, g);
  z.select(0, 0).select(1, 0).select(1, 0).select(1, 0).copy_(entries[3]);
  auto r = quantize(z, entries);
  CHECK(r.indices[0][0][0][0].item<std::int64_t>() == 3);
  const auto per_pos_cb = (z - r.quantized).pow(2).sum(1);
  CHECK(per_pos_cb[0][0][0][0].item<float>() == 0.0f);

  entries[2].copy_(entries[1]);
  auto zt = entries[1].view({1, 3, 1, 1, 1}).clone();
  CHECK(quantize(zt, entries).indices.item<std::int64_t>() == 1);
  // equidistant between two distinct rows
  auto e2 = torch::tensor({{5.0f, 5.0f}, {-1.0f, 0.0f}, {1.0f, 0.0f}});
  auto mid = torch::zeros({1, 2, 1, 1, 1});
  CHECK(quantize(mid, e2).indices.item<std::int64_t>() == 1);
  CHECK(error_code_of([&] { quantize(torch::zeros({1, 2, 1, 1, 1}), entries); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("quantizer losses follow their definitions") {
  auto g = make_generator(7);
  const auto entries = torch::randn({8, 3}, g);
  const auto z = torch::randn({2, 3, 2, 2, 2}, g);
  const auto r = quantize(z, entries);
  const auto q = entries.index_select(0, r.indices.flatten()).view({2, 2, 2, 2, 3}).permute({0, 4, 1, 2, 3});
  const double expected = (z - q).pow(2).sum(1).mean().item<double>();
  CHECK(r.loss_cb.item<double>() == doctest::Approx(expected).epsilon(1e-6));
  CHECK(r.loss_cm.item<double>() == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("unused codebook rows receive zero gradient from loss_cb") {
  auto g = make_generator(8);
  auto entries = torch::randn({6, 2}, g);
  entries[5].fill_(100.0f);
  entries.set_requires_grad(true);
  const auto z = torch::randn({1, 2, 2, 2, 2}, g);
  const auto r = quantize(z, entries);
  REQUIRE_FALSE((r.indices == 5).any().item<bool>());
  r.loss_cb.backward();
  CHECK(entries.grad()[5].abs().max().item<float>() == 0.0f);
  for (std::int64_t k = 0; k < 5; ++k) {
    if ((r.indices == k).any().item<bool>()) CHECK(entries.grad()[k].abs().max().item<float>() > 0.0f);
    else CHECK(entries.grad()[k].abs().max().item<float>() == 0.0f);
  }
}

TEST_CASE("straight-through: gradient w.r.t. encoder output equals gradient w.r.t. quantized value") {
  torch::manual_seed(9);
  torch::nn::Conv3d enc(torch::nn::Conv3dOptions(1, 2, 3).padding(1));
  enc->to(torch::kFloat64);
  REQUIRE(count_params(*enc) <= 100);
  auto g = make_generator(10);
  const auto x = torch::randn({1, 1, 4, 4, 4}, g).to(torch::kFloat64);
  const auto entries = torch::randn({5, 2}, g).to(torch::kFloat64);
  const auto w = torch::randn({1, 2, 4, 4, 4}, g).to(torch::kFloat64);

  auto z = enc(x);
  z.retain_grad();
  const auto r = quantize(z, entries);
  (r.quantized * w).sum().backward();
  CHECK(torch::equal(z.grad(), w));

  // Finite differences with the straight-through offset held at its value at theta0.
  const auto offset = (r.quantized - z).detach();
  const double h = 1e-6;
  for (auto& p : enc->parameters()) {
    auto flat = p.data().view({-1});
    const auto grad = p.grad().view({-1});
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      torch::NoGradGuard ng;
      const double orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double fp = ((enc(x) + offset) * w).sum().item<double>();
      flat[i] = orig - h;
      const double fm = ((enc(x) + offset) * w).sum().item<double>();
      flat[i] = orig;
      CHECK(rel_err(grad[i].item<double>(), (fp - fm) / (2 * h)) <= 1e-3);
    }
  }
}

TEST_CASE("stm loss is the weighted sum of its terms") {
  auto g = make_generator(11);
  torch::manual_seed(11);
  Model m(small_config());
  const auto v = torch::rand({2, 1, 16, 16, 16}, g) * 2 - 1;
  auto& ae = m.autoencoder();
  const auto z = ae->encoder(v);
  const auto qr = quantize(z, ae->codebook);
  const auto rec = ae->decoder(qr.quantized);
  const auto real = m.discriminator()(v);
  const auto fake = m.discriminator()(rec);

  LossWeights w{0.3, 0.7, 1.1, 0.25};
  const auto t = stm_loss(v, rec, qr, real, fake, w);
  const double expected = t.loss_r + 0.3 * t.loss_a + 0.7 * t.loss_p + 1.1 * t.loss_cb + 0.25 * t.loss_cm;
  CHECK(t.total.item<double>() == doctest::Approx(expected).epsilon(1e-6));
  CHECK(t.loss_r == doctest::Approx((v - rec).abs().mean().item<double>()).epsilon(1e-6));
  CHECK(t.loss_a == doctest::Approx(-fake.logits.mean().item<double>()).epsilon(1e-6));

  const auto zero = stm_loss(v, rec, qr, real, fake, LossWeights{0, 0, 0, 0});
  CHECK(zero.total.item<double>() == doctest::Approx(zero.loss_r).epsilon(1e-9));

  // linear in lambda_a
  LossWeights w2 = w;
  w2.lambda_a *= 2;
  const double d1 = t.total.item<double>() - stm_loss(v, rec, qr, real, fake, LossWeights{0, 0.7, 1.1, 0.25}).total.item<double>();
  const double d2 = stm_loss(v, rec, qr, real, fake, w2).total.item<double>() -
                    stm_loss(v, rec, qr, real, fake, LossWeights{0, 0.7, 1.1, 0.25}).total.item<double>();
  CHECK(d2 == doctest::Approx(2 * d1).epsilon(1e-5));

  // identical input and reconstruction with adversarial terms off: only quantization terms remain
  const auto same = stm_loss(v, v, qr, real, real, LossWeights{0, 0, 1.1, 0.25});
  CHECK(same.loss_r == 0.0);
  CHECK(same.total.item<double>() == doctest::Approx(1.1 * same.loss_cb + 0.25 * same.loss_cm).epsilon(1e-6));

  CHECK(error_code_of([&] { stm_loss(v, rec, qr, real, fake, LossWeights{-1, 0, 0, 0}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("discriminator hinge loss") {
  const auto real = torch::tensor({2.0f, 0.5f});
  const auto fake = torch::tensor({-2.0f, 0.0f});
  CHECK(discriminator_hinge_loss(real, fake).item<float>() == doctest::Approx(0.25 + 0.5));
}

TEST_CASE("discriminator logit grid and receptive-field locality") {
  torch::manual_seed(12);
  STMConfig c;
  c.disc_base_channels = 4;
  Model m(c);
  auto g = make_generator(13);
  Volume3D v{torch::rand({1, 32, 32, 32}, g) * 2 - 1, {-1, 1}, "x", {}};
  const auto a = m.discriminate(v);
  CHECK(a.sizes() == torch::IntArrayRef({4, 4, 4}));
  CHECK(torch::equal(a, m.discriminate(v)));

  // Input interval feeding output position o: walk back through the head (k3 p1 s1)
  // and disc_patch_level stride-2 k4 p1 stages.
  auto first_input = [&](std::int64_t o) {
    std::int64_t lo = o - 1;
    for (int s = 0; s < c.disc_patch_level; ++s) lo = 2 * lo - 1;
    return lo;
  };
  auto w = v;
  w.data = v.data.clone();
  w.data[0][0][0][0] += 1.0f;
  const auto b = m.discriminate(w);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j)
      for (std::int64_t k = 0; k < 4; ++k) {
        const bool outside = first_input(i) > 0 || first_input(j) > 0 || first_input(k) > 0;
        if (outside) CHECK(a[i][j][k].item<float>() == b[i][j][k].item<float>());
      }
  CHECK(a[0][0][0].item<float>() != b[0][0][0].item<float>());
}

TEST_CASE("stm loss gradients match central finite differences on a toy autoencoder") {
  const auto cfg = toy_config();
  torch::manual_seed(14);
  Model m(cfg);
  auto& ae = m.autoencoder();
  auto& disc = m.discriminator();
  ae->to(torch::kFloat64);
  disc->to(torch::kFloat64);
  REQUIRE(count_params(*ae) + count_params(*disc) <= 1000);

  auto g = make_generator(15);
  const auto x = (torch::rand({1, 1, 8, 8, 8}, g) * 2 - 1).to(torch::kFloat64);
  {
    // spread the codebook over actual encoder outputs so several codes are in use
    torch::NoGradGuard ng;
    const auto z = ae->encoder(x).permute({0, 2, 3, 4, 1}).reshape({-1, 2});
    ae->codebook.copy_(z.index_select(0, torch::tensor({0, 9, 23, 41}, torch::kInt64)) + 0.01);
  }
  const LossWeights w{0.1, 1.0, 1.0, 0.25};

  // analytic
  for (auto& p : ae->parameters()) p.mutable_grad() = torch::Tensor();
  for (auto& p : disc->parameters()) p.mutable_grad() = torch::Tensor();
  const auto z0 = ae->encoder(x);
  const auto qr = quantize(z0, ae->codebook);
  const auto real0 = disc(x);
  const auto loss0 = stm_loss(x, ae->decoder(qr.quantized), qr, real0, disc(ae->decoder(qr.quantized)), w);
  loss0.total.backward();

  // surrogate with assignments, straight-through offset and stop-gradient operands frozen at theta0
  const auto idx = qr.indices.flatten();
  const auto z0d = z0.detach();
  const auto q0 = (qr.quantized - z0).detach() + z0d;
  std::vector<torch::Tensor> real_feats;
  for (const auto& f : real0.features) real_feats.push_back(f.detach());
  auto surrogate = [&]() {
    torch::NoGradGuard ng;
    const auto z = ae->encoder(x);
    QuantizationResult s;
    s.indices = qr.indices;
    s.quantized = z + (q0 - z0d);
    const auto q_now = ae->codebook.index_select(0, idx).view({1, 4, 4, 4, 2}).permute({0, 4, 1, 2, 3});
    s.loss_cb = (z0d - q_now).pow(2).sum(1).mean();
    s.loss_cm = (z - q0).pow(2).sum(1).mean();
    const auto rec = ae->decoder(s.quantized);
    DiscriminatorOutput real;
    real.features = real_feats;
    real.logits = real0.logits.detach();
    return stm_loss(x, rec, s, real, disc(rec), w).total.item<double>();
  };
  CHECK(surrogate() == doctest::Approx(loss0.total.item<double>()).epsilon(1e-12));

  const double h = 1e-6;
  int checked = 0;
  double worst = 0;
  auto sweep = [&](torch::nn::Module& mod) {
    for (auto& p : mod.parameters()) {
      REQUIRE(p.grad().defined());
      auto flat = p.data().view({-1});
      const auto grad = p.grad().view({-1});
      for (std::int64_t i = 0; i < flat.numel(); ++i) {
        const double orig = flat[i].item<double>();
        flat[i] = orig + h;
        const double fp = surrogate();
        flat[i] = orig - h;
        const double fm = surrogate();
        flat[i] = orig;
        const double e = rel_err(grad[i].item<double>(), (fp - fm) / (2 * h));
        worst = std::max(worst, e);
        CHECK(e <= 1e-3);
        ++checked;
      }
    }
  };
  sweep(*ae);
  sweep(*disc);
  MESSAGE("checked " << checked << " gradient entries, worst relative error " << worst);
}

TEST_CASE("one training step is deterministic and warmup disables the adversarial term") {
  auto g = make_generator(16);
  const auto vols = torch::rand({3, 1, 16, 16, 16}, g) * 2 - 1;
  auto cfg = small_config();
  StmRunConfig run;
  run.steps = 2;
  run.batch_size = 2;
  run.warmup_steps = 2;
  run.seed = 4;
  const auto a = train_stm(vols, cfg, run);
  const auto b = train_stm(vols, cfg, run);
  CHECK(a.store.checksum() == b.store.checksum());
  CHECK(a.log.size() == 2);

  auto cfg0 = cfg;
  cfg0.loss_weights.lambda_a = 0;
  auto run0 = run;
  run0.warmup_steps = 0;
  const auto c = train_stm(vols, cfg0, run0);
  auto ae_a = Model::from_store(a.store).autoencoder();
  auto ae_c = Model::from_store(c.store).autoencoder();
  CHECK(module_checksum(*ae_a) == module_checksum(*ae_c));

  auto run_adv = run;
  run_adv.warmup_steps = 0;
  const auto d = train_stm(vols, cfg, run_adv);
  CHECK(module_checksum(*Model::from_store(d.store).autoencoder()) != module_checksum(*ae_a));
}

TEST_CASE("training writes checkpoints and log, and keeps the last good checkpoint on NaN") {
  TempDir dir("stmtrain");
  auto g = make_generator(17);
  auto vols = torch::rand({2, 1, 16, 16, 16}, g) * 2 - 1;
  StmRunConfig run;
  run.steps = 2;
  run.batch_size = 1;
  run.checkpoint_interval = 1;
  run.out_dir = dir.path();
  train_stm(vols, small_config(), run);
  CHECK(std::filesystem::exists(dir / "stm.ckpt"));
  REQUIRE(std::filesystem::exists(dir / "stm_last.ckpt"));
  const auto before = load_checkpoint(dir / "stm_last.ckpt").checksum();
  const auto m = Model::from_store(load_checkpoint(dir / "stm.ckpt", small_config().hash()));
  CHECK(m.config().hash() == small_config().hash());

  std::ifstream csv(dir / "stm_train.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,loss_total,loss_r,loss_a,loss_p,loss_cb,loss_cm,disc_loss");

  vols[0][0][1][1][1] = std::numeric_limits<float>::quiet_NaN();
  vols[1][0][1][1][1] = std::numeric_limits<float>::quiet_NaN();
  CHECK(error_code_of([&] { train_stm(vols, small_config(), run); }) == ErrorCode::NonFiniteLoss);
  CHECK(load_checkpoint(dir / "stm_last.ckpt").checksum() == before);
}

TEST_CASE("overfitting a single volume reaches 35 dB") {
  PhantomSpec spec;
  spec.grid_shape = {16, 16, 16};
  spec.head_axes = {6, 7, 6.5};
  spec.tumor_radius_range = {2, 3};
  const auto vol = normalize(generate_phantom(spec, 3).first).data.unsqueeze(0);
  STMConfig cfg;
  cfg.base_channels = 8;
  cfg.disc_base_channels = 8;
  cfg.disc_patch_level = 2;
  StmRunConfig run;
  run.steps = 3000;
  run.batch_size = 1;
  run.seed = 1;
  run.monitor_interval = 100;
  double best = 0;
  run.monitor = [&](std::int64_t, Model& m) {
    best = std::max(best, psnr(m.reconstruct(vol), vol));
    return best >= 35.0;
  };
  train_stm(vol, cfg, run);
  MESSAGE("single-volume reconstruction PSNR " << best);
  CHECK(best >= 35.0);
}
