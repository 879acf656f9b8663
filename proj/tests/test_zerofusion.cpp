#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "zeco/seed.hpp"
#include "zeco/zerofusion.hpp"

using namespace zeco;
using namespace zeco::zerofusion;
using zeco::test::error_code_of;
using zeco::test::TempDir;

namespace {

diffusion::DiffusionConfig tiny_backbone() {
  diffusion::DiffusionConfig c;
  c.T = 20;
  auto& u = c.unet;
  u.base_channels = 4;
  u.channel_multipliers = {1, 1, 1, 1};
  u.downsample = {false, false, false};
  u.res_blocks = 1;
  u.mid_res_blocks = 1;
  u.time_embedding_dim = 8;
  u.in_channels = u.out_channels = 2;
  return c;
}

diffusion::Model make_backbone(std::uint64_t seed, const diffusion::DiffusionConfig& cfg = tiny_backbone()) {
  torch::manual_seed(seed);
  return diffusion::Model(cfg);
}

// Trilinear weights of one axis, align_corners = false.
std::vector<std::tuple<std::int64_t, std::int64_t, double>> axis_weights(std::int64_t in, std::int64_t out) {
  std::vector<std::tuple<std::int64_t, std::int64_t, double>> w;
  const double scale = static_cast<double>(in) / out;
  for (std::int64_t i = 0; i < out; ++i) {
    double src = std::max(0.0, scale * (i + 0.5) - 0.5);
    const auto i0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(src)), in - 1);
    const auto i1 = std::min<std::int64_t>(i0 + 1, in - 1);
    w.emplace_back(i0, i1, src - i0);
  }
  return w;
}

void set_random(ZeroModule& m, torch::Generator& g) {
  torch::NoGradGuard ng;
  m->conv->weight.copy_(torch::randn(m->conv->weight.sizes(), g));
  m->conv->bias.copy_(torch::randn(m->conv->bias.sizes(), g));
}

}  // namespace

TEST_CASE("zero modules start at exactly zero") {
  ZeroModule m(5, 3);
  CHECK(m->conv->weight.abs().max().item<float>() == 0.0f);
  CHECK(m->conv->bias.abs().max().item<float>() == 0.0f);
  CHECK(m->conv->weight.sizes() == torch::IntArrayRef({3, 5, 1, 1, 1}));
}

TEST_CASE("condition encoding examples") {
  SegMask3D background{torch::zeros({8, 8, 8}, torch::kUInt8), 3};
  const auto e = encode_condition(background, {2, 2, 2});
  CHECK(e.data.sizes() == torch::IntArrayRef({3, 2, 2, 2}));
  CHECK(torch::equal(e.data[0], torch::ones({2, 2, 2})));
  CHECK(e.data.slice(0, 1).abs().max().item<float>() == 0.0f);

  // half of the first 4^3 cell labelled 1
  auto labels = torch::zeros({8, 8, 8}, torch::kUInt8);
  labels.slice(0, 0, 2).slice(1, 0, 4).slice(2, 0, 4).fill_(1);
  labels[7][7][7] = 2;
  const auto h = encode_condition(SegMask3D{labels, 3}, {2, 2, 2}).data;
  CHECK(h[1][0][0][0].item<float>() == 0.5f);
  CHECK(h[0][0][0][0].item<float>() == 0.5f);
  CHECK(h[2][1][1][1].item<float>() == doctest::Approx(1.0 / 64));
  CHECK(torch::allclose(h.sum(0), torch::ones({2, 2, 2})));

  auto g = make_generator(1);
  const auto random = torch::randint(0, 4, {2, 16, 16, 16}, g, torch::kInt64).to(torch::kUInt8);
  const auto batched = encode_condition(random, 4, {4, 4, 4});
  CHECK(torch::allclose(batched.sum(1), torch::ones({2, 4, 4, 4}), 0, 1e-6));
  CHECK(torch::equal(batched[1], encode_condition(SegMask3D{random[1], 4}, {4, 4, 4}).data));
  // per-cell count oracle
  const auto cell = random[0].slice(0, 4, 8).slice(1, 8, 12).slice(2, 0, 4);
  CHECK(batched[0][3][1][2][0].item<float>() ==
        doctest::Approx((cell == 3).sum().item<double>() / 64.0));

  CHECK(error_code_of([&] { encode_condition(random, 4, {3, 4, 4}); }) == ErrorCode::ShapeMismatch);
  CHECK(error_code_of([&] { encode_condition(random, 3, {4, 4, 4}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("fuse with a zero output module returns the frozen prediction bit for bit") {
  auto g = make_generator(2);
  ZeroModule h_in(3, 3), h_out(3, 2);
  set_random(h_in, g);
  const auto eps = torch::randn({2, 2, 4, 4, 4}, g);
  const ControlFeatures f{torch::randn({2, 3, 2, 2, 2}, g), torch::randn({2, 3, 2, 2, 2}, g)};
  CHECK(torch::equal(fuse(eps, f, h_in, h_out), eps));
}

TEST_CASE("fuse with zero input module reduces to eps + up(h_out(f_d))") {
  auto g = make_generator(3);
  ZeroModule h_in(3, 3), h_out(3, 2);
  set_random(h_out, g);
  const auto eps = torch::randn({1, 2, 4, 4, 4}, g);
  const ControlFeatures f{torch::randn({1, 3, 4, 4, 4}, g), torch::randn({1, 3, 4, 4, 4}, g)};
  const auto expected = eps + h_out(f.f_d);
  CHECK(torch::allclose(fuse(eps, f, h_in, h_out), expected, 0, 1e-6));
}

TEST_CASE("fuse equals an explicit-loop evaluation of the fusion formula") {
  auto g = make_generator(4);
  const std::int64_t Cd = 3, Cm = 3, C = 2, s = 2, S = 4;
  ZeroModule h_in(Cm, Cd), h_out(Cd, C);
  set_random(h_in, g);
  set_random(h_out, g);
  const auto eps = torch::randn({1, C, S, S, S}, g, torch::kFloat32);
  const ControlFeatures f{torch::randn({1, Cd, s, s, s}, g), torch::randn({1, Cm, s, s, s}, g)};
  const auto got = fuse(eps, f, h_in, h_out).to(torch::kFloat64);

  const auto Wi = h_in->conv->weight.to(torch::kFloat64).view({Cd, Cm});
  const auto bi = h_in->conv->bias.to(torch::kFloat64);
  const auto Wo = h_out->conv->weight.to(torch::kFloat64).view({C, Cd});
  const auto bo = h_out->conv->bias.to(torch::kFloat64);
  const auto fd = f.f_d.to(torch::kFloat64)[0];
  const auto fm = f.f_m.to(torch::kFloat64)[0];
  std::vector<double> low(static_cast<std::size_t>(C * s * s * s));
  for (std::int64_t o = 0; o < C; ++o)
    for (std::int64_t z = 0; z < s; ++z)
      for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x) {
          double acc = bo[o].item<double>();
          for (std::int64_t c = 0; c < Cd; ++c) {
            double inner = fd[c][z][y][x].item<double>() + bi[c].item<double>();
            for (std::int64_t m = 0; m < Cm; ++m) inner += Wi[c][m].item<double>() * fm[m][z][y][x].item<double>();
            acc += Wo[o][c].item<double>() * inner;
          }
          low[static_cast<std::size_t>(((o * s + z) * s + y) * s + x)] = acc;
        }
  const auto w = axis_weights(s, S);
  double worst = 0;
  for (std::int64_t o = 0; o < C; ++o)
    for (std::int64_t z = 0; z < S; ++z)
      for (std::int64_t y = 0; y < S; ++y)
        for (std::int64_t x = 0; x < S; ++x) {
          double up = 0;
          const auto [z0, z1, lz] = w[static_cast<std::size_t>(z)];
          const auto [y0, y1, ly] = w[static_cast<std::size_t>(y)];
          const auto [x0, x1, lx] = w[static_cast<std::size_t>(x)];
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int c = 0; c < 2; ++c) {
                const double wt = (a ? lz : 1 - lz) * (b ? ly : 1 - ly) * (c ? lx : 1 - lx);
                const auto zi = a ? z1 : z0, yi = b ? y1 : y0, xi = c ? x1 : x0;
                up += wt * low[static_cast<std::size_t>(((o * s + zi) * s + yi) * s + xi)];
              }
          const double expected = eps[0][o][z][y][x].item<double>() + up;
          worst = std::max(worst, std::abs(got[0][o][z][y][x].item<double>() - expected));
        }
  CHECK(worst <= 1e-5);
}

TEST_CASE("fuse is affine in the output module parameters") {
  auto g = make_generator(5);
  ZeroModule h_in(3, 3), a(3, 2), b(3, 2), mid(3, 2);
  set_random(h_in, g);
  set_random(a, g);
  set_random(b, g);
  {
    torch::NoGradGuard ng;
    mid->conv->weight.copy_(0.25 * a->conv->weight + 0.75 * b->conv->weight);
    mid->conv->bias.copy_(0.25 * a->conv->bias + 0.75 * b->conv->bias);
  }
  const auto eps = torch::randn({1, 2, 2, 2, 2}, g);
  const ControlFeatures f{torch::randn({1, 3, 2, 2, 2}, g), torch::randn({1, 3, 2, 2, 2}, g)};
  const auto lhs = fuse(eps, f, h_in, mid);
  const auto rhs = 0.25 * fuse(eps, f, h_in, a) + 0.75 * fuse(eps, f, h_in, b);
  CHECK(torch::allclose(lhs, rhs, 1e-5, 1e-5));

  const ControlFeatures bad{torch::randn({1, 3, 2, 2, 2}, g), torch::randn({1, 3, 1, 2, 2}, g)};
  CHECK(error_code_of([&] { fuse(eps, bad, h_in, a); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("control branch copies the frozen down path and middle block") {
  auto frozen = make_backbone(6);
  ZeroFusionModel zf(frozen, 3);
  auto& branch = zf.branch();
  const auto fp = frozen.unet()->named_parameters();
  int copied = 0;
  for (const auto& item : branch->named_parameters()) {
    const auto& key = item.key();
    if (key.rfind("down.", 0) == 0 || key.rfind("mid.", 0) == 0 || key.rfind("time_mlp.", 0) == 0) {
      REQUIRE(fp.contains(key));
      CHECK(torch::equal(item.value(), fp[key]));
      ++copied;
    }
  }
  CHECK(copied > 0);

  auto g = make_generator(7);
  const auto z = torch::randn({2, 2, 4, 4, 4}, g);
  const auto t = torch::tensor({1, 7}, torch::kInt64);
  const auto c = torch::rand({2, 3, 4, 4, 4}, g);
  const auto a = branch->forward(z, t, c);
  const auto b = branch->forward(z, t, c);
  CHECK(torch::equal(a.f_d, b.f_d));
  CHECK(a.f_d.sizes() == torch::IntArrayRef({2, 4, 4, 4, 4}));
  CHECK(a.f_m.sizes() == a.f_d.sizes());
  CHECK_FALSE(torch::equal(branch->forward(z, t, torch::rand({2, 3, 4, 4, 4}, g)).f_d, a.f_d));
  CHECK(error_code_of([&] { branch->forward(z, t, torch::rand({2, 2, 4, 4, 4}, g)); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("deepest feature shape follows the downsampling table") {
  auto cfg = tiny_backbone();
  cfg.unet.downsample = {true, true, true};
  auto frozen = make_backbone(8, cfg);
  ZeroFusionModel zf(frozen, 2);
  auto g = make_generator(9);
  const auto z = torch::randn({1, 2, 8, 8, 8}, g);
  const auto c = torch::rand({1, 2, 8, 8, 8}, g);
  const auto f = zf.branch()->forward(z, torch::tensor({3}, torch::kInt64), c);
  CHECK(f.f_d.sizes() == torch::IntArrayRef({1, 4, 1, 1, 1}));
  CHECK(f.f_m.sizes() == f.f_d.sizes());
  const auto e = zf.eps(z, torch::tensor({3}, torch::kInt64), c);
  CHECK(e.sizes() == z.sizes());
  CHECK(torch::equal(e, zf.frozen_eps(z, torch::tensor({3}, torch::kInt64))));
}

TEST_CASE("freshly initialized conditional sampling equals unconditional sampling") {
  auto frozen = make_backbone(10);
  frozen.latent_scale = 1.3;
  ZeroFusionModel zf(frozen, 3);
  auto labels = torch::zeros({8, 8, 8}, torch::kUInt8);
  labels.slice(0, 2, 6).slice(1, 2, 6).slice(2, 2, 6).fill_(1);
  const auto c = encode_condition(SegMask3D{labels, 3}, {4, 4, 4});
  for (std::uint64_t seed : {0ULL, 1ULL, 99ULL}) {
    const auto cond = zf.sample(c, 2, seed);
    const auto uncond = frozen.sample_unconditional({2, 4, 4, 4}, seed);
    CHECK(torch::equal(cond.data, uncond.data));
  }
  CHECK(torch::equal(zf.sample(c, 2, 5).data, zf.sample(c, 2, 5).data));
}

TEST_CASE("conditional training: identity at step 0, frozen weights untouched, gradients reach h_out") {
  TempDir dir("zf");
  auto frozen = make_backbone(11);
  const auto before = module_checksum(*frozen.unet());
  const auto store_before = frozen.to_store().checksum();
  torch::manual_seed(12);
  ZeroFusionModel zf(frozen, 3);

  auto g = make_generator(13);
  const auto latents = torch::randn({8, 2, 4, 4, 4}, g);
  const auto labels = torch::randint(0, 3, {8, 8, 8, 8}, g, torch::kInt64).to(torch::kUInt8);
  const auto cond = encode_condition(labels, 3, {4, 4, 4});

  {
    const auto z = torch::randn({4, 2, 4, 4, 4}, g);
    const auto t = torch::tensor({0, 5, 10, 19}, torch::kInt64);
    const auto target = torch::randn({4, 2, 4, 4, 4}, g);
    const auto loss = torch::mse_loss(zf.eps(z, t, cond.slice(0, 0, 4)), target);
    loss.backward();
    const auto& h_out = zf.branch()->h_out->conv;
    CHECK(h_out->weight.grad().abs().max().item<float>() > 0.0f);
    CHECK(h_out->bias.grad().abs().max().item<float>() > 0.0f);
    for (const auto& p : frozen.unet()->parameters()) CHECK_FALSE(p.grad().defined());
    for (auto& p : zf.branch()->parameters()) p.mutable_grad() = torch::Tensor();
  }

  ConditionalRunConfig run;
  run.steps = 100;
  run.batch_size = 4;
  run.lr = 1e-3;
  run.seed = 3;
  run.checkpoint_interval = 50;
  run.out_dir = dir.path();
  const auto log = train_conditional(zf, latents, cond, run);
  REQUIRE(log.size() == 100);
  CHECK(log[0].loss == log[0].reference_loss);
  CHECK(module_checksum(*frozen.unet()) == before);
  CHECK(zf.frozen().to_store().checksum() == store_before);
  CHECK(zf.branch()->h_out->conv->weight.abs().max().item<float>() > 0.0f);
  CHECK(std::filesystem::exists(dir / "zerofusion_last.ckpt"));
  CHECK(std::filesystem::exists(dir / "zerofusion_loss.csv"));

  // reload against the right backbone, refuse a different one
  const auto store = load_checkpoint(dir / "zerofusion.ckpt");
  CHECK(store.frozen_backbone_hash == store_before);
  auto back = ZeroFusionModel::from_store(store, frozen);
  const auto z = torch::randn({1, 2, 4, 4, 4}, g);
  const auto t = torch::tensor({4}, torch::kInt64);
  {
    torch::NoGradGuard ng;
    CHECK(torch::equal(back.eps(z, t, cond.slice(0, 0, 1)), zf.eps(z, t, cond.slice(0, 0, 1))));
  }
  auto other = make_backbone(999);
  CHECK(error_code_of([&] { ZeroFusionModel::from_store(store, other); }) == ErrorCode::BackboneMismatch);
}

TEST_CASE("conditional branch learns what the frozen model cannot") {
  // Latent mean is set by the condition, which the frozen model never sees.
  auto g = make_generator(14);
  const auto labels = torch::randint(0, 2, {16, 1, 1, 1}, g, torch::kInt64).to(torch::kUInt8).expand({16, 4, 4, 4});
  const auto cond = encode_condition(labels.contiguous(), 2, {4, 4, 4});
  const auto latents = (cond.slice(1, 1, 2) * 2.0 - 1.0).expand({16, 2, 4, 4, 4}) + 0.1 * torch::randn({16, 2, 4, 4, 4}, g);

  auto cfg = tiny_backbone();
  diffusion::DiffusionRunConfig brun;
  brun.steps = 300;
  brun.lr = 2e-3;
  brun.seed = 1;
  auto backbone = diffusion::train_diffusion(latents, cfg, brun).model;
  torch::manual_seed(15);
  ZeroFusionModel zf(backbone, 2);
  ConditionalRunConfig run;
  run.steps = 400;
  run.lr = 2e-3;
  run.seed = 2;
  const auto log = train_conditional(zf, latents, cond, run);
  double loss = 0, ref = 0;
  for (std::size_t i = log.size() - 100; i < log.size(); ++i) {
    loss += log[i].loss;
    ref += log[i].reference_loss;
  }
  MESSAGE("last 100 steps: conditional " << loss / 100 << ", frozen " << ref / 100);
  CHECK(loss < ref);
}

TEST_CASE("concatenation baseline") {
  auto cfg = tiny_backbone();
  torch::manual_seed(16);
  ConcatBaselineModel base(cfg, 3, 0.8);
  auto g = make_generator(17);
  const auto z = torch::randn({2, 2, 4, 4, 4}, g);
  const auto c = torch::rand({2, 3, 4, 4, 4}, g);
  const auto t = torch::tensor({0, 9}, torch::kInt64);
  const auto e = base.eps(z, t, c);
  CHECK(e.sizes() == z.sizes());
  CHECK(base.latent_scale() == 0.8);

  const auto store = base.to_store(7);
  CHECK(store.kind == "concat_baseline");
  auto back = ConcatBaselineModel::from_store(store);
  CHECK(back.condition_channels() == 3);
  CHECK(torch::equal(back.eps(z, t, c), e));
  CHECK(back.to_store(7).checksum() == store.checksum());
}

TEST_CASE("condition modes") {
  for (auto m : {ConditionMode::zerofusion, ConditionMode::concat_baseline, ConditionMode::none}) {
    CHECK(parse_condition_mode(to_string(m)) == m);
  }
  CHECK(error_code_of([] { parse_condition_mode("controlnet"); }) == ErrorCode::InvalidArgument);
}
