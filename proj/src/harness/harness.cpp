#include "zeco/harness.hpp"

#include <cstdio>
#include <iostream>

#include "zeco/checkpoint.hpp"
#include "zeco/error.hpp"
#include "zeco/seed.hpp"

namespace zeco::harness {

namespace {

Layout layout(const RunConfig& cfg) { return {cfg.out_dir()}; }

DatasetManifest require_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::IoError, "dataset manifest " + path.string() + " not found; run make-phantoms first");
  }
  return DatasetManifest::load(path);
}

std::array<std::int64_t, 3> latent_spatial(const stm::Model& stm, const std::array<std::int64_t, 3>& grid) {
  const int f = stm.config().downsample_factor();
  return {grid[0] / f, grid[1] / f, grid[2] / f};
}

std::string numbered(const char* prefix, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu%s", prefix, i, ext);
  return buf;
}

}  // namespace

torch::Tensor encode_latents(stm::Model& stm, const torch::Tensor& volumes) {
  return stm.encode_quantized(volumes).to(torch::kFloat32);
}

double latent_scale_for(const torch::Tensor& latents) {
  const double sd = latents.to(torch::kFloat64).std().item<double>();
  return sd > 0 ? 1.0 / sd : 1.0;
}

Volume3D decode_latent(stm::Model& stm, const LatentGrid& z) {
  const auto q = stm.quantize(z);
  return stm.decode({q.quantized[0]});
}

std::pair<torch::Tensor, int> load_mask_batch(const DatasetManifest& manifest, const std::filesystem::path& dir) {
  std::vector<torch::Tensor> labels;
  int k = 1;
  for (const auto& e : manifest.entries) {
    const auto m = load_mask(resolve_entry_path(dir, e.mask_path));
    labels.push_back(m.labels);
    k = std::max(k, m.num_classes);
  }
  if (labels.empty()) throw Error(ErrorCode::InvalidArgument, "dataset has no masks");
  return {torch::stack(labels), k};
}

ParameterStore require_checkpoint(const std::filesystem::path& path,
                                  const std::optional<std::string>& expected_config_hash) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::MissingCheckpoint, "missing checkpoint " + path.string());
  }
  return load_checkpoint(path, expected_config_hash);
}

stm::Model load_stm(const RunConfig& cfg, std::string* checksum) {
  const auto store = require_checkpoint(layout(cfg).checkpoints() / "stm.ckpt", cfg.stm().hash());
  if (checksum) *checksum = store.checksum();
  return stm::Model::from_store(store);
}

diffusion::Model load_diffusion(const RunConfig& cfg, const std::string& stm_checksum) {
  const auto store = require_checkpoint(layout(cfg).checkpoints() / "diffusion.ckpt", cfg.diffusion().hash());
  if (store.parent_hash != stm_checksum) {
    throw Error(ErrorCode::ConfigHashMismatch,
                "diffusion checkpoint was trained on latents of a different stm checkpoint; retrain the diffusion stage");
  }
  return diffusion::Model::from_store(store);
}

std::unique_ptr<zerofusion::ConditionalDenoiser> load_conditional(const RunConfig& cfg, const diffusion::Model& frozen,
                                                                  int condition_channels) {
  const auto dir = layout(cfg).checkpoints();
  switch (cfg.condition_mode()) {
    case zerofusion::ConditionMode::zerofusion: {
      const auto store = require_checkpoint(dir / "zerofusion.ckpt", std::nullopt);
      return std::make_unique<zerofusion::ZeroFusionModel>(zerofusion::ZeroFusionModel::from_store(store, frozen));
    }
    case zerofusion::ConditionMode::concat_baseline: {
      auto expected = frozen.config();
      expected.unet.in_channels += condition_channels;
      const auto store = require_checkpoint(dir / "concat_baseline.ckpt", expected.hash());
      return std::make_unique<zerofusion::ConcatBaselineModel>(zerofusion::ConcatBaselineModel::from_store(store));
    }
    case zerofusion::ConditionMode::none: break;
  }
  return nullptr;
}

void make_phantoms(const RunConfig& cfg) {
  const auto spec = cfg.phantom();
  const auto l = layout(cfg);
  build_dataset(spec, cfg.n_train(), derive_seed(cfg.seed(), "train-set"), l.train_dir());
  build_dataset(spec, cfg.n_test(), derive_seed(cfg.seed(), "test-set"), l.test_dir());
}

void train_stm_stage(const RunConfig& cfg) {
  const auto l = layout(cfg);
  const auto manifest = require_manifest(l.train_dir());
  auto run = cfg.stm_run();
  run.out_dir = l.checkpoints();
  stm::train_stm(manifest, l.train_dir(), cfg.stm(), run);
}

void train_diffusion_stage(const RunConfig& cfg) {
  const auto l = layout(cfg);
  std::string stm_sum;
  auto stm = load_stm(cfg, &stm_sum);
  const auto manifest = require_manifest(l.train_dir());
  const auto latents = encode_latents(stm, stm::load_volume_batch(manifest, l.train_dir()));
  const double scale = latent_scale_for(latents);
  auto run = cfg.diffusion_run();
  run.out_dir = l.checkpoints();
  diffusion::train_diffusion(latents * scale, cfg.diffusion(), run, scale, stm_sum);
}

void train_zerofusion_stage(const RunConfig& cfg) {
  const auto mode = cfg.condition_mode();
  if (mode == zerofusion::ConditionMode::none) {
    throw Error(ErrorCode::InvalidArgument, "train-zerofusion needs condition_mode zerofusion or concat_baseline");
  }
  const auto l = layout(cfg);
  std::string stm_sum;
  auto stm = load_stm(cfg, &stm_sum);
  auto frozen = load_diffusion(cfg, stm_sum);
  const auto manifest = require_manifest(l.train_dir());
  const auto latents = encode_latents(stm, stm::load_volume_batch(manifest, l.train_dir())) * frozen.latent_scale;
  const auto [labels, k] = load_mask_batch(manifest, l.train_dir());
  const auto conditions = zerofusion::encode_condition(labels, k, {latents.size(2), latents.size(3), latents.size(4)});

  if (mode == zerofusion::ConditionMode::zerofusion) {
    torch::manual_seed(derive_seed(cfg.seed(), "zerofusion-init"));
    zerofusion::ZeroFusionModel model(frozen, k);
    auto run = cfg.zerofusion_run();
    run.out_dir = l.checkpoints();
    zerofusion::train_conditional(model, latents, conditions, run);
  } else {
    torch::manual_seed(derive_seed(cfg.seed(), "baseline-init"));
    zerofusion::ConcatBaselineModel model(frozen.config(), k, frozen.latent_scale);
    auto run = cfg.baseline_run();
    run.out_dir = l.checkpoints();
    zerofusion::train_conditional(model, latents, conditions, run);
  }
}

void sample_stage(const RunConfig& cfg, const SampleOptions& opts) {
  const auto l = layout(cfg);
  std::string stm_sum;
  auto stm = load_stm(cfg, &stm_sum);
  auto frozen = load_diffusion(cfg, stm_sum);
  const auto mode = cfg.condition_mode();
  const int c = stm.config().latent_channels;
  const auto grid = cfg.phantom().grid_shape;
  const auto lat = latent_spatial(stm, grid);

  std::unique_ptr<zerofusion::ConditionalDenoiser> cond;
  const auto make_one = [&](const SegMask3D& mask, std::uint64_t seed) {
    if (mode == zerofusion::ConditionMode::none) return decode_latent(stm, frozen.sample_unconditional({c, lat[0], lat[1], lat[2]}, seed));
    if (!cond) cond = load_conditional(cfg, frozen, mask.num_classes);
    return decode_latent(stm, cond->sample(zerofusion::encode_condition(mask, lat), c, seed));
  };

  if (opts.mask) {
    const auto mask = load_mask(*opts.mask);
    auto v = make_one(mask, cfg.seed());
    const auto out = opts.out.value_or(l.samples() / "sample.vol");
    save_volume(v, out);
    auto png = out;
    write_montage(v, png.replace_extension(".png"));
    return;
  }

  const auto test = require_manifest(l.test_dir());
  DatasetManifest gen;
  gen.grid_shape = test.grid_shape;
  gen.normalization_method = "none";
  std::filesystem::create_directories(l.samples());
  const auto test_abs = std::filesystem::absolute(l.test_dir());
  const auto samples_abs = std::filesystem::absolute(l.samples());
  for (std::size_t j = 0; j < test.entries.size(); ++j) {
    const auto& e = test.entries[j];
    const auto mask = load_mask(resolve_entry_path(l.test_dir(), e.mask_path));
    const auto seed = derive_seed(cfg.seed(), "sample", j);
    auto v = make_one(mask, seed);
    v.modality_tag = e.modality_tag;
    const auto name = numbered("sample", j, ".vol");
    save_volume(v, l.samples() / name);
    if (j == 0) write_montage(v, l.samples() / numbered("sample", j, ".png"));
    DatasetEntry ge;
    ge.volume_path = name;
    ge.mask_path = std::filesystem::relative(resolve_entry_path(test_abs, e.mask_path), samples_abs).string();
    ge.seed = seed;
    ge.modality_tag = e.modality_tag;
    gen.entries.push_back(ge);
  }
  gen.validate();
  gen.save(l.samples() / "manifest.json");
}

metrics::MetricReport evaluate_stage(const RunConfig& cfg) {
  const auto l = layout(cfg);
  const auto gen_path = l.samples() / "manifest.json";
  if (!std::filesystem::exists(gen_path)) {
    throw Error(ErrorCode::IoError, "generated manifest " + gen_path.string() + " not found; run sample first");
  }
  const auto gen = DatasetManifest::load(gen_path);
  const auto real = require_manifest(l.test_dir());
  const auto report = metrics::evaluate(gen, l.samples(), real, l.test_dir());
  metrics::write_report(report, l.reports() / "metrics.json", l.reports() / "metrics.csv",
                        zerofusion::to_string(cfg.condition_mode()));
  std::cout << metrics::MetricReport::csv_header() << '\n'
            << report.csv_row(zerofusion::to_string(cfg.condition_mode())) << '\n';
  return report;
}

AblationResult ablate_stage(const RunConfig& cfg) {
  const auto l = layout(cfg);
  std::string stm_sum;
  auto stm = load_stm(cfg, &stm_sum);
  auto frozen = load_diffusion(cfg, stm_sum);
  const auto train = require_manifest(l.train_dir());
  const auto test = require_manifest(l.test_dir());
  const auto latents = encode_latents(stm, stm::load_volume_batch(train, l.train_dir())) * frozen.latent_scale;
  const std::array<std::int64_t, 3> lat{latents.size(2), latents.size(3), latents.size(4)};
  const auto [labels, k] = load_mask_batch(train, l.train_dir());

  AblationInputs in{frozen, stm, latents, zerofusion::encode_condition(labels, k, lat), {}, {}};
  for (const auto& e : test.entries) {
    auto mask = load_mask(resolve_entry_path(l.test_dir(), e.mask_path));
    mask.num_classes = k;
    in.test_conditions.push_back(zerofusion::encode_condition(mask, lat));
    in.test_volumes.push_back(load_volume(resolve_entry_path(l.test_dir(), e.volume_path)));
  }
  const auto result = run_ablation(in, cfg.zerofusion_run(), cfg.baseline_run(), cfg.ablate_seeds(), cfg.seed());
  write_text_atomic(l.reports() / "ablation.json", result.to_json().dump(2) + "\n");
  write_text_atomic(l.reports() / "ablation.csv", result.table_csv());
  std::cout << result.table_csv() << "trend zerofusion >= concat_baseline on SSIM: " << result.wins << "/"
            << result.seeds << " seeds -> " << (result.trend_holds ? "holds" : "does not hold") << '\n';
  return result;
}

int run_stage(const std::string& stage, const RunConfig& cfg, const SampleOptions& opts) {
  try {
    const auto l = layout(cfg);
    write_text_atomic(l.logs() / (stage + ".config.ini"), cfg.snapshot());
    if (stage == "make-phantoms") {
      make_phantoms(cfg);
    } else if (stage == "train-stm") {
      train_stm_stage(cfg);
    } else if (stage == "train-diffusion") {
      train_diffusion_stage(cfg);
    } else if (stage == "train-zerofusion") {
      train_zerofusion_stage(cfg);
    } else if (stage == "sample") {
      sample_stage(cfg, opts);
    } else if (stage == "evaluate") {
      evaluate_stage(cfg);
    } else if (stage == "ablate") {
      ablate_stage(cfg);
    } else {
      throw Error(ErrorCode::InvalidArgument, "unknown stage '" + stage + "'");
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace zeco::harness
