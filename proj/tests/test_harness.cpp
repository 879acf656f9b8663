#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "test_util.hpp"
#include "zeco/checkpoint.hpp"
#include "zeco/config.hpp"
#include "zeco/harness.hpp"

using namespace zeco;
using namespace zeco::harness;
using zeco::test::error_code_of;
using zeco::test::TempDir;

namespace {

RunConfig tiny_config(const std::filesystem::path& out) {
  RunConfig c;
  for (const char* kv : {"data.n_train=3", "data.n_test=2", "data.grid=16,16,16", "data.head_axes=6,7,6.5",
                         "data.tumor_radius=2,2.5", "stm.base_channels=4", "stm.channel_multipliers=1,2",
                         "stm.codebook_size=16", "stm.disc_base_channels=4", "stm.disc_patch_level=2",
                         "stm.steps=6", "stm.batch_size=2", "stm.warmup_steps=3", "stm.checkpoint_interval=3",
                         "diffusion.T=8", "diffusion.base_channels=8", "diffusion.channel_multipliers=1,1,1,1",
                         "diffusion.downsample=0,0,0", "diffusion.res_blocks=1", "diffusion.attention_per_level=1",
                         "diffusion.mid_res_blocks=1", "diffusion.mid_attention=1",
                         "diffusion.time_embedding_dim=16", "diffusion.steps=4", "diffusion.batch_size=2",
                         "diffusion.checkpoint_interval=2", "zerofusion.steps=3", "zerofusion.batch_size=2",
                         "zerofusion.checkpoint_interval=3", "baseline.steps=3", "baseline.batch_size=2",
                         "baseline.checkpoint_interval=3", "ablate.seeds=2"}) {
    c.apply_override(kv);
  }
  c.set("run.out", out.string());
  return c;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_pipeline(const RunConfig& cfg) {
  for (const char* stage : {"make-phantoms", "train-stm", "train-diffusion", "train-zerofusion", "sample", "evaluate"}) {
    const int rc = run_stage(stage, cfg);
    if (rc != 0) return rc;
  }
  return 0;
}

int cli(const std::string& args) {
  const int status = std::system((std::string(ZECO_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config files overlay the defaults and reject unknown keys") {
  TempDir dir("cfg");
  std::ofstream(dir / "a.ini") << "[run]\nseed = 11\n\n[stm]\nsteps = 42\nlr = 1e-3\n";
  const auto cfg = RunConfig::load(dir / "a.ini");
  CHECK(cfg.seed() == 11);
  CHECK(cfg.stm_run().steps == 42);
  CHECK(cfg.stm_run().lr == 1e-3);
  CHECK(cfg.stm_run().seed == 11);
  CHECK(cfg.diffusion().T == RunConfig().diffusion().T);

  std::ofstream(dir / "b.ini") << "[stm]\nstepz = 1\n";
  CHECK(error_code_of([&] { RunConfig::load(dir / "b.ini"); }) == ErrorCode::InvalidArgument);
  CHECK(error_code_of([&] { RunConfig::load(dir / "missing.ini"); }) == ErrorCode::IoError);

  RunConfig o;
  o.apply_override("diffusion.T = 50");
  CHECK(o.diffusion().T == 50);
  CHECK(error_code_of([&] { o.apply_override("diffusion.T"); }) == ErrorCode::InvalidArgument);
  CHECK(error_code_of([&] { o.apply_override("nope.key=1"); }) == ErrorCode::InvalidArgument);
  o.apply_override("stm.steps=abc");
  CHECK(error_code_of([&] { o.stm_run(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("the resolved snapshot reproduces the configuration") {
  TempDir dir("snap");
  auto cfg = tiny_config(dir / "run");
  cfg.apply_override("run.seed=5");
  std::ofstream(dir / "snap.ini") << cfg.snapshot();
  const auto back = RunConfig::load(dir / "snap.ini");
  CHECK(back.values() == cfg.values());
  CHECK(back.stm().hash() == cfg.stm().hash());
  CHECK(back.diffusion().hash() == cfg.diffusion().hash());
}

TEST_CASE("default desk profile resolves to valid component configs") {
  const RunConfig cfg;
  CHECK(cfg.phantom().grid_shape == std::array<std::int64_t, 3>{32, 32, 32});
  CHECK(cfg.stm().downsample_factor() == 4);
  CHECK(cfg.diffusion().unet.in_channels == cfg.stm().latent_channels);
  CHECK(cfg.condition_mode() == zerofusion::ConditionMode::zerofusion);
  CHECK(cfg.ablate_seeds() >= 3);
}

TEST_CASE("stages fail with a nonzero status when prerequisites are missing") {
  TempDir dir("missing");
  const auto cfg = tiny_config(dir / "run");
  CHECK(run_stage("train-stm", cfg) == 2);
  REQUIRE(run_stage("make-phantoms", cfg) == 0);
  CHECK(std::filesystem::exists(dir / "run" / "logs" / "make-phantoms.config.ini"));
  CHECK(run_stage("train-diffusion", cfg) == 2);
  CHECK(error_code_of([&] { train_diffusion_stage(cfg); }) == ErrorCode::MissingCheckpoint);
  CHECK(run_stage("sample", cfg) == 2);
  CHECK(run_stage("evaluate", cfg) == 2);
  CHECK(run_stage("ablate", cfg) == 2);
  CHECK(run_stage("bogus", cfg) == 2);

  CHECK(cli("train-diffusion --out " + (dir / "run").string()) == 2);
  CHECK(cli("evaluate --config " + (dir / "nothing.ini").string()) == 2);
  CHECK(cli("train-stm --override stm.nope=1") == 2);
  CHECK(cli("no-such-command") != 0);
}

TEST_CASE("full pipeline on a tiny configuration is deterministic") {
  TempDir dir("pipe");
  const auto a = tiny_config(dir / "a");
  const auto b = tiny_config(dir / "b");
  REQUIRE(run_pipeline(a) == 0);
  REQUIRE(run_pipeline(b) == 0);

  for (const char* f : {"checkpoints/stm.ckpt", "checkpoints/diffusion.ckpt", "checkpoints/zerofusion.ckpt",
                        "samples/sample_0000.vol", "samples/sample_0001.vol", "samples/manifest.json",
                        "reports/metrics.json", "reports/metrics.csv", "data/train/manifest.json"}) {
    INFO(f);
    REQUIRE(std::filesystem::exists(dir / "a" / f));
    CHECK(read_all(dir / "a" / f) == read_all(dir / "b" / f));
  }
  CHECK(std::filesystem::exists(dir / "a" / "samples" / "sample_0000.png"));
  for (const char* stage : {"train-stm", "train-diffusion", "train-zerofusion", "sample", "evaluate"}) {
    CHECK(std::filesystem::exists(dir / "a" / "logs" / (std::string(stage) + ".config.ini")));
  }

  const auto report = nlohmann::json::parse(read_all(dir / "a" / "reports" / "metrics.json"));
  CHECK(report["n_pairs"] == 2);

  SUBCASE("a different seed changes the artifacts") {
    auto c = tiny_config(dir / "c");
    c.set("run.seed", "1");
    REQUIRE(run_stage("make-phantoms", c) == 0);
    CHECK(read_all(dir / "a" / "data/train/manifest.json") != read_all(dir / "c" / "data/train/manifest.json"));
  }

  SUBCASE("single-mask sampling through the command line") {
    const auto mask = dir / "a" / "data" / "test" / nlohmann::json::parse(read_all(dir / "a/data/test/manifest.json"))["entries"][0]["mask_path"].get<std::string>();
    const auto out = dir / "one.vol";
    REQUIRE(cli("sample --config " + (dir / "a" / "logs" / "sample.config.ini").string() + " --mask " + mask.string() +
                " --out " + out.string()) == 0);
    const auto v = load_volume(out);
    CHECK(v.data.sizes() == torch::IntArrayRef({1, 16, 16, 16}));
    CHECK(std::filesystem::exists(dir / "one.png"));
  }

  SUBCASE("retraining the autoencoder invalidates the diffusion checkpoint") {
    auto c = a;
    c.set("stm.steps", "7");
    REQUIRE(run_stage("train-stm", c) == 0);
    CHECK(error_code_of([&] { sample_stage(c, {}); }) == ErrorCode::ConfigHashMismatch);
  }

  SUBCASE("changing the diffusion architecture is caught") {
    auto c = a;
    c.set("diffusion.base_channels", "4");
    std::string sum;
    auto stm = load_stm(c, &sum);
    CHECK(error_code_of([&] { load_diffusion(c, sum); }) == ErrorCode::ConfigHashMismatch);
  }

  SUBCASE("the concatenation baseline trains, samples and evaluates") {
    auto c = a;
    c.set("run.condition_mode", "concat_baseline");
    REQUIRE(run_stage("train-zerofusion", c) == 0);
    CHECK(std::filesystem::exists(dir / "a" / "checkpoints" / "concat_baseline.ckpt"));
    REQUIRE(run_stage("sample", c) == 0);
    REQUIRE(run_stage("evaluate", c) == 0);
    const auto csv = read_all(dir / "a" / "reports" / "metrics.csv");
    CHECK(csv.find("concat_baseline,2,") != std::string::npos);
  }

  SUBCASE("unconditional sampling needs no conditional checkpoint") {
    auto c = a;
    c.set("run.condition_mode", "none");
    std::filesystem::remove(dir / "a" / "checkpoints" / "zerofusion.ckpt");
    REQUIRE(run_stage("sample", c) == 0);
    CHECK(run_stage("train-zerofusion", c) == 2);
  }
}

TEST_CASE("ablation: equal budgets, one row per arm, deterministic") {
  TempDir dir("ablate");
  auto cfg = tiny_config(dir / "run");
  for (const char* stage : {"make-phantoms", "train-stm", "train-diffusion"}) REQUIRE(run_stage(stage, cfg) == 0);

  const auto r = ablate_stage(cfg);
  CHECK(r.seeds == 2);
  CHECK(r.runs.size() == 4);
  REQUIRE(r.table.size() == 2);
  CHECK(r.table[0].arm == "zerofusion");
  CHECK(r.table[1].arm == "concat_baseline");
  CHECK(r.runs[0].seed == r.runs[1].seed);
  CHECK(r.runs[0].seed != r.runs[2].seed);
  CHECK(r.table[0].report.ssim.mean ==
        doctest::Approx((r.runs[0].report.ssim.mean + r.runs[2].report.ssim.mean) / 2).epsilon(1e-12));
  CHECK(r.trend_holds == (2 * r.wins > r.seeds));
  CHECK(std::filesystem::exists(dir / "run" / "reports" / "ablation.json"));
  const auto csv = read_all(dir / "run" / "reports" / "ablation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  const auto again = ablate_stage(cfg);
  CHECK(again.to_json() == r.to_json());

  auto unequal = cfg;
  unequal.set("baseline.steps", "4");
  CHECK(error_code_of([&] { ablate_stage(unequal); }) == ErrorCode::UnequalBudgets);
  unequal = cfg;
  unequal.set("baseline.batch_size", "3");
  CHECK(run_stage("ablate", unequal) == 2);
}

TEST_CASE("montage writes a PNG") {
  TempDir dir("montage");
  Volume3D v{torch::linspace(-1, 1, 16 * 16 * 16).view({1, 16, 16, 16}), {-1, 1}, "x", {}};
  write_montage(v, dir / "m.png", 4);
  const auto bytes = read_all(dir / "m.png");
  REQUIRE(bytes.size() > 8);
  CHECK(bytes.substr(1, 3) == "PNG");
}
