// zeco: command-line driver for the pipeline stages.
//
//   zeco make-phantoms     --config configs/desk.ini
//   zeco train-stm         --config configs/desk.ini
//   zeco train-diffusion   --config configs/desk.ini
//   zeco train-zerofusion  --config configs/desk.ini [--override run.condition_mode=concat_baseline]
//   zeco sample            --config configs/desk.ini [--mask m.vol --out s.vol]
//   zeco evaluate          --config configs/desk.ini
//   zeco ablate            --config configs/desk.ini

#include <iostream>

#include <CLI11.hpp>

#include "zeco/config.hpp"
#include "zeco/error.hpp"
#include "zeco/harness.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonFlags& f, bool out_is_run_dir) {
  sub->add_option("--config", f.config, "run configuration file (built-in desk profile when omitted)");
  sub->add_option("--seed", f.seed, "master seed (run.seed)");
  sub->add_option("--out", f.out,
                  out_is_run_dir ? "run output directory (run.out)" : "output volume path with --mask, else run.out");
  sub->add_option("--override", f.overrides, "section.key=value, repeatable");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zeco: mask-conditioned latent diffusion for 3-d volumes"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string mask;
  const std::vector<std::string> stages{"make-phantoms", "train-stm", "train-diffusion", "train-zerofusion",
                                        "sample",        "evaluate",  "ablate"};
  for (const auto& name : stages) {
    auto* sub = app.add_subcommand(name);
    add_common(sub, flags, name != "sample");
    if (name == "sample") sub->add_option("--mask", mask, "condition on this mask file");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string stage = app.get_subcommands().front()->get_name();

  zeco::harness::SampleOptions opts;
  zeco::RunConfig cfg;
  try {
    if (!flags.config.empty()) cfg = zeco::RunConfig::load(flags.config);
    for (const auto& o : flags.overrides) cfg.apply_override(o);
    if (flags.seed) cfg.set("run.seed", std::to_string(*flags.seed));
    if (!mask.empty()) {
      opts.mask = mask;
      if (!flags.out.empty()) opts.out = flags.out;
    } else if (!flags.out.empty()) {
      cfg.set("run.out", flags.out);
    }
  } catch (const zeco::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return zeco::harness::run_stage(stage, cfg, opts);
}
