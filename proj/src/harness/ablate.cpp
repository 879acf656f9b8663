#include <cmath>
#include <sstream>

#include "zeco/error.hpp"
#include "zeco/harness.hpp"
#include "zeco/seed.hpp"

namespace zeco::harness {

namespace {

metrics::MetricReport score_arm(zerofusion::ConditionalDenoiser& model, AblationInputs& in, std::uint64_t seed) {
  const int c = static_cast<int>(in.train_latents.size(1));
  std::vector<Volume3D> gen;
  for (std::size_t j = 0; j < in.test_conditions.size(); ++j) {
    const auto z = model.sample(in.test_conditions[j], c, derive_seed(seed, "sample", j));
    gen.push_back(decode_latent(in.stm, z));
  }
  return metrics::evaluate_pairs(gen, in.test_volumes);
}

metrics::Summary across(const std::vector<double>& v) { return metrics::summarize(v); }

}  // namespace

AblationResult run_ablation(AblationInputs& in, const zerofusion::ConditionalRunConfig& zf_run,
                            const zerofusion::ConditionalRunConfig& baseline_run, int seeds,
                            std::uint64_t master_seed) {
  if (zf_run.steps != baseline_run.steps || zf_run.batch_size != baseline_run.batch_size) {
    throw Error(ErrorCode::UnequalBudgets,
                "arms must share a training budget: zerofusion " + std::to_string(zf_run.steps) + " steps x " +
                    std::to_string(zf_run.batch_size) + ", concat_baseline " + std::to_string(baseline_run.steps) +
                    " steps x " + std::to_string(baseline_run.batch_size));
  }
  if (seeds < 1) throw Error(ErrorCode::InvalidArgument, "ablation needs at least one seed");
  if (in.test_conditions.size() != in.test_volumes.size() || in.test_volumes.empty()) {
    throw Error(ErrorCode::InvalidArgument, "ablation needs one test volume per test condition");
  }
  const int k = static_cast<int>(in.train_conditions.size(1));

  AblationResult r;
  r.seeds = seeds;
  for (int i = 0; i < seeds; ++i) {
    const auto s = derive_seed(master_seed, "ablate", static_cast<std::uint64_t>(i));

    auto zrun = zf_run;
    zrun.seed = s;
    zrun.out_dir.clear();
    torch::manual_seed(derive_seed(s, "zerofusion-init"));
    zerofusion::ZeroFusionModel zf(in.frozen, k);
    zerofusion::train_conditional(zf, in.train_latents, in.train_conditions, zrun);
    r.runs.push_back({"zerofusion", s, score_arm(zf, in, s)});

    auto brun = baseline_run;
    brun.seed = s;
    brun.out_dir.clear();
    torch::manual_seed(derive_seed(s, "baseline-init"));
    zerofusion::ConcatBaselineModel base(in.frozen.config(), k, in.frozen.latent_scale);
    zerofusion::train_conditional(base, in.train_latents, in.train_conditions, brun);
    r.runs.push_back({"concat_baseline", s, score_arm(base, in, s)});

    if (r.runs[r.runs.size() - 2].report.ssim.mean >= r.runs.back().report.ssim.mean) ++r.wins;
  }
  r.trend_holds = 2 * r.wins > seeds;

  for (const std::string arm : {"zerofusion", "concat_baseline"}) {
    std::vector<double> ssim, ms, psnr, mmd;
    AblationRow row;
    row.arm = arm;
    for (const auto& run : r.runs) {
      if (run.arm != arm) continue;
      ssim.push_back(run.report.ssim.mean);
      ms.push_back(run.report.ms_ssim.mean);
      psnr.push_back(run.report.psnr.mean);
      mmd.push_back(run.report.mmd);
      row.report.n_pairs = run.report.n_pairs;
      row.report.params = run.report.params;
      row.report.psnr_infinite = row.report.psnr_infinite || run.report.psnr_infinite;
    }
    row.report.ssim = across(ssim);
    row.report.ms_ssim = across(ms);
    row.report.psnr = across(psnr);
    row.report.mmd = across(mmd).mean;
    r.table.push_back(row);
  }
  return r;
}

nlohmann::json AblationResult::to_json() const {
  nlohmann::json runs_json = nlohmann::json::array(), table_json = nlohmann::json::array();
  for (const auto& row : runs) runs_json.push_back({{"arm", row.arm}, {"seed", row.seed}, {"report", row.report.to_json()}});
  for (const auto& row : table) table_json.push_back({{"arm", row.arm}, {"report", row.report.to_json()}});
  return {{"runs", runs_json},
          {"table", table_json},
          {"aggregation", "mean and std over seeds of per-seed means"},
          {"trend", "zerofusion SSIM >= concat_baseline SSIM"},
          {"seeds", seeds},
          {"wins", wins},
          {"trend_holds", trend_holds}};
}

std::string AblationResult::table_csv() const {
  std::ostringstream os;
  os << metrics::MetricReport::csv_header() << '\n';
  for (const auto& row : table) os << row.report.csv_row(row.arm) << '\n';
  return os.str();
}

}  // namespace zeco::harness
