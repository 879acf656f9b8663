#include "zeco/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "zeco/checkpoint.hpp"
#include "zeco/error.hpp"

namespace zeco::metrics {

namespace {

std::vector<double> gaussian_window(const SsimParams& p) {
  const int n = p.window;
  const double c = (n - 1) / 2.0;
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * p.sigma * p.sigma));
  std::vector<double> w(static_cast<std::size_t>(n * n));
  double total = 0;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      w[static_cast<std::size_t>(y * n + x)] = g[static_cast<std::size_t>(y)] * g[static_cast<std::size_t>(x)];
      total += w[static_cast<std::size_t>(y * n + x)];
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

struct SliceStats {
  double ssim;
  double cs;
};

SliceStats slice_stats(const std::vector<double>& a, const std::vector<double>& b, int h, int w, const SsimParams& p) {
  const int n = p.window;
  if (h < n || w < n) {
    throw Error(ErrorCode::InvalidArgument, "slice " + std::to_string(h) + "x" + std::to_string(w) +
                                                " smaller than the SSIM window");
  }
  const auto win = gaussian_window(p);
  const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
  const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
  double ssim_sum = 0, cs_sum = 0;
  for (int y = 0; y + n <= h; ++y) {
    for (int x = 0; x + n <= w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = 0; dy < n; ++dy) {
        for (int dx = 0; dx < n; ++dx) {
          const double k = win[static_cast<std::size_t>(dy * n + dx)];
          const auto idx = static_cast<std::size_t>((y + dy) * w + (x + dx));
          const double va = a[idx], vb = b[idx];
          ma += k * va;
          mb += k * vb;
          saa += k * va * va;
          sbb += k * vb * vb;
          sab += k * va * vb;
        }
      }
      const double var_a = saa - ma * ma;
      const double var_b = sbb - mb * mb;
      const double cov = sab - ma * mb;
      const double cs = (2 * cov + c2) / (var_a + var_b + c2);
      const double lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
      ssim_sum += lum * cs;
      cs_sum += cs;
    }
  }
  const double count = static_cast<double>((h - n + 1) * (w - n + 1));
  return {ssim_sum / count, cs_sum / count};
}

std::vector<double> pool2(const std::vector<double>& a, int h, int w) {
  const int h2 = h / 2, w2 = w / 2;
  std::vector<double> out(static_cast<std::size_t>(h2 * w2));
  for (int y = 0; y < h2; ++y) {
    for (int x = 0; x < w2; ++x) {
      const auto at = [&](int yy, int xx) { return a[static_cast<std::size_t>(yy * w + xx)]; };
      out[static_cast<std::size_t>(y * w2 + x)] =
          (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0;
    }
  }
  return out;
}

std::vector<double> to_doubles(const Volume3D& v) {
  const auto t = v.data.to(torch::kFloat64).contiguous();
  return {t.data_ptr<double>(), t.data_ptr<double>() + t.numel()};
}

void check_same_shape(const Volume3D& a, const Volume3D& b) {
  if (a.data.sizes() != b.data.sizes()) {
    throw Error(ErrorCode::ShapeMismatch, "volume shapes differ: " + c10::str(a.data.sizes()) + " vs " +
                                              c10::str(b.data.sizes()));
  }
}

template <typename F>
double mean_over_slices(const Volume3D& a, const Volume3D& b, F&& per_slice) {
  check_same_shape(a, b);
  const auto va = to_doubles(a), vb = to_doubles(b);
  const auto C = a.channels(), D = a.depth(), H = a.height(), W = a.width();
  const auto plane = static_cast<std::size_t>(H * W);
  double total = 0;
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t d = 0; d < D; ++d) {
      const auto off = static_cast<std::size_t>(c * D + d) * plane;
      std::vector<double> sa(va.begin() + static_cast<std::ptrdiff_t>(off),
                             va.begin() + static_cast<std::ptrdiff_t>(off + plane));
      std::vector<double> sb(vb.begin() + static_cast<std::ptrdiff_t>(off),
                             vb.begin() + static_cast<std::ptrdiff_t>(off + plane));
      total += per_slice(sa, sb, static_cast<int>(H), static_cast<int>(W));
    }
  }
  return total / static_cast<double>(C * D);
}

std::vector<double> box_features(const Volume3D& v, int grid) {
  const auto C = v.channels(), D = v.depth(), H = v.height(), W = v.width();
  if (D % grid != 0 || H % grid != 0 || W % grid != 0) {
    throw Error(ErrorCode::ShapeMismatch, "volume extents must be multiples of the MMD grid " + std::to_string(grid));
  }
  const auto fd = D / grid, fh = H / grid, fw = W / grid;
  const auto vals = to_doubles(v);
  std::vector<double> out(static_cast<std::size_t>(C * grid * grid * grid), 0.0);
  const double cell = static_cast<double>(fd * fh * fw);
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t z = 0; z < D; ++z) {
      for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
          const auto o = ((c * grid + z / fd) * grid + y / fh) * grid + x / fw;
          out[static_cast<std::size_t>(o)] += vals[static_cast<std::size_t>(((c * D + z) * H + y) * W + x)] / cell;
        }
      }
    }
  }
  return out;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string csv_num(double v) {
  if (!std::isfinite(v)) return v > 0 ? "inf" : "nan";
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

}  // namespace

nlohmann::json SsimParams::to_json() const {
  return {{"window", window}, {"sigma", sigma}, {"k1", k1}, {"k2", k2}, {"data_range", data_range}};
}

double ssim_slice(const std::vector<double>& a, const std::vector<double>& b, int h, int w, const SsimParams& p) {
  return slice_stats(a, b, h, w, p).ssim;
}

double ssim_volume(const Volume3D& a, const Volume3D& b, const SsimParams& p) {
  return mean_over_slices(a, b, [&](const auto& sa, const auto& sb, int h, int w) { return ssim_slice(sa, sb, h, w, p); });
}

int ms_ssim_scales(int side, int window) {
  int m = 0;
  for (int s = 1; s <= 5; ++s) {
    if (side >= (1 << (s - 1)) * window) m = s;
  }
  if (m < 2) {
    throw Error(ErrorCode::InvalidArgument, "slice side " + std::to_string(side) +
                                                " too small for two MS-SSIM scales (need " +
                                                std::to_string(2 * window) + ")");
  }
  return m;
}

MsSsimResult ms_ssim_slice(const std::vector<double>& a, const std::vector<double>& b, int h, int w,
                           const SsimParams& p) {
  const int m = ms_ssim_scales(std::min(h, w), p.window);
  double wsum = 0;
  for (int j = 0; j < m; ++j) wsum += kMsSsimWeights[static_cast<std::size_t>(j)];
  auto ca = a, cb = b;
  double value = 1.0;
  for (int j = 0; j < m; ++j) {
    const auto st = slice_stats(ca, cb, h, w, p);
    const double term = j == m - 1 ? st.ssim : st.cs;
    value *= std::pow(std::max(term, 0.0), kMsSsimWeights[static_cast<std::size_t>(j)] / wsum);
    if (j < m - 1) {
      ca = pool2(ca, h, w);
      cb = pool2(cb, h, w);
      h /= 2;
      w /= 2;
    }
  }
  return {value, m};
}

MsSsimResult ms_ssim_volume(const Volume3D& a, const Volume3D& b, const SsimParams& p) {
  check_same_shape(a, b);
  const int m = ms_ssim_scales(static_cast<int>(std::min(a.height(), a.width())), p.window);
  const double v = mean_over_slices(
      a, b, [&](const auto& sa, const auto& sb, int h, int w) { return ms_ssim_slice(sa, sb, h, w, p).value; });
  return {v, m};
}

double psnr_volume(const Volume3D& a, const Volume3D& b, double data_range) {
  check_same_shape(a, b);
  const auto va = to_doubles(a), vb = to_doubles(b);
  double mse = 0;
  for (std::size_t i = 0; i < va.size(); ++i) mse += (va[i] - vb[i]) * (va[i] - vb[i]);
  mse /= static_cast<double>(va.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

MmdResult mmd_sets(const std::vector<Volume3D>& gen, const std::vector<Volume3D>& real, int grid) {
  if (gen.size() < 2 || real.size() < 2) throw Error(ErrorCode::InvalidArgument, "MMD needs at least 2 volumes per set");
  for (const auto& v : gen) check_same_shape(v, gen.front());
  for (const auto& v : real) check_same_shape(v, gen.front());
  std::vector<std::vector<double>> x, y;
  for (const auto& v : gen) x.push_back(box_features(v, grid));
  for (const auto& v : real) y.push_back(box_features(v, grid));
  const auto m = x.size(), n = y.size();

  std::vector<std::vector<double>> dxx(m, std::vector<double>(m)), dyy(n, std::vector<double>(n)),
      dxy(m, std::vector<double>(n));
  std::vector<double> pooled;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      dxx[i][j] = dxx[j][i] = sq_dist(x[i], x[j]);
      pooled.push_back(std::sqrt(dxx[i][j]));
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dyy[i][j] = dyy[j][i] = sq_dist(y[i], y[j]);
      pooled.push_back(std::sqrt(dyy[i][j]));
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      dxy[i][j] = sq_dist(x[i], y[j]);
      pooled.push_back(std::sqrt(dxy[i][j]));
    }
  }
  double sigma = median(pooled);
  if (!(sigma > 0)) sigma = 1.0;
  const auto k = [&](double d2) { return std::exp(-d2 / (2 * sigma * sigma)); };

  double sxx = 0, syy = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) sxx += 2 * k(dxx[i][j]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) syy += 2 * k(dyy[i][j]);
  }
  double mmd2;
  if (m == n) {
    double cross = 0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j) cross += k(dxy[i][j]) + k(dxy[j][i]);
    }
    mmd2 = (sxx + syy - 2 * cross) / static_cast<double>(m * (m - 1));
  } else {
    double cross = 0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) cross += k(dxy[i][j]);
    }
    mmd2 = sxx / static_cast<double>(m * (m - 1)) + syy / static_cast<double>(n * (n - 1)) -
           2 * cross / static_cast<double>(m * n);
  }
  return {mmd2, sigma, grid};
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

nlohmann::json MetricReport::to_json() const {
  const auto stat = [](const Summary& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}}; };
  nlohmann::json psnr_json = stat(psnr);
  psnr_json["infinite"] = psnr_infinite;
  if (!std::isfinite(psnr.mean)) psnr_json["mean"] = nullptr;
  if (!std::isfinite(psnr.std)) psnr_json["std"] = nullptr;
  return {{"ssim", stat(ssim)}, {"ms_ssim", stat(ms_ssim)}, {"psnr", psnr_json},
          {"mmd", mmd},         {"n_pairs", n_pairs},       {"params", params}};
}

std::string MetricReport::csv_header() {
  return "label,n_pairs,ssim_mean,ssim_std,ms_ssim_mean,ms_ssim_std,psnr_mean,psnr_std,psnr_infinite,mmd";
}

std::string MetricReport::csv_row(const std::string& label) const {
  std::ostringstream os;
  os << label << ',' << n_pairs << ',' << csv_num(ssim.mean) << ',' << csv_num(ssim.std) << ','
     << csv_num(ms_ssim.mean) << ',' << csv_num(ms_ssim.std) << ',' << csv_num(psnr.mean) << ','
     << csv_num(psnr.std) << ',' << (psnr_infinite ? 1 : 0) << ',' << csv_num(mmd);
  return os.str();
}

MetricReport evaluate(const DatasetManifest& gen, const std::filesystem::path& gen_dir, const DatasetManifest& real,
                      const std::filesystem::path& real_dir, const SsimParams& p) {
  const auto key = [](const std::filesystem::path& dir, const std::string& mask) {
    return std::filesystem::weakly_canonical(resolve_entry_path(dir, mask)).string();
  };
  std::map<std::string, std::size_t> real_by_mask;
  for (std::size_t i = 0; i < real.entries.size(); ++i) real_by_mask[key(real_dir, real.entries[i].mask_path)] = i;

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::string> orphans;
  std::map<std::string, bool> matched;
  for (std::size_t i = 0; i < gen.entries.size(); ++i) {
    const auto k = key(gen_dir, gen.entries[i].mask_path);
    const auto it = real_by_mask.find(k);
    if (it == real_by_mask.end()) {
      orphans.push_back("generated " + gen.entries[i].volume_path + " (mask " + gen.entries[i].mask_path + ")");
    } else {
      pairs.emplace_back(i, it->second);
      matched[k] = true;
    }
  }
  for (const auto& e : real.entries) {
    if (!matched.count(key(real_dir, e.mask_path))) {
      orphans.push_back("real " + e.volume_path + " (mask " + e.mask_path + ")");
    }
  }
  if (!orphans.empty()) {
    std::string msg = "unpaired entries:";
    for (const auto& o : orphans) msg += " " + o + ";";
    throw Error(ErrorCode::UnpairedEntries, msg);
  }
  if (pairs.empty()) throw Error(ErrorCode::InvalidArgument, "nothing to evaluate");

  std::vector<Volume3D> gv, rv;
  for (const auto& [gi, ri] : pairs) {
    gv.push_back(load_volume(resolve_entry_path(gen_dir, gen.entries[gi].volume_path)));
    rv.push_back(load_volume(resolve_entry_path(real_dir, real.entries[ri].volume_path)));
  }
  return evaluate_pairs(gv, rv, p);
}

MetricReport evaluate_pairs(const std::vector<Volume3D>& gv, const std::vector<Volume3D>& rv, const SsimParams& p) {
  if (gv.size() != rv.size() || gv.empty()) {
    throw Error(ErrorCode::InvalidArgument, "need equally many generated and real volumes");
  }
  std::vector<double> ssim, ms, psnr;
  MetricReport r;
  int scales = 0;
  for (std::size_t i = 0; i < gv.size(); ++i) {
    ssim.push_back(ssim_volume(gv[i], rv[i], p));
    const auto msr = ms_ssim_volume(gv[i], rv[i], p);
    ms.push_back(msr.value);
    scales = msr.scales;
    const double ps = psnr_volume(gv[i], rv[i], p.data_range);
    if (std::isfinite(ps)) {
      psnr.push_back(ps);
    } else {
      r.psnr_infinite = true;
    }
  }
  r.ssim = summarize(ssim);
  r.ms_ssim = summarize(ms);
  r.psnr = psnr.empty() ? Summary{std::numeric_limits<double>::infinity(), 0.0} : summarize(psnr);
  r.n_pairs = static_cast<int>(gv.size());
  nlohmann::json mmd_params;
  if (gv.size() >= 2) {
    const auto mr = mmd_sets(gv, rv);
    r.mmd = mr.mmd2;
    mmd_params = {{"kernel", "gaussian"}, {"bandwidth", mr.bandwidth}, {"grid", mr.grid}, {"estimator", "unbiased"}};
  } else {
    r.mmd = std::numeric_limits<double>::quiet_NaN();
    mmd_params = {{"skipped", "fewer than 2 volumes per set"}};
  }
  r.params = {{"ssim", p.to_json()},
              {"ms_ssim", {{"scales", scales}, {"weights", kMsSsimWeights}, {"pooling", "2x2 average"}}},
              {"psnr", {{"data_range", p.data_range}}},
              {"mmd", mmd_params},
              {"slice_axis", "depth"}};
  return r;
}

void write_report(const MetricReport& r, const std::filesystem::path& json_path, const std::filesystem::path& csv_path,
                  const std::string& label) {
  write_text_atomic(json_path, r.to_json().dump(2) + "\n");
  write_text_atomic(csv_path, MetricReport::csv_header() + "\n" + r.csv_row(label) + "\n");
}

}  // namespace zeco::metrics
