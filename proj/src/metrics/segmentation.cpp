#include <algorithm>
#include <cmath>

#include "zeco/error.hpp"
#include "zeco/metrics.hpp"

namespace zeco::metrics {

double otsu_threshold(const std::vector<double>& values, int bins) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "Otsu threshold of an empty set");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi == lo) return lo;
  const double width = (hi - lo) / bins;
  std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
  for (double v : values) {
    const int b = std::min(bins - 1, static_cast<int>((v - lo) / width));
    hist[static_cast<std::size_t>(b)] += 1.0;
  }
  double total = 0, total_sum = 0;
  for (int b = 0; b < bins; ++b) {
    total += hist[static_cast<std::size_t>(b)];
    total_sum += hist[static_cast<std::size_t>(b)] * (b + 0.5);
  }
  double w0 = 0, sum0 = 0, best = -1;
  int best_k = 0;
  for (int k = 0; k < bins - 1; ++k) {
    w0 += hist[static_cast<std::size_t>(k)];
    sum0 += hist[static_cast<std::size_t>(k)] * (k + 0.5);
    const double w1 = total - w0;
    if (w0 == 0 || w1 == 0) continue;
    const double m0 = sum0 / w0, m1 = (total_sum - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  return lo + (best_k + 1) * width;
}

torch::Tensor high_intensity_region(const Volume3D& v) {
  const auto x = v.data[0].to(torch::kFloat64).contiguous();
  const std::vector<double> all(x.data_ptr<double>(), x.data_ptr<double>() + x.numel());
  const double t1 = otsu_threshold(all);
  std::vector<double> head;
  for (double a : all) {
    if (a > t1) head.push_back(a);
  }
  if (head.size() < 2) return x > t1;
  return x > otsu_threshold(head);
}

double dice(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw Error(ErrorCode::ShapeMismatch, "dice operands differ in shape");
  const auto ab = a.to(torch::kBool), bb = b.to(torch::kBool);
  const double inter = torch::logical_and(ab, bb).sum().item<double>();
  const double total = ab.sum().item<double>() + bb.sum().item<double>();
  return total == 0 ? 1.0 : 2.0 * inter / total;
}

}  // namespace zeco::metrics
