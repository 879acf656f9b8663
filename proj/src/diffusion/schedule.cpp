#include <cmath>

#include "zeco/diffusion.hpp"
#include "zeco/error.hpp"
#include "zeco/seed.hpp"

namespace zeco::diffusion {

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw Error(ErrorCode::InvalidArgument, "schedule needs at least one step");
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw Error(ErrorCode::InvalidArgument, "betas must lie in (0, 1)");
  }
  NoiseSchedule s;
  s.beta = std::move(betas);
  const auto T = s.beta.size();
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.posterior_var.resize(T);
  double running = 1.0;
  for (std::size_t t = 0; t < T; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  for (std::size_t t = 0; t < T; ++t) {
    const double prev = t == 0 ? s.alpha[0] : s.alpha_bar[t - 1];
    s.posterior_var[t] = s.beta[t] * (1.0 - prev) / (1.0 - s.alpha_bar[t]);
  }
  return s;
}

void NoiseSchedule::check_step(int t) const {
  if (t < 0 || t >= steps()) {
    throw Error(ErrorCode::InvalidArgument, "timestep " + std::to_string(t) + " outside [0, " +
                                                std::to_string(steps()) + ")");
  }
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
  (void)kind;
  if (T < 2) throw Error(ErrorCode::InvalidArgument, "schedule needs T >= 2");
  if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "need 0 < beta_start < beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    betas[static_cast<std::size_t>(t)] = beta_start + (beta_end - beta_start) * t / (T - 1);
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

LatentGrid q_sample(const LatentGrid& z0, int t, const LatentGrid& eps, const NoiseSchedule& s) {
  s.check_step(t);
  if (z0.data.sizes() != eps.data.sizes()) throw Error(ErrorCode::ShapeMismatch, "z0 and eps shapes differ");
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  return {std::sqrt(ab) * z0.data + std::sqrt(1.0 - ab) * eps.data};
}

torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                       const NoiseSchedule& s) {
  if (z0.sizes() != eps.sizes()) throw Error(ErrorCode::ShapeMismatch, "z0 and eps shapes differ");
  if (t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() >= s.steps()) {
    throw Error(ErrorCode::InvalidArgument, "timestep outside schedule");
  }
  const auto ab = torch::tensor(s.alpha_bar, torch::kFloat64).index_select(0, t.to(torch::kInt64));
  std::vector<std::int64_t> view(static_cast<std::size_t>(z0.dim()), 1);
  view[0] = z0.size(0);
  const auto a = ab.sqrt().to(z0.dtype()).view(view);
  const auto b = (1.0 - ab).sqrt().to(z0.dtype()).view(view);
  return a * z0 + b * eps;
}

torch::Tensor posterior_mean(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& s) {
  s.check_step(t);
  if (z_t.sizes() != eps_hat.sizes()) throw Error(ErrorCode::ShapeMismatch, "z_t and eps_hat shapes differ");
  const auto i = static_cast<std::size_t>(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[i]);
  const double eps_coef = s.beta[i] / std::sqrt(1.0 - s.alpha_bar[i]);
  return inv_sqrt_alpha * (z_t - eps_coef * eps_hat);
}

torch::Tensor reverse_step_from_eps(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int t,
                                    const NoiseSchedule& s, torch::Generator& gen) {
  auto mu = posterior_mean(z_t, eps_hat, t, s);
  if (t == 0) return mu;
  const double sigma = std::sqrt(s.posterior_var[static_cast<std::size_t>(t)]);
  return mu + sigma * torch::randn(z_t.sizes(), gen, z_t.options());
}

torch::Tensor ancestral_sample(const std::vector<std::int64_t>& shape, const EpsFn& eps_fn, const NoiseSchedule& s,
                               std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(seed);
  auto z = torch::randn(shape, gen, torch::kFloat32);
  for (int t = s.steps() - 1; t >= 0; --t) {
    z = reverse_step_from_eps(z, eps_fn(z, t), t, s, gen);
  }
  return z;
}

}  // namespace zeco::diffusion
