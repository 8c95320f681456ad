#include "nvsdiff/schedule.hpp"

#include "nvsdiff/camera.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace nvsdiff {

void ScheduleConfig::validate() const {
  if (total_steps < 1) throw ValidationError("schedule needs at least one step");
}

DiffusionSchedule::DiffusionSchedule(ScheduleConfig config) : config_(config) {
  config_.validate();
}

void DiffusionSchedule::check_step(double t) const {
  if (!(t >= 0.0 && t <= config_.total_steps))
    throw ValidationError("diffusion step " + std::to_string(t) + " outside [0, " +
                          std::to_string(config_.total_steps) + "]");
}

AlphaSigma DiffusionSchedule::alpha_sigma(double t) const {
  check_step(t);
  const double angle = std::numbers::pi * t / (2.0 * config_.total_steps);
  return {std::cos(angle), std::sin(angle)};
}

Transition DiffusionSchedule::transition_coeffs(double t, double s) const {
  if (!(t > s)) throw ValidationError("transition requires t > s");
  const auto at = alpha_sigma(t);
  const auto as = alpha_sigma(s);
  const double alpha_ts = at.alpha / as.alpha;
  const double var = at.sigma * at.sigma - alpha_ts * alpha_ts * as.sigma * as.sigma;
  return {alpha_ts, std::sqrt(std::max(var, 0.0))};
}

torch::Tensor DiffusionSchedule::forward_marginal(const torch::Tensor& x, double t,
                                                  const torch::Tensor& eps) const {
  if (x.sizes() != eps.sizes()) throw ValidationError("forward_marginal: shape mismatch");
  const auto [alpha, sigma] = alpha_sigma(t);
  return alpha * x + sigma * eps;
}

PosteriorParams DiffusionSchedule::posterior_params(const torch::Tensor& z_t,
                                                    const torch::Tensor& x_hat, double t,
                                                    double s) const {
  if (z_t.sizes() != x_hat.sizes()) throw ValidationError("posterior_params: shape mismatch");
  const auto tr = transition_coeffs(t, s);
  const auto at = alpha_sigma(t);
  const auto as = alpha_sigma(s);
  if (at.sigma < kMinSigma) throw ValidationError("posterior_params: sigma_t is zero");
  const double var_t = at.sigma * at.sigma;
  const double var_ts = tr.sigma_ts * tr.sigma_ts;
  const double coef_z = tr.alpha_ts * as.sigma * as.sigma / var_t;
  const double coef_x = as.alpha * var_ts / var_t;
  return {coef_z * z_t + coef_x * x_hat, std::sqrt(var_ts * as.sigma * as.sigma / var_t)};
}

double DiffusionSchedule::snr_weight(double t, SnrWeighting weighting) const {
  const auto as = alpha_sigma(t);
  if (as.sigma == 0.0) return 5.0;
  const double snr = as.snr();
  return std::min(weighting == SnrWeighting::kVelocity ? snr + 1.0 : snr, 5.0);
}

ParamConversion DiffusionSchedule::param_convert(const torch::Tensor& x_hat,
                                                 const torch::Tensor& z_t, double t) const {
  if (x_hat.sizes() != z_t.sizes()) throw ValidationError("param_convert: shape mismatch");
  const auto [alpha, sigma] = alpha_sigma(t);
  if (sigma < kMinSigma) throw ValidationError("param_convert: sigma_t is zero at t=0");
  auto eps_hat = (z_t - alpha * x_hat) / sigma;
  auto v_hat = alpha * eps_hat - sigma * x_hat;
  return {eps_hat, v_hat};
}

torch::Tensor DiffusionSchedule::x_from_eps(const torch::Tensor& eps_hat,
                                            const torch::Tensor& z_t, double t) const {
  const auto [alpha, sigma] = alpha_sigma(t);
  if (alpha < kMinSigma) throw ValidationError("x_from_eps: alpha_t is zero at t=T");
  return (z_t - sigma * eps_hat) / alpha;
}

torch::Tensor DiffusionSchedule::x_from_v(const torch::Tensor& v_hat, const torch::Tensor& z_t,
                                          double t) const {
  // With alpha^2 + sigma^2 = 1: x = alpha z - sigma v.
  const auto [alpha, sigma] = alpha_sigma(t);
  return alpha * z_t - sigma * v_hat;
}

}  // namespace nvsdiff
