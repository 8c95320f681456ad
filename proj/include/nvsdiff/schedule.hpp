#pragma once

#include <torch/types.h>

#include <utility>

namespace nvsdiff {

// Variance-preserving cosine schedule: alpha_t = cos(pi t / 2T),
// sigma_t = sin(pi t / 2T). Steps are real-valued in [0, T].
struct ScheduleConfig {
  int total_steps = 1000;
  bool continuous_time = false;

  void validate() const;
};

struct AlphaSigma {
  double alpha;
  double sigma;
  double snr() const { return alpha * alpha / (sigma * sigma); }
};

struct Transition {
  double alpha_ts;
  double sigma_ts;
};

struct PosteriorParams {
  torch::Tensor mean;
  double stddev;
};

struct ParamConversion {
  torch::Tensor eps_hat;
  torch::Tensor v_hat;
};

// Loss weight variants: min(SNR + 1, 5) matches v-parameterization, min(SNR, 5)
// matches eps-parameterization.
enum class SnrWeighting { kVelocity, kEpsilon };

// Below this sigma, conversions that divide by sigma_t refuse to run.
inline constexpr double kMinSigma = 1e-6;

class DiffusionSchedule {
 public:
  explicit DiffusionSchedule(ScheduleConfig config = {});

  const ScheduleConfig& config() const { return config_; }
  int total_steps() const { return config_.total_steps; }

  AlphaSigma alpha_sigma(double t) const;
  Transition transition_coeffs(double t, double s) const;

  torch::Tensor forward_marginal(const torch::Tensor& x, double t, const torch::Tensor& eps) const;

  // Mean and stddev of q(z_s | z_t, x = x_hat).
  PosteriorParams posterior_params(const torch::Tensor& z_t, const torch::Tensor& x_hat, double t,
                                   double s) const;

  double snr_weight(double t, SnrWeighting weighting = SnrWeighting::kVelocity) const;

  ParamConversion param_convert(const torch::Tensor& x_hat, const torch::Tensor& z_t,
                                double t) const;
  torch::Tensor x_from_eps(const torch::Tensor& eps_hat, const torch::Tensor& z_t, double t) const;
  torch::Tensor x_from_v(const torch::Tensor& v_hat, const torch::Tensor& z_t, double t) const;

 private:
  void check_step(double t) const;
  ScheduleConfig config_;
};

}  // namespace nvsdiff
