#pragma once

#include <torch/types.h>

#include <string>
#include <vector>

namespace nvsdiff {

// Reported for identical images, where 10 log10(1 / MSE) diverges.
inline constexpr double kPsnrCap = 99.0;

// Peak 1.0; images are [H, W, 3] in [0, 1].
double psnr(const torch::Tensor& a, const torch::Tensor& b);

// Mean windowed SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03,
// valid windows only) averaged over the color channels.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

struct ViewMetric {
  std::string scene;
  int view = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<ViewMetric> views;
  double mean_psnr() const;
  double mean_ssim() const;
  // Aligned text table with one row per view and an aggregate row.
  std::string to_table() const;
};

}  // namespace nvsdiff
