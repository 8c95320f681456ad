#include "nvsdiff/metrics.hpp"

#include "nvsdiff/camera.hpp"

#include <torch/torch.h>

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace nvsdiff {

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes())
    throw ValidationError(std::string(what) + ": image shapes differ");
  if (a.dim() != 3) throw ValidationError(std::string(what) + ": expected [H, W, C] images");
}

torch::Tensor gaussian_window(int size, double sigma) {
  auto x = torch::arange(size, torch::kFloat64) - (size - 1) / 2.0;
  auto g = torch::exp(-(x * x) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "psnr");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b, "ssim");
  constexpr int kWindow = 11;
  if (a.size(0) < kWindow || a.size(1) < kWindow)
    throw ValidationError("ssim: images must be at least 11x11");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;

  auto x = a.to(torch::kFloat64).permute({2, 0, 1}).unsqueeze(1);  // [C, 1, H, W]
  auto y = b.to(torch::kFloat64).permute({2, 0, 1}).unsqueeze(1);
  auto w = gaussian_window(kWindow, 1.5).view({1, 1, kWindow, kWindow});
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, w); };

  auto mu_x = filt(x);
  auto mu_y = filt(y);
  auto sxx = filt(x * x) - mu_x * mu_x;
  auto syy = filt(y * y) - mu_y * mu_y;
  auto sxy = filt(x * y) - mu_x * mu_y;
  auto map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) /
             ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

double MetricReport::mean_psnr() const {
  if (views.empty()) return 0.0;
  return std::accumulate(views.begin(), views.end(), 0.0,
                         [](double s, const ViewMetric& v) { return s + v.psnr; }) /
         static_cast<double>(views.size());
}

double MetricReport::mean_ssim() const {
  if (views.empty()) return 0.0;
  return std::accumulate(views.begin(), views.end(), 0.0,
                         [](double s, const ViewMetric& v) { return s + v.ssim; }) /
         static_cast<double>(views.size());
}

std::string MetricReport::to_table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %6s %9s %8s\n", "scene", "view", "psnr_db", "ssim");
  os << line;
  for (const auto& v : views) {
    std::snprintf(line, sizeof line, "%-16s %6d %9.3f %8.4f\n", v.scene.c_str(), v.view, v.psnr,
                  v.ssim);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-16s %6zu %9.3f %8.4f\n", "mean", views.size(), mean_psnr(),
                mean_ssim());
  os << line;
  return os.str();
}

}  // namespace nvsdiff
