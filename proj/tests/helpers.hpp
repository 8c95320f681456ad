#pragma once

#include "nvsdiff/camera.hpp"
#include "nvsdiff/scene.hpp"
#include "nvsdiff/transformer.hpp"
#include "nvsdiff/vm_field.hpp"

#include <Eigen/Dense>
#include <torch/torch.h>

#include <cmath>
#include <functional>
#include <random>

namespace testing_util {

using namespace nvsdiff;

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline Vec3 random_vec(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

inline CameraPose make_pose(const Mat3& r, const Vec3& t, int size = 8, double focal = 8.0) {
  CameraPose p;
  p.rotation = r;
  p.translation = t;
  p.focal = focal;
  p.principal_point = Vec2(size / 2.0, size / 2.0);
  p.image_size = {size, size};
  return p;
}

// Camera at `eye` looking at `target`.
inline CameraPose look_at(const Vec3& eye, const Vec3& target, int size = 8, double focal = 8.0) {
  const Mat3 r = look_at_rotation(eye, target, Vec3(0, 1, 0));
  return make_pose(r, -r * eye, size, focal);
}

inline CameraPose random_pose(std::mt19937_64& rng, int size = 8) {
  const Vec3 eye = random_vec(rng, -1.0, 1.0).normalized() * std::uniform_real_distribution<>(1.5, 3.0)(rng);
  return look_at(eye, random_vec(rng, -0.2, 0.2), size, 0.9 * size);
}

// 4x4 world-to-camera matrix.
inline Eigen::Matrix4d homogeneous(const Mat3& r, const Vec3& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = t;
  return m;
}

// Returns a stub that always predicts `field` (broadcast over the batch) and
// records the inputs it saw.
class FixedFieldModel : public FieldPredictor {
 public:
  explicit FixedFieldModel(VMField field) : field_(std::move(field)) {}
  VMField predict(const torch::Tensor& z_t, const torch::Tensor&, const torch::Tensor& ref_present,
                  const std::vector<CameraConditioning>& cond, const std::vector<double>& t) override {
    ++calls;
    last_present = ref_present.clone();
    last_cond = cond;
    last_t = t;
    last_z = z_t.clone();
    const int64_t b = z_t.size(0);
    VMField out = field_;
    out.planes = field_.planes.expand({b, -1, -1, -1, -1});
    out.lines = field_.lines.expand({b, -1, -1, -1});
    return out;
  }
  int calls = 0;
  torch::Tensor last_present;
  torch::Tensor last_z;
  std::vector<CameraConditioning> last_cond;
  std::vector<double> last_t;

 private:
  VMField field_;
};

// Picks one of two fixed fields depending on whether the reference is present.
class SwitchModel : public FieldPredictor {
 public:
  SwitchModel(VMField cond, VMField uncond) : cond_(std::move(cond)), uncond_(std::move(uncond)) {}
  VMField predict(const torch::Tensor& z_t, const torch::Tensor& x_ref, const torch::Tensor& ref_present,
                  const std::vector<CameraConditioning>& c, const std::vector<double>& t) override {
    const bool present = ref_present[0].item<bool>();
    return FixedFieldModel(present ? cond_ : uncond_).predict(z_t, x_ref, ref_present, c, t);
  }

 private:
  VMField cond_, uncond_;
};

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Heads mapping a [0, 1] occupancy feature to `density` inside and ~0 outside,
// with a constant color.
inline FieldHeads occupancy_heads(int64_t channels, double density, const Vec3& rgb,
                                  torch::Dtype dtype = torch::kFloat32) {
  FieldHeads heads(channels, 4);
  heads->zero_();
  torch::NoGradGuard g;
  const double bias = -30.0;
  // softplus(x) ~ x for x >> 1; inside f = 1 gives softplus(density).
  const double inv = density > 20.0 ? density : std::log(std::expm1(density));
  heads->density_head->weight.fill_(inv - bias);
  heads->density_head->bias.fill_(bias);
  for (int k = 0; k < 3; ++k) heads->color_out->bias[k] = logit(rgb[k]);
  heads->to(dtype);
  return heads;
}

// Exact VM encoding of a ball centered at the origin: one channel per x node,
// with the hat function at that node on V_x and the disk slice on M_yz.
inline VMField sphere_field(int64_t grid, double radius, double density, const Vec3& rgb,
                            torch::Dtype dtype = torch::kFloat32) {
  const int64_t c = grid;
  auto heads = occupancy_heads(c, density, rgb, dtype);
  VMField f = VMField::zeros(1, grid, c, heads, torch::TensorOptions().dtype(torch::kFloat64));
  auto planes = f.planes.accessor<double, 5>();
  auto lines = f.lines.accessor<double, 4>();
  auto node = [&](int64_t i) { return -1.0 + 2.0 * i / (grid - 1); };
  for (int64_t i = 0; i < grid; ++i) {
    lines[0][0][i][i] = 1.0;
    const double x = node(i);
    const double r2 = radius * radius - x * x;
    if (r2 < 0) continue;
    for (int64_t y = 0; y < grid; ++y)
      for (int64_t z = 0; z < grid; ++z)
        if (node(y) * node(y) + node(z) * node(z) <= r2) planes[0][0][i][y][z] = 1.0;
  }
  f.planes = f.planes.to(dtype);
  f.lines = f.lines.to(dtype);
  return f;
}

// Scene entry built in memory from an analytic scene and explicit cameras.
inline SceneEntry scene_from_toy(const ToyScene& scene, const std::vector<CameraPose>& poses,
                                 int samples = 256) {
  SceneEntry e;
  e.id = "toy";
  std::vector<torch::Tensor> imgs;
  for (const auto& p : poses) imgs.push_back(render_toy_view(scene, p, samples).to(torch::kFloat32) * 2.0 - 1.0);
  e.images = torch::stack(imgs);
  e.poses = poses;
  e.points = scene.bounding_points();
  e.ground_truth = scene;
  return e;
}

// Central finite-difference relative error max|g_fd - g| / max(|g|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace testing_util
