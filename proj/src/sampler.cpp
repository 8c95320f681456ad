#include "nvsdiff/sampler.hpp"

#include "nvsdiff/image_io.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>

namespace nvsdiff {

void SamplerConfig::validate() const {
  if (num_steps < 1) throw ValidationError("sampler: num_steps must be >= 1");
  if (!std::isfinite(guidance)) throw ValidationError("sampler: guidance weight must be finite");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ValidationError("sampler: eta must lie in [0, 1]");
  if (samples_per_ray < 2) throw ValidationError("sampler: samples_per_ray must be >= 2");
}

std::vector<double> step_schedule(const DiffusionSchedule& schedule, int num_steps) {
  if (num_steps < 1) throw ValidationError("step_schedule: num_steps must be >= 1");
  const int total = schedule.total_steps();
  if (!schedule.config().continuous_time && num_steps > total)
    throw ValidationError("step_schedule: more steps than the schedule has");
  std::vector<double> steps;
  steps.reserve(num_steps + 1);
  for (int k = 0; k < num_steps; ++k) {
    double t = static_cast<double>(total) * (num_steps - k) / num_steps;
    if (!schedule.config().continuous_time) t = std::max(1.0, std::round(t));
    steps.push_back(t);
  }
  steps.push_back(0.0);
  return steps;
}

torch::Tensor cfg_combine(const torch::Tensor& x_cond, const torch::Tensor& x_uncond, double w) {
  if (!x_cond.sizes().equals(x_uncond.sizes()))
    throw ValidationError("cfg_combine: shape mismatch");
  if (w == 1.0) return x_cond.clone();
  if (w == 0.0) return x_uncond.clone();
  return x_uncond + w * (x_cond - x_uncond);
}

torch::Tensor ddim_step(const DiffusionSchedule& schedule, const torch::Tensor& z_t,
                        const torch::Tensor& x_hat, double t, double s, double eta,
                        std::optional<torch::Generator> gen) {
  if (!(t > s)) throw ValidationError("ddim_step: requires t > s");
  if (!z_t.sizes().equals(x_hat.sizes())) throw ValidationError("ddim_step: shape mismatch");
  const auto at = schedule.alpha_sigma(t);
  const auto as = schedule.alpha_sigma(s);
  if (at.sigma < kMinSigma) throw ValidationError("ddim_step: sigma_t is zero");
  if (s == 0.0) return x_hat.clone();
  auto eps_hat = (z_t - at.alpha * x_hat) / at.sigma;
  if (eta <= 0.0) return as.alpha * x_hat + as.sigma * eps_hat;
  const double ratio = (as.sigma * as.sigma) / (at.sigma * at.sigma);
  const double keep = 1.0 - (at.alpha * at.alpha) / (as.alpha * as.alpha);
  const double sigma_eta = eta * std::sqrt(std::max(0.0, ratio * keep));
  const double dir = std::sqrt(std::max(0.0, as.sigma * as.sigma - sigma_eta * sigma_eta));
  return as.alpha * x_hat + dir * eps_hat + sigma_eta * torch::randn(z_t.sizes(), gen, z_t.options());
}

SampleRequest make_request(const SceneEntry& scene, int input_view, int reference_view,
                           const std::vector<int>& novel_views) {
  const int n = scene.num_views();
  auto check = [&](int v) {
    if (v < 0 || v >= n) throw ValidationError("view index " + std::to_string(v) + " out of range");
  };
  check(input_view);
  for (int v : novel_views) check(v);
  const auto& input = scene.poses[input_view];
  double scale = unit_cube_scale(input, scene.points);
  std::vector<CameraPose> others;
  if (reference_view >= 0) {
    check(reference_view);
    scale = std::min(scale, unit_cube_scale(scene.poses[reference_view], scene.points));
    others.push_back(scene.poses[reference_view]);
  }
  for (int v : novel_views) others.push_back(scene.poses[v]);
  const auto ns = normalize_to_input_frame(input, others, scene.points, scale);

  SampleRequest req;
  req.input_pose = ns.poses[0];
  req.cond.r_d = ns.r_d;
  req.cond.focal = input.focal / input.image_size.width;
  size_t k = 1;
  if (reference_view >= 0) {
    const auto rel = relative_pose(ns.poses[0], ns.poses[1]);
    req.cond.rotation = rel.rotation;
    req.cond.translation = rel.translation;
    req.reference = scene.images[reference_view];
    k = 2;
  }
  for (; k < ns.poses.size(); ++k) req.novel_poses.push_back(ns.poses[k]);
  return req;
}

ViewRender render_view(const VMField& field, const CameraPose& pose, int samples_per_ray) {
  const auto rays = generate_rays(pose, field.planes.scalar_type());
  auto out = render(field, rays, {samples_per_ray, false});
  const int64_t h = pose.image_size.height, w = pose.image_size.width;
  return {to_signed(out.color).reshape({h, w, 3}), out.depth.reshape({h, w}),
          out.opacity.reshape({h, w})};
}

SampleResult sample(FieldPredictor& model, const DiffusionSchedule& schedule,
                    const SampleRequest& request, const SamplerConfig& config,
                    torch::Generator gen) {
  config.validate();
  torch::NoGradGuard no_grad;
  SampleResult result;
  const int64_t h = request.input_pose.image_size.height;
  const int64_t w = request.input_pose.image_size.width;

  const bool has_ref = request.reference.has_value();
  const bool guided = has_ref && config.guidance != 1.0;
  if (!has_ref && config.guidance != 1.0)
    result.warnings.push_back("no reference view: guidance weight has no effect");

  torch::Tensor x_ref = has_ref ? request.reference->to(torch::kFloat32).unsqueeze(0)
                                : torch::zeros({1, h, w, 3});
  const std::vector<CameraConditioning> cond{request.cond};
  const std::vector<CameraConditioning> uncond{request.cond.without_reference()};
  auto present = torch::full({1}, has_ref, torch::kBool);
  auto absent = torch::zeros({1}, torch::kBool);

  result.steps = step_schedule(schedule, config.num_steps);
  auto z = torch::randn({1, h, w, 3}, gen, torch::kFloat32);
  const auto& steps = result.steps;
  for (size_t k = 0; k + 1 < steps.size(); ++k) {
    const double t = steps[k], s = steps[k + 1];
    VMField field = model.predict(z, x_ref, present, has_ref ? cond : uncond, {t});
    auto x_cond = render_view(field, request.input_pose, config.samples_per_ray).color.unsqueeze(0);
    auto x_hat = x_cond;
    if (guided) {
      VMField f_u = model.predict(z, x_ref, absent, uncond, {t});
      auto x_uncond = render_view(f_u, request.input_pose, config.samples_per_ray).color.unsqueeze(0);
      x_hat = cfg_combine(x_cond, x_uncond, config.guidance);
    }
    if (config.clamp) x_hat = x_hat.clamp(-1.0, 1.0);
    z = ddim_step(schedule, z, x_hat, t, s, config.eta, gen);
    result.field = field;
  }
  result.denoised = z.squeeze(0);
  for (const auto& pose : request.novel_poses) {
    auto v = render_view(result.field, pose, config.samples_per_ray);
    result.novel_views.push_back(v.color);
    result.depths.push_back(v.depth);
    result.opacities.push_back(v.opacity);
  }
  return result;
}

}  // namespace nvsdiff
