#pragma once

#include "nvsdiff/camera.hpp"
#include "nvsdiff/renderer.hpp"
#include "nvsdiff/scene.hpp"
#include "nvsdiff/schedule.hpp"
#include "nvsdiff/transformer.hpp"
#include "nvsdiff/vm_field.hpp"

#include <torch/types.h>

#include <optional>
#include <string>
#include <vector>

namespace nvsdiff {

struct SamplerConfig {
  int num_steps = 50;
  double guidance = 2.0;
  double eta = 0.0;
  bool clamp = true;
  int samples_per_ray = 64;

  void validate() const;
};

// Uniform stride over [1, T]: num_steps decreasing steps followed by 0.
std::vector<double> step_schedule(const DiffusionSchedule& schedule, int num_steps);

// x_uncond + w (x_cond - x_uncond)
torch::Tensor cfg_combine(const torch::Tensor& x_cond, const torch::Tensor& x_uncond, double w);

// DDIM update from t to s < t through x_hat. eta > 0 mixes in fresh noise with
// the generalized DDIM variance; eta = 0 is deterministic.
torch::Tensor ddim_step(const DiffusionSchedule& schedule, const torch::Tensor& z_t,
                        const torch::Tensor& x_hat, double t, double s, double eta = 0.0,
                        std::optional<torch::Generator> gen = std::nullopt);

// Everything the sampler needs about one datum, already in the canonical
// input frame.
struct SampleRequest {
  CameraPose input_pose;               // identity rotation at (0, 0, r_d)
  std::optional<torch::Tensor> reference;  // [H, W, 3] in [-1, 1]
  CameraConditioning cond;
  std::vector<CameraPose> novel_poses;
};

// Canonicalizes views of a scene with the pair scale used in training.
// Pass reference_view < 0 to sample without a reference.
SampleRequest make_request(const SceneEntry& scene, int input_view, int reference_view,
                           const std::vector<int>& novel_views);

struct SampleResult {
  torch::Tensor denoised;                  // [H, W, 3] in [-1, 1]
  std::vector<torch::Tensor> novel_views;  // [H, W, 3] in [-1, 1]
  std::vector<torch::Tensor> depths;       // [H, W]
  std::vector<torch::Tensor> opacities;    // [H, W]
  VMField field;                           // last conditional prediction
  std::vector<double> steps;
  std::vector<std::string> warnings;
};

SampleResult sample(FieldPredictor& model, const DiffusionSchedule& schedule,
                    const SampleRequest& request, const SamplerConfig& config,
                    torch::Generator gen);

// Deterministic full-image render of one field: color in [-1, 1], depth, opacity.
struct ViewRender {
  torch::Tensor color;
  torch::Tensor depth;
  torch::Tensor opacity;
};
ViewRender render_view(const VMField& field, const CameraPose& pose, int samples_per_ray);

}  // namespace nvsdiff
