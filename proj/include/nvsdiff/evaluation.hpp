#pragma once

#include "nvsdiff/metrics.hpp"
#include "nvsdiff/sampler.hpp"
#include "nvsdiff/scene.hpp"
#include "nvsdiff/training.hpp"
#include "nvsdiff/vm_field.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace nvsdiff {

nlohmann::json report_to_json(const MetricReport& report);

// Compares every view of every scene with itself; must report the PSNR cap
// and SSIM 1.
MetricReport self_check(const SceneDataset& data);

enum class EvalTargets { kHeldout, kTraining };

struct EvalOptions {
  SamplerConfig sampler;
  uint64_t seed = 0;
  int max_scenes = 0;  // 0 = all
  int holdout_every = 6;
  // kHeldout scores held-out views; kTraining scores training views other
  // than the input and reference.
  EvalTargets targets = EvalTargets::kHeldout;
  bool use_reference = true;
};

struct EvalResult {
  MetricReport novel;     // novel views against ground truth
  MetricReport denoised;  // denoised input view against the clean input
  // Per view, with the images in [0, 1] for plug-ins and grids.
  std::vector<torch::Tensor> predictions;
  std::vector<torch::Tensor> targets;
};

// Input view = first training view, reference = second.
EvalResult evaluate(FieldPredictor& model, const DiffusionSchedule& schedule,
                    const SceneDataset& data, const EvalOptions& options);

// Ablation harness.
const std::vector<std::string>& ablation_variants();
RunConfig apply_variant(const RunConfig& base, const std::string& variant);

struct AblationRow {
  std::string variant;
  int steps = 0;
  bool finite = true;
  double first_loss = 0.0;  // mean denoising loss over the first window
  double final_loss = 0.0;  // mean denoising loss over the last window
  double psnr = 0.0;
  double ssim = 0.0;
  std::vector<double> denoising_curve;
};

struct AblationOptions {
  int steps = 200;
  int window = 20;
  bool evaluate = true;
  EvalOptions eval;
  std::filesystem::path run_root;  // empty = no run directories
};

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<std::string>& variants,
                                      const SceneDataset& data, const AblationOptions& options,
                                      const std::function<void(const std::string&, const StepRecord&)>& on_step = {});
std::string ablation_table(const std::vector<AblationRow>& rows);
nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);

// Direct per-scene optimization of a VM field against posed renders, in the
// canonical frame of view 0.
struct FitOptions {
  int grid = 48;
  int channels = 16;
  int head_hidden = 32;
  int steps = 2000;
  double lr_grid = 0.02;
  double lr_heads = 0.005;
  int rays_per_step = 1024;
  int samples_per_ray = 64;
  double init_scale = 0.1;
  double distortion_weight = 0.0;
  int holdout_every = 6;
  uint64_t seed = 0;
};

struct FitResult {
  VMField field;
  std::vector<CameraPose> poses;  // canonical, one per scene view
  MetricReport heldout;
  MetricReport train;
  std::vector<double> losses;
};

FitResult fit_scene_field(const SceneEntry& scene, const FitOptions& options,
                          const std::function<void(int, double)>& on_step = {});

}  // namespace nvsdiff
