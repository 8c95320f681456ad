#pragma once

#include "nvsdiff/camera.hpp"
#include "nvsdiff/renderer.hpp"
#include "nvsdiff/scene.hpp"
#include "nvsdiff/schedule.hpp"
#include "nvsdiff/transformer.hpp"

#include "json.hpp"
#include <torch/types.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace torch::optim {
class AdamW;
}

namespace nvsdiff {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input, reference and novel views of one scene. World-frame poses are kept so
// the canonical frame can be rebuilt after a swap; derived fields live in the
// input view's canonical frame.
struct TrainingPair {
  std::string scene_id;
  int view_input = 0;
  int view_reference = 1;
  int view_novel = 2;

  torch::Tensor x_input;      // [H, W, 3] in [-1, 1]
  torch::Tensor x_reference;  // [H, W, 3]
  torch::Tensor x_novel;      // [H, W, 3]

  CameraPose world_input;
  CameraPose world_reference;
  CameraPose world_novel;
  std::vector<Vec3> points;
  // Uniform scale shared by both possible canonical frames of the pair.
  double scale = 1.0;

  CameraPose canonical_input;
  CameraPose canonical_reference;
  CameraPose canonical_novel;
  double r_d = 1.0;
  RelativePose rel_input_reference;  // R_ir, T_ir
  RelativePose rel_input_novel;      // R_in, T_in

  // Rebuilds the canonical quantities from the world-frame fields.
  void recompute();
  CameraConditioning conditioning() const;
};

// Builds a pair from scene views; the scale is the smaller of the two unit-cube
// scales so content stays inside the cube whichever view is canonical.
TrainingPair make_pair(const SceneEntry& scene, int input_view, int reference_view,
                       int novel_view);

// With probability p_swap, exchanges the input and reference roles.
TrainingPair swap_views(const TrainingPair& pair, Rng& rng, double p_swap);
TrainingPair swapped(const TrainingPair& pair);

// Returns nullopt (the null reference) with probability p_drop.
std::optional<torch::Tensor> reference_dropout(const torch::Tensor& x_ref, Rng& rng, double p_drop);

struct LossWeights {
  double photometric = 1.0;   // gamma_1
  double perceptual = 0.0;    // gamma_2
  double distortion = 0.01;   // gamma_3
  void validate() const;
};

// Any image-pair -> scalar loss on [B, H, W, 3] tensors in [-1, 1].
using PerceptualLoss = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

// Multi-scale L1 difference of horizontal and vertical image gradients.
torch::Tensor gradient_difference_loss(const torch::Tensor& pred, const torch::Tensor& target,
                                       int scales = 3);

struct LossOptions {
  LossWeights weights;
  RenderOptions render;
  int rays_per_view = 0;  // 0 renders every pixel
  SnrWeighting weighting = SnrWeighting::kVelocity;
  PerceptualLoss perceptual;
};

struct LossReport {
  torch::Tensor denoising;
  torch::Tensor photometric;
  torch::Tensor perceptual;
  torch::Tensor distortion;
  torch::Tensor total;
  std::vector<double> t;

  nlohmann::json to_json() const;
};

struct BatchRender {
  torch::Tensor input_view;   // [B, P, 3] in [-1, 1]
  torch::Tensor novel_view;   // [B, P, 3]
  torch::Tensor input_target;
  torch::Tensor novel_target;
};

// Noises each input view at its step, predicts a field, renders it at the
// input and novel cameras and assembles
//   total = denoising + g1 photometric + g2 perceptual + g3 distortion.
// `ref_present` is bool [B]; `eps` may be undefined to draw fresh noise.
LossReport compute_losses(FieldPredictor& model, const DiffusionSchedule& schedule,
                          std::span<const TrainingPair> batch, const std::vector<double>& t,
                          const torch::Tensor& ref_present, const LossOptions& options,
                          std::optional<torch::Generator> gen = std::nullopt,
                          torch::Tensor eps = {}, BatchRender* renders = nullptr);

struct TrainConfig {
  int steps = 20000;
  int batch_size = 4;
  double learning_rate = 2e-4;
  int warmup_steps = 1000;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  LossWeights weights;
  double p_swap = 0.5;
  int samples_per_ray = 48;
  int rays_per_view = 0;
  int holdout_every = 6;  // views v with v % holdout_every == holdout_every - 1 are held out
  SnrWeighting weighting = SnrWeighting::kVelocity;
  std::string perceptual = "none";  // none | gradient
  int checkpoint_every = 1000;
  int sample_every = 1000;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  std::string variant = "full";

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

// Views usable for training triples.
std::vector<int> training_views(int num_views, int holdout_every);
std::vector<int> heldout_views(int num_views, int holdout_every);

double learning_rate_at(const TrainConfig& config, int step);

struct StepRecord {
  int step = 0;
  double denoising = 0.0;
  double photometric = 0.0;
  double perceptual = 0.0;
  double distortion = 0.0;
  double total = 0.0;
  std::vector<double> t;
  double lr = 0.0;
};

inline constexpr int kCheckpointVersion = 1;

class Trainer {
 public:
  // `run_dir` may be empty to train without writing anything.
  Trainer(RunConfig config, SceneDataset data, std::filesystem::path run_dir = {});
  ~Trainer();

  // One optimization step; throws NumericalError (after writing a diagnostic
  // dump when a run directory is set) on a non-finite loss.
  StepRecord step();
  // Runs until `config.train.steps`, writing checkpoints, metrics and sample
  // grids into the run directory.
  std::vector<StepRecord> run(const std::function<void(const StepRecord&)>& on_step = {});

  void save_checkpoint() const;
  // Restores weights, optimizer state and the step counter.
  void resume(const std::filesystem::path& checkpoint_dir);

  NvsTransformer model() const { return model_; }
  const RunConfig& config() const { return config_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  int current_step() const { return step_; }
  const SceneDataset& data() const { return data_; }

  // Draws the next training batch (advances the data RNG).
  std::vector<TrainingPair> sample_batch(std::vector<double>* t, torch::Tensor* ref_present);

 private:
  void write_sample_grid();

  RunConfig config_;
  SceneDataset data_;
  std::filesystem::path run_dir_;
  DiffusionSchedule schedule_;
  NvsTransformer model_{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  LossOptions loss_options_;
  Rng rng_;
  torch::Generator gen_;
  int step_ = 0;
};

struct LoadedCheckpoint {
  RunConfig config;
  NvsTransformer model{nullptr};
  int step = 0;
  std::filesystem::path dir;
};

std::string checkpoint_name(int step);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& checkpoint_dir);
// Most recent step_* directory under <run_dir>/checkpoints.
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);

}  // namespace nvsdiff
