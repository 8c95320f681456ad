#include "nvsdiff/training.hpp"

#include "nvsdiff/image_io.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace nvsdiff {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Pairs, swap and dropout

void TrainingPair::recompute() {
  const std::array<CameraPose, 2> others{world_reference, world_novel};
  const auto ns = normalize_to_input_frame(world_input, others, points, scale);
  canonical_input = ns.poses[0];
  canonical_reference = ns.poses[1];
  canonical_novel = ns.poses[2];
  r_d = ns.r_d;
  rel_input_reference = relative_pose(canonical_input, canonical_reference);
  rel_input_novel = relative_pose(canonical_input, canonical_novel);
}

CameraConditioning TrainingPair::conditioning() const {
  return {r_d, canonical_input.focal / canonical_input.image_size.width,
          rel_input_reference.rotation, rel_input_reference.translation};
}

TrainingPair make_pair(const SceneEntry& scene, int input_view, int reference_view,
                       int novel_view) {
  const int n = scene.num_views();
  for (int v : {input_view, reference_view, novel_view})
    if (v < 0 || v >= n) throw ValidationError("make_pair: view index out of range");
  TrainingPair pair;
  pair.scene_id = scene.id;
  pair.view_input = input_view;
  pair.view_reference = reference_view;
  pair.view_novel = novel_view;
  pair.x_input = scene.images[input_view];
  pair.x_reference = scene.images[reference_view];
  pair.x_novel = scene.images[novel_view];
  pair.world_input = scene.poses[input_view];
  pair.world_reference = scene.poses[reference_view];
  pair.world_novel = scene.poses[novel_view];
  pair.points = scene.points;
  pair.scale = std::min(unit_cube_scale(pair.world_input, pair.points),
                        unit_cube_scale(pair.world_reference, pair.points));
  pair.recompute();
  return pair;
}

TrainingPair swapped(const TrainingPair& pair) {
  TrainingPair out = pair;
  std::swap(out.view_input, out.view_reference);
  std::swap(out.x_input, out.x_reference);
  std::swap(out.world_input, out.world_reference);
  out.recompute();
  return out;
}

TrainingPair swap_views(const TrainingPair& pair, Rng& rng, double p_swap) {
  return rng.bernoulli(p_swap) ? swapped(pair) : pair;
}

std::optional<torch::Tensor> reference_dropout(const torch::Tensor& x_ref, Rng& rng,
                                               double p_drop) {
  if (rng.bernoulli(p_drop)) return std::nullopt;
  return x_ref;
}

// ---------------------------------------------------------------------------
// Losses

void LossWeights::validate() const {
  for (double g : {photometric, perceptual, distortion})
    if (!(g >= 0.0) || !std::isfinite(g)) throw ValidationError("loss weights must be finite and >= 0");
}

torch::Tensor gradient_difference_loss(const torch::Tensor& pred, const torch::Tensor& target,
                                       int scales) {
  auto p = pred.permute({0, 3, 1, 2});
  auto q = target.permute({0, 3, 1, 2});
  auto total = torch::zeros({}, pred.options());
  int used = 0;
  for (int s = 0; s < scales && p.size(2) >= 2 && p.size(3) >= 2; ++s) {
    auto dx = [](const torch::Tensor& x) { return x.narrow(3, 1, x.size(3) - 1) - x.narrow(3, 0, x.size(3) - 1); };
    auto dy = [](const torch::Tensor& x) { return x.narrow(2, 1, x.size(2) - 1) - x.narrow(2, 0, x.size(2) - 1); };
    total = total + (dx(p) - dx(q)).abs().mean() + (dy(p) - dy(q)).abs().mean();
    ++used;
    p = torch::avg_pool2d(p, 2);
    q = torch::avg_pool2d(q, 2);
  }
  return used ? total / used : total;
}

json LossReport::to_json() const {
  auto v = [](const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; };
  return {{"t", t},
          {"denoising", v(denoising)},
          {"photometric", v(photometric)},
          {"perceptual", v(perceptual)},
          {"distortion", v(distortion)},
          {"total", v(total)}};
}

namespace {

torch::Tensor gather_rows(const torch::Tensor& x, const torch::Tensor& idx) {
  return idx.defined() ? x.index_select(0, idx) : x;
}

}  // namespace

LossReport compute_losses(FieldPredictor& model, const DiffusionSchedule& schedule,
                          std::span<const TrainingPair> batch, const std::vector<double>& t,
                          const torch::Tensor& ref_present, const LossOptions& options,
                          std::optional<torch::Generator> gen, torch::Tensor eps,
                          BatchRender* renders) {
  options.weights.validate();
  const auto b = static_cast<int64_t>(batch.size());
  if (b == 0) throw ValidationError("compute_losses: empty batch");
  if (static_cast<int64_t>(t.size()) != b) throw ValidationError("compute_losses: one t per pair");

  std::vector<torch::Tensor> xi, xr, xn;
  std::vector<CameraConditioning> cond;
  for (const auto& p : batch) {
    xi.push_back(p.x_input);
    xr.push_back(p.x_reference);
    xn.push_back(p.x_novel);
    cond.push_back(p.conditioning());
  }
  auto x_input = torch::stack(xi).to(torch::kFloat32);
  auto x_ref = torch::stack(xr).to(torch::kFloat32);
  auto x_novel = torch::stack(xn).to(torch::kFloat32);
  const int64_t h = x_input.size(1), w = x_input.size(2);

  std::vector<double> alphas, sigmas, snr_w;
  for (double ti : t) {
    if (!(ti >= 1.0 && ti <= schedule.total_steps()))
      throw ValidationError("compute_losses: t must lie in [1, T]");
    const auto as = schedule.alpha_sigma(ti);
    alphas.push_back(as.alpha);
    sigmas.push_back(as.sigma);
    snr_w.push_back(schedule.snr_weight(ti, options.weighting));
  }
  auto col = [&](const std::vector<double>& v) {
    return torch::tensor(v, torch::kFloat64).to(torch::kFloat32).view({b, 1, 1, 1});
  };
  if (!eps.defined()) eps = torch::randn(x_input.sizes(), gen, x_input.options());
  auto z_t = col(alphas) * x_input + col(sigmas) * eps;

  auto present = ref_present.defined() ? ref_present.to(torch::kBool) : torch::ones({b}, torch::kBool);
  VMField field = model.predict(z_t, x_ref, present, cond, t);

  const bool full = options.rays_per_view <= 0 || options.rays_per_view >= h * w;
  std::vector<RayBundle> rays_in, rays_nv;
  std::vector<torch::Tensor> tgt_in, tgt_nv;
  for (int64_t i = 0; i < b; ++i) {
    auto ri = generate_rays(batch[i].canonical_input, torch::kFloat32);
    auto rn = generate_rays(batch[i].canonical_novel, torch::kFloat32);
    torch::Tensor idx_i, idx_n;
    if (!full) {
      idx_i = torch::randperm(h * w, gen, torch::kLong).narrow(0, 0, options.rays_per_view);
      idx_n = torch::randperm(h * w, gen, torch::kLong).narrow(0, 0, options.rays_per_view);
    }
    ri.origins = gather_rows(ri.origins, idx_i);
    ri.directions = gather_rows(ri.directions, idx_i);
    rn.origins = gather_rows(rn.origins, idx_n);
    rn.directions = gather_rows(rn.directions, idx_n);
    tgt_in.push_back(gather_rows(x_input[i].reshape({h * w, 3}), idx_i));
    tgt_nv.push_back(gather_rows(x_novel[i].reshape({h * w, 3}), idx_n));
    rays_in.push_back(std::move(ri));
    rays_nv.push_back(std::move(rn));
  }
  auto out_in = render_batch(field, rays_in, options.render, gen);
  auto out_nv = render_batch(field, rays_nv, options.render, gen);
  auto pred_in = to_signed(out_in.color);
  auto pred_nv = to_signed(out_nv.color);
  auto target_in = torch::stack(tgt_in);
  auto target_nv = torch::stack(tgt_nv);

  LossReport report;
  report.t = t;
  auto weights = torch::tensor(snr_w, torch::kFloat64).to(torch::kFloat32);
  report.denoising = (weights * (pred_in - target_in).pow(2).mean({1, 2})).mean();
  report.photometric = (pred_nv - target_nv).pow(2).mean();
  report.distortion = 0.5 * (distortion_loss(out_in.weights, out_in.ts, out_in.deltas) +
                             distortion_loss(out_nv.weights, out_nv.ts, out_nv.deltas));
  report.perceptual = torch::zeros({}, pred_in.options());
  if (options.weights.perceptual > 0.0 && options.perceptual) {
    if (!full) throw ValidationError("perceptual loss needs full-image rendering (rays_per_view = 0)");
    report.perceptual = options.perceptual(pred_nv.reshape({b, h, w, 3}), x_novel) +
                        options.perceptual(pred_in.reshape({b, h, w, 3}), x_input);
  }
  report.total = report.denoising + options.weights.photometric * report.photometric +
                 options.weights.perceptual * report.perceptual +
                 options.weights.distortion * report.distortion;
  if (renders) *renders = {pred_in, pred_nv, target_in, target_nv};
  return report;
}

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("train config: " + m); };
  if (steps < 0) fail("steps must be >= 0");
  if (batch_size < 1) fail("batch size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning rate must be > 0");
  if (warmup_steps < 0) fail("warmup must be >= 0");
  if (!(p_swap >= 0.0 && p_swap <= 1.0)) fail("p_swap must lie in [0, 1]");
  if (samples_per_ray < 2) fail("samples per ray must be >= 2");
  if (holdout_every < 0 || holdout_every == 1) fail("holdout_every must be 0 or >= 2");
  if (perceptual != "none" && perceptual != "gradient") fail("perceptual must be none|gradient");
  if (checkpoint_every < 1 || sample_every < 1) fail("intervals must be >= 1");
  weights.validate();
}

json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"warmup_steps", warmup_steps},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip},
          {"gamma_photometric", weights.photometric},
          {"gamma_perceptual", weights.perceptual},
          {"gamma_distortion", weights.distortion},
          {"p_swap", p_swap},
          {"samples_per_ray", samples_per_ray},
          {"rays_per_view", rays_per_view},
          {"holdout_every", holdout_every},
          {"snr_weighting", weighting == SnrWeighting::kVelocity ? "velocity" : "epsilon"},
          {"perceptual", perceptual},
          {"checkpoint_every", checkpoint_every},
          {"sample_every", sample_every},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.weights.photometric = j.value("gamma_photometric", c.weights.photometric);
  c.weights.perceptual = j.value("gamma_perceptual", c.weights.perceptual);
  c.weights.distortion = j.value("gamma_distortion", c.weights.distortion);
  c.p_swap = j.value("p_swap", c.p_swap);
  c.samples_per_ray = j.value("samples_per_ray", c.samples_per_ray);
  c.rays_per_view = j.value("rays_per_view", c.rays_per_view);
  c.holdout_every = j.value("holdout_every", c.holdout_every);
  const auto w = j.value("snr_weighting", std::string("velocity"));
  if (w == "velocity") {
    c.weighting = SnrWeighting::kVelocity;
  } else if (w == "epsilon") {
    c.weighting = SnrWeighting::kEpsilon;
  } else {
    throw ValidationError("train config: snr_weighting must be velocity|epsilon");
  }
  c.perceptual = j.value("perceptual", c.perceptual);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.sample_every = j.value("sample_every", c.sample_every);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  return {{"model", model.to_json()},
          {"schedule", {{"total_steps", schedule.total_steps}, {"continuous_time", schedule.continuous_time}}},
          {"train", train.to_json()},
          {"variant", variant}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  try {
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("schedule")) {
      c.schedule.total_steps = j.at("schedule").value("total_steps", c.schedule.total_steps);
      c.schedule.continuous_time = j.at("schedule").value("continuous_time", false);
      c.schedule.validate();
    }
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    c.variant = j.value("variant", c.variant);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed config: ") + e.what());
  }
  return c;
}

std::vector<int> training_views(int num_views, int holdout_every) {
  std::vector<int> v;
  for (int i = 0; i < num_views; ++i)
    if (holdout_every == 0 || i % holdout_every != holdout_every - 1) v.push_back(i);
  return v;
}

std::vector<int> heldout_views(int num_views, int holdout_every) {
  std::vector<int> v;
  if (holdout_every == 0) return v;
  for (int i = 0; i < num_views; ++i)
    if (i % holdout_every == holdout_every - 1) v.push_back(i);
  return v;
}

double learning_rate_at(const TrainConfig& config, int step) {
  const double base = config.learning_rate;
  if (step < config.warmup_steps) return base * (step + 1) / config.warmup_steps;
  const int decay_steps = std::max(1, config.steps - config.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - config.warmup_steps) / decay_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Trainer

std::string checkpoint_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08d", step);
  return buf;
}

Trainer::Trainer(RunConfig config, SceneDataset data, fs::path run_dir)
    : config_(std::move(config)),
      data_(std::move(data)),
      run_dir_(std::move(run_dir)),
      schedule_(config_.schedule),
      rng_(config_.train.seed ^ 0x7261696e6e657273ULL),
      gen_(at::make_generator<at::CPUGeneratorImpl>(config_.train.seed + 17)) {
  config_.model.validate();
  config_.train.validate();
  if (data_.scenes.empty()) throw ValidationError("training needs at least one scene");
  for (const auto& s : data_.scenes) {
    if (training_views(s.num_views(), config_.train.holdout_every).size() < 3)
      throw ValidationError("scene " + s.id + " has fewer than 3 training views");
    const auto size = s.image_size();
    if (size.height != config_.model.image_height || size.width != config_.model.image_width)
      throw ValidationError("scene " + s.id + " image size does not match the model config");
  }

  torch::manual_seed(config_.train.seed);
  model_ = NvsTransformer(config_.model);
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->parameters(),
      torch::optim::AdamWOptions(config_.train.learning_rate).weight_decay(config_.train.weight_decay));

  loss_options_.weights = config_.train.weights;
  loss_options_.render = {config_.train.samples_per_ray, true};
  loss_options_.rays_per_view = config_.train.rays_per_view;
  loss_options_.weighting = config_.train.weighting;
  if (config_.train.perceptual == "gradient")
    loss_options_.perceptual = [](const torch::Tensor& a, const torch::Tensor& b) {
      return gradient_difference_loss(a, b);
    };
}

Trainer::~Trainer() = default;

std::vector<TrainingPair> Trainer::sample_batch(std::vector<double>* t, torch::Tensor* ref_present) {
  std::vector<TrainingPair> batch;
  std::vector<uint8_t> present;
  t->clear();
  const int n_scenes = static_cast<int>(data_.scenes.size());
  for (int b = 0; b < config_.train.batch_size; ++b) {
    const auto& scene = data_.scenes[rng_.integer(0, n_scenes - 1)];
    auto views = training_views(scene.num_views(), config_.train.holdout_every);
    // Partial Fisher-Yates for three distinct views.
    for (int k = 0; k < 3; ++k) {
      const auto j = rng_.integer(k, static_cast<int64_t>(views.size()) - 1);
      std::swap(views[k], views[j]);
    }
    auto pair = swap_views(make_pair(scene, views[0], views[1], views[2]), rng_, config_.train.p_swap);
    present.push_back(reference_dropout(pair.x_reference, rng_, config_.model.reference_dropout) ? 1 : 0);
    const double steps = schedule_.total_steps();
    t->push_back(config_.schedule.continuous_time ? 1.0 + (steps - 1.0) * rng_.uniform()
                                                  : static_cast<double>(rng_.integer(1, schedule_.total_steps())));
    batch.push_back(std::move(pair));
  }
  *ref_present = torch::tensor(std::vector<int64_t>(present.begin(), present.end())).to(torch::kBool);
  return batch;
}

StepRecord Trainer::step() {
  model_->train();
  const double lr = learning_rate_at(config_.train, step_);
  for (auto& group : optimizer_->param_groups())
    static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);

  // Per-step streams, so a resumed run draws the same batches.
  const uint64_t stream = config_.train.seed * 0x9E3779B97F4A7C15ULL + static_cast<uint64_t>(step_);
  rng_ = Rng(stream ^ 0x7261696e6e657273ULL);
  gen_.set_current_seed(stream + 17);

  std::vector<double> t;
  torch::Tensor present;
  auto batch = sample_batch(&t, &present);
  auto report = compute_losses(*model_, schedule_, batch, t, present, loss_options_, gen_);

  StepRecord rec;
  rec.step = step_ + 1;
  rec.denoising = report.denoising.item<double>();
  rec.photometric = report.photometric.item<double>();
  rec.perceptual = report.perceptual.item<double>();
  rec.distortion = report.distortion.item<double>();
  rec.total = report.total.item<double>();
  rec.t = t;
  rec.lr = lr;

  if (!std::isfinite(rec.total)) {
    json dump = report.to_json();
    dump["step"] = rec.step;
    json items = json::array();
    for (size_t i = 0; i < batch.size(); ++i)
      items.push_back({{"scene", batch[i].scene_id},
                       {"input_view", batch[i].view_input},
                       {"reference_view", batch[i].view_reference},
                       {"novel_view", batch[i].view_novel},
                       {"reference_present", present[static_cast<int64_t>(i)].item<bool>()},
                       {"r_d", batch[i].r_d}});
    dump["batch"] = items;
    if (!run_dir_.empty()) {
      fs::create_directories(run_dir_);
      std::ofstream(run_dir_ / "nan_dump.json") << dump.dump(2) << "\n";
    }
    throw NumericalError("non-finite loss at step " + std::to_string(rec.step) + ": " + dump.dump());
  }

  optimizer_->zero_grad();
  report.total.backward();
  if (config_.train.grad_clip > 0.0)
    torch::nn::utils::clip_grad_norm_(model_->parameters(), config_.train.grad_clip);
  optimizer_->step();
  ++step_;

  if (!run_dir_.empty()) {
    json line = {{"step", rec.step}, {"t", rec.t}, {"denoising", rec.denoising},
                 {"photometric", rec.photometric}, {"perceptual", rec.perceptual},
                 {"distortion", rec.distortion}, {"total", rec.total}, {"lr", rec.lr}};
    std::ofstream(run_dir_ / "metrics.jsonl", std::ios::app) << line.dump() << "\n";
  }
  return rec;
}

std::vector<StepRecord> Trainer::run(const std::function<void(const StepRecord&)>& on_step) {
  if (!run_dir_.empty()) {
    fs::create_directories(run_dir_ / "checkpoints");
    std::ofstream(run_dir_ / "config.json") << config_.to_json().dump(2) << "\n";
    if (step_ == 0) save_checkpoint();
  }
  std::vector<StepRecord> history;
  int last_saved = step_;
  while (step_ < config_.train.steps) {
    history.push_back(step());
    if (on_step) on_step(history.back());
    if (!run_dir_.empty()) {
      if (step_ % config_.train.checkpoint_every == 0) {
        save_checkpoint();
        last_saved = step_;
      }
      if (step_ % config_.train.sample_every == 0) write_sample_grid();
    }
  }
  if (!run_dir_.empty() && last_saved != step_) save_checkpoint();
  return history;
}

void Trainer::save_checkpoint() const {
  if (run_dir_.empty()) throw ValidationError("save_checkpoint: no run directory");
  const auto dir = run_dir_ / "checkpoints" / checkpoint_name(step_);
  fs::create_directories(dir);
  torch::save(model_, (dir / "model.pt").string());
  torch::save(*optimizer_, (dir / "optimizer.pt").string());
  json meta = {{"format", "nvsdiff-checkpoint"},
               {"version", kCheckpointVersion},
               {"step", step_},
               {"config", config_.to_json()}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
}

void Trainer::resume(const fs::path& checkpoint_dir) {
  auto ckpt = load_checkpoint(checkpoint_dir);
  if (ckpt.config.model.to_json() != config_.model.to_json())
    throw ValidationError("resume: checkpoint model config differs from the run config");
  torch::load(model_, (checkpoint_dir / "model.pt").string());
  if (fs::exists(checkpoint_dir / "optimizer.pt"))
    torch::load(*optimizer_, (checkpoint_dir / "optimizer.pt").string());
  step_ = ckpt.step;
}

void Trainer::write_sample_grid() {
  torch::NoGradGuard guard;
  model_->eval();
  const auto& scene = data_.scenes.front();
  const auto views = training_views(scene.num_views(), config_.train.holdout_every);
  auto pair = make_pair(scene, views[0], views[1], views[2]);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config_.train.seed + step_);
  LossOptions opts = loss_options_;
  opts.rays_per_view = 0;
  opts.render.stratified = false;
  BatchRender renders;
  const double t = std::max(1.0, schedule_.total_steps() / 2.0);
  compute_losses(*model_, schedule_, std::span<const TrainingPair>(&pair, 1), {t},
                 torch::ones({1}, torch::kBool), opts, gen, {}, &renders);
  const int64_t h = pair.x_input.size(0), w = pair.x_input.size(1);
  auto img = [&](const torch::Tensor& x) { return to_unit(x.reshape({h, w, 3})); };
  auto grid = tile_images({img(renders.input_target[0]), img(renders.input_view[0]),
                           img(renders.novel_target[0]), img(renders.novel_view[0])},
                          4);
  fs::create_directories(run_dir_ / "samples");
  write_png(run_dir_ / "samples" / (checkpoint_name(step_) + ".png"), grid);
}

LoadedCheckpoint load_checkpoint(const fs::path& checkpoint_dir) {
  const auto meta_path = checkpoint_dir / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw LoadError("missing checkpoint metadata: " + meta_path.string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("malformed checkpoint metadata " + meta_path.string() + ": " + e.what());
  }
  if (meta.value("format", std::string{}) != "nvsdiff-checkpoint")
    throw LoadError(meta_path.string() + " is not an nvsdiff checkpoint");
  if (meta.value("version", 0) != kCheckpointVersion)
    throw LoadError(meta_path.string() + ": unsupported checkpoint version " +
                    std::to_string(meta.value("version", 0)));
  LoadedCheckpoint out;
  out.config = RunConfig::from_json(meta.at("config"));
  out.step = meta.value("step", 0);
  out.dir = checkpoint_dir;
  out.model = NvsTransformer(out.config.model);
  try {
    torch::load(out.model, (checkpoint_dir / "model.pt").string());
  } catch (const c10::Error& e) {
    throw LoadError("cannot read weights in " + checkpoint_dir.string() + ": " +
                    e.what_without_backtrace());
  }
  out.model->eval();
  return out;
}

fs::path latest_checkpoint(const fs::path& run_dir) {
  const auto dir = run_dir / "checkpoints";
  if (!fs::is_directory(dir)) throw LoadError("no checkpoints under " + run_dir.string());
  fs::path best;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && e.path().filename().string().rfind("step_", 0) == 0 &&
        (best.empty() || e.path().filename() > best.filename()))
      best = e.path();
  if (best.empty()) throw LoadError("no checkpoints under " + run_dir.string());
  return best;
}

}  // namespace nvsdiff
