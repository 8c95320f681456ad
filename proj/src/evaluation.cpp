#include "nvsdiff/evaluation.hpp"

#include "nvsdiff/image_io.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace nvsdiff {

using nlohmann::json;

json report_to_json(const MetricReport& report) {
  json views = json::array();
  for (const auto& v : report.views)
    views.push_back({{"scene", v.scene}, {"view", v.view}, {"psnr", v.psnr}, {"ssim", v.ssim}});
  return {{"views", views},
          {"mean_psnr", report.mean_psnr()},
          {"mean_ssim", report.mean_ssim()},
          {"count", report.views.size()}};
}

MetricReport self_check(const SceneDataset& data) {
  MetricReport report;
  for (const auto& scene : data.scenes)
    for (int v = 0; v < scene.num_views(); ++v) {
      auto img = to_unit(scene.images[v]);
      report.views.push_back({scene.id, v, psnr(img, img), ssim(img, img)});
    }
  return report;
}

EvalResult evaluate(FieldPredictor& model, const DiffusionSchedule& schedule,
                    const SceneDataset& data, const EvalOptions& options) {
  EvalResult result;
  const int n = options.max_scenes > 0
                    ? std::min<int>(options.max_scenes, static_cast<int>(data.scenes.size()))
                    : static_cast<int>(data.scenes.size());
  for (int i = 0; i < n; ++i) {
    const auto& scene = data.scenes[i];
    const auto train = training_views(scene.num_views(), options.holdout_every);
    if (train.size() < 2) throw ValidationError("scene " + scene.id + " has too few training views");
    std::vector<int> targets;
    if (options.targets == EvalTargets::kHeldout) {
      targets = heldout_views(scene.num_views(), options.holdout_every);
    } else {
      targets.assign(train.begin() + 2, train.end());
    }
    if (targets.empty()) continue;
    const int ref = options.use_reference ? train[1] : -1;
    auto request = make_request(scene, train[0], ref, targets);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed * 1000003ULL + i);
    auto out = sample(model, schedule, request, options.sampler, gen);

    auto input_gt = to_unit(scene.images[train[0]]);
    auto denoised = to_unit(out.denoised).clamp(0.0, 1.0);
    result.denoised.views.push_back(
        {scene.id, train[0], psnr(denoised, input_gt), ssim(denoised, input_gt)});
    for (size_t k = 0; k < targets.size(); ++k) {
      auto pred = to_unit(out.novel_views[k]).clamp(0.0, 1.0);
      auto gt = to_unit(scene.images[targets[k]]);
      result.novel.views.push_back({scene.id, targets[k], psnr(pred, gt), ssim(pred, gt)});
      result.predictions.push_back(pred);
      result.targets.push_back(gt);
    }
  }
  return result;
}

const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full", "noisy_input_only", "no_encoder",
                                          "no_camera_conditioning", "eps_weighting"};
  return v;
}

RunConfig apply_variant(const RunConfig& base, const std::string& variant) {
  RunConfig c = base;
  c.variant = variant;
  if (variant == "full") {
  } else if (variant == "noisy_input_only") {
    c.train.p_swap = 0.0;
  } else if (variant == "no_encoder") {
    c.model.use_encoder = false;
  } else if (variant == "no_camera_conditioning") {
    c.model.camera_conditioning = false;
  } else if (variant == "eps_weighting") {
    c.train.weighting = SnrWeighting::kEpsilon;
  } else {
    throw ValidationError("unknown ablation variant '" + variant + "'");
  }
  return c;
}

namespace {

double window_mean(const std::vector<double>& v, size_t begin, size_t end) {
  end = std::min(end, v.size());
  if (begin >= end) return 0.0;
  return std::accumulate(v.begin() + begin, v.begin() + end, 0.0) / (end - begin);
}

}  // namespace

std::vector<AblationRow> run_ablation(
    const RunConfig& base, const std::vector<std::string>& variants, const SceneDataset& data,
    const AblationOptions& options,
    const std::function<void(const std::string&, const StepRecord&)>& on_step) {
  std::vector<AblationRow> rows;
  for (const auto& name : variants) {
    RunConfig cfg = apply_variant(base, name);
    cfg.train.steps = options.steps;
    cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, std::max(1, options.steps / 10));
    AblationRow row;
    row.variant = name;
    Trainer trainer(cfg, data, options.run_root.empty() ? std::filesystem::path{} : options.run_root / name);
    try {
      trainer.run([&](const StepRecord& r) {
        row.denoising_curve.push_back(r.denoising);
        if (on_step) on_step(name, r);
      });
    } catch (const NumericalError&) {
      row.finite = false;
    }
    row.steps = trainer.current_step();
    const size_t w = static_cast<size_t>(std::max(1, options.window));
    const size_t n = row.denoising_curve.size();
    row.first_loss = window_mean(row.denoising_curve, 0, w);
    row.final_loss = window_mean(row.denoising_curve, n > w ? n - w : 0, n);
    if (options.evaluate && row.finite) {
      auto model = trainer.model();
      model->eval();
      auto res = evaluate(*model, trainer.schedule(), data, options.eval);
      row.psnr = res.novel.mean_psnr();
      row.ssim = res.novel.mean_ssim();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof line, "%-24s %6s %6s %11s %11s %9s %8s\n", "variant", "steps", "finite",
                "loss_first", "loss_final", "psnr_db", "ssim");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-24s %6d %6s %11.5f %11.5f %9.3f %8.4f\n", r.variant.c_str(),
                  r.steps, r.finite ? "yes" : "no", r.first_loss, r.final_loss, r.psnr, r.ssim);
    os << line;
  }
  return os.str();
}

json ablation_to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"variant", r.variant},
                   {"steps", r.steps},
                   {"finite", r.finite},
                   {"loss_first", r.first_loss},
                   {"loss_final", r.final_loss},
                   {"psnr", r.psnr},
                   {"ssim", r.ssim},
                   {"denoising_curve", r.denoising_curve}});
  return out;
}

FitResult fit_scene_field(const SceneEntry& scene, const FitOptions& options,
                          const std::function<void(int, double)>& on_step) {
  if (options.steps < 0 || options.rays_per_step < 1 || options.grid < 2 || options.channels < 1)
    throw ValidationError("fit: invalid options");
  const int n_views = scene.num_views();
  auto train = training_views(n_views, options.holdout_every);
  auto held = heldout_views(n_views, options.holdout_every);

  std::vector<CameraPose> others(scene.poses.begin() + 1, scene.poses.end());
  const auto ns = normalize_to_input_frame(scene.poses[0], others, scene.points);
  FitResult result;
  result.poses = ns.poses;

  // One depth interval covering the cube from every camera.
  double dmin = 1e30, dmax = 0.0;
  for (const auto& p : ns.poses) {
    const double d = p.center().norm();
    dmin = std::min(dmin, d);
    dmax = std::max(dmax, d);
  }
  const DepthBounds bounds{std::max(0.05, dmin - std::sqrt(3.0)), dmax + std::sqrt(3.0)};

  std::vector<torch::Tensor> origins, dirs, colors;
  for (int v : train) {
    auto rays = generate_rays(ns.poses[v], bounds, torch::kFloat32);
    origins.push_back(rays.origins);
    dirs.push_back(rays.directions);
    colors.push_back(to_unit(scene.images[v]).reshape({-1, 3}));
  }
  auto all_o = torch::cat(origins), all_d = torch::cat(dirs), all_c = torch::cat(colors);
  const int64_t n_rays = all_o.size(0);

  torch::manual_seed(options.seed);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed + 1);
  FieldHeads heads(options.channels, options.head_hidden);
  VMField field = VMField::random(1, options.grid, options.channels, heads, options.init_scale,
                                  torch::kFloat32, gen);
  field.planes.set_requires_grad(true);
  field.lines.set_requires_grad(true);

  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(std::vector<torch::Tensor>{field.planes, field.lines},
                      std::make_unique<torch::optim::AdamOptions>(options.lr_grid));
  groups.emplace_back(heads->parameters(), std::make_unique<torch::optim::AdamOptions>(options.lr_heads));
  torch::optim::Adam opt(std::move(groups), torch::optim::AdamOptions(options.lr_grid));

  const RenderOptions train_render{options.samples_per_ray, true};
  for (int step = 0; step < options.steps; ++step) {
    // Decay both rates by 10x over the run.
    const double decay = std::pow(0.1, static_cast<double>(step) / std::max(1, options.steps));
    static_cast<torch::optim::AdamOptions&>(opt.param_groups()[0].options()).lr(options.lr_grid * decay);
    static_cast<torch::optim::AdamOptions&>(opt.param_groups()[1].options()).lr(options.lr_heads * decay);

    auto idx = torch::randint(n_rays, {options.rays_per_step}, gen, torch::kLong);
    RayBundle batch{all_o.index_select(0, idx), all_d.index_select(0, idx), bounds.near, bounds.far};
    auto out = render(field, batch, train_render, gen);
    auto loss = (out.color - all_c.index_select(0, idx)).pow(2).mean();
    if (options.distortion_weight > 0.0)
      loss = loss + options.distortion_weight * distortion_loss(out.weights, out.ts, out.deltas);
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double l = loss.item<double>();
    if (!std::isfinite(l)) throw NumericalError("fit: non-finite loss at step " + std::to_string(step));
    result.losses.push_back(l);
    if (on_step) on_step(step, l);
  }

  field.planes = field.planes.detach();
  field.lines = field.lines.detach();
  torch::NoGradGuard no_grad;
  auto score = [&](const std::vector<int>& views, MetricReport& report) {
    for (int v : views) {
      const auto& pose = ns.poses[v];
      auto out = render(field, generate_rays(pose, bounds, torch::kFloat32), {options.samples_per_ray, false});
      auto pred = out.color.reshape({pose.image_size.height, pose.image_size.width, 3}).clamp(0.0, 1.0);
      auto gt = to_unit(scene.images[v]);
      report.views.push_back({scene.id, v, psnr(pred, gt), ssim(pred, gt)});
    }
  };
  score(held, result.heldout);
  score(train, result.train);
  result.field = field;
  return result;
}

}  // namespace nvsdiff
