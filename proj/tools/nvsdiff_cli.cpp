// nvsdiff command-line tool.
#include "nvsdiff/evaluation.hpp"
#include "nvsdiff/image_io.hpp"
#include "nvsdiff/sampler.hpp"
#include "nvsdiff/scene.hpp"
#include "nvsdiff/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <torch/torch.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nvsdiff;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << "\n";
}

// Accepts a checkpoint directory or a run directory (latest checkpoint).
fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / "meta.json")) return p;
  return latest_checkpoint(p);
}

std::string fmt(const char* f, int v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// --- generate-data ----------------------------------------------------------

struct GenerateArgs {
  uint64_t seed = 0;
  int n_scenes = 8;
  fs::path out = "dataset";
  DatasetRenderOptions render;
};

int cmd_generate(const GenerateArgs& a) {
  auto summary = generate_dataset(a.seed, a.n_scenes, a.render, a.out);
  std::cout << "wrote " << summary.train << " train and " << summary.test << " test scenes to "
            << a.out << "\n";
  return kOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  fs::path config;
  fs::path data = "dataset";
  std::string split = "train";
  fs::path run_dir = "runs/default";
  std::optional<int> steps, batch_size, rays_per_view, samples_per_ray, checkpoint_every, sample_every;
  std::optional<double> lr;
  std::optional<uint64_t> seed;
  std::optional<std::string> variant;
  fs::path resume;
  int log_every = 50;
  int max_scenes = 0;
};

RunConfig load_run_config(const fs::path& path) {
  return path.empty() ? RunConfig{} : RunConfig::from_json(read_json(path));
}

SceneDataset load_data(const fs::path& root, const std::string& split, int max_scenes) {
  auto data = load_split(root, split);
  if (data.scenes.empty()) throw DataError("no scenes under " + (root / split).string());
  if (max_scenes > 0 && static_cast<int>(data.scenes.size()) > max_scenes) data.scenes.resize(max_scenes);
  return data;
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  if (a.variant) cfg = apply_variant(cfg, *a.variant);
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.rays_per_view) cfg.train.rays_per_view = *a.rays_per_view;
  if (a.samples_per_ray) cfg.train.samples_per_ray = *a.samples_per_ray;
  if (a.checkpoint_every) cfg.train.checkpoint_every = *a.checkpoint_every;
  if (a.sample_every) cfg.train.sample_every = *a.sample_every;
  if (a.lr) cfg.train.learning_rate = *a.lr;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.train.validate();

  auto data = load_data(a.data, a.split, a.max_scenes);
  Trainer trainer(cfg, std::move(data), a.run_dir);
  if (!a.resume.empty()) trainer.resume(resolve_checkpoint(a.resume));
  std::cerr << "training " << cfg.variant << " for " << cfg.train.steps << " steps, "
            << trainer.model()->parameter_count() << " parameters\n";
  trainer.run([&](const StepRecord& r) {
    if (r.step % a.log_every == 0 || r.step == cfg.train.steps)
      std::fprintf(stderr, "step %6d  denoise %.5f  photo %.5f  dist %.5f  total %.5f  lr %.2e\n",
                   r.step, r.denoising, r.photometric, r.distortion, r.total, r.lr);
  });
  return kOk;
}

// --- sample ----------------------------------------------------------------

struct SampleArgs {
  fs::path checkpoint;
  fs::path scene;
  int input_view = 0;
  int reference_view = 1;
  std::vector<int> novel_views;
  uint64_t seed = 0;
  SamplerConfig sampler;
  bool depth = false;
  fs::path out = "samples";
};

int cmd_sample(const SampleArgs& a) {
  const auto ckpt_dir = resolve_checkpoint(a.checkpoint);
  auto ckpt = load_checkpoint(ckpt_dir);
  auto scene = load_scene_dir(a.scene);
  std::vector<int> novel = a.novel_views;
  if (novel.empty())
    for (int v = 0; v < scene.num_views(); ++v)
      if (v != a.input_view && v != a.reference_view) novel.push_back(v);

  auto request = make_request(scene, a.input_view, a.reference_view, novel);
  DiffusionSchedule schedule(ckpt.config.schedule);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(a.seed);
  auto result = sample(*ckpt.model, schedule, request, a.sampler, gen);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";

  fs::create_directories(a.out);
  write_png(a.out / "denoised.png", to_unit(result.denoised));
  std::vector<torch::Tensor> views, depths;
  for (size_t k = 0; k < novel.size(); ++k) {
    auto img = to_unit(result.novel_views[k]);
    views.push_back(img);
    write_png(a.out / fmt("novel_%03d.png", novel[k]), img);
    if (a.depth) {
      auto d = colorize_depth(result.depths[k], result.opacities[k]);
      depths.push_back(d);
      write_png(a.out / fmt("depth_%03d.png", novel[k]), d);
    }
  }
  const int cols = std::min<int>(8, static_cast<int>(views.size()));
  if (!views.empty()) write_png(a.out / "novel_grid.png", tile_images(views, cols));
  if (!depths.empty()) write_png(a.out / "depth_grid.png", tile_images(depths, cols));
  save_field(result.field, a.out / "field.pt");
  // Canonical cameras of the novel views, usable with `render --field`.
  std::vector<std::string> names;
  for (int v : novel) names.push_back(fmt("novel_%03d.png", v));
  write_json(a.out / "cameras.json", cameras_to_json(request.novel_poses, names));
  write_json(a.out / "meta.json", {{"seed", a.seed},
                                   {"steps", a.sampler.num_steps},
                                   {"guidance", a.sampler.guidance},
                                   {"eta", a.sampler.eta},
                                   {"clamp", a.sampler.clamp},
                                   {"checkpoint", ckpt_dir.string()},
                                   {"checkpoint_step", ckpt.step},
                                   {"scene", scene.id},
                                   {"input_view", a.input_view},
                                   {"reference_view", a.reference_view},
                                   {"novel_views", novel},
                                   {"warnings", result.warnings}});
  std::cout << "wrote samples to " << a.out << "\n";
  return kOk;
}

// --- render ----------------------------------------------------------------

struct RenderArgs {
  fs::path field;
  fs::path cameras;
  int samples_per_ray = 64;
  bool depth = false;
  fs::path out = "renders";
};

int cmd_render(const RenderArgs& a) {
  VMField field = load_field(a.field);
  std::vector<std::string> files;
  auto poses = cameras_from_json(read_json(a.cameras), &files);
  fs::create_directories(a.out);
  torch::NoGradGuard no_grad;
  for (size_t k = 0; k < poses.size(); ++k) {
    auto v = render_view(field, poses[k], a.samples_per_ray);
    write_png(a.out / fmt("view_%03d.png", static_cast<int>(k)), to_unit(v.color));
    if (a.depth) write_png(a.out / fmt("depth_%03d.png", static_cast<int>(k)), colorize_depth(v.depth, v.opacity));
  }
  std::cout << "rendered " << poses.size() << " views to " << a.out << "\n";
  return kOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  fs::path checkpoint;
  fs::path data = "dataset";
  std::string split = "test";
  EvalOptions options;
  std::string targets = "heldout";
  bool no_reference = false;
  bool self_check = false;
  fs::path out;
  std::string plugin;
};

json run_plugin(const std::string& plugin, const EvalResult& res) {
  const auto dir = fs::temp_directory_path() / ("nvsdiff_eval_" + std::to_string(::getpid()));
  fs::create_directories(dir / "pred");
  fs::create_directories(dir / "gt");
  for (size_t k = 0; k < res.predictions.size(); ++k) {
    write_png(dir / "pred" / fmt("%05d.png", static_cast<int>(k)), res.predictions[k]);
    write_png(dir / "gt" / fmt("%05d.png", static_cast<int>(k)), res.targets[k]);
  }
  const std::string cmd = plugin + " '" + (dir / "pred").string() + "' '" + (dir / "gt").string() + "'";
  std::string output;
  if (FILE* p = popen(cmd.c_str(), "r")) {
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) output.append(buf, n);
    const int status = pclose(p);
    fs::remove_all(dir);
    if (status != 0) throw DataError("metric plug-in failed: " + cmd);
  } else {
    throw DataError("cannot run metric plug-in: " + cmd);
  }
  try {
    return json::parse(output);
  } catch (const json::exception&) {
    throw DataError("metric plug-in did not print a JSON object");
  }
}

int cmd_eval(EvalArgs a) {
  auto data = load_data(a.data, a.split, a.options.max_scenes);
  json out;
  if (a.self_check) {
    auto report = self_check(data);
    std::cout << report.to_table();
    out = report_to_json(report);
  } else {
    if (a.checkpoint.empty()) throw ValidationError("eval needs --checkpoint (or --self-check)");
    auto ckpt = load_checkpoint(resolve_checkpoint(a.checkpoint));
    DiffusionSchedule schedule(ckpt.config.schedule);
    a.options.targets = a.targets == "training" ? EvalTargets::kTraining : EvalTargets::kHeldout;
    a.options.use_reference = !a.no_reference;
    a.options.holdout_every = ckpt.config.train.holdout_every;
    auto res = evaluate(*ckpt.model, schedule, data, a.options);
    std::cout << res.novel.to_table();
    out = report_to_json(res.novel);
    out["denoised"] = report_to_json(res.denoised);
    out["sampler"] = {{"steps", a.options.sampler.num_steps}, {"guidance", a.options.sampler.guidance},
                      {"seed", a.options.seed}};
    if (!a.plugin.empty()) out["plugin"] = run_plugin(a.plugin, res);
  }
  if (!a.out.empty()) write_json(a.out, out);
  return kOk;
}

// --- ablate ----------------------------------------------------------------

struct AblateArgs {
  fs::path config;
  fs::path data = "dataset";
  std::string split = "train";
  std::vector<std::string> variants{"full", "no_camera_conditioning"};
  AblationOptions options;
  fs::path out;
  int max_scenes = 0;
};

int cmd_ablate(AblateArgs a) {
  RunConfig base = load_run_config(a.config);
  auto data = load_data(a.data, a.split, a.max_scenes);
  a.options.eval.holdout_every = base.train.holdout_every;
  auto rows = run_ablation(base, a.variants, data, a.options, [](const std::string& v, const StepRecord& r) {
    if (r.step % 50 == 0) std::fprintf(stderr, "%-24s step %6d  denoise %.5f\n", v.c_str(), r.step, r.denoising);
  });
  std::cout << ablation_table(rows);
  if (!a.out.empty()) write_json(a.out, ablation_to_json(rows));
  for (const auto& r : rows)
    if (!r.finite) return kNumerical;
  return kOk;
}

// --- fit -------------------------------------------------------------------

struct FitArgs {
  fs::path scene;
  FitOptions options;
  fs::path save_field;
  fs::path out;
};

int cmd_fit(const FitArgs& a) {
  auto scene = load_scene_dir(a.scene);
  auto res = fit_scene_field(scene, a.options, [](int step, double loss) {
    if ((step + 1) % 200 == 0) std::fprintf(stderr, "step %5d  mse %.6f\n", step + 1, loss);
  });
  std::cout << "held-out views\n" << res.heldout.to_table();
  if (!a.save_field.empty()) save_field(res.field, a.save_field);
  if (!a.out.empty())
    write_json(a.out, {{"heldout", report_to_json(res.heldout)}, {"train", report_to_json(res.train)}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nvsdiff: single-image novel view synthesis with a diffused radiance field"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "Render a procedural toy dataset");
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--n-scenes", gen.n_scenes, "Number of scenes")->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output root");
  g->add_option("--views", gen.render.n_views, "Views per scene")->check(CLI::Range(3, 1000));
  g->add_option("--height", gen.render.image_size.height, "Image height")->check(CLI::PositiveNumber);
  g->add_option("--width", gen.render.image_size.width, "Image width")->check(CLI::PositiveNumber);
  g->add_option("--samples", gen.render.samples_per_ray, "Samples per ray for ground truth");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the transformer");
  t->add_option("--config", tr.config, "Run config (JSON)")->check(CLI::ExistingFile);
  t->add_option("--data", tr.data, "Dataset root");
  t->add_option("--split", tr.split, "Dataset split");
  t->add_option("--run-dir", tr.run_dir, "Run directory");
  t->add_option("--steps", tr.steps);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--rays-per-view", tr.rays_per_view);
  t->add_option("--samples-per-ray", tr.samples_per_ray);
  t->add_option("--checkpoint-every", tr.checkpoint_every);
  t->add_option("--sample-every", tr.sample_every);
  t->add_option("--lr", tr.lr);
  t->add_option("--seed", tr.seed);
  t->add_option("--variant", tr.variant, "Ablation variant");
  t->add_option("--resume", tr.resume, "Checkpoint or run directory to resume from");
  t->add_option("--log-every", tr.log_every);
  t->add_option("--max-scenes", tr.max_scenes);

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "DDIM-sample a scene from one input view");
  s->add_option("--checkpoint", sa.checkpoint, "Checkpoint or run directory")->required();
  s->add_option("--scene", sa.scene, "Scene directory")->required();
  s->add_option("--input-view", sa.input_view);
  s->add_option("--reference-view", sa.reference_view, "Reference view, -1 for none");
  s->add_option("--novel-views", sa.novel_views, "Views to render (default: all others)");
  s->add_option("--seed", sa.seed);
  s->add_option("--steps", sa.sampler.num_steps)->check(CLI::PositiveNumber);
  s->add_option("--cfg-weight", sa.sampler.guidance);
  s->add_option("--eta", sa.sampler.eta);
  s->add_flag("!--no-clamp", sa.sampler.clamp, "Disable per-step clamping");
  s->add_option("--samples-per-ray", sa.sampler.samples_per_ray);
  s->add_flag("--depth", sa.depth, "Also write expected-depth maps");
  s->add_option("--out", sa.out);

  RenderArgs ra;
  auto* r = app.add_subcommand("render", "Render a saved field at given cameras");
  r->add_option("--field", ra.field, "Field file")->required()->check(CLI::ExistingFile);
  r->add_option("--cameras", ra.cameras, "Camera file in the field's frame")->required()->check(CLI::ExistingFile);
  r->add_option("--samples-per-ray", ra.samples_per_ray);
  r->add_flag("--depth", ra.depth);
  r->add_option("--out", ra.out);

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "PSNR/SSIM of sampled novel views");
  e->add_option("--checkpoint", ea.checkpoint, "Checkpoint or run directory");
  e->add_option("--data", ea.data);
  e->add_option("--split", ea.split);
  e->add_option("--steps", ea.options.sampler.num_steps)->check(CLI::PositiveNumber);
  e->add_option("--cfg-weight", ea.options.sampler.guidance);
  e->add_option("--samples-per-ray", ea.options.sampler.samples_per_ray);
  e->add_option("--seed", ea.options.seed);
  e->add_option("--max-scenes", ea.options.max_scenes);
  e->add_option("--targets", ea.targets)->check(CLI::IsMember({"heldout", "training"}));
  e->add_flag("--no-reference", ea.no_reference);
  e->add_flag("--self-check", ea.self_check, "Compare ground truth with itself");
  e->add_option("--out", ea.out, "Metric JSON output");
  e->add_option("--plugin", ea.plugin, "External metric executable: <plugin> PRED_DIR GT_DIR -> JSON");

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "Train and compare ablation variants");
  ab->add_option("--config", aa.config)->check(CLI::ExistingFile);
  ab->add_option("--data", aa.data);
  ab->add_option("--split", aa.split);
  ab->add_option("--variants", aa.variants)->check(CLI::IsMember(ablation_variants()));
  ab->add_option("--steps", aa.options.steps)->check(CLI::PositiveNumber);
  ab->add_option("--run-root", aa.options.run_root);
  ab->add_flag("!--no-eval", aa.options.evaluate);
  ab->add_option("--eval-steps", aa.options.eval.sampler.num_steps);
  ab->add_option("--max-scenes", aa.max_scenes);
  ab->add_option("--out", aa.out);

  FitArgs fa;
  auto* f = app.add_subcommand("fit", "Fit a VM field directly to one scene's views");
  f->add_option("--scene", fa.scene)->required();
  f->add_option("--steps", fa.options.steps);
  f->add_option("--grid", fa.options.grid);
  f->add_option("--channels", fa.options.channels);
  f->add_option("--rays", fa.options.rays_per_step);
  f->add_option("--samples-per-ray", fa.options.samples_per_ray);
  f->add_option("--seed", fa.options.seed);
  f->add_option("--save-field", fa.save_field);
  f->add_option("--out", fa.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_generate(gen);
    if (t->parsed()) return cmd_train(tr);
    if (s->parsed()) return cmd_sample(sa);
    if (r->parsed()) return cmd_render(ra);
    if (e->parsed()) return cmd_eval(ea);
    if (ab->parsed()) return cmd_ablate(aa);
    if (f->parsed()) return cmd_fit(fa);
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return kNumerical;
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    // LoadError, ImageIoError, DataError and filesystem errors.
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}
