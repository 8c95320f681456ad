#include "nvsdiff/camera.hpp"
#include "nvsdiff/evaluation.hpp"
#include "nvsdiff/image_io.hpp"
#include "nvsdiff/metrics.hpp"
#include "nvsdiff/sampler.hpp"
#include "nvsdiff/scene.hpp"
#include "nvsdiff/schedule.hpp"
#include "nvsdiff/training.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "json.hpp"

#include <filesystem>

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace nvsdiff;

namespace {

py::array_t<float> to_numpy(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  py::array_t<float> out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), sizeof(float) * c.numel());
  return out;
}

torch::Tensor from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

fs::path resolve_checkpoint(const fs::path& p) {
  return fs::exists(p / "meta.json") ? p : latest_checkpoint(p);
}

class Model {
 public:
  explicit Model(const fs::path& path) {
    auto ckpt = load_checkpoint(resolve_checkpoint(path));
    model_ = ckpt.model;
    model_->eval();
    config_ = ckpt.config;
    step_ = ckpt.step;
  }

  py::dict sample(const fs::path& scene_dir, int input_view, int reference_view,
                  const std::vector<int>& novel_views, uint64_t seed, int steps, double cfg_weight) {
    auto scene = load_scene_dir(scene_dir);
    SamplerConfig cfg;
    cfg.num_steps = steps;
    cfg.guidance = cfg_weight;
    SampleResult res;
    {
      py::gil_scoped_release release;
      auto req = make_request(scene, input_view, reference_view, novel_views);
      DiffusionSchedule schedule(config_.schedule);
      res = nvsdiff::sample(*model_, schedule, req, cfg, at::make_generator<at::CPUGeneratorImpl>(seed));
    }
    py::list novel;
    for (const auto& v : res.novel_views) novel.append(to_numpy(to_unit(v)));
    py::dict out;
    out["denoised"] = to_numpy(to_unit(res.denoised));
    out["novel_views"] = novel;
    out["warnings"] = res.warnings;
    return out;
  }

  std::string config_json() const { return config_.to_json().dump(); }
  int step() const { return step_; }
  int64_t parameter_count() const { return model_->parameter_count(); }

 private:
  NvsTransformer model_{nullptr};
  RunConfig config_;
  int step_ = 0;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Single-image novel view synthesis with a diffusion transformer over VM radiance fields";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_OSError);

  py::class_<DiffusionSchedule>(m, "Schedule")
      .def(py::init([](int total_steps, bool continuous) {
             return DiffusionSchedule(ScheduleConfig{total_steps, continuous});
           }),
           py::arg("total_steps") = 1000, py::arg("continuous_time") = false)
      .def("alpha_sigma",
           [](const DiffusionSchedule& s, double t) {
             auto a = s.alpha_sigma(t);
             return py::make_tuple(a.alpha, a.sigma);
           })
      .def("transition",
           [](const DiffusionSchedule& s, double t, double u) {
             auto tr = s.transition_coeffs(t, u);
             return py::make_tuple(tr.alpha_ts, tr.sigma_ts);
           })
      .def("snr_weight", [](const DiffusionSchedule& s, double t) { return s.snr_weight(t); });

  m.def("cube_bounds", [](double d) {
    auto b = cube_bounds(d);
    return py::make_tuple(b.near, b.far);
  });

  m.def("psnr", [](py::array_t<float> a, py::array_t<float> b) { return psnr(from_numpy(a), from_numpy(b)); });
  m.def("ssim", [](py::array_t<float> a, py::array_t<float> b) { return ssim(from_numpy(a), from_numpy(b)); });

  m.def(
      "generate_dataset",
      [](uint64_t seed, int n_scenes, const fs::path& out, int views, int height, int width) {
        DatasetRenderOptions o;
        o.n_views = views;
        o.image_size = {height, width};
        py::gil_scoped_release release;
        auto s = generate_dataset(seed, n_scenes, o, out);
        return std::make_pair(s.train, s.test);
      },
      py::arg("seed"), py::arg("n_scenes"), py::arg("out"), py::arg("views") = 24, py::arg("height") = 32,
      py::arg("width") = 32);

  m.def(
      "load_scene",
      [](const fs::path& dir) {
        auto s = load_scene_dir(dir);
        py::dict out;
        out["id"] = s.id;
        out["images"] = to_numpy(to_unit(s.images));
        out["num_views"] = s.num_views();
        return out;
      },
      py::arg("dir"));

  m.def(
      "fit_scene",
      [](const fs::path& dir, int steps, uint64_t seed) {
        auto scene = load_scene_dir(dir);
        FitOptions o;
        o.steps = steps;
        o.seed = seed;
        py::gil_scoped_release release;
        auto r = fit_scene_field(scene, o);
        return std::make_pair(r.heldout.mean_psnr(), r.losses);
      },
      py::arg("dir"), py::arg("steps") = 2000, py::arg("seed") = 0);

  m.def(
      "_train",
      [](const std::string& config_json, const fs::path& data, const std::string& split, const fs::path& run_dir) {
        auto cfg = RunConfig::from_json(nlohmann::json::parse(config_json));
        auto dataset = load_split(data, split);
        std::vector<double> losses;
        py::gil_scoped_release release;
        Trainer trainer(cfg, dataset, run_dir);
        for (const auto& r : trainer.run()) losses.push_back(r.denoising);
        return losses;
      },
      py::arg("config_json"), py::arg("data"), py::arg("split") = "train", py::arg("run_dir") = fs::path());

  m.def("_default_config", [] { return RunConfig{}.to_json().dump(); });

  py::class_<Model>(m, "Model")
      .def(py::init<const fs::path&>(), py::arg("path"))
      .def("sample", &Model::sample, py::arg("scene_dir"), py::arg("input_view") = 0, py::arg("reference_view") = 1,
           py::arg("novel_views") = std::vector<int>{}, py::arg("seed") = 0, py::arg("steps") = 50,
           py::arg("cfg_weight") = 2.0)
      .def_property_readonly("step", &Model::step)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("_config_json", &Model::config_json);
}
