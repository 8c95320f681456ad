#include "nvsdiff/scene.hpp"

#include "nvsdiff/image_io.hpp"
#include "nvsdiff/renderer.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace nvsdiff {

namespace fs = std::filesystem;
using nlohmann::json;

int64_t Rng::integer(int64_t lo, int64_t hi) {
  const auto span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(engine_() % span);
}

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

torch::Tensor vec_tensor(const Vec3& v, const torch::TensorOptions& opts) {
  return torch::tensor({v.x(), v.y(), v.z()}, opts.dtype(torch::kFloat64)).to(opts.dtype());
}

torch::Tensor inside_mask(const Primitive& prim, const torch::Tensor& points) {
  auto c = vec_tensor(prim.center, points.options());
  auto d = points - c;
  if (prim.kind == PrimitiveKind::kSphere) return d.pow(2).sum(-1) <= prim.size.x() * prim.size.x();
  auto h = vec_tensor(prim.size, points.options());
  return (d.abs() <= h).all(-1);
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw LoadError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("missing file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<Vec3> cube_corners() {
  std::vector<Vec3> pts;
  for (int i = 0; i < 8; ++i)
    pts.emplace_back(i & 1 ? 1.0 : -1.0, i & 2 ? 1.0 : -1.0, i & 4 ? 1.0 : -1.0);
  return pts;
}

}  // namespace

void ToyScene::validate() const {
  for (const auto& p : primitives) {
    const Vec3 lo = p.center - p.half_extent();
    const Vec3 hi = p.center + p.half_extent();
    if (lo.minCoeff() < -1.0 || hi.maxCoeff() > 1.0)
      throw ValidationError("primitive extends outside [-1, 1]^3");
    if (!(p.density > 0.0)) throw ValidationError("primitive density must be > 0");
    if (p.rgb.minCoeff() < 0.0 || p.rgb.maxCoeff() > 1.0)
      throw ValidationError("primitive color must lie in [0, 1]");
    if (p.half_extent().minCoeff() <= 0.0) throw ValidationError("primitive size must be > 0");
  }
}

torch::Tensor ToyScene::density(const torch::Tensor& points) const {
  auto out = torch::zeros(points.sizes().slice(0, points.dim() - 1), points.options());
  for (const auto& prim : primitives) {
    auto inside = inside_mask(prim, points);
    out = torch::where(inside, torch::clamp_min(out, prim.density), out);
  }
  return out;
}

torch::Tensor ToyScene::color(const torch::Tensor& points) const {
  auto lead = points.sizes().slice(0, points.dim() - 1).vec();
  auto best = torch::full(lead, std::numeric_limits<double>::infinity(), points.options());
  auto shape = lead;
  shape.push_back(3);
  auto out = torch::zeros(shape, points.options());
  for (const auto& prim : primitives) {
    auto inside = inside_mask(prim, points);
    auto dist = (points - vec_tensor(prim.center, points.options())).pow(2).sum(-1);
    auto take = inside & (dist < best);
    best = torch::where(take, dist, best);
    out = torch::where(take.unsqueeze(-1), vec_tensor(prim.rgb, points.options()).expand_as(out),
                       out);
  }
  return out;
}

std::vector<Vec3> ToyScene::bounding_points() const {
  if (primitives.empty()) return cube_corners();
  std::vector<Vec3> pts;
  for (const auto& p : primitives) {
    const Vec3 h = p.half_extent();
    for (int i = 0; i < 8; ++i)
      pts.push_back(p.center + Vec3(i & 1 ? h.x() : -h.x(), i & 2 ? h.y() : -h.y(),
                                    i & 4 ? h.z() : -h.z()));
  }
  return pts;
}

json ToyScene::to_json() const {
  json prims = json::array();
  for (const auto& p : primitives) {
    prims.push_back({{"type", p.kind == PrimitiveKind::kSphere ? "sphere" : "box"},
                     {"center", vec_json(p.center)},
                     {"size", vec_json(p.size)},
                     {"rgb", vec_json(p.rgb)},
                     {"density", p.density}});
  }
  json points = json::array();
  for (const auto& p : bounding_points()) points.push_back(vec_json(p));
  return {{"seed", seed}, {"primitives", prims}, {"points", points}};
}

ToyScene ToyScene::from_json(const json& j) {
  ToyScene scene;
  try {
    scene.seed = j.value("seed", uint64_t{0});
    for (const auto& p : j.at("primitives")) {
      Primitive prim;
      const auto type = p.at("type").get<std::string>();
      if (type == "sphere") {
        prim.kind = PrimitiveKind::kSphere;
      } else if (type == "box") {
        prim.kind = PrimitiveKind::kBox;
      } else {
        throw LoadError("unknown primitive type '" + type + "'");
      }
      prim.center = json_vec(p.at("center"));
      prim.size = json_vec(p.at("size"));
      prim.rgb = json_vec(p.at("rgb"));
      prim.density = p.at("density").get<double>();
      scene.primitives.push_back(prim);
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed scene descriptor: ") + e.what());
  }
  scene.validate();
  return scene;
}

ToyScene generate_scene(uint64_t seed) {
  Rng rng(splitmix64(seed));
  ToyScene scene;
  scene.seed = seed;
  const auto count = rng.integer(1, 4);
  for (int64_t i = 0; i < count; ++i) {
    Primitive p;
    p.kind = rng.bernoulli(0.5) ? PrimitiveKind::kSphere : PrimitiveKind::kBox;
    if (p.kind == PrimitiveKind::kSphere) {
      const double r = rng.uniform(0.2, 0.45);
      p.size = Vec3(r, r, r);
    } else {
      p.size = Vec3(rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4));
    }
    const Vec3 h = p.half_extent();
    for (int a = 0; a < 3; ++a) {
      const double room = 0.85 - h[a];
      p.center[a] = rng.uniform(-room, room);
    }
    p.rgb = Vec3(rng.uniform(0.15, 1.0), rng.uniform(0.15, 1.0), rng.uniform(0.15, 1.0));
    p.density = rng.uniform(6.0, 20.0);
    scene.primitives.push_back(p);
  }
  scene.validate();
  return scene;
}

std::vector<CameraPose> orbit_cameras(const DatasetRenderOptions& options, Rng& rng) {
  std::vector<CameraPose> poses;
  const double deg = std::numbers::pi / 180.0;
  const int n = options.n_views;
  for (int k = 0; k < n; ++k) {
    const double az = 2.0 * std::numbers::pi * (k + rng.uniform(-0.3, 0.3)) / n;
    const double el = rng.uniform(options.elevation_min_deg, options.elevation_max_deg) * deg;
    const double radius = rng.uniform(options.radius_min, options.radius_max);
    Vec3 jitter;
    do {
      jitter = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    } while (jitter.norm() > 1.0);
    const Vec3 target = options.target_jitter * jitter;
    const Vec3 eye(radius * std::cos(el) * std::sin(az), radius * std::sin(el),
                   radius * std::cos(el) * std::cos(az));

    CameraPose pose;
    pose.rotation = look_at_rotation(eye, target);
    pose.translation = -pose.rotation * eye;
    pose.image_size = options.image_size;
    pose.focal = options.focal_ratio * options.image_size.width;
    pose.principal_point = Vec2(options.image_size.width / 2.0, options.image_size.height / 2.0);
    poses.push_back(pose);
  }
  return poses;
}

torch::Tensor render_toy_view(const ToyScene& scene, const CameraPose& pose, int samples_per_ray) {
  auto rays = generate_rays(pose, torch::kFloat64);
  auto smp = sample_along_ray(rays, samples_per_ray, /*stratified=*/false);
  auto out = composite(scene.density(smp.positions), scene.color(smp.positions), smp.deltas);
  return out.color.reshape({pose.image_size.height, pose.image_size.width, 3});
}

json cameras_to_json(const std::vector<CameraPose>& poses, const std::vector<std::string>& files) {
  if (poses.empty()) throw ValidationError("cameras_to_json: no poses");
  const auto& p0 = poses.front();
  json frames = json::array();
  for (size_t i = 0; i < poses.size(); ++i) {
    const auto& p = poses[i];
    json rot = json::array();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot.push_back(p.rotation(r, c));
    frames.push_back({{"file", files.at(i)}, {"rotation", rot}, {"translation", vec_json(p.translation)}});
  }
  return {{"height", p0.image_size.height},
          {"width", p0.image_size.width},
          {"focal", p0.focal},
          {"cx", p0.principal_point.x()},
          {"cy", p0.principal_point.y()},
          {"frames", frames}};
}

std::vector<CameraPose> cameras_from_json(const json& j, std::vector<std::string>* files) {
  std::vector<CameraPose> poses;
  try {
    CameraPose base;
    base.image_size = {j.at("height").get<int>(), j.at("width").get<int>()};
    base.focal = j.at("focal").get<double>();
    base.principal_point = Vec2(j.at("cx").get<double>(), j.at("cy").get<double>());
    for (const auto& f : j.at("frames")) {
      CameraPose p = base;
      const auto& rot = f.at("rotation");
      const auto& tr = f.at("translation");
      if (rot.size() != 9 || tr.size() != 3)
        throw LoadError("frame needs rotation[9] and translation[3]");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) p.rotation(r, c) = rot[r * 3 + c].get<double>();
      p.translation = json_vec(tr);
      p.validate();
      poses.push_back(p);
      if (files) files->push_back(f.value("file", std::string{}));
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed camera file: ") + e.what());
  } catch (const ValidationError& e) {
    throw LoadError(std::string("invalid camera: ") + e.what());
  }
  return poses;
}

void render_dataset(const ToyScene& scene, const DatasetRenderOptions& options, Rng& rng,
                    const fs::path& scene_dir) {
  if (options.n_views < kMinViewsPerScene)
    throw ValidationError("render_dataset needs at least 3 views");
  scene.validate();
  fs::create_directories(scene_dir / "images");
  const auto poses = orbit_cameras(options, rng);
  std::vector<std::string> files;
  for (size_t i = 0; i < poses.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%03zu.png", i);
    files.emplace_back(name);
    write_png(scene_dir / name, render_toy_view(scene, poses[i], options.samples_per_ray));
  }
  write_json(scene_dir / "cameras.json", cameras_to_json(poses, files));
  write_json(scene_dir / "scene.json", scene.to_json());
}

SceneEntry load_scene_dir(const fs::path& dir) {
  SceneEntry entry;
  entry.id = dir.filename().string();
  entry.dir = dir;
  const auto cam_path = dir / "cameras.json";
  std::vector<std::string> files;
  try {
    entry.poses = cameras_from_json(read_json(cam_path), &files);
  } catch (const LoadError& e) {
    throw LoadError(cam_path.string() + ": " + e.what());
  }
  if (entry.num_views() < kMinViewsPerScene)
    throw LoadError(cam_path.string() + ": scene has " + std::to_string(entry.num_views()) +
                    " views, need at least " + std::to_string(kMinViewsPerScene));

  const auto size = entry.poses.front().image_size;
  std::vector<torch::Tensor> images;
  for (const auto& f : files) {
    const auto path = dir / f;
    if (f.empty() || !fs::exists(path)) throw LoadError("missing image: " + path.string());
    torch::Tensor img;
    try {
      img = read_png(path);
    } catch (const ImageIoError& e) {
      throw LoadError(e.what());
    }
    if (img.size(0) != size.height || img.size(1) != size.width)
      throw LoadError("image size mismatch in " + path.string() + ": expected " +
                      std::to_string(size.height) + "x" + std::to_string(size.width));
    images.push_back(to_signed(img));
  }
  entry.images = torch::stack(images);

  const auto scene_path = dir / "scene.json";
  if (fs::exists(scene_path)) {
    const auto j = read_json(scene_path);
    try {
      if (j.contains("primitives")) entry.ground_truth = ToyScene::from_json(j);
      if (j.contains("points"))
        for (const auto& p : j.at("points")) entry.points.push_back(json_vec(p));
    } catch (const std::exception& e) {
      throw LoadError(scene_path.string() + ": " + e.what());
    }
  }
  if (entry.points.empty())
    entry.points = entry.ground_truth ? entry.ground_truth->bounding_points() : cube_corners();
  return entry;
}

SceneDataset load_split(const fs::path& root, const std::string& split) {
  SceneDataset ds;
  ds.split = split;
  const auto dir = root / split;
  if (!fs::is_directory(dir)) throw LoadError("missing split directory: " + dir.string());
  std::vector<fs::path> scene_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) scene_dirs.push_back(e.path());
  std::sort(scene_dirs.begin(), scene_dirs.end());
  for (const auto& d : scene_dirs) ds.scenes.push_back(load_scene_dir(d));
  if (ds.scenes.empty()) throw LoadError("no scenes under " + dir.string());
  return ds;
}

std::string split_for_scene(int scene_index) {
  return scene_index % kHoldoutEveryScenes == kHoldoutEveryScenes - 1 ? "test" : "train";
}

std::string scene_name(int scene_index) {
  char name[32];
  std::snprintf(name, sizeof name, "scene_%04d", scene_index);
  return name;
}

uint64_t scene_seed(uint64_t dataset_seed, int scene_index) {
  return splitmix64(dataset_seed * 0x100000001b3ULL + static_cast<uint64_t>(scene_index));
}

DatasetSummary generate_dataset(uint64_t seed, int n_scenes, const DatasetRenderOptions& options,
                                const fs::path& root) {
  DatasetSummary summary;
  for (int i = 0; i < n_scenes; ++i) {
    const uint64_t s = scene_seed(seed, i);
    const auto scene = generate_scene(s);
    Rng rng(splitmix64(s ^ 0x5eed5eed5eedULL));
    const auto split = split_for_scene(i);
    render_dataset(scene, options, rng, root / split / scene_name(i));
    (split == "train" ? summary.train : summary.test)++;
  }
  return summary;
}

}  // namespace nvsdiff
