#pragma once

#include "nvsdiff/camera.hpp"

#include "json.hpp"
#include <torch/types.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvsdiff {

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Portable uniform draws from a 64-bit Mersenne twister. The standard
// distributions are implementation-defined; these are not.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Integer in [lo, hi].
  int64_t integer(int64_t lo, int64_t hi);
  bool bernoulli(double p) { return uniform() < p; }
  uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

enum class PrimitiveKind { kSphere, kBox };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kSphere;
  Vec3 center = Vec3::Zero();
  // Sphere: size.x() is the radius. Box: half extents along x, y, z.
  Vec3 size = Vec3::Constant(0.25);
  Vec3 rgb = Vec3::Constant(0.5);
  double density = 10.0;

  Vec3 half_extent() const {
    return kind == PrimitiveKind::kSphere ? Vec3::Constant(size.x()) : size;
  }
};

// Analytic scene of constant-density primitives inside [-1, 1]^3. Density is
// the max over containing primitives; color comes from the containing
// primitive whose center is nearest.
struct ToyScene {
  std::vector<Primitive> primitives;
  uint64_t seed = 0;

  void validate() const;
  torch::Tensor density(const torch::Tensor& points) const;  // [..., 3] -> [...]
  torch::Tensor color(const torch::Tensor& points) const;    // [..., 3] -> [..., 3]
  // Corners of every primitive's bounding box (the cube corners for an empty
  // scene); stands in for a sparse reconstruction when normalizing.
  std::vector<Vec3> bounding_points() const;

  nlohmann::json to_json() const;
  static ToyScene from_json(const nlohmann::json& j);
};

ToyScene generate_scene(uint64_t seed);

struct DatasetRenderOptions {
  int n_views = 24;
  ImageSize image_size{32, 32};
  double focal_ratio = 0.9;  // focal = ratio * width
  int samples_per_ray = 256;
  double radius_min = 1.8;
  double radius_max = 2.6;
  double elevation_min_deg = -20.0;
  double elevation_max_deg = 45.0;
  double target_jitter = 0.1;
};

// Orbit-style cameras with randomized radius, elevation and look-at jitter.
std::vector<CameraPose> orbit_cameras(const DatasetRenderOptions& options, Rng& rng);

// Ground-truth render of the analytic scene with dense midpoint sampling.
// Returns [H, W, 3] in [0, 1] (float64).
torch::Tensor render_toy_view(const ToyScene& scene, const CameraPose& pose, int samples_per_ray);

// Writes images/%03d.png, cameras.json and scene.json into `scene_dir`.
void render_dataset(const ToyScene& scene, const DatasetRenderOptions& options, Rng& rng,
                    const std::filesystem::path& scene_dir);

// Camera file (cameras.json) schema.
nlohmann::json cameras_to_json(const std::vector<CameraPose>& poses,
                               const std::vector<std::string>& files);
std::vector<CameraPose> cameras_from_json(const nlohmann::json& j,
                                          std::vector<std::string>* files = nullptr);

struct SceneEntry {
  std::string id;
  std::filesystem::path dir;
  torch::Tensor images;  // [V, H, W, 3] float32 in [-1, 1]
  std::vector<CameraPose> poses;
  std::vector<Vec3> points;  // normalization points
  std::optional<ToyScene> ground_truth;

  int num_views() const { return static_cast<int>(poses.size()); }
  ImageSize image_size() const { return poses.front().image_size; }
};

inline constexpr int kMinViewsPerScene = 3;

SceneEntry load_scene_dir(const std::filesystem::path& dir);

struct SceneDataset {
  std::string split;
  std::vector<SceneEntry> scenes;
};

// Every scene directory below <root>/<split>, sorted by id.
SceneDataset load_split(const std::filesystem::path& root, const std::string& split);

// Test split holds out every 50th scene id.
inline constexpr int kHoldoutEveryScenes = 50;
std::string split_for_scene(int scene_index);
std::string scene_name(int scene_index);
uint64_t scene_seed(uint64_t dataset_seed, int scene_index);

struct DatasetSummary {
  int train = 0;
  int test = 0;
};
DatasetSummary generate_dataset(uint64_t seed, int n_scenes, const DatasetRenderOptions& options,
                                const std::filesystem::path& root);

}  // namespace nvsdiff
