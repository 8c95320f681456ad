#pragma once

#include <Eigen/Core>
#include <torch/types.h>

#include <span>
#include <stdexcept>
#include <vector>

namespace nvsdiff {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ImageSize {
  int height = 1;
  int width = 1;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

// Pinhole camera with a world-to-camera rigid transform:
//   x_cam = rotation * x_world + translation
// The camera looks along +z, the image origin is the top-left corner and pixel
// centers sit at half-integer coordinates.
struct CameraPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double focal = 1.0;
  Vec2 principal_point = Vec2::Zero();
  ImageSize image_size;

  Vec3 center() const { return -rotation.transpose() * translation; }

  // Throws ValidationError when the rotation is not a proper rotation
  // (tolerance 1e-8), the focal is not positive or the image is empty.
  void validate() const;
};

// Maps points from frame b into frame a: x_a = rotation * x_b + translation.
struct RelativePose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  RelativePose inverse() const {
    return {rotation.transpose(), -rotation.transpose() * translation};
  }
};

struct RayBundle {
  torch::Tensor origins;     // [N, 3]
  torch::Tensor directions;  // [N, 3], unit norm
  double near = 0.0;
  double far = 1.0;
};

struct NormalizedScene {
  std::vector<CameraPose> poses;  // poses[0] is the input view
  std::vector<Vec3> points;
  double r_d = 0.0;
  double scale = 1.0;
  // Similarity applied to world points: p' = scale * (rotation * p + offset).
  Mat3 rotation = Mat3::Identity();
  Vec3 offset = Vec3::Zero();
};

bool is_rotation(const Mat3& r, double tol = 1e-8);

// Re-expresses every pose and point in the canonical input frame: the input
// camera gets identity rotation and center (0, 0, -r_d), and the points are
// uniformly scaled so their largest absolute coordinate is 1.
NormalizedScene normalize_to_input_frame(const CameraPose& input_pose,
                                         std::span<const CameraPose> other_poses,
                                         std::span<const Vec3> scene_points);

// Same transform with a caller-chosen uniform scale (content may leave the
// cube if the scale exceeds unit_cube_scale).
NormalizedScene normalize_to_input_frame(const CameraPose& input_pose,
                                         std::span<const CameraPose> other_poses,
                                         std::span<const Vec3> scene_points, double scale);

// Scale that maps the scene points into [-1, 1]^3 in the input view's frame.
double unit_cube_scale(const CameraPose& input_pose, std::span<const Vec3> scene_points);

RelativePose relative_pose(const CameraPose& pose_a, const CameraPose& pose_b);

// Near/far bounds that enclose the unit cube as seen from a camera at the
// given distance from the origin.
struct DepthBounds {
  double near;
  double far;
};
DepthBounds cube_bounds(double camera_distance);

// One ray per pixel in row-major order (row v, column u). Bounds default to
// cube_bounds(|center|).
RayBundle generate_rays(const CameraPose& pose,
                        torch::Dtype dtype = torch::kFloat64);
RayBundle generate_rays(const CameraPose& pose, DepthBounds bounds,
                        torch::Dtype dtype = torch::kFloat64);

// Rescales intrinsics for a resized image; focal and principal point scale
// with the width ratio and height ratio respectively.
CameraPose resize_intrinsics(const CameraPose& pose, ImageSize new_size);

// Orthonormalizes a near-rotation matrix (closest rotation in Frobenius norm).
Mat3 project_to_rotation(const Mat3& m);

// World-to-camera rotation for a camera at `eye` looking at `target` with the
// image "down" direction roughly aligned with -up.
Mat3 look_at_rotation(const Vec3& eye, const Vec3& target,
                      const Vec3& up = Vec3(0.0, 1.0, 0.0));

}  // namespace nvsdiff
