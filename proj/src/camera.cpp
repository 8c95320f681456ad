#include "nvsdiff/camera.hpp"

#include <Eigen/Dense>
#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nvsdiff {

bool is_rotation(const Mat3& r, double tol) {
  if (!r.allFinite()) return false;
  if ((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(r.determinant() - 1.0) <= tol;
}

void CameraPose::validate() const {
  if (!is_rotation(rotation)) {
    std::ostringstream os;
    os << "camera rotation is not orthonormal with det +1 (det=" << rotation.determinant()
       << ")";
    throw ValidationError(os.str());
  }
  if (!translation.allFinite()) throw ValidationError("camera translation is not finite");
  if (!(focal > 0.0) || !std::isfinite(focal)) throw ValidationError("camera focal must be > 0");
  if (!principal_point.allFinite()) throw ValidationError("principal point is not finite");
  if (image_size.height < 1 || image_size.width < 1)
    throw ValidationError("image size components must be >= 1");
}

namespace {

Vec3 canonical_offset(const CameraPose& input_pose) {
  // Camera coordinates of the input view shifted back along the optical axis
  // by the camera distance, so the input camera sits on -z.
  return input_pose.translation - Vec3(0.0, 0.0, input_pose.translation.norm());
}

}  // namespace

double unit_cube_scale(const CameraPose& input_pose, std::span<const Vec3> scene_points) {
  input_pose.validate();
  if (scene_points.empty()) throw ValidationError("normalization needs at least one scene point");
  const Vec3 offset = canonical_offset(input_pose);
  double extent = 0.0;
  for (const auto& p : scene_points) {
    if (!p.allFinite()) throw ValidationError("scene point is not finite");
    extent = std::max(extent, (input_pose.rotation * p + offset).cwiseAbs().maxCoeff());
  }
  if (!(extent > 0.0)) throw ValidationError("degenerate scene: zero extent, cannot scale");
  return 1.0 / extent;
}

NormalizedScene normalize_to_input_frame(const CameraPose& input_pose,
                                         std::span<const CameraPose> other_poses,
                                         std::span<const Vec3> scene_points) {
  return normalize_to_input_frame(input_pose, other_poses, scene_points,
                                  unit_cube_scale(input_pose, scene_points));
}

NormalizedScene normalize_to_input_frame(const CameraPose& input_pose,
                                         std::span<const CameraPose> other_poses,
                                         std::span<const Vec3> scene_points, double scale) {
  input_pose.validate();
  for (const auto& p : other_poses) p.validate();
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ValidationError("normalization scale must be > 0");
  const Mat3 rot = input_pose.rotation;
  const double dist = input_pose.translation.norm();
  const Vec3 offset = canonical_offset(input_pose);

  NormalizedScene out;
  out.scale = scale;
  out.r_d = scale * dist;
  out.rotation = rot;
  out.offset = offset;
  if (!(out.r_d > 0.0)) throw ValidationError("degenerate input camera at the scene origin");

  // A world-to-camera pose (R, t) under p' = s (A p + b) becomes
  // (R A^T, s t - R A^T s b); camera-frame coordinates scale with the world.
  const Vec3 shift = scale * offset;
  auto transform_pose = [&](const CameraPose& pose) {
    CameraPose c = pose;
    c.rotation = pose.rotation * rot.transpose();
    c.translation = scale * pose.translation - c.rotation * shift;
    return c;
  };

  out.poses.reserve(other_poses.size() + 1);
  CameraPose canonical = transform_pose(input_pose);
  // Exact by construction; pin it to avoid rounding noise in the reference frame.
  canonical.rotation = Mat3::Identity();
  canonical.translation = Vec3(0.0, 0.0, out.r_d);
  out.poses.push_back(canonical);
  for (const auto& p : other_poses) out.poses.push_back(transform_pose(p));

  out.points.reserve(scene_points.size());
  for (const auto& p : scene_points) out.points.push_back(scale * (rot * p + offset));
  return out;
}

RelativePose relative_pose(const CameraPose& pose_a, const CameraPose& pose_b) {
  pose_a.validate();
  pose_b.validate();
  // x_b = R_b w + t_b  =>  w = R_b^T (x_b - t_b)  =>  x_a = R_a R_b^T x_b + t_a - R_a R_b^T t_b
  RelativePose rel;
  rel.rotation = pose_a.rotation * pose_b.rotation.transpose();
  rel.translation = pose_a.translation - rel.rotation * pose_b.translation;
  return rel;
}

DepthBounds cube_bounds(double camera_distance) {
  const double half_diag = std::sqrt(3.0);
  return {std::max(0.05, camera_distance - half_diag), camera_distance + half_diag};
}

RayBundle generate_rays(const CameraPose& pose, torch::Dtype dtype) {
  return generate_rays(pose, cube_bounds(pose.center().norm()), dtype);
}

RayBundle generate_rays(const CameraPose& pose, DepthBounds bounds, torch::Dtype dtype) {
  pose.validate();
  if (!(bounds.near >= 0.0) || !(bounds.near < bounds.far))
    throw ValidationError("ray bounds must satisfy 0 <= near < far");

  const int h = pose.image_size.height;
  const int w = pose.image_size.width;
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);

  auto u = torch::arange(w, opts).add_(0.5).sub_(pose.principal_point.x()).div_(pose.focal);
  auto v = torch::arange(h, opts).add_(0.5).sub_(pose.principal_point.y()).div_(pose.focal);
  auto grid = torch::meshgrid({v, u}, "ij");
  auto dirs_cam = torch::stack({grid[1], grid[0], torch::ones_like(grid[0])}, -1).reshape({-1, 3});
  dirs_cam = dirs_cam / dirs_cam.norm(2, -1, true);

  // Camera-to-world rotation is R^T; rows of dirs_cam multiply R (row-major copy).
  Eigen::Matrix<double, 3, 3, Eigen::RowMajor> r = pose.rotation;
  auto rot = torch::from_blob(r.data(), {3, 3}, opts).clone();
  auto dirs = dirs_cam.matmul(rot);

  const Vec3 c = pose.center();
  auto origin = torch::tensor({c.x(), c.y(), c.z()}, opts);

  RayBundle rays;
  rays.origins = origin.expand({h * w, 3}).contiguous().to(dtype);
  rays.directions = dirs.to(dtype);
  rays.near = bounds.near;
  rays.far = bounds.far;
  return rays;
}

CameraPose resize_intrinsics(const CameraPose& pose, ImageSize new_size) {
  CameraPose out = pose;
  const double sx = static_cast<double>(new_size.width) / pose.image_size.width;
  const double sy = static_cast<double>(new_size.height) / pose.image_size.height;
  out.focal = pose.focal * sx;
  out.principal_point = Vec2(pose.principal_point.x() * sx, pose.principal_point.y() * sy);
  out.image_size = new_size;
  return out;
}

Mat3 project_to_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

Mat3 look_at_rotation(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 y = -up - (-up).dot(z) * z;
  if (y.norm() < 1e-9) y = Vec3(0.0, 0.0, 1.0) - z.z() * z;
  y.normalize();
  const Vec3 x = y.cross(z);
  Mat3 r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = z.transpose();
  return r;
}

}  // namespace nvsdiff
