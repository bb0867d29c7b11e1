#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <vector>

#include "bevfuse/kernels.hpp"
#include "bevfuse/types.hpp"

namespace bevfuse {

/// p' = rotation * p + translation.
struct Rigid {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  Rigid inverse() const;
  /// (*this) after `rhs`: x -> this(rhs(x)).
  Rigid operator*(const Rigid& rhs) const;
  /// Throws ContractError if the rotation is not orthonormal within 1e-9.
  void validate(const char* what) const;
};

/// Rotation about +z by `yaw` radians.
Eigen::Matrix3d yaw_rotation(double yaw);

/// Pinhole camera. The camera frame has x right, y down, z forward.
struct CameraModel {
  double fx = 48, fy = 48, cx = 48, cy = 32;
  Rigid ego_to_cam;
  std::size_t height = 64, width = 96;

  void validate() const;
};

/// Builds a camera at `position` (ego frame) looking horizontally along
/// `yaw` (0 = ego +x, counter-clockwise), with the given horizontal field of view.
CameraModel make_camera(Eigen::Vector3d position, double yaw, double hfov, std::size_t height, std::size_t width);

struct EgoPose {
  Rigid ego_to_world;
  double timestamp = 0;
};

/// Ego pose from planar motion: position (x, y) on the ground, heading `yaw`.
EgoPose make_planar_pose(double x, double y, double yaw, double timestamp);

struct Projection {
  double u = 0, v = 0, depth = 0;
};

/// Keeps points in front of the camera whose pixel lies inside the image.
std::vector<Projection> project_points(const PointCloud& points, const CameraModel& cam);
/// Inverse of projection: the ego-frame point seen at pixel (u, v) with the given depth.
Eigen::Vector3d unproject(const CameraModel& cam, double u, double v, double depth);

struct DepthMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // meters, 0 where invalid
  std::vector<std::uint8_t> valid;

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  bool is_valid(std::size_t r, std::size_t c) const { return valid[r * width + c] != 0; }
};

/// Each projection writes to its floor pixel, nearest depth wins.
DepthMap rasterize_sparse_depth(const std::vector<Projection>& projections, std::size_t height, std::size_t width);

/// Uniform metric depth bins; bin i covers [min + i*width, min + (i+1)*width).
struct DepthBins {
  double min = 1.0, width = 0.8;
  std::size_t count = 32;

  double center(std::size_t i) const { return min + (static_cast<double>(i) + 0.5) * width; }
  double max() const { return min + width * static_cast<double>(count); }
  /// Bin containing `depth`, or -1 outside the covered range.
  int bin_of(double depth) const;
};

/// Precomputes which voxel every (bin, feature cell) falls into. Feature
/// cell (i, j) sits at image pixel (stride*j + stride/2, stride*i + stride/2).
kernels::SplatPlan make_lift_plan(const CameraModel& cam, std::size_t feat_h, std::size_t feat_w,
                                  std::size_t feature_stride, const DepthBins& bins, const VolumeSpec& vol);

/// Sum-pools feat (C x Hf x Wf) weighted by depth_dist (D x Hf x Wf) into a
/// C x Z x H x W volume. Throws ContractError unless every depth column sums to
/// 1 within 1e-9.
Tensor lift_splat(const Tensor& feat, const Tensor& depth_dist, std::shared_ptr<const kernels::SplatPlan> plan,
                  const VolumeSpec& vol);

/// Rigid planar motion taking current-ego coordinates to previous-ego ones,
/// taken from the x, y and yaw components of the two poses.
struct PlanarMotion {
  double cos_yaw = 1, sin_yaw = 0, tx = 0, ty = 0;  // tx, ty in meters
};
PlanarMotion relative_planar_motion(const EgoPose& prev, const EgoPose& cur);

/// Resamples `prev` (C x H x W) into the current ego frame by bilinear
/// interpolation with zero fill outside the grid.
Tensor warp_bev(const Tensor& prev, const BevSpec& spec, const EgoPose& pose_prev, const EgoPose& pose_cur);
Tensor warp_bev(const Tensor& prev, const BevSpec& spec, const PlanarMotion& motion);

}  // namespace bevfuse
