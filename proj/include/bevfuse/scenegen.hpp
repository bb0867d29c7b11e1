#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bevfuse/detection.hpp"
#include "bevfuse/geometry.hpp"

namespace bevfuse {

struct Frame {
  std::int64_t frame_id = 0;
  PointCloud points;              // ego frame
  Tensor images;                  // N_c x 3 x H x W
  std::vector<CameraModel> cameras;
  EgoPose ego;
  std::vector<Box3D> gt_boxes;    // ego frame, centres inside the BEV extent
};

struct SceneConfig {
  std::uint64_t seed = 42;
  std::int64_t frame_id_base = 0;
  std::size_t n_boxes_min = 2, n_boxes_max = 6;
  double length_min = 3.6, length_max = 4.8;
  double width_min = 1.6, width_max = 2.0;
  double height_min = 1.4, height_max = 1.8;
  double ego_speed = 2.0;  // m/s
  double yaw_rate = 0.0;   // rad/s; non-zero gives an arc
  double dt = 0.5;
  std::size_t n_frames = 5;
  std::size_t lidar_azimuth = 64, lidar_elevation = 16;
  double elevation_min_deg = -30.0, elevation_max_deg = 2.0;
  double lidar_height = 1.8;
  double range_noise = 0.02;
  double max_range = 40.0;
  std::size_t n_cameras = 2;
  std::size_t image_h = 64, image_w = 96;
  double camera_height = 1.5;
  BevSpec bev;                       // boxes stay inside this extent in every frame
  double min_ego_clearance = 3.0;    // meters between box centres and the ego path
  std::size_t min_points_per_box = 5;

  void validate() const;
};

struct Hit {
  Eigen::Vector3d point;
  double range = 0;
  Eigen::Vector3d normal;
  int object = -1;  // box index, or -1 for the ground
};

/// Nearest hit at positive range along the ray against the boxes (z is the
/// box centre) and, optionally, the plane z = 0. Boxes containing the origin
/// are ignored. `direction` is normalised, so `range` is the Euclidean
/// distance from `origin`.
std::optional<Hit> ray_cast(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction,
                            const std::vector<Box3D>& boxes, bool ground = true);

/// Cameras used by the generator: evenly spread headings centred on +x,
/// 90 degree horizontal field of view.
std::vector<CameraModel> default_cameras(const SceneConfig& cfg);

/// Deterministic in cfg (including the seed). Throws Error when a
/// non-overlapping layout cannot be found in 1000 attempts.
std::vector<Frame> generate_scene(const SceneConfig& cfg);

/// Scene set used by training: `n_scenes` scenes with derived seeds,
/// alternating straight and arc paths.
std::vector<std::vector<Frame>> generate_scene_set(const SceneConfig& base, std::size_t n_scenes);

/// Points inside the footprint (and height span) of a box.
std::size_t count_points_in_box(const PointCloud& points, const Box3D& box);

void save_scene(const std::filesystem::path& dir, const SceneConfig& cfg, const std::vector<Frame>& frames);
std::vector<Frame> load_scene(const std::filesystem::path& dir);

}  // namespace bevfuse
