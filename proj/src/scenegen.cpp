#include "bevfuse/scenegen.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "bevfuse/error.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/serialize.hpp"

namespace bevfuse {

namespace {

constexpr double k_pi = std::numbers::pi;
constexpr double k_box_albedo = 0.9;
constexpr double k_ground_albedo = 0.3;
constexpr double k_box_intensity = 0.8;
constexpr double k_ground_intensity = 0.2;
constexpr int k_max_attempts = 1000;

EgoPose pose_at(const SceneConfig& cfg, std::size_t t) {
  const double time = static_cast<double>(t) * cfg.dt;
  if (cfg.yaw_rate == 0.0) return make_planar_pose(cfg.ego_speed * time, 0.0, 0.0, time);
  const double r = cfg.ego_speed / cfg.yaw_rate;
  const double a = cfg.yaw_rate * time;
  return make_planar_pose(r * std::sin(a), r * (1.0 - std::cos(a)), a, time);
}

// World box seen from the ego frame of `pose`.
Box3D to_ego(const Box3D& world, const EgoPose& pose) {
  const Rigid inv = pose.ego_to_world.inverse();
  const Eigen::Vector3d c = inv.apply(Eigen::Vector3d(world.x, world.y, world.z));
  const double ego_yaw = std::atan2(pose.ego_to_world.rotation(1, 0), pose.ego_to_world.rotation(0, 0));
  Box3D b = world;
  b.x = c.x();
  b.y = c.y();
  b.z = c.z();
  b.yaw = normalize_yaw(world.yaw - ego_yaw);
  return b;
}

long cell_of(double v, double mn, double res) { return static_cast<long>(std::floor((v - mn) / res)); }

// Slab test in the box frame. Returns the entry distance along the unit ray
// and the outward normal of the entry face (in ego coordinates).
std::optional<std::pair<double, Eigen::Vector3d>> hit_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                                          const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const Eigen::Vector3d rel = o - Eigen::Vector3d(b.x, b.y, b.z);
  const Eigen::Vector3d lo(c * rel.x() + s * rel.y(), -s * rel.x() + c * rel.y(), rel.z());
  const Eigen::Vector3d ld(c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z());
  const double half[3] = {b.l / 2.0, b.w / 2.0, b.h / 2.0};
  double t_in = -std::numeric_limits<double>::infinity(), t_out = std::numeric_limits<double>::infinity();
  int axis_in = -1;
  double sign_in = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (ld[a] == 0.0) {
      if (std::fabs(lo[a]) > half[a]) return std::nullopt;
      continue;
    }
    double t1 = (-half[a] - lo[a]) / ld[a], t2 = (half[a] - lo[a]) / ld[a];
    double sgn = -1.0;
    if (t1 > t2) {
      std::swap(t1, t2);
      sgn = 1.0;
    }
    if (t1 > t_in) {
      t_in = t1;
      axis_in = a;
      sign_in = sgn;
    }
    t_out = std::min(t_out, t2);
  }
  if (t_out < t_in || t_out <= 0.0 || axis_in < 0) return std::nullopt;
  if (t_in <= 0.0) return std::nullopt;  // origin inside the box: ignored
  Eigen::Vector3d ln = Eigen::Vector3d::Zero();
  ln[axis_in] = sign_in;
  const Eigen::Vector3d n(c * ln.x() - s * ln.y(), s * ln.x() + c * ln.y(), ln.z());
  return std::make_pair(t_in, n);
}

nlohmann::json rigid_json(const Rigid& r) {
  nlohmann::json j;
  j["rotation"] = std::vector<double>(r.rotation.data(), r.rotation.data() + 9);  // column major
  j["translation"] = {r.translation.x(), r.translation.y(), r.translation.z()};
  return j;
}

Rigid rigid_from_json(const nlohmann::json& j) {
  Rigid r;
  const auto rot = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (rot.size() != 9 || t.size() != 3) throw ContractError("scene.json: malformed rigid transform");
  for (int i = 0; i < 9; ++i) r.rotation.data()[i] = rot[static_cast<std::size_t>(i)];
  r.translation = Eigen::Vector3d(t[0], t[1], t[2]);
  return r;
}

nlohmann::json box_json(const Box3D& b) {
  return {{"class", b.class_id}, {"score", b.score}, {"x", b.x}, {"y", b.y}, {"z", b.z},
          {"l", b.l},            {"w", b.w},         {"h", b.h}, {"yaw", b.yaw}};
}

Box3D box_from_json(const nlohmann::json& j) {
  Box3D b;
  b.class_id = j.at("class").get<int>();
  b.score = j.at("score").get<double>();
  b.x = j.at("x").get<double>();
  b.y = j.at("y").get<double>();
  b.z = j.at("z").get<double>();
  b.l = j.at("l").get<double>();
  b.w = j.at("w").get<double>();
  b.h = j.at("h").get<double>();
  b.yaw = j.at("yaw").get<double>();
  return b;
}

}  // namespace

void SceneConfig::validate() const {
  if (n_boxes_min > n_boxes_max) throw ConfigError("scene: n_boxes_min exceeds n_boxes_max");
  if (!(length_min > 0 && length_min <= length_max && width_min > 0 && width_min <= width_max && height_min > 0 &&
        height_min <= height_max))
    throw ConfigError("scene: box size ranges must be positive and ordered");
  if (n_frames == 0) throw ConfigError("scene: n_frames must be positive");
  if (lidar_azimuth == 0 || lidar_elevation == 0) throw ConfigError("scene: lidar ray counts must be positive");
  if (!(elevation_min_deg < elevation_max_deg)) throw ConfigError("scene: elevation range is empty");
  if (!(range_noise >= 0)) throw ConfigError("scene: range noise must be non-negative");
  if (n_cameras == 0) throw ConfigError("scene: at least one camera is required");
  if (!(dt > 0)) throw ConfigError("scene: dt must be positive");
}

std::optional<Hit> ray_cast(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction,
                            const std::vector<Box3D>& boxes, bool ground) {
  const double norm = direction.norm();
  if (!(norm > 0.0)) return std::nullopt;
  const Eigen::Vector3d d = direction / norm;
  std::optional<Hit> best;
  if (ground && d.z() < 0.0 && origin.z() > 0.0) {
    const double t = -origin.z() / d.z();
    Hit h;
    h.range = t;
    h.point = origin + t * d;
    h.point.z() = 0.0;
    h.normal = Eigen::Vector3d(0, 0, 1);
    h.object = -1;
    best = h;
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto r = hit_box(origin, d, boxes[i]);
    if (!r || (best && r->first >= best->range)) continue;
    Hit h;
    h.range = r->first;
    h.point = origin + r->first * d;
    h.normal = r->second;
    h.object = static_cast<int>(i);
    best = h;
  }
  return best;
}

std::vector<CameraModel> default_cameras(const SceneConfig& cfg) {
  std::vector<CameraModel> cams;
  const double hfov = k_pi / 2.0;
  for (std::size_t i = 0; i < cfg.n_cameras; ++i) {
    // Headings spread over [+45, -45] degrees; a single camera looks along +x.
    const double yaw = cfg.n_cameras == 1 ? 0.0
                                          : k_pi / 4.0 - static_cast<double>(i) * (k_pi / 2.0) /
                                                             static_cast<double>(cfg.n_cameras - 1);
    cams.push_back(make_camera(Eigen::Vector3d(0, 0, cfg.camera_height), yaw, hfov, cfg.image_h, cfg.image_w));
  }
  return cams;
}

std::size_t count_points_in_box(const PointCloud& points, const Box3D& b) {
  constexpr double margin = 0.15;  // covers range noise on the box faces
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  std::size_t n = 0;
  for (const auto& p : points) {
    const double dx = p.x - b.x, dy = p.y - b.y;
    const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
    if (std::fabs(lx) <= b.l / 2 + margin && std::fabs(ly) <= b.w / 2 + margin &&
        std::fabs(p.z - b.z) <= b.h / 2 + margin)
      ++n;
  }
  return n;
}

std::vector<Frame> generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  std::vector<EgoPose> poses;
  for (std::size_t t = 0; t < cfg.n_frames; ++t) poses.push_back(pose_at(cfg, t));
  const auto cameras = default_cameras(cfg);
  const auto& bev = cfg.bev;
  constexpr double margin = 1.0;

  Rng rng(cfg.seed, "scene/layout");
  int attempts = 0;
  while (true) {
    const auto n_boxes = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.n_boxes_min), static_cast<std::int64_t>(cfg.n_boxes_max)));
    std::vector<Box3D> world;
    while (world.size() < n_boxes) {
      if (++attempts > k_max_attempts) {
        throw Error("scene generation: no valid layout for seed " + std::to_string(cfg.seed) + " after " +
                    std::to_string(k_max_attempts) + " placement attempts");
      }
      Box3D b;
      b.l = rng.uniform(cfg.length_min, cfg.length_max);
      b.w = rng.uniform(cfg.width_min, cfg.width_max);
      b.h = rng.uniform(cfg.height_min, cfg.height_max);
      b.z = b.h / 2.0;
      b.yaw = normalize_yaw(rng.uniform(-k_pi, k_pi));
      // Sample in the first ego frame; that frame equals the world frame.
      b.x = rng.uniform(bev.x_min + margin, bev.x_max() - margin);
      b.y = rng.uniform(bev.y_min + margin, bev.y_max() - margin);
      bool ok = true;
      for (std::size_t t = 0; t < poses.size() && ok; ++t) {
        const Box3D e = to_ego(b, poses[t]);
        if (e.x < bev.x_min + margin || e.x > bev.x_max() - margin || e.y < bev.y_min + margin ||
            e.y > bev.y_max() - margin)
          ok = false;
        if (std::hypot(e.x, e.y) < cfg.min_ego_clearance + 0.5 * std::hypot(b.l, b.w)) ok = false;
        const long ch = cell_of(e.x, bev.x_min, bev.res), cw = cell_of(e.y, bev.y_min, bev.res);
        for (const auto& other : world) {
          const Box3D eo = to_ego(other, poses[t]);
          const long oh = cell_of(eo.x, bev.x_min, bev.res), ow = cell_of(eo.y, bev.y_min, bev.res);
          // Centre cells at least two apart so that 3x3 peak picking keeps both.
          if (std::max(std::labs(ch - oh), std::labs(cw - ow)) < 2) ok = false;
          if (std::hypot(e.x - eo.x, e.y - eo.y) < 0.5 * (std::hypot(b.l, b.w) + std::hypot(other.l, other.w)))
            ok = false;
        }
      }
      if (ok) world.push_back(b);
    }

    std::vector<Frame> frames;
    bool sparse_box = false;
    for (std::size_t t = 0; t < poses.size() && !sparse_box; ++t) {
      Frame f;
      f.frame_id = cfg.frame_id_base + static_cast<std::int64_t>(t);
      f.ego = poses[t];
      f.cameras = cameras;
      for (const auto& b : world) f.gt_boxes.push_back(to_ego(b, poses[t]));

      Rng noise(cfg.seed, "scene/lidar/" + std::to_string(t));
      const Eigen::Vector3d origin(0, 0, cfg.lidar_height);
      for (std::size_t e = 0; e < cfg.lidar_elevation; ++e) {
        const double el = (cfg.elevation_min_deg + (cfg.elevation_max_deg - cfg.elevation_min_deg) *
                                                       static_cast<double>(e) /
                                                       static_cast<double>(std::max<std::size_t>(1, cfg.lidar_elevation - 1))) *
                          k_pi / 180.0;
        for (std::size_t a = 0; a < cfg.lidar_azimuth; ++a) {
          const double az = 2.0 * k_pi * (static_cast<double>(a) + 0.5) / static_cast<double>(cfg.lidar_azimuth);
          const Eigen::Vector3d dir(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
          const double eps = noise.normal() * cfg.range_noise;
          const auto hit = ray_cast(origin, dir, f.gt_boxes);
          if (!hit || hit->range > cfg.max_range) continue;
          const Eigen::Vector3d p = origin + (hit->range + eps) * dir;
          f.points.push_back({p.x(), p.y(), p.z(), hit->object >= 0 ? k_box_intensity : k_ground_intensity});
        }
      }
      for (const auto& b : f.gt_boxes) {
        const auto n = count_points_in_box(f.points, b);
        if (n > 0 && n < cfg.min_points_per_box) sparse_box = true;
      }

      const std::size_t h = cfg.image_h, w = cfg.image_w, plane = h * w;
      std::vector<double> img(cameras.size() * 3 * plane, 0.0);
      for (std::size_t ci = 0; ci < cameras.size(); ++ci) {
        const auto& cam = cameras[ci];
        const Eigen::Matrix3d rt = cam.ego_to_cam.rotation.transpose();
        const Eigen::Vector3d center = -(rt * cam.ego_to_cam.translation);
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t c = 0; c < w; ++c) {
            const Eigen::Vector3d dc((static_cast<double>(c) + 0.5 - cam.cx) / cam.fx,
                                     (static_cast<double>(r) + 0.5 - cam.cy) / cam.fy, 1.0);
            const Eigen::Vector3d dir = rt * dc;
            const auto hit = ray_cast(center, dir, f.gt_boxes);
            if (!hit || hit->range > cfg.max_range) continue;
            const double depth = hit->range / dc.norm();
            const double albedo = hit->object >= 0 ? k_box_albedo : k_ground_albedo;
            const double shade = 0.2 + 0.8 * std::fabs(hit->normal.dot(dir.normalized()));
            double* base = img.data() + ci * 3 * plane + r * w + c;
            base[0] = 1.0 / depth;
            base[plane] = albedo;
            base[2 * plane] = albedo * shade;
          }
      }
      f.images = Tensor::from({cameras.size(), 3, h, w}, std::move(img));
      frames.push_back(std::move(f));
    }
    if (!sparse_box) return frames;
    ++attempts;  // resample the whole layout
  }
}

std::vector<std::vector<Frame>> generate_scene_set(const SceneConfig& base, std::size_t n_scenes) {
  std::vector<std::vector<Frame>> out;
  for (std::size_t s = 0; s < n_scenes; ++s) {
    SceneConfig cfg = base;
    cfg.seed = hash_combine(base.seed, s);
    cfg.frame_id_base = static_cast<std::int64_t>(s) * 1000;
    cfg.yaw_rate = (s % 2 == 1) ? 0.2 : 0.0;
    out.push_back(generate_scene(cfg));
  }
  return out;
}

void save_scene(const std::filesystem::path& dir, const SceneConfig& cfg, const std::vector<Frame>& frames) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = "bevfuse-scene-1";
  j["config"] = {{"seed", cfg.seed},
                 {"n_frames", cfg.n_frames},
                 {"ego_speed", cfg.ego_speed},
                 {"yaw_rate", cfg.yaw_rate},
                 {"dt", cfg.dt},
                 {"lidar_azimuth", cfg.lidar_azimuth},
                 {"lidar_elevation", cfg.lidar_elevation},
                 {"range_noise", cfg.range_noise}};
  j["frames"] = nlohmann::json::array();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    nlohmann::json fj;
    fj["frame_id"] = f.frame_id;
    fj["timestamp"] = f.ego.timestamp;
    fj["ego_to_world"] = rigid_json(f.ego.ego_to_world);
    fj["cameras"] = nlohmann::json::array();
    for (const auto& c : f.cameras) {
      fj["cameras"].push_back({{"fx", c.fx},
                               {"fy", c.fy},
                               {"cx", c.cx},
                               {"cy", c.cy},
                               {"height", c.height},
                               {"width", c.width},
                               {"ego_to_cam", rigid_json(c.ego_to_cam)}});
    }
    fj["boxes"] = nlohmann::json::array();
    for (const auto& b : f.gt_boxes) fj["boxes"].push_back(box_json(b));
    const std::string stem = "frame_" + std::to_string(i);
    fj["n_points"] = f.points.size();
    if (!f.points.empty()) {
      std::vector<double> pts;
      for (const auto& p : f.points) pts.insert(pts.end(), {p.x, p.y, p.z, p.intensity});
      save_tensor(dir / (stem + "_points.bft"), Tensor::from({f.points.size(), 4}, std::move(pts)));
      fj["points_file"] = stem + "_points.bft";
    }
    save_tensor(dir / (stem + "_images.bft"), f.images);
    fj["images_file"] = stem + "_images.bft";
    j["frames"].push_back(fj);
  }
  write_file(dir / "scene.json", j.dump(2) + "\n");
}

std::vector<Frame> load_scene(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(dir / "scene.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ContractError((dir / "scene.json").string() + ": " + e.what());
  }
  std::vector<Frame> frames;
  try {
    for (const auto& fj : j.at("frames")) {
      Frame f;
      f.frame_id = fj.at("frame_id").get<std::int64_t>();
      f.ego.ego_to_world = rigid_from_json(fj.at("ego_to_world"));
      f.ego.timestamp = fj.at("timestamp").get<double>();
      for (const auto& cj : fj.at("cameras")) {
        CameraModel c;
        c.fx = cj.at("fx").get<double>();
        c.fy = cj.at("fy").get<double>();
        c.cx = cj.at("cx").get<double>();
        c.cy = cj.at("cy").get<double>();
        c.height = cj.at("height").get<std::size_t>();
        c.width = cj.at("width").get<std::size_t>();
        c.ego_to_cam = rigid_from_json(cj.at("ego_to_cam"));
        c.validate();
        f.cameras.push_back(c);
      }
      for (const auto& bj : fj.at("boxes")) f.gt_boxes.push_back(box_from_json(bj));
      if (fj.at("n_points").get<std::size_t>() > 0) {
        const Tensor pts = load_tensor(dir / fj.at("points_file").get<std::string>());
        if (pts.rank() != 2 || pts.dim(1) != 4) throw ContractError("points tensor must be N x 4");
        const auto v = pts.values();
        for (std::size_t i = 0; i < pts.dim(0); ++i) f.points.push_back({v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]});
      }
      f.images = load_tensor(dir / fj.at("images_file").get<std::string>());
      frames.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ContractError((dir / "scene.json").string() + ": " + e.what());
  }
  return frames;
}

}  // namespace bevfuse
