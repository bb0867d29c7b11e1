#include "bevfuse/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include "bevfuse/error.hpp"
#include "bevfuse/kernels.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/serialize.hpp"

namespace bevfuse {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
  return v;
}

std::string format(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "on" || text == "true" || text == "1") return true;
  if (text == "off" || text == "false" || text == "0") return false;
  throw ConfigError("key '" + key + "': expected on/off, got '" + text + "'");
}

template <std::size_t N>
std::array<std::size_t, N> parse_list(const std::string& key, const std::string& text) {
  std::array<std::size_t, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == N) throw ConfigError("key '" + key + "': expected " + std::to_string(N) + " values");
    out[i++] = parse_number<std::size_t>(key, trim(item));
  }
  if (i != N) throw ConfigError("key '" + key + "': expected " + std::to_string(N) + " values");
  return out;
}

template <std::size_t N>
std::string format_list(const std::array<std::size_t, N>& v) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

TrainStage parse_stage(const std::string& key, const std::string& text) {
  if (text == "joint") return TrainStage::joint;
  if (text == "lidar") return TrainStage::lidar;
  if (text == "fusion") return TrainStage::fusion;
  throw ConfigError("key '" + key + "': expected joint|lidar|fusion, got '" + text + "'");
}

struct Entry {
  std::string name, doc;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <class Ref>
Entry real(std::string name, std::string doc, Ref ref) {
  return {name, std::move(doc), [ref, name](PipelineConfig& c, const std::string& v) { ref(c) = parse_number<double>(name, v); },
          [ref](const PipelineConfig& c) { return format(ref(const_cast<PipelineConfig&>(c))); }};
}

template <class Ref>
Entry count(std::string name, std::string doc, Ref ref) {
  return {name, std::move(doc),
          [ref, name](PipelineConfig& c, const std::string& v) {
            using T = std::remove_reference_t<decltype(ref(c))>;
            ref(c) = parse_number<T>(name, v);
          },
          [ref](const PipelineConfig& c) { return std::to_string(ref(const_cast<PipelineConfig&>(c))); }};
}

template <class Ref>
Entry flag(std::string name, std::string doc, Ref ref) {
  return {name, std::move(doc), [ref, name](PipelineConfig& c, const std::string& v) { ref(c) = parse_bool(name, v); },
          [ref](const PipelineConfig& c) { return std::string(ref(const_cast<PipelineConfig&>(c)) ? "on" : "off"); }};
}

const std::vector<Entry>& entries() {
  using C = PipelineConfig;
  static const std::vector<Entry> table = {
      count("seed", "master seed for parameters, scenes and noise", [](C& c) -> auto& { return c.seed; }),
      real("voxel.size_x", "voxel edge along x (m)", [](C& c) -> auto& { return c.voxel.voxel_size[0]; }),
      real("voxel.size_y", "voxel edge along y (m)", [](C& c) -> auto& { return c.voxel.voxel_size[1]; }),
      real("voxel.size_z", "voxel edge along z (m)", [](C& c) -> auto& { return c.voxel.voxel_size[2]; }),
      real("voxel.x_min", "point range start along x (m)", [](C& c) -> auto& { return c.voxel.range_min[0]; }),
      real("voxel.y_min", "point range start along y (m)", [](C& c) -> auto& { return c.voxel.range_min[1]; }),
      real("voxel.z_min", "point range start along z (m)", [](C& c) -> auto& { return c.voxel.range_min[2]; }),
      real("voxel.x_max", "point range end along x (m)", [](C& c) -> auto& { return c.voxel.range_max[0]; }),
      real("voxel.y_max", "point range end along y (m)", [](C& c) -> auto& { return c.voxel.range_max[1]; }),
      real("voxel.z_max", "point range end along z (m)", [](C& c) -> auto& { return c.voxel.range_max[2]; }),
      count("voxel.max_points", "points averaged per voxel, extra points dropped",
            [](C& c) -> auto& { return c.voxel.max_points_per_voxel; }),
      {"sparse.widths", "channel widths of the six sparse stages (strides 1..32)",
       [](C& c, const std::string& v) { c.sparse.widths = parse_list<6>("sparse.widths", v); },
       [](const C& c) { return format_list(c.sparse.widths); }},
      {"sparse.kernel", "sparse kernel size (odd)",
       [](C& c, const std::string& v) { c.sparse.kernel = parse_number<int>("sparse.kernel", v); },
       [](const C& c) { return std::to_string(c.sparse.kernel); }},
      count("sparse.union_width", "channels of F4..F6 after projection, before the union",
            [](C& c) -> auto& { return c.sparse.union_width; }),
      count("sparse.bev_channels", "channels of the LiDAR BEV map F_LB (and of F_CB)",
            [](C& c) -> auto& { return c.sparse.bev_channels; }),
      count("sparse.z_bins", "height bins kept by sparse height compression",
            [](C& c) -> auto& { return c.sparse.z_bins; }),
      real("bev.x_min", "BEV grid start along x (m)", [](C& c) -> auto& { return c.volume.bev.x_min; }),
      real("bev.y_min", "BEV grid start along y (m)", [](C& c) -> auto& { return c.volume.bev.y_min; }),
      real("bev.res", "BEV cell size (m)", [](C& c) -> auto& { return c.volume.bev.res; }),
      count("bev.h", "BEV cells along x", [](C& c) -> auto& { return c.volume.bev.h; }),
      count("bev.w", "BEV cells along y", [](C& c) -> auto& { return c.volume.bev.w; }),
      real("volume.z_min", "camera volume start along z (m)", [](C& c) -> auto& { return c.volume.z_min; }),
      real("volume.z_res", "camera volume slice height (m)", [](C& c) -> auto& { return c.volume.z_res; }),
      count("volume.z", "camera volume slices", [](C& c) -> auto& { return c.volume.z; }),
      real("depth.min", "first depth bin start (m)", [](C& c) -> auto& { return c.camera.bins.min; }),
      real("depth.width", "depth bin width (m)", [](C& c) -> auto& { return c.camera.bins.width; }),
      count("depth.bins", "number of depth bins D", [](C& c) -> auto& { return c.camera.bins.count; }),
      {"camera.backbone_widths", "channels of the three stride-2 backbone convs",
       [](C& c, const std::string& v) { c.camera.backbone_widths = parse_list<3>("camera.backbone_widths", v); },
       [](const C& c) { return format_list(c.camera.backbone_widths); }},
      {"camera.backbone_kernel", "backbone conv kernel size",
       [](C& c, const std::string& v) { c.camera.backbone_kernel = parse_number<int>("camera.backbone_kernel", v); },
       [](const C& c) { return std::to_string(c.camera.backbone_kernel); }},
      {"camera.depth_kernel", "sparse depth encoder conv kernel size",
       [](C& c, const std::string& v) { c.camera.depth_kernel = parse_number<int>("camera.depth_kernel", v); },
       [](const C& c) { return std::to_string(c.camera.depth_kernel); }},
      count("camera.depth_channels", "channels of the encoded sparse depth C_d",
            [](C& c) -> auto& { return c.camera.depth_channels; }),
      count("camera.mix_channels", "channels of the depth-aware features C_mix",
            [](C& c) -> auto& { return c.camera.mix_channels; }),
      count("camera.volume_channels", "channels of the camera volume C_vol",
            [](C& c) -> auto& { return c.camera.volume_channels; }),
      count("scene.count", "scenes in the training set", [](C& c) -> auto& { return c.n_scenes; }),
      count("scene.frames", "frames per scene", [](C& c) -> auto& { return c.scene.n_frames; }),
      count("scene.boxes_min", "fewest boxes per scene", [](C& c) -> auto& { return c.scene.n_boxes_min; }),
      count("scene.boxes_max", "most boxes per scene", [](C& c) -> auto& { return c.scene.n_boxes_max; }),
      count("scene.cameras", "camera views", [](C& c) -> auto& { return c.scene.n_cameras; }),
      count("scene.image_h", "image rows", [](C& c) -> auto& { return c.scene.image_h; }),
      count("scene.image_w", "image columns", [](C& c) -> auto& { return c.scene.image_w; }),
      count("scene.lidar_azimuth", "LiDAR rays per ring", [](C& c) -> auto& { return c.scene.lidar_azimuth; }),
      count("scene.lidar_elevation", "LiDAR rings", [](C& c) -> auto& { return c.scene.lidar_elevation; }),
      real("scene.range_noise", "LiDAR range noise sigma (m)", [](C& c) -> auto& { return c.scene.range_noise; }),
      real("scene.ego_speed", "ego speed (m/s)", [](C& c) -> auto& { return c.scene.ego_speed; }),
      real("scene.dt", "time between frames (s)", [](C& c) -> auto& { return c.scene.dt; }),
      flag("model.sdg", "sparse depth guidance", [](C& c) -> auto& { return c.sdg; }),
      flag("model.log", "LiDAR occupancy guidance", [](C& c) -> auto& { return c.log; }),
      count("model.msdpt_scales", "MSDPT scales, 0 disables the block", [](C& c) -> auto& { return c.msdpt_scales; }),
      {"model.fusion", "BEV fusion: add|concat|lgft|lgaft",
       [](C& c, const std::string& v) { c.fusion.strategy = parse_fusion_strategy(v); },
       [](const C& c) { return to_string(c.fusion.strategy); }},
      flag("model.temporal", "previous-frame BEV fusion", [](C& c) -> auto& { return c.temporal; }),
      count("msdpt.window_h", "attention window rows", [](C& c) -> auto& { return c.msdpt.attention.window_h; }),
      count("msdpt.window_w", "attention window columns", [](C& c) -> auto& { return c.msdpt.attention.window_w; }),
      flag("msdpt.per_channel_gate", "one height gate per channel instead of one per site",
           [](C& c) -> auto& { return c.msdpt.per_channel_gate; }),
      count("fusion.expanded", "channels C' after modality expansion", [](C& c) -> auto& { return c.fusion.expanded; }),
      count("fusion.out_channels", "channels C of the fused BEV", [](C& c) -> auto& { return c.fusion.out_channels; }),
      count("fusion.token_cap", "largest token count accepted by the fusion attention",
            [](C& c) -> auto& { return c.fusion.token_cap; }),
      flag("fusion.residual", "add the LiDAR stream back onto the fused output",
           [](C& c) -> auto& { return c.fusion.residual; }),
      count("temporal.capacity", "BEV history length", [](C& c) -> auto& { return c.temporal_capacity; }),
      count("head.hidden", "channels of the head's two conv layers", [](C& c) -> auto& { return c.head_hidden; }),
      count("head.classes", "object classes K", [](C& c) -> auto& { return c.classes; }),
      real("head.heat_bias", "initial heatmap logit bias", [](C& c) -> auto& { return c.heat_bias; }),
      real("eval.score_thresh", "lowest score kept by decoding", [](C& c) -> auto& { return c.score_thresh; }),
      count("eval.max_dets", "boxes kept per frame", [](C& c) -> auto& { return c.max_dets; }),
      real("eval.iou_thresh", "rotated BEV IoU for a true positive", [](C& c) -> auto& { return c.iou_thresh; }),
      real("train.lr", "Adam learning rate", [](C& c) -> auto& { return c.lr; }),
      count("train.steps", "optimizer steps", [](C& c) -> auto& { return c.steps; }),
      count("train.batch_frames", "consecutive frames whose gradients are averaged per step",
            [](C& c) -> auto& { return c.batch_frames; }),
      flag("train.cosine_lr", "cosine decay of the learning rate to 0 over the run",
           [](C& c) -> auto& { return c.cosine_lr; }),
      real("train.grad_clip", "gradient norm clip, 0 disables", [](C& c) -> auto& { return c.grad_clip; }),
      {"train.stage", "joint | lidar (camera bypassed) | fusion (LiDAR stream frozen)",
       [](C& c, const std::string& v) { c.stage = parse_stage("train.stage", v); },
       [](const C& c) { return to_string(c.stage); }},
      flag("train.occ_supervision", "supervise the occupancy head with LiDAR occupancy",
           [](C& c) -> auto& { return c.occ_supervision; }),
      real("loss.detection", "detection loss weight", [](C& c) -> auto& { return c.w_detection; }),
      real("loss.depth", "depth supervision loss weight", [](C& c) -> auto& { return c.w_depth; }),
      real("loss.occupancy", "occupancy loss weight", [](C& c) -> auto& { return c.w_occupancy; }),
      {"run.backend", "kernel backend: serial|parallel",
       [](C& c, const std::string& v) {
         if (v != "serial" && v != "parallel") throw ConfigError("key 'run.backend': expected serial|parallel");
         c.backend = v;
       },
       [](const C& c) { return c.backend; }},
  };
  return table;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries())
    if (e.name == key) return e;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::string to_string(TrainStage s) {
  switch (s) {
    case TrainStage::joint: return "joint";
    case TrainStage::lidar: return "lidar";
    case TrainStage::fusion: return "fusion";
  }
  return "joint";
}

void PipelineConfig::sync() {
  camera.image_channels = 3;
  msdpt.num_scales = msdpt_scales;
  msdpt.attention.channels = camera.volume_channels;
  fusion.lidar_channels = sparse.bev_channels;
  fusion.camera_channels = sparse.bev_channels;
  fusion.h = volume.bev.h;
  fusion.w = volume.bev.w;
  scene.bev = volume.bev;
  scene.seed = seed;
}

void PipelineConfig::validate() const {
  PipelineConfig c = *this;
  c.sync();
  c.voxel.validate();
  c.scene.validate();
  const auto grid = c.voxel.grid_shape();
  const auto& bev = c.volume.bev;
  // F_LB comes out of the stride-8 level.
  if (static_cast<std::size_t>((grid[0] + 7) / 8) != bev.h || static_cast<std::size_t>((grid[1] + 7) / 8) != bev.w)
    throw ConfigError("voxel grid " + std::to_string(grid[0]) + "x" + std::to_string(grid[1]) +
                      " at stride 8 does not match the " + std::to_string(bev.h) + "x" + std::to_string(bev.w) +
                      " BEV grid");
  if (c.voxel.range_min[0] != bev.x_min || c.voxel.range_min[1] != bev.y_min)
    throw ConfigError("voxel range and BEV grid must start at the same corner");
  if (c.scene.image_h % k_feature_stride != 0 || c.scene.image_w % k_feature_stride != 0)
    throw ConfigError("image resolution must be divisible by " + std::to_string(k_feature_stride));
  if (c.camera.bins.count == 0 || !(c.camera.bins.width > 0)) throw ConfigError("depth bins must be non-empty");
  if (c.volume.z == 0 || !(c.volume.z_res > 0)) throw ConfigError("camera volume needs at least one slice");
  if (c.msdpt_scales > 0) {
    const std::size_t f = std::size_t{1} << (c.msdpt_scales - 1);
    if (c.volume.z % f != 0 || bev.h % f != 0 || bev.w % f != 0)
      throw ConfigError("MSDPT with " + std::to_string(c.msdpt_scales) + " scales needs Z, H, W divisible by " +
                        std::to_string(f));
  }
  if (bev.h * bev.w > c.fusion.token_cap)
    throw ConfigError("BEV grid has " + std::to_string(bev.h * bev.w) + " tokens, above fusion.token_cap");
  if (c.fusion.residual && c.fusion.expanded != c.fusion.out_channels &&
      (c.fusion.strategy == FusionStrategy::lgaft || c.fusion.strategy == FusionStrategy::lgft))
    throw ConfigError("fusion.residual needs fusion.expanded == fusion.out_channels");
  if (c.classes == 0) throw ConfigError("head.classes must be positive");
  if (c.temporal_capacity == 0) throw ConfigError("temporal.capacity must be positive");
  if (!(c.lr > 0)) throw ConfigError("train.lr must be positive");
  if (c.batch_frames == 0) throw ConfigError("train.batch_frames must be positive");
  if (c.w_detection < 0 || c.w_depth < 0 || c.w_occupancy < 0) throw ConfigError("loss weights must be non-negative");
  if (c.n_scenes == 0) throw ConfigError("scene.count must be positive");
  if (c.sparse.kernel < 1 || c.sparse.kernel % 2 == 0) throw ConfigError("sparse.kernel must be odd");
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back({e.name, e.doc});
    return k;
  }();
  return keys;
}

PipelineConfig preset_config(const std::string& name) {
  PipelineConfig c;
  if (name == "desk") {
    // defaults
  } else if (name == "micro") {
    c.voxel.voxel_size = {0.8, 0.8, 0.8};
    c.voxel.range_min = {-12.8, -12.8, -0.4};
    c.voxel.range_max = {12.8, 12.8, 6.0};
    c.sparse.widths = {1, 1, 1, 1, 1, 1};
    c.sparse.kernel = 1;
    c.sparse.union_width = 1;
    c.sparse.bev_channels = 1;
    c.sparse.z_bins = 1;
    c.volume.bev = BevSpec{-12.8, -12.8, 6.4, 4, 4};
    c.volume.z_min = -0.4;
    c.volume.z_res = 3.2;
    c.volume.z = 2;
    c.camera.bins = DepthBins{1.0, 6.4, 4};
    c.camera.backbone_widths = {1, 1, 2};
    c.camera.backbone_kernel = 1;
    c.camera.depth_kernel = 1;
    c.camera.depth_channels = 1;
    c.camera.mix_channels = 2;
    c.camera.volume_channels = 1;
    c.scene.image_h = 16;
    c.scene.image_w = 16;
    c.scene.n_frames = 2;
    c.scene.n_boxes_min = 1;
    c.scene.n_boxes_max = 2;
    c.scene.lidar_azimuth = 32;
    c.scene.lidar_elevation = 8;
    c.n_scenes = 1;
    c.msdpt_scales = 2;
    c.msdpt.attention.window_h = 2;
    c.msdpt.attention.window_w = 2;
    c.fusion.expanded = 1;
    c.fusion.out_channels = 1;
    c.head_hidden = 1;
    c.steps = 2;
  } else if (name == "nuscenes") {
    c.voxel.voxel_size = {0.075, 0.075, 0.2};
    c.voxel.range_min = {-54.0, -54.0, -5.0};
    c.voxel.range_max = {54.0, 54.0, 3.0};
    c.volume.bev = BevSpec{-54.0, -54.0, 0.6, 180, 180};
    c.volume.z_min = -5.0;
    c.volume.z_res = 1.0;
    c.volume.z = 8;
    c.camera.bins = DepthBins{1.0, 0.5, 118};
    c.scene.image_h = 448;
    c.scene.image_w = 800;
    c.scene.n_cameras = 6;
    c.fusion.token_cap = 180 * 180;
    c.msdpt_scales = 3;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected desk|micro|nuscenes)");
  }
  c.sync();
  return c;
}

void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, value);
}

std::string get_config_value(const PipelineConfig& cfg, const std::string& key) { return find_entry(key).get(cfg); }

PipelineConfig parse_config(const std::string& text, const std::string& source) {
  PipelineConfig cfg = preset_config("desk");
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool any_key = false;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    bool quoted = false;
    std::size_t cut = line.size();
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        cut = i;
        break;
      }
    }
    const std::string body = trim(line.substr(0, cut));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty()) throw ConfigError(where + "missing key");
    try {
      if (key == "preset") {
        if (any_key) throw ConfigError("'preset' must be the first key");
        cfg = preset_config(value);
      } else {
        set_config_value(cfg, key, value);
      }
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
    any_key = true;
  }
  cfg.sync();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError(path.string() + ": config file not found");
  return parse_config(read_file(path), path.string());
}

std::string dump_config(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.name + " = " + e.get(cfg) + "\n";
  return out;
}

std::string config_hash(const PipelineConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(dump_config(cfg))));
  return buf;
}

}  // namespace bevfuse
