#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bevfuse/camera_stream.hpp"
#include "bevfuse/lgaft.hpp"
#include "bevfuse/msdpt.hpp"
#include "bevfuse/scenegen.hpp"
#include "bevfuse/sparse.hpp"

namespace bevfuse {

enum class TrainStage { joint, lidar, fusion };

/// Everything a run depends on. Each field is reachable through exactly one
/// config key (see config_keys()); the canonical dump of all keys is what the
/// config hash covers.
struct PipelineConfig {
  std::uint64_t seed = 42;

  VoxelizationConfig voxel;
  SparseEncoderConfig sparse;
  VolumeSpec volume;  // volume.bev is the shared BEV grid
  CameraStreamConfig camera;
  SceneConfig scene;
  std::size_t n_scenes = 4;

  bool sdg = true;
  bool log = true;
  std::size_t msdpt_scales = 3;  // 0 disables MSDPT
  MsdptConfig msdpt;
  FusionConfig fusion;
  bool temporal = true;
  std::size_t temporal_capacity = 1;
  bool occ_supervision = true;

  std::size_t head_hidden = 32;
  std::size_t classes = 1;
  double heat_bias = -2.19;

  double score_thresh = 0.05;
  std::size_t max_dets = 32;
  double iou_thresh = 0.5;

  double lr = 2e-3;
  std::size_t steps = 500;
  std::size_t batch_frames = 4;  // consecutive frames per optimizer step
  bool cosine_lr = true;         // cosine decay from lr to 0 over the run
  double grad_clip = 10.0;
  TrainStage stage = TrainStage::joint;

  double w_detection = 1.0;
  double w_depth = 0.1;
  double w_occupancy = 0.1;

  std::string backend = "parallel";

  /// Copies the shared settings (BEV grid, channel counts, depth bins) into
  /// the per-module configs. Called by validate() and after parsing.
  void sync();
  /// Throws ConfigError when the modules do not fit together.
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

/// Every accepted key, in canonical order, with its documentation.
const std::vector<ConfigKey>& config_keys();

/// Named presets: "desk" (the default), "micro" (gradient check, under 200
/// parameters), "nuscenes" (full-size geometry, kept for reference only).
PipelineConfig preset_config(const std::string& name);

/// Sets one key from its text form. Throws ConfigError on an unknown key or a
/// malformed value.
void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const PipelineConfig& cfg, const std::string& key);

/// Parses flat `key = value` text. `#` starts a comment, blank lines are
/// ignored, strings may be double quoted. A `preset` key, if present, must
/// come first and selects the starting point. Errors carry `source:line`.
PipelineConfig parse_config(const std::string& text, const std::string& source = "<config>");
PipelineConfig load_config(const std::filesystem::path& path);

/// `key = value` lines for every key, in canonical order.
std::string dump_config(const PipelineConfig& cfg);
/// FNV-1a 64 of dump_config, as 16 hex digits.
std::string config_hash(const PipelineConfig& cfg);

std::string to_string(TrainStage s);

}  // namespace bevfuse
