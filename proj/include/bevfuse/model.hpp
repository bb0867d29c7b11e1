#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "bevfuse/camera_stream.hpp"
#include "bevfuse/config.hpp"
#include "bevfuse/detection.hpp"
#include "bevfuse/guidance.hpp"
#include "bevfuse/lgaft.hpp"
#include "bevfuse/msdpt.hpp"
#include "bevfuse/scenegen.hpp"
#include "bevfuse/sparse.hpp"
#include "bevfuse/temporal.hpp"

namespace bevfuse {

/// Everything derived from a frame that does not depend on parameters.
struct PreparedFrame {
  std::int64_t frame_id = 0;
  EgoPose ego;
  Tensor images;
  std::vector<CameraModel> cameras;
  std::vector<Box3D> gt_boxes;
  SparseVoxelSet voxels;
  std::vector<DepthMap> depth;
  std::vector<std::vector<int>> depth_targets;
  std::vector<double> occupancy;
  DetectionTargets targets;
  std::vector<std::shared_ptr<const kernels::SplatPlan>> plans;
};

struct LossTerms {
  double heatmap = 0, regression = 0, detection = 0, depth = 0, occupancy = 0, total = 0;
};

struct ForwardResult {
  HeadOutput head;
  Tensor loss;  // weighted sum, scalar
  LossTerms terms;
  Tensor bev;   // fused map stored as history for the next frame
  std::vector<Box3D> detections;
};

/// The full detector. Parameter names are prefixed by module: lidar.,
/// camera., guidance., msdpt., camera_bev., fusion., temporal., head.
class Model {
 public:
  explicit Model(const PipelineConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  PreparedFrame prepare(const Frame& frame) const;

  /// One frame through every enabled module. With temporal fusion on, the
  /// buffer provides the previous map and receives this frame's map. With
  /// `lidar_only` the camera BEV is replaced by zeros and camera losses are
  /// skipped.
  ForwardResult forward(const PreparedFrame& frame, BevBuffer& buffer, bool lidar_only = false) const;

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const PipelineConfig& config() const { return cfg_; }
  BevBuffer make_buffer() const { return BevBuffer(cfg_.temporal_capacity); }

 private:
  PipelineConfig cfg_;
  ParameterStore store_;
  SparseEncoder encoder_;
  CameraStream camera_;
  std::optional<LidarGuidance> guidance_;
  std::optional<Msdpt> msdpt_;
  Tensor cam_bev_w_, cam_bev_b_;
  BevFusion fusion_;
  std::optional<TemporalFusion> temporal_;
  DetectionHead head_;
};

}  // namespace bevfuse
