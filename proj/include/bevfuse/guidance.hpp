#pragma once

#include <string>
#include <vector>

#include "bevfuse/params.hpp"
#include "bevfuse/types.hpp"

namespace bevfuse {

/// Occupancy guidance: LiDAR BEV features are expanded into a volume, an
/// occupancy probability is predicted per voxel, and the camera volume is
/// multiplied by it.
class LidarGuidance {
 public:
  LidarGuidance(ParameterStore& store, const std::string& prefix, std::size_t bev_channels,
                std::size_t volume_channels, std::size_t z);

  /// Per-cell linear map C_bev -> C_vol * Z (no bias), reshaped to C_vol x Z x H x W.
  Tensor lift_bev_to_3d(const Tensor& bev) const;
  /// 1x1x1 conv to one channel + sigmoid: 1 x Z x H x W.
  Tensor occupancy_head(const Tensor& volume) const;

 private:
  std::size_t c_vol_, z_;
  Tensor lift_w_, occ_w_, occ_b_;
};

/// F''[c,z,h,w] = F'[c,z,h,w] * O[0,z,h,w].
Tensor apply_occupancy_gate(const Tensor& features, const Tensor& occupancy);

/// Z x H x W labels: 1 where at least one point falls in the voxel.
std::vector<double> occupancy_ground_truth(const PointCloud& points, const VolumeSpec& vol);

/// Weighted binary cross-entropy, averaged over voxels. Positives are weighted
/// by #neg / #pos clamped to [1, 100]; predictions are clamped to [1e-6, 1 - 1e-6].
Tensor occupancy_loss(const Tensor& occupancy, const std::vector<double>& target);

}  // namespace bevfuse
