#include "bevfuse/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

LidarGuidance::LidarGuidance(ParameterStore& store, const std::string& prefix, std::size_t bev_channels,
                             std::size_t volume_channels, std::size_t z)
    : c_vol_(volume_channels), z_(z) {
  lift_w_ = store.glorot(prefix + ".lift.w", {volume_channels * z, bev_channels, 1, 1}, bev_channels,
                         volume_channels * z);
  occ_w_ = store.glorot(prefix + ".occ.w", {1, volume_channels, 1, 1, 1}, volume_channels, 1);
  occ_b_ = store.zeros(prefix + ".occ.b", {1});
}

Tensor LidarGuidance::lift_bev_to_3d(const Tensor& bev) const {
  if (bev.rank() != 3) throw DimensionError("lift_bev_to_3d: expected C x H x W, got " + shape_str(bev.shape()));
  return reshape(conv2d(bev, lift_w_), {c_vol_, z_, bev.dim(1), bev.dim(2)});
}

Tensor LidarGuidance::occupancy_head(const Tensor& volume) const {
  return sigmoid(conv3d(volume, occ_w_, occ_b_));
}

Tensor apply_occupancy_gate(const Tensor& features, const Tensor& occupancy) {
  if (features.rank() != 4 || occupancy.rank() != 4 || occupancy.dim(0) != 1 ||
      features.dim(1) != occupancy.dim(1) || features.dim(2) != occupancy.dim(2) ||
      features.dim(3) != occupancy.dim(3)) {
    throw DimensionError("apply_occupancy_gate: features " + shape_str(features.shape()) + " vs occupancy " +
                         shape_str(occupancy.shape()));
  }
  return mul(features, occupancy);
}

std::vector<double> occupancy_ground_truth(const PointCloud& points, const VolumeSpec& vol) {
  std::vector<double> out(vol.cells(), 0.0);
  for (const auto& p : points) {
    const double qx = std::floor((p.x - vol.bev.x_min) / vol.bev.res);
    const double qy = std::floor((p.y - vol.bev.y_min) / vol.bev.res);
    const double qz = std::floor((p.z - vol.z_min) / vol.z_res);
    if (qx < 0 || qy < 0 || qz < 0 || qx >= static_cast<double>(vol.bev.h) || qy >= static_cast<double>(vol.bev.w) ||
        qz >= static_cast<double>(vol.z))
      continue;
    out[(static_cast<std::size_t>(qz) * vol.bev.h + static_cast<std::size_t>(qx)) * vol.bev.w +
        static_cast<std::size_t>(qy)] = 1.0;
  }
  return out;
}

Tensor occupancy_loss(const Tensor& occupancy, const std::vector<double>& target) {
  if (occupancy.numel() != target.size()) {
    throw DimensionError("occupancy_loss: " + std::to_string(target.size()) + " labels for " +
                         shape_str(occupancy.shape()));
  }
  double pos = 0.0;
  for (double t : target) pos += t;
  const double neg = static_cast<double>(target.size()) - pos;
  const double pos_weight = pos > 0.0 ? std::clamp(neg / pos, 1.0, 100.0) : 1.0;
  std::vector<double> wp(target.size()), wn(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    wp[i] = target[i] * pos_weight;
    wn[i] = 1.0 - target[i];
  }
  const Shape s = occupancy.shape();
  const Tensor o = clamp(occupancy, 1e-6, 1.0 - 1e-6);
  const Tensor lp = mul(log(o), Tensor::from(s, std::move(wp)));
  const Tensor ln = mul(log(one_minus(o)), Tensor::from(s, std::move(wn)));
  return scale(mean(add(lp, ln)), -1.0);
}

}  // namespace bevfuse
