#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bevfuse/geometry.hpp"
#include "bevfuse/params.hpp"

namespace bevfuse {

struct CameraStreamConfig {
  std::size_t image_channels = 3;
  std::array<std::size_t, 3> backbone_widths{8, 16, 16};
  std::size_t depth_channels = 8;  // C_d
  std::size_t mix_channels = 16;   // C_mix
  std::size_t volume_channels = 8;  // C_vol
  int backbone_kernel = 3;
  int depth_kernel = 3;
  DepthBins bins;
  bool sdg = true;  // feed rasterized LiDAR depth into the features
};

/// Feature maps of all views, [N_c x C x H_f x W_f].
struct MultiViewFeatures {
  Tensor feats;
  std::vector<CameraModel> cameras;
};

inline constexpr std::size_t k_feature_stride = 8;

/// Image backbone, sparse depth encoder, depth-aware mixing and the two
/// per-pixel heads. All weights are shared across views.
class CameraStream {
 public:
  CameraStream(ParameterStore& store, const std::string& prefix, const CameraStreamConfig& cfg);

  /// Three stride-2 convolutions with ReLU (no bias).
  MultiViewFeatures image_backbone(const Tensor& images, const std::vector<CameraModel>& cameras) const;
  /// Per view: block-pool (mean valid depth / 10, valid fraction) to feature
  /// stride, then conv + ReLU and a 1x1 conv.
  Tensor encode_sparse_depth(const std::vector<DepthMap>& depth) const;
  /// Channel concat + 1x1 mixing conv + ReLU.
  Tensor make_depth_aware(const Tensor& img_feats, const Tensor& depth_feats) const;
  /// 1x1 conv to D bins + softmax over bins.
  Tensor predict_depth_distribution(const Tensor& depth_aware) const;
  /// 1x1 conv to C_vol: the features that get lifted.
  Tensor context(const Tensor& depth_aware) const;

  const CameraStreamConfig& config() const { return cfg_; }

 private:
  CameraStreamConfig cfg_;
  std::array<Tensor, 3> backbone_;
  Tensor depth_w1_, depth_b1_, depth_w2_, depth_b2_;
  Tensor mix_w_, mix_b_;
  Tensor depth_head_w_, depth_head_b_;
  Tensor ctx_w_, ctx_b_;
};

/// Non-learnable pooling of a depth map to [2 x H/stride x W/stride].
std::vector<double> pool_depth(const DepthMap& depth, std::size_t stride);

/// Lift plans for every camera; cached by the caller since cameras are fixed.
std::vector<std::shared_ptr<const kernels::SplatPlan>> make_lift_plans(const std::vector<CameraModel>& cameras,
                                                                       std::size_t feat_h, std::size_t feat_w,
                                                                       const DepthBins& bins, const VolumeSpec& vol);

/// Sum over views of lift_splat(context_v, depth_v), in view order.
Tensor build_feature_volume(const Tensor& context, const Tensor& depth_dist,
                            const std::vector<std::shared_ptr<const kernels::SplatPlan>>& plans,
                            const VolumeSpec& vol);

/// Target bin of each feature cell: the bin of the nearest valid depth in its
/// stride x stride block, or -1 when the block has none (or it is out of range).
std::vector<int> depth_targets(const DepthMap& depth, std::size_t stride, const DepthBins& bins);

/// Mean of -log p[target] over cells with a target, 0 when there are none.
/// depth_dist is [N_c x D x H_f x W_f]; probabilities are floored at 1e-12.
Tensor depth_supervision_loss(const Tensor& depth_dist, const std::vector<std::vector<int>>& targets);

}  // namespace bevfuse
