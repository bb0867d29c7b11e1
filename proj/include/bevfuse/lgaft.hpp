#pragma once

#include <string>
#include <vector>

#include "bevfuse/params.hpp"

namespace bevfuse {

enum class FusionStrategy { add, concat, lgft, lgaft };

FusionStrategy parse_fusion_strategy(const std::string& name);
std::string to_string(FusionStrategy s);

struct FusionConfig {
  FusionStrategy strategy = FusionStrategy::lgaft;
  std::size_t lidar_channels = 32;   // C of F_LB
  std::size_t camera_channels = 32;  // C of F_CB
  std::size_t expanded = 32;         // C'
  std::size_t out_channels = 32;     // C after the Q/K/V projections
  std::size_t h = 8, w = 8;          // BEV size (position table)
  std::size_t token_cap = 4096;
  bool residual = true;
};

/// BEV fusion of LiDAR and camera grids. The adaptive strategy computes
/// per-site weights W_F from both modalities and uses them to form a
/// LiDAR-led query for single-head cross attention over camera tokens.
class BevFusion {
 public:
  BevFusion(ParameterStore& store, const std::string& prefix, const FusionConfig& cfg);

  enum class Modality { lidar, camera };
  /// 1x1 conv (with bias) to C'.
  Tensor expand_channels(const Tensor& x, Modality which) const;
  /// sigmoid(conv1x1(concat(lidar, camera))): C' x H x W.
  Tensor adaptive_weights(const Tensor& lidar, const Tensor& camera) const;
  /// Q = [(1 - W) * L, W * (C + P)] W_Q, K = (W * (C + P)) W_K, V = (C + P) W_V;
  /// out = MLP(LN(softmax(Q K^T / sqrt(C)) V)) (+ L when the residual is on).
  Tensor lgaft_fuse(const Tensor& lidar, const Tensor& camera, const Tensor& weights,
                    std::vector<double>* probs = nullptr) const;
  /// Dispatches on the configured strategy; inputs are F_LB and F_CB.
  Tensor forward(const Tensor& lidar_bev, const Tensor& camera_bev) const;

  const FusionConfig& config() const { return cfg_; }
  const Tensor& position() const { return pos_; }

 private:
  FusionConfig cfg_;
  Tensor lidar_w_, lidar_b_, camera_w_, camera_b_;
  Tensor weight_w_, weight_b_;
  Tensor wq_, wk_, wv_;
  Tensor ln_gamma_, ln_beta_;
  Tensor mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
  Tensor pos_;
  Tensor cat_w_, cat_b_;
};

}  // namespace bevfuse
