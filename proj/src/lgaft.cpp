#include "bevfuse/lgaft.hpp"

#include <cmath>

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

FusionStrategy parse_fusion_strategy(const std::string& name) {
  if (name == "add") return FusionStrategy::add;
  if (name == "concat") return FusionStrategy::concat;
  if (name == "lgft") return FusionStrategy::lgft;
  if (name == "lgaft") return FusionStrategy::lgaft;
  throw ConfigError("unknown fusion strategy '" + name + "' (expected add, concat, lgft or lgaft)");
}

std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::add: return "add";
    case FusionStrategy::concat: return "concat";
    case FusionStrategy::lgft: return "lgft";
    case FusionStrategy::lgaft: return "lgaft";
  }
  return "?";
}

namespace {

// C x H x W <-> (H*W) x C
Tensor to_tokens(const Tensor& x) { return reshape(permute(x, {1, 2, 0}), {x.dim(1) * x.dim(2), x.dim(0)}); }
Tensor from_tokens(const Tensor& t, std::size_t h, std::size_t w) {
  return permute(reshape(t, {h, w, t.dim(1)}), {2, 0, 1});
}

}  // namespace

BevFusion::BevFusion(ParameterStore& store, const std::string& prefix, const FusionConfig& cfg) : cfg_(cfg) {
  const auto cl = cfg.lidar_channels, cc = cfg.camera_channels, cp = cfg.expanded, c = cfg.out_channels;
  auto conv1 = [&](const std::string& name, std::size_t co, std::size_t ci) {
    return store.glorot(prefix + name, {co, ci, 1, 1}, ci, co);
  };
  switch (cfg.strategy) {
    case FusionStrategy::add:
      lidar_w_ = conv1(".expand_lidar.w", c, cl);
      lidar_b_ = store.zeros(prefix + ".expand_lidar.b", {c});
      camera_w_ = conv1(".expand_camera.w", c, cc);
      camera_b_ = store.zeros(prefix + ".expand_camera.b", {c});
      return;
    case FusionStrategy::concat:
      cat_w_ = conv1(".concat.w", c, cl + cc);
      cat_b_ = store.zeros(prefix + ".concat.b", {c});
      return;
    case FusionStrategy::lgft:
    case FusionStrategy::lgaft:
      break;
  }
  if (cfg.residual && cp != c) throw ConfigError("fusion residual needs C' == C");
  lidar_w_ = conv1(".expand_lidar.w", cp, cl);
  lidar_b_ = store.zeros(prefix + ".expand_lidar.b", {cp});
  camera_w_ = conv1(".expand_camera.w", cp, cc);
  camera_b_ = store.zeros(prefix + ".expand_camera.b", {cp});
  if (cfg.strategy == FusionStrategy::lgaft) {
    weight_w_ = conv1(".weights.w", cp, 2 * cp);
    weight_b_ = store.zeros(prefix + ".weights.b", {cp});
  }
  wq_ = store.glorot(prefix + ".w_q", {2 * cp, c}, 2 * cp, c);
  wk_ = store.glorot(prefix + ".w_k", {cp, c}, cp, c);
  wv_ = store.glorot(prefix + ".w_v", {cp, c}, cp, c);
  ln_gamma_ = store.constant(prefix + ".ln.gamma", {1, c}, 1.0);
  ln_beta_ = store.zeros(prefix + ".ln.beta", {1, c});
  mlp_w1_ = store.glorot(prefix + ".mlp.w1", {c, 2 * c}, c, 2 * c);
  mlp_b1_ = store.zeros(prefix + ".mlp.b1", {2 * c});
  mlp_w2_ = store.glorot(prefix + ".mlp.w2", {2 * c, c}, 2 * c, c);
  mlp_b2_ = store.zeros(prefix + ".mlp.b2", {c});
  pos_ = store.zeros(prefix + ".pos", {cp, cfg.h, cfg.w});
}

Tensor BevFusion::expand_channels(const Tensor& x, Modality which) const {
  return which == Modality::lidar ? conv2d(x, lidar_w_, lidar_b_) : conv2d(x, camera_w_, camera_b_);
}

Tensor BevFusion::adaptive_weights(const Tensor& lidar, const Tensor& camera) const {
  if (!weight_w_.defined()) throw ContractError("adaptive weights are only built for the lgaft strategy");
  if (lidar.shape() != camera.shape()) {
    throw DimensionError("adaptive_weights: " + shape_str(lidar.shape()) + " vs " + shape_str(camera.shape()));
  }
  return sigmoid(conv2d(concat({lidar, camera}, 0), weight_w_, weight_b_));
}

Tensor BevFusion::lgaft_fuse(const Tensor& lidar, const Tensor& camera, const Tensor& weights,
                             std::vector<double>* probs) const {
  if (lidar.rank() != 3 || lidar.shape() != camera.shape() || lidar.shape() != weights.shape()) {
    throw DimensionError("lgaft_fuse: lidar " + shape_str(lidar.shape()) + ", camera " +
                         shape_str(camera.shape()) + ", weights " + shape_str(weights.shape()));
  }
  const std::size_t h = lidar.dim(1), w = lidar.dim(2), n = h * w;
  if (n > cfg_.token_cap) {
    throw ConfigError("lgaft token count " + std::to_string(n) + " exceeds the cap of " +
                      std::to_string(cfg_.token_cap));
  }
  if (pos_.dim(1) != h || pos_.dim(2) != w) throw DimensionError("lgaft_fuse: position table does not match grid");
  const std::size_t c = cfg_.out_channels;
  const Tensor cam_pos = add(camera, pos_);
  const Tensor cam_weighted = mul(weights, cam_pos);
  const Tensor lidar_weighted = mul(one_minus(weights), lidar);
  const Tensor query_in = concat({to_tokens(lidar_weighted), to_tokens(cam_weighted)}, 1);
  const Tensor q = reshape(matmul(query_in, wq_), {1, n, c});
  const Tensor k = reshape(matmul(to_tokens(cam_weighted), wk_), {1, n, c});
  const Tensor v = reshape(matmul(to_tokens(cam_pos), wv_), {1, n, c});
  const Tensor a = reshape(attention(q, k, v, 1.0 / std::sqrt(static_cast<double>(c)), probs), {n, c});
  const Tensor normed = add(mul(layer_norm(a, 1), ln_gamma_), ln_beta_);
  Tensor out = linear(relu(linear(normed, mlp_w1_, mlp_b1_)), mlp_w2_, mlp_b2_);
  if (cfg_.residual) out = add(out, to_tokens(lidar));
  return from_tokens(out, h, w);
}

Tensor BevFusion::forward(const Tensor& lidar_bev, const Tensor& camera_bev) const {
  if (lidar_bev.rank() != 3 || camera_bev.rank() != 3 || lidar_bev.dim(1) != camera_bev.dim(1) ||
      lidar_bev.dim(2) != camera_bev.dim(2)) {
    throw DimensionError("fusion: lidar " + shape_str(lidar_bev.shape()) + " and camera " +
                         shape_str(camera_bev.shape()) + " grids differ");
  }
  switch (cfg_.strategy) {
    case FusionStrategy::add:
      return add(expand_channels(lidar_bev, Modality::lidar), expand_channels(camera_bev, Modality::camera));
    case FusionStrategy::concat:
      return conv2d(concat({lidar_bev, camera_bev}, 0), cat_w_, cat_b_);
    case FusionStrategy::lgft: {
      const Tensor l = expand_channels(lidar_bev, Modality::lidar);
      const Tensor cb = expand_channels(camera_bev, Modality::camera);
      return lgaft_fuse(l, cb, Tensor::full(l.shape(), 0.5));
    }
    case FusionStrategy::lgaft: {
      const Tensor l = expand_channels(lidar_bev, Modality::lidar);
      const Tensor cb = expand_channels(camera_bev, Modality::camera);
      return lgaft_fuse(l, cb, adaptive_weights(l, cb));
    }
  }
  throw ConfigError("unknown fusion strategy");
}

}  // namespace bevfuse
