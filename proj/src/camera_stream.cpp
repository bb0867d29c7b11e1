#include "bevfuse/camera_stream.hpp"

#include <limits>

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

namespace {

Tensor conv_weight(ParameterStore& store, const std::string& name, std::size_t co, std::size_t ci, std::size_t k) {
  return store.glorot(name, {co, ci, k, k}, ci * k * k, co * k * k);
}

}  // namespace

CameraStream::CameraStream(ParameterStore& store, const std::string& prefix, const CameraStreamConfig& cfg)
    : cfg_(cfg) {
  if (cfg.backbone_kernel % 2 == 0 || cfg.depth_kernel % 2 == 0) throw ConfigError("camera kernels must be odd");
  std::size_t ci = cfg.image_channels;
  for (std::size_t s = 0; s < 3; ++s) {
    backbone_[s] = conv_weight(store, prefix + ".backbone" + std::to_string(s), cfg.backbone_widths[s], ci,
                               cfg.backbone_kernel);
    ci = cfg.backbone_widths[s];
  }
  const auto cd = cfg.depth_channels;
  depth_w1_ = conv_weight(store, prefix + ".depth_enc1.w", cd, 2, cfg.depth_kernel);
  depth_b1_ = store.zeros(prefix + ".depth_enc1.b", {cd});
  depth_w2_ = conv_weight(store, prefix + ".depth_enc2.w", cd, cd, 1);
  depth_b2_ = store.zeros(prefix + ".depth_enc2.b", {cd});
  mix_w_ = conv_weight(store, prefix + ".mix.w", cfg.mix_channels, ci + cd, 1);
  mix_b_ = store.zeros(prefix + ".mix.b", {cfg.mix_channels});
  depth_head_w_ = conv_weight(store, prefix + ".depth_head.w", cfg.bins.count, cfg.mix_channels, 1);
  depth_head_b_ = store.zeros(prefix + ".depth_head.b", {cfg.bins.count});
  ctx_w_ = conv_weight(store, prefix + ".context.w", cfg.volume_channels, cfg.mix_channels, 1);
  ctx_b_ = store.zeros(prefix + ".context.b", {cfg.volume_channels});
}

MultiViewFeatures CameraStream::image_backbone(const Tensor& images, const std::vector<CameraModel>& cameras) const {
  if (images.rank() != 4 || images.dim(1) != cfg_.image_channels) {
    throw DimensionError("image_backbone: expected N x " + std::to_string(cfg_.image_channels) + " x H x W, got " +
                         shape_str(images.shape()));
  }
  if (images.dim(2) % k_feature_stride != 0 || images.dim(3) % k_feature_stride != 0) {
    throw ConfigError("image resolution " + std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)) +
                      " is not divisible by 8");
  }
  if (cameras.size() != images.dim(0)) throw DimensionError("image_backbone: one camera model per view required");
  Tensor x = images;
  const std::size_t pad = static_cast<std::size_t>(cfg_.backbone_kernel / 2);
  for (const auto& w : backbone_) x = relu(conv2d(x, w, {}, 2, pad));
  return {x, cameras};
}

std::vector<double> pool_depth(const DepthMap& depth, std::size_t stride) {
  const std::size_t hf = depth.height / stride, wf = depth.width / stride;
  std::vector<double> out(2 * hf * wf, 0.0);
  for (std::size_t i = 0; i < hf; ++i)
    for (std::size_t j = 0; j < wf; ++j) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t r = i * stride; r < (i + 1) * stride; ++r)
        for (std::size_t c = j * stride; c < (j + 1) * stride; ++c)
          if (depth.is_valid(r, c)) {
            sum += depth.at(r, c);
            ++n;
          }
      if (n > 0) out[i * wf + j] = sum / static_cast<double>(n) / 10.0;
      out[hf * wf + i * wf + j] = static_cast<double>(n) / static_cast<double>(stride * stride);
    }
  return out;
}

Tensor CameraStream::encode_sparse_depth(const std::vector<DepthMap>& depth) const {
  if (depth.empty()) throw DimensionError("encode_sparse_depth: no views");
  const std::size_t hf = depth[0].height / k_feature_stride, wf = depth[0].width / k_feature_stride;
  std::vector<double> pooled;
  for (const auto& d : depth) {
    if (d.height != depth[0].height || d.width != depth[0].width) {
      throw DimensionError("encode_sparse_depth: views differ in resolution");
    }
    const auto p = pool_depth(d, k_feature_stride);
    pooled.insert(pooled.end(), p.begin(), p.end());
  }
  Tensor x = Tensor::from({depth.size(), 2, hf, wf}, std::move(pooled));
  const std::size_t pad = static_cast<std::size_t>(cfg_.depth_kernel / 2);
  x = relu(conv2d(x, depth_w1_, depth_b1_, 1, pad));
  return conv2d(x, depth_w2_, depth_b2_);
}

Tensor CameraStream::make_depth_aware(const Tensor& img_feats, const Tensor& depth_feats) const {
  if (img_feats.rank() != 4 || depth_feats.rank() != 4 || img_feats.dim(0) != depth_feats.dim(0) ||
      img_feats.dim(2) != depth_feats.dim(2) || img_feats.dim(3) != depth_feats.dim(3)) {
    throw DimensionError("make_depth_aware: image features " + shape_str(img_feats.shape()) +
                         " and depth features " + shape_str(depth_feats.shape()) + " are not aligned");
  }
  return relu(conv2d(concat({img_feats, depth_feats}, 1), mix_w_, mix_b_));
}

Tensor CameraStream::predict_depth_distribution(const Tensor& depth_aware) const {
  return softmax(conv2d(depth_aware, depth_head_w_, depth_head_b_), 1);
}

Tensor CameraStream::context(const Tensor& depth_aware) const { return conv2d(depth_aware, ctx_w_, ctx_b_); }

std::vector<std::shared_ptr<const kernels::SplatPlan>> make_lift_plans(const std::vector<CameraModel>& cameras,
                                                                       std::size_t feat_h, std::size_t feat_w,
                                                                       const DepthBins& bins, const VolumeSpec& vol) {
  std::vector<std::shared_ptr<const kernels::SplatPlan>> plans;
  for (const auto& cam : cameras) {
    plans.push_back(std::make_shared<const kernels::SplatPlan>(
        make_lift_plan(cam, feat_h, feat_w, k_feature_stride, bins, vol)));
  }
  return plans;
}

Tensor build_feature_volume(const Tensor& context, const Tensor& depth_dist,
                            const std::vector<std::shared_ptr<const kernels::SplatPlan>>& plans,
                            const VolumeSpec& vol) {
  if (context.rank() != 4 || depth_dist.rank() != 4 || context.dim(0) != depth_dist.dim(0) ||
      context.dim(0) != plans.size()) {
    throw DimensionError("build_feature_volume: context " + shape_str(context.shape()) + ", depth " +
                         shape_str(depth_dist.shape()) + ", " + std::to_string(plans.size()) + " plans");
  }
  Tensor acc;
  for (std::size_t v = 0; v < plans.size(); ++v) {
    const Tensor f = reshape(slice(context, 0, v, v + 1), {context.dim(1), context.dim(2), context.dim(3)});
    const Tensor d = reshape(slice(depth_dist, 0, v, v + 1), {depth_dist.dim(1), depth_dist.dim(2), depth_dist.dim(3)});
    const Tensor part = lift_splat(f, d, plans[v], vol);
    acc = acc.defined() ? add(acc, part) : part;
  }
  return acc;
}

std::vector<int> depth_targets(const DepthMap& depth, std::size_t stride, const DepthBins& bins) {
  const std::size_t hf = depth.height / stride, wf = depth.width / stride;
  std::vector<int> out(hf * wf, -1);
  for (std::size_t i = 0; i < hf; ++i)
    for (std::size_t j = 0; j < wf; ++j) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t r = i * stride; r < (i + 1) * stride; ++r)
        for (std::size_t c = j * stride; c < (j + 1) * stride; ++c)
          if (depth.is_valid(r, c)) best = std::min(best, depth.at(r, c));
      if (best < std::numeric_limits<double>::infinity()) out[i * wf + j] = bins.bin_of(best);
    }
  return out;
}

Tensor depth_supervision_loss(const Tensor& depth_dist, const std::vector<std::vector<int>>& targets) {
  if (depth_dist.rank() != 4 || targets.size() != depth_dist.dim(0)) {
    throw DimensionError("depth_supervision_loss: " + std::to_string(targets.size()) + " target maps for " +
                         shape_str(depth_dist.shape()));
  }
  const std::size_t d = depth_dist.dim(1), plane = depth_dist.dim(2) * depth_dist.dim(3);
  std::vector<std::int64_t> index;
  for (std::size_t v = 0; v < targets.size(); ++v) {
    if (targets[v].size() != plane) throw DimensionError("depth_supervision_loss: target map size mismatch");
    for (std::size_t p = 0; p < plane; ++p) {
      const int b = targets[v][p];
      if (b < 0) continue;
      if (static_cast<std::size_t>(b) >= d) throw DimensionError("depth target bin out of range");
      index.push_back(static_cast<std::int64_t>((v * d + static_cast<std::size_t>(b)) * plane + p));
    }
  }
  if (index.empty()) return Tensor::scalar(0.0);
  const std::size_t n = index.size();
  const Tensor p = take(depth_dist, std::move(index), {n});
  return scale(mean(log(clamp(p, 1e-12, 1.0))), -1.0);
}

}  // namespace bevfuse
