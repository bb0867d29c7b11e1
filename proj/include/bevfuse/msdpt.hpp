#pragma once

#include <string>
#include <vector>

#include "bevfuse/params.hpp"

namespace bevfuse {

struct WindowAttentionConfig {
  std::size_t window_h = 4, window_w = 4;
  std::size_t channels = 8;
};

/// Single-head self-attention inside non-overlapping windows of each slice,
/// followed by an output projection and a residual add. Slices smaller than
/// the window use the whole slice; otherwise slices are zero-padded to a
/// multiple of the window and cropped afterwards.
class WindowAttention {
 public:
  WindowAttention(ParameterStore& store, const std::string& prefix, const WindowAttentionConfig& cfg);

  /// x: C x H x W.
  Tensor forward(const Tensor& x, std::vector<double>* probs = nullptr) const;
  /// x: C x B x H x W, every b an independent slice with the same weights.
  Tensor forward_slices(const Tensor& x, std::vector<double>* probs = nullptr) const;

  const WindowAttentionConfig& config() const { return cfg_; }

 private:
  WindowAttentionConfig cfg_;
  Tensor wq_, wk_, wv_, wo_;
};

/// One dual-path block.
class DualPathBlock {
 public:
  DualPathBlock(ParameterStore& store, const std::string& prefix, const WindowAttentionConfig& cfg,
                bool per_channel_gate);

  /// Each z slice through the shared window attention.
  Tensor local_path(const Tensor& vol) const;
  /// Mean over z, then the same window attention: C x H x W.
  Tensor global_path(const Tensor& vol) const;
  /// F_local + sigmoid(FFN(F_local)) * F_global broadcast along z.
  Tensor combine(const Tensor& local, const Tensor& global) const;
  Tensor forward(const Tensor& vol) const;

  const WindowAttention& attention() const { return attn_; }

 private:
  WindowAttention attn_;
  Tensor ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_;
  bool per_channel_;
};

struct MsdptConfig {
  std::size_t num_scales = 3;
  WindowAttentionConfig attention;
  bool per_channel_gate = false;
};

/// Stride-2 conv3d pyramid with one dual-path block per level; every level is
/// upsampled (trilinear) back to the input size and the levels are blended
/// with learnable scalars initialised to 1 / num_scales.
class Msdpt {
 public:
  Msdpt(ParameterStore& store, const std::string& prefix, const MsdptConfig& cfg);

  /// vol: C x Z x H x W; output has the same shape.
  Tensor forward(const Tensor& vol) const;

  const MsdptConfig& config() const { return cfg_; }

 private:
  MsdptConfig cfg_;
  std::vector<DualPathBlock> blocks_;
  std::vector<Tensor> down_;
  std::vector<Tensor> blend_;
};

/// Linear interpolation along one axis to `out_len` samples (half-pixel
/// centres, edge clamped).
Tensor upsample_linear(const Tensor& x, std::size_t axis, std::size_t out_len);

}  // namespace bevfuse
