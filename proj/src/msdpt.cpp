#include "bevfuse/msdpt.hpp"

#include <algorithm>
#include <cmath>

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

WindowAttention::WindowAttention(ParameterStore& store, const std::string& prefix, const WindowAttentionConfig& cfg)
    : cfg_(cfg) {
  if (cfg.window_h == 0 || cfg.window_w == 0) throw ConfigError("attention window must be non-empty");
  const auto c = cfg.channels;
  wq_ = store.glorot(prefix + ".w_q", {c, c}, c, c);
  wk_ = store.glorot(prefix + ".w_k", {c, c}, c, c);
  wv_ = store.glorot(prefix + ".w_v", {c, c}, c, c);
  wo_ = store.glorot(prefix + ".w_o", {c, c}, c, c);
}

Tensor WindowAttention::forward(const Tensor& x, std::vector<double>* probs) const {
  if (x.rank() != 3) throw DimensionError("window attention expects C x H x W, got " + shape_str(x.shape()));
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  return reshape(forward_slices(reshape(x, {c, 1, h, w}), probs), {c, h, w});
}

Tensor WindowAttention::forward_slices(const Tensor& x, std::vector<double>* probs) const {
  if (x.rank() != 4 || x.dim(0) != cfg_.channels) {
    throw DimensionError("window attention expects " + std::to_string(cfg_.channels) + " x B x H x W, got " +
                         shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0), b = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t wh = std::min(cfg_.window_h, h), ww = std::min(cfg_.window_w, w);
  const std::size_t nh = (h + wh - 1) / wh, nw = (w + ww - 1) / ww;
  const std::size_t n_win = b * nh * nw, t = wh * ww;

  const Tensor tokens = reshape(permute(x, {1, 2, 3, 0}), {b * h * w, c});
  std::vector<std::int64_t> gather(n_win * t * c, -1);
  std::vector<std::int64_t> scatter(b * h * w * c);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t yi = 0; yi < nh; ++yi)
      for (std::size_t xi = 0; xi < nw; ++xi)
        for (std::size_t ty = 0; ty < wh; ++ty)
          for (std::size_t tx = 0; tx < ww; ++tx) {
            const std::size_t row = ((bi * nh + yi) * nw + xi) * t + ty * ww + tx;
            const std::size_t hh = yi * wh + ty, cc = xi * ww + tx;
            if (hh >= h || cc >= w) continue;  // zero padding
            const std::size_t src = (bi * h + hh) * w + cc;
            for (std::size_t ch = 0; ch < c; ++ch) {
              gather[row * c + ch] = static_cast<std::int64_t>(src * c + ch);
              scatter[src * c + ch] = static_cast<std::int64_t>(row * c + ch);
            }
          }
  const Tensor xw = take(tokens, std::move(gather), {n_win * t, c});
  const Tensor q = reshape(matmul(xw, wq_), {n_win, t, c});
  const Tensor k = reshape(matmul(xw, wk_), {n_win, t, c});
  const Tensor v = reshape(matmul(xw, wv_), {n_win, t, c});
  const Tensor a = attention(q, k, v, 1.0 / std::sqrt(static_cast<double>(c)), probs);
  const Tensor o = matmul(reshape(a, {n_win * t, c}), wo_);
  const Tensor y = add(tokens, take(o, std::move(scatter), {b * h * w, c}));
  return permute(reshape(y, {b, h, w, c}), {3, 0, 1, 2});
}

DualPathBlock::DualPathBlock(ParameterStore& store, const std::string& prefix, const WindowAttentionConfig& cfg,
                             bool per_channel_gate)
    : attn_(store, prefix + ".attn", cfg), per_channel_(per_channel_gate) {
  const auto c = cfg.channels;
  const std::size_t g = per_channel_gate ? c : 1;
  ffn_w1_ = store.glorot(prefix + ".gate.w1", {c, c}, c, c);
  ffn_b1_ = store.zeros(prefix + ".gate.b1", {c});
  ffn_w2_ = store.glorot(prefix + ".gate.w2", {c, g}, c, g);
  ffn_b2_ = store.zeros(prefix + ".gate.b2", {g});
}

Tensor DualPathBlock::local_path(const Tensor& vol) const { return attn_.forward_slices(vol); }

Tensor DualPathBlock::global_path(const Tensor& vol) const {
  if (vol.rank() != 4) throw DimensionError("global_path expects C x Z x H x W, got " + shape_str(vol.shape()));
  return attn_.forward(reshape(mean(vol, 1), {vol.dim(0), vol.dim(2), vol.dim(3)}));
}

Tensor DualPathBlock::combine(const Tensor& local, const Tensor& global) const {
  if (local.rank() != 4 || global.rank() != 3 || local.dim(0) != global.dim(0) || local.dim(2) != global.dim(1) ||
      local.dim(3) != global.dim(2)) {
    throw DimensionError("combine: local " + shape_str(local.shape()) + " and global " +
                         shape_str(global.shape()) + " do not align");
  }
  const std::size_t c = local.dim(0), z = local.dim(1), h = local.dim(2), w = local.dim(3);
  const std::size_t g = per_channel_ ? c : 1;
  const Tensor tokens = reshape(permute(local, {1, 2, 3, 0}), {z * h * w, c});
  const Tensor hidden = relu(linear(tokens, ffn_w1_, ffn_b1_));
  const Tensor gate = sigmoid(linear(hidden, ffn_w2_, ffn_b2_));
  const Tensor gate_vol = permute(reshape(gate, {z, h, w, g}), {3, 0, 1, 2});
  return add(local, mul(gate_vol, reshape(global, {c, 1, h, w})));
}

Tensor DualPathBlock::forward(const Tensor& vol) const { return combine(local_path(vol), global_path(vol)); }

Msdpt::Msdpt(ParameterStore& store, const std::string& prefix, const MsdptConfig& cfg) : cfg_(cfg) {
  if (cfg.num_scales < 1 || cfg.num_scales > 4) throw ConfigError("msdpt scales must be in 1..4");
  const auto c = cfg.attention.channels;
  for (std::size_t s = 0; s < cfg.num_scales; ++s) {
    const std::string p = prefix + ".scale" + std::to_string(s);
    blocks_.emplace_back(store, p, cfg.attention, cfg.per_channel_gate);
    if (s > 0) down_.push_back(store.glorot(p + ".down", {c, c, 3, 3, 3}, c * 27, c * 27));
    blend_.push_back(store.constant(p + ".blend", {1, 1, 1, 1}, 1.0 / static_cast<double>(cfg.num_scales)));
  }
}

Tensor Msdpt::forward(const Tensor& vol) const {
  if (vol.rank() != 4 || vol.dim(0) != cfg_.attention.channels) {
    throw DimensionError("msdpt expects " + std::to_string(cfg_.attention.channels) + " x Z x H x W, got " +
                         shape_str(vol.shape()));
  }
  const std::size_t f = std::size_t{1} << (cfg_.num_scales - 1);
  for (std::size_t a = 1; a < 4; ++a) {
    if (vol.dim(a) % f != 0) {
      throw ConfigError("msdpt with " + std::to_string(cfg_.num_scales) + " scales needs volume dims divisible by " +
                        std::to_string(f) + ", got " + shape_str(vol.shape()));
    }
  }
  Tensor x = vol;
  Tensor out;
  for (std::size_t s = 0; s < cfg_.num_scales; ++s) {
    if (s > 0) x = relu(conv3d(x, down_[s - 1], {}, 2, 1));
    Tensor y = blocks_[s].forward(x);
    for (std::size_t a = 1; a < 4; ++a) {
      if (y.dim(a) != vol.dim(a)) y = upsample_linear(y, a, vol.dim(a));
    }
    y = mul(y, blend_[s]);
    out = out.defined() ? add(out, y) : y;
  }
  return out;
}

Tensor upsample_linear(const Tensor& x, std::size_t axis, std::size_t out_len) {
  if (axis >= x.rank() || out_len == 0) throw DimensionError("upsample_linear: bad axis or length");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = std::make_shared<std::vector<Tap>>(out_len);
  const double ratio = static_cast<double>(n) / static_cast<double>(out_len);
  for (std::size_t o = 0; o < out_len; ++o) {
    const double src = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const auto i1 = std::min(i0 + 1, n - 1);
    (*taps)[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  Shape out_shape = s;
  out_shape[axis] = out_len;
  const auto& xv = x.impl()->data;
  std::vector<double> out(outer * out_len * inner);
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t o = 0; o < out_len; ++o) {
      const auto& t = (*taps)[o];
      for (std::size_t i = 0; i < inner; ++i) {
        out[(a * out_len + o) * inner + i] =
            (1.0 - t.w1) * xv[(a * n + t.i0) * inner + i] + t.w1 * xv[(a * n + t.i1) * inner + i];
      }
    }
  auto xi = x.impl();
  return detail::make_result("upsample_linear", std::move(out_shape), std::move(out), {x},
                             [xi, taps, outer, inner, n, out_len](const TensorImpl& o) {
                               double* g = detail::grad_of(xi);
                               if (!g) return;
                               for (std::size_t a = 0; a < outer; ++a)
                                 for (std::size_t k = 0; k < out_len; ++k) {
                                   const auto& t = (*taps)[k];
                                   for (std::size_t i = 0; i < inner; ++i) {
                                     const double go = o.grad[(a * out_len + k) * inner + i];
                                     g[(a * n + t.i0) * inner + i] += (1.0 - t.w1) * go;
                                     g[(a * n + t.i1) * inner + i] += t.w1 * go;
                                   }
                                 }
                             });
}

}  // namespace bevfuse
