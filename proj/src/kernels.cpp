#include "bevfuse/kernels.hpp"

#include <atomic>
#include <string>

#include "bevfuse/error.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bevfuse::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::parallel};

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* axis) {
  if (stride == 0) throw DimensionError(std::string("conv stride is zero on axis ") + axis);
  if (k > in + 2 * pad) {
    throw DimensionError(std::string("conv kernel ") + std::to_string(k) + " larger than padded input " +
                         std::to_string(in + 2 * pad) + " on axis " + axis);
  }
  return (in + 2 * pad - k) / stride + 1;
}
}  // namespace

ConvGeometry make_conv_geometry(std::size_t n, std::size_t c_in, std::size_t d, std::size_t h, std::size_t w,
                                std::size_t c_out, std::size_t kd, std::size_t kh, std::size_t kw, std::size_t sd,
                                std::size_t sh, std::size_t sw, std::size_t pd, std::size_t ph, std::size_t pw) {
  ConvGeometry g;
  g.n = n;
  g.c_in = c_in;
  g.d = d;
  g.h = h;
  g.w = w;
  g.c_out = c_out;
  g.kd = kd;
  g.kh = kh;
  g.kw = kw;
  g.sd = sd;
  g.sh = sh;
  g.sw = sw;
  g.pd = pd;
  g.ph = ph;
  g.pw = pw;
  g.od = out_extent(d, kd, sd, pd, "depth");
  g.oh = out_extent(h, kh, sh, ph, "height");
  g.ow = out_extent(w, kw, sw, pw, "width");
  return g;
}

SplatPlan make_splat_plan(std::size_t n_pixels, std::size_t n_bins, std::size_t n_voxels,
                          std::vector<std::int32_t> voxel_of) {
  SplatPlan plan;
  plan.n_pixels = n_pixels;
  plan.n_bins = n_bins;
  plan.n_voxels = n_voxels;
  plan.voxel_of = std::move(voxel_of);
  plan.voxel_offsets.assign(n_voxels + 1, 0);
  for (auto v : plan.voxel_of) {
    if (v >= 0) ++plan.voxel_offsets[v + 1];
  }
  for (std::size_t v = 0; v < n_voxels; ++v) plan.voxel_offsets[v + 1] += plan.voxel_offsets[v];
  plan.voxel_entries.assign(plan.voxel_offsets.back(), 0);
  std::vector<std::int32_t> fill(plan.voxel_offsets.begin(), plan.voxel_offsets.end() - 1);
  for (std::size_t e = 0; e < plan.voxel_of.size(); ++e) {
    const auto v = plan.voxel_of[e];
    if (v >= 0) plan.voxel_entries[fill[v]++] = static_cast<std::int32_t>(e);
  }
  return plan;
}

void set_backend(Backend backend) { g_backend.store(backend); }
Backend backend() { return g_backend.load(); }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define BEVFUSE_DISPATCH(name, ...)                      \
  if (backend() == Backend::serial) {                    \
    serial::name(__VA_ARGS__);                           \
  } else {                                               \
    parallel::name(__VA_ARGS__);                         \
  }

void conv_forward(const ConvGeometry& g, const double* in, const double* weight, const double* bias, double* out) {
  BEVFUSE_DISPATCH(conv_forward, g, in, weight, bias, out)
}
void conv_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight, double* grad_in) {
  BEVFUSE_DISPATCH(conv_backward_input, g, grad_out, weight, grad_in)
}
void conv_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in, double* grad_weight,
                          double* grad_bias) {
  BEVFUSE_DISPATCH(conv_backward_weight, g, grad_out, in, grad_weight, grad_bias)
}
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
  BEVFUSE_DISPATCH(gemm, trans_a, trans_b, m, n, k, a, b, c, accumulate)
}
void sparse_conv_forward(const SparseRules& r, const double* in, std::size_t c_in, const double* weight,
                         std::size_t c_out, double* out) {
  BEVFUSE_DISPATCH(sparse_conv_forward, r, in, c_in, weight, c_out, out)
}
void sparse_conv_backward_input(const SparseRules& r, const double* grad_out, const double* weight, std::size_t c_in,
                                std::size_t c_out, double* grad_in) {
  BEVFUSE_DISPATCH(sparse_conv_backward_input, r, grad_out, weight, c_in, c_out, grad_in)
}
void sparse_conv_backward_weight(const SparseRules& r, const double* grad_out, const double* in, std::size_t c_in,
                                 std::size_t c_out, double* grad_weight) {
  BEVFUSE_DISPATCH(sparse_conv_backward_weight, r, grad_out, in, c_in, c_out, grad_weight)
}
void splat_forward(const SplatPlan& plan, const double* feat, const double* prob, std::size_t channels, double* out) {
  BEVFUSE_DISPATCH(splat_forward, plan, feat, prob, channels, out)
}
void splat_backward(const SplatPlan& plan, const double* grad_out, const double* feat, const double* prob,
                    std::size_t channels, double* grad_feat, double* grad_prob) {
  BEVFUSE_DISPATCH(splat_backward, plan, grad_out, feat, prob, channels, grad_feat, grad_prob)
}
void attention_forward(std::size_t batch, std::size_t t, std::size_t s, std::size_t c, std::size_t cv,
                       const double* q, const double* k, const double* v, double scale, double* out, double* probs) {
  BEVFUSE_DISPATCH(attention_forward, batch, t, s, c, cv, q, k, v, scale, out, probs)
}
void attention_backward(std::size_t batch, std::size_t t, std::size_t s, std::size_t c, std::size_t cv,
                        const double* q, const double* k, const double* v, const double* probs, double scale,
                        const double* grad_out, double* grad_q, double* grad_k, double* grad_v) {
  BEVFUSE_DISPATCH(attention_backward, batch, t, s, c, cv, q, k, v, probs, scale, grad_out, grad_q, grad_k, grad_v)
}

#undef BEVFUSE_DISPATCH

}  // namespace bevfuse::kernels
