#pragma once

// Hot loops of the model. Every kernel exists twice with the same signature:
//
//   kernels::serial    straightforward reference loops (scatter-style
//                      backward passes, natural summation order)
//   kernels::parallel  OpenMP versions written in gather form so each output
//                      element is owned by one thread; no atomics, so results
//                      are deterministic for any thread count
//
// The differentiable ops call the dispatching wrappers at the bottom of this
// file, which route to the backend chosen by set_backend().

#include <cstddef>
#include <cstdint>
#include <vector>

namespace bevfuse::kernels {

/// Dense cross-correlation over a [N x C x D x H x W] input with a
/// [C_out x C_in x KD x KH x KW] weight. 2D convolution uses D = KD = 1.
struct ConvGeometry {
  std::size_t n = 1, c_in = 1, d = 1, h = 1, w = 1;
  std::size_t c_out = 1, kd = 1, kh = 1, kw = 1;
  std::size_t sd = 1, sh = 1, sw = 1;
  std::size_t pd = 0, ph = 0, pw = 0;
  std::size_t od = 1, oh = 1, ow = 1;

  std::size_t in_size() const { return n * c_in * d * h * w; }
  std::size_t out_size() const { return n * c_out * od * oh * ow; }
  std::size_t weight_size() const { return c_out * c_in * kd * kh * kw; }
};

/// Fills the output extents; throws DimensionError if a kernel does not fit
/// its padded input.
ConvGeometry make_conv_geometry(std::size_t n, std::size_t c_in, std::size_t d, std::size_t h, std::size_t w,
                                std::size_t c_out, std::size_t kd, std::size_t kh, std::size_t kw,
                                std::size_t sd, std::size_t sh, std::size_t sw, std::size_t pd,
                                std::size_t ph, std::size_t pw);

/// Neighbour tables of a sparse convolution.
/// out_nbr[o * K + k] = input row feeding output o through kernel offset k (or -1);
/// in_nbr[i * K + k]  = output row fed by input i through offset k (or -1).
struct SparseRules {
  std::size_t n_in = 0, n_out = 0, k_volume = 1;
  std::vector<std::int32_t> out_nbr;
  std::vector<std::int32_t> in_nbr;
};

/// Lift-splat accumulation plan for one camera.
/// voxel_of[b * n_pixels + p] = flat voxel index of (bin b, pixel p) or -1.
/// voxel_offsets / voxel_entries is the same map inverted (CSR by voxel),
/// entries are `b * n_pixels + p`, ascending within each voxel.
struct SplatPlan {
  std::size_t n_pixels = 0, n_bins = 0, n_voxels = 0;
  std::vector<std::int32_t> voxel_of;
  std::vector<std::int32_t> voxel_offsets;
  std::vector<std::int32_t> voxel_entries;
};

SplatPlan make_splat_plan(std::size_t n_pixels, std::size_t n_bins, std::size_t n_voxels,
                          std::vector<std::int32_t> voxel_of);

#define BEVFUSE_KERNEL_DECLS                                                                                     \
  void conv_forward(const ConvGeometry& g, const double* in, const double* weight, const double* bias,          \
                    double* out);                                                                                \
  void conv_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight, double* grad_in); \
  void conv_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in, double* grad_weight, \
                            double* grad_bias);                                                                  \
  void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,            \
            const double* b, double* c, bool accumulate);                                                        \
  void sparse_conv_forward(const SparseRules& r, const double* in, std::size_t c_in, const double* weight,       \
                           std::size_t c_out, double* out);                                                      \
  void sparse_conv_backward_input(const SparseRules& r, const double* grad_out, const double* weight,            \
                                  std::size_t c_in, std::size_t c_out, double* grad_in);                         \
  void sparse_conv_backward_weight(const SparseRules& r, const double* grad_out, const double* in,               \
                                   std::size_t c_in, std::size_t c_out, double* grad_weight);                    \
  void splat_forward(const SplatPlan& plan, const double* feat, const double* prob, std::size_t channels,       \
                     double* out);                                                                               \
  void splat_backward(const SplatPlan& plan, const double* grad_out, const double* feat, const double* prob,     \
                      std::size_t channels, double* grad_feat, double* grad_prob);                               \
  void attention_forward(std::size_t batch, std::size_t t, std::size_t s, std::size_t c, std::size_t cv,         \
                         const double* q, const double* k, const double* v, double scale, double* out,           \
                         double* probs);                                                                         \
  void attention_backward(std::size_t batch, std::size_t t, std::size_t s, std::size_t c, std::size_t cv,        \
                          const double* q, const double* k, const double* v, const double* probs, double scale,  \
                          const double* grad_out, double* grad_q, double* grad_k, double* grad_v);

// Conventions shared by both backends:
//  * forward kernels overwrite their outputs;
//  * backward kernels ADD into their gradient buffers; a null buffer skips
//    that gradient;
//  * gemm computes C = op(A) * op(B) with op(A): m x k and op(B): k x n, adding
//    into C when `accumulate` is set;
//  * attention works on [batch x tokens x channels] row-major blocks and
//    stores the softmax rows in `probs` ([batch x t x s]).
namespace serial {
BEVFUSE_KERNEL_DECLS
}
namespace parallel {
BEVFUSE_KERNEL_DECLS
}

enum class Backend { serial, parallel };

void set_backend(Backend backend);
Backend backend();

/// Number of OpenMP threads the parallel backend will use (1 without OpenMP).
int max_threads();

// Dispatching wrappers.
BEVFUSE_KERNEL_DECLS

#undef BEVFUSE_KERNEL_DECLS

}  // namespace bevfuse::kernels
