// Reference kernels. Plain loops in the order the formulas are written.

#include <algorithm>
#include <cmath>
#include <vector>

#include "bevfuse/kernels.hpp"

namespace bevfuse::kernels::serial {

namespace {

inline std::size_t in_index(const ConvGeometry& g, std::size_t n, std::size_t c, std::size_t z, std::size_t y,
                            std::size_t x) {
  return (((n * g.c_in + c) * g.d + z) * g.h + y) * g.w + x;
}

inline std::size_t out_index(const ConvGeometry& g, std::size_t n, std::size_t c, std::size_t z, std::size_t y,
                             std::size_t x) {
  return (((n * g.c_out + c) * g.od + z) * g.oh + y) * g.ow + x;
}

inline std::size_t w_index(const ConvGeometry& g, std::size_t o, std::size_t i, std::size_t a, std::size_t b,
                           std::size_t c) {
  return (((o * g.c_in + i) * g.kd + a) * g.kh + b) * g.kw + c;
}

// Visits every (output site, weight tap, input site) triple of the convolution.
template <class F>
void for_each_tap(const ConvGeometry& g, F&& f) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.c_out; ++o)
      for (std::size_t z = 0; z < g.od; ++z)
        for (std::size_t y = 0; y < g.oh; ++y)
          for (std::size_t x = 0; x < g.ow; ++x) {
            const auto oi = out_index(g, n, o, z, y, x);
            for (std::size_t i = 0; i < g.c_in; ++i)
              for (std::size_t a = 0; a < g.kd; ++a) {
                const auto iz = static_cast<std::ptrdiff_t>(z * g.sd + a) - static_cast<std::ptrdiff_t>(g.pd);
                if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.d)) continue;
                for (std::size_t b = 0; b < g.kh; ++b) {
                  const auto iy = static_cast<std::ptrdiff_t>(y * g.sh + b) - static_cast<std::ptrdiff_t>(g.ph);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                  for (std::size_t c = 0; c < g.kw; ++c) {
                    const auto ix = static_cast<std::ptrdiff_t>(x * g.sw + c) - static_cast<std::ptrdiff_t>(g.pw);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                    f(oi, in_index(g, n, i, iz, iy, ix), w_index(g, o, i, a, b, c), o);
                  }
                }
              }
          }
}

}  // namespace

void conv_forward(const ConvGeometry& g, const double* in, const double* weight, const double* bias, double* out) {
  std::fill(out, out + g.out_size(), 0.0);
  for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t wi, std::size_t) { out[oi] += weight[wi] * in[ii]; });
  if (bias) {
    const std::size_t plane = g.od * g.oh * g.ow;
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.c_out; ++o)
        for (std::size_t p = 0; p < plane; ++p) out[(n * g.c_out + o) * plane + p] += bias[o];
  }
}

void conv_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight, double* grad_in) {
  for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t wi, std::size_t) {
    grad_in[ii] += weight[wi] * grad_out[oi];
  });
}

void conv_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in, double* grad_weight,
                          double* grad_bias) {
  if (grad_weight) {
    for_each_tap(g, [&](std::size_t oi, std::size_t ii, std::size_t wi, std::size_t) {
      grad_weight[wi] += grad_out[oi] * in[ii];
    });
  }
  if (grad_bias) {
    const std::size_t plane = g.od * g.oh * g.ow;
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t o = 0; o < g.c_out; ++o)
        for (std::size_t p = 0; p < plane; ++p) grad_bias[o] += grad_out[(n * g.c_out + o) * plane + p];
  }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        const double bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
}

void sparse_conv_forward(const SparseRules& r, const double* in, std::size_t c_in, const double* weight,
                         std::size_t c_out, double* out) {
  std::fill(out, out + r.n_out * c_out, 0.0);
  for (std::size_t o = 0; o < r.n_out; ++o)
    for (std::size_t k = 0; k < r.k_volume; ++k) {
      const auto i = r.out_nbr[o * r.k_volume + k];
      if (i < 0) continue;
      for (std::size_t ci = 0; ci < c_in; ++ci)
        for (std::size_t co = 0; co < c_out; ++co)
          out[o * c_out + co] += in[i * c_in + ci] * weight[(k * c_in + ci) * c_out + co];
    }
}

void sparse_conv_backward_input(const SparseRules& r, const double* grad_out, const double* weight, std::size_t c_in,
                                std::size_t c_out, double* grad_in) {
  for (std::size_t o = 0; o < r.n_out; ++o)
    for (std::size_t k = 0; k < r.k_volume; ++k) {
      const auto i = r.out_nbr[o * r.k_volume + k];
      if (i < 0) continue;
      for (std::size_t ci = 0; ci < c_in; ++ci)
        for (std::size_t co = 0; co < c_out; ++co)
          grad_in[i * c_in + ci] += weight[(k * c_in + ci) * c_out + co] * grad_out[o * c_out + co];
    }
}

void sparse_conv_backward_weight(const SparseRules& r, const double* grad_out, const double* in, std::size_t c_in,
                                 std::size_t c_out, double* grad_weight) {
  for (std::size_t o = 0; o < r.n_out; ++o)
    for (std::size_t k = 0; k < r.k_volume; ++k) {
      const auto i = r.out_nbr[o * r.k_volume + k];
      if (i < 0) continue;
      for (std::size_t ci = 0; ci < c_in; ++ci)
        for (std::size_t co = 0; co < c_out; ++co)
          grad_weight[(k * c_in + ci) * c_out + co] += in[i * c_in + ci] * grad_out[o * c_out + co];
    }
}

void splat_forward(const SplatPlan& plan, const double* feat, const double* prob, std::size_t channels, double* out) {
  const auto P = plan.n_pixels;
  const auto V = plan.n_voxels;
  std::fill(out, out + channels * V, 0.0);
  for (std::size_t b = 0; b < plan.n_bins; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const auto v = plan.voxel_of[b * P + p];
      if (v < 0) continue;
      const double w = prob[b * P + p];
      for (std::size_t c = 0; c < channels; ++c) out[c * V + v] += feat[c * P + p] * w;
    }
}

void splat_backward(const SplatPlan& plan, const double* grad_out, const double* feat, const double* prob,
                    std::size_t channels, double* grad_feat, double* grad_prob) {
  const auto P = plan.n_pixels;
  const auto V = plan.n_voxels;
  for (std::size_t b = 0; b < plan.n_bins; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const auto v = plan.voxel_of[b * P + p];
      if (v < 0) continue;
      for (std::size_t c = 0; c < channels; ++c) {
        const double g = grad_out[c * V + v];
        if (grad_feat) grad_feat[c * P + p] += prob[b * P + p] * g;
        if (grad_prob) grad_prob[b * P + p] += feat[c * P + p] * g;
      }
    }
}

void attention_forward(std::size_t batch, std::size_t t, std::size_t s, std::size_t c, std::size_t cv,
                       const double* q, const double* k, const double* v, double scale, double* out, double* probs) {
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* qb = q + bi * t * c;
    const double* kb = k + bi * s * c;
    const double* vb = v + bi * s * cv;
    for (std::size_t ti = 0; ti < t; ++ti) {
      double* row = probs + (bi * t + ti) * s;
      double mx = -INFINITY;
      for (std::size_t si = 0; si < s; ++si) {
        double dot = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci) dot += qb[ti * c + ci] * kb[si * c + ci];
        row[si] = dot * scale;
        mx = std::max(mx, row[si]);
      }
      double total = 0.0;
      for (std::size_t si = 0; si < s; ++si) {
        row[si] = std::exp(row[si] - mx);
        total += row[si];
      }
      for (std::size_t si = 0; si < s; ++si) row[si] /= total;
      double* orow = out + (bi * t + ti) * cv;
      for (std::size_t ci = 0; ci < cv; ++ci) {
        double acc = 0.0;
        for (std::size_t si = 0; si < s; ++si) acc += row[si] * vb[si * cv + ci];
        orow[ci] = acc;
      }
    }
  }
}

void attention_backward(std::size_t batch, std::size_t t, std::size_t s, std::size_t c, std::size_t cv,
                        const double* q, const double* k, const double* v, const double* probs, double scale,
                        const double* grad_out, double* grad_q, double* grad_k, double* grad_v) {
  std::vector<double> dlogit(s);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* qb = q + bi * t * c;
    const double* kb = k + bi * s * c;
    const double* vb = v + bi * s * cv;
    for (std::size_t ti = 0; ti < t; ++ti) {
      const double* row = probs + (bi * t + ti) * s;
      const double* go = grad_out + (bi * t + ti) * cv;
      double weighted = 0.0;
      for (std::size_t si = 0; si < s; ++si) {
        double dp = 0.0;
        for (std::size_t ci = 0; ci < cv; ++ci) dp += go[ci] * vb[si * cv + ci];
        dlogit[si] = dp;
        weighted += dp * row[si];
      }
      for (std::size_t si = 0; si < s; ++si) {
        const double ds = row[si] * (dlogit[si] - weighted) * scale;
        for (std::size_t ci = 0; ci < c; ++ci) {
          if (grad_q) grad_q[(bi * t + ti) * c + ci] += ds * kb[si * c + ci];
          if (grad_k) grad_k[(bi * s + si) * c + ci] += ds * qb[ti * c + ci];
        }
        if (grad_v) {
          for (std::size_t ci = 0; ci < cv; ++ci) grad_v[(bi * s + si) * cv + ci] += row[si] * go[ci];
        }
      }
    }
  }
}

}  // namespace bevfuse::kernels::serial
