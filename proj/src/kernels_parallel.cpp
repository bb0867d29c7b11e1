// OpenMP kernels. Every loop nest is arranged so one thread owns each output
// element (gather form); the per-element summation order is fixed, which keeps
// results identical for any thread count.

#include <algorithm>
#include <cmath>
#include <vector>

#include "bevfuse/kernels.hpp"

namespace bevfuse::kernels::parallel {

using idx = std::ptrdiff_t;

void conv_forward(const ConvGeometry& g, const double* in, const double* weight, const double* bias, double* out) {
  const idx outer = static_cast<idx>(g.n * g.c_out * g.od);
#pragma omp parallel for schedule(static)
  for (idx job = 0; job < outer; ++job) {
    const std::size_t z = job % g.od;
    const std::size_t o = (job / g.od) % g.c_out;
    const std::size_t n = job / (g.od * g.c_out);
    for (std::size_t y = 0; y < g.oh; ++y)
      for (std::size_t x = 0; x < g.ow; ++x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.c_in; ++i)
          for (std::size_t a = 0; a < g.kd; ++a) {
            const idx iz = static_cast<idx>(z * g.sd + a) - static_cast<idx>(g.pd);
            if (iz < 0 || iz >= static_cast<idx>(g.d)) continue;
            for (std::size_t b = 0; b < g.kh; ++b) {
              const idx iy = static_cast<idx>(y * g.sh + b) - static_cast<idx>(g.ph);
              if (iy < 0 || iy >= static_cast<idx>(g.h)) continue;
              const double* wrow = weight + (((o * g.c_in + i) * g.kd + a) * g.kh + b) * g.kw;
              const double* irow = in + (((n * g.c_in + i) * g.d + iz) * g.h + iy) * g.w;
              for (std::size_t c = 0; c < g.kw; ++c) {
                const idx ix = static_cast<idx>(x * g.sw + c) - static_cast<idx>(g.pw);
                if (ix < 0 || ix >= static_cast<idx>(g.w)) continue;
                acc += wrow[c] * irow[ix];
              }
            }
          }
        if (bias) acc += bias[o];
        out[(((n * g.c_out + o) * g.od + z) * g.oh + y) * g.ow + x] = acc;
      }
  }
}

namespace {

// Output index along one axis reached from input position `in` through tap
// `tap`, or -1 if the tap does not land on a strided output.
inline idx source_output(std::size_t in, std::size_t tap, std::size_t stride, std::size_t pad, std::size_t out_len) {
  const idx num = static_cast<idx>(in + pad) - static_cast<idx>(tap);
  if (num < 0 || num % static_cast<idx>(stride) != 0) return -1;
  const idx o = num / static_cast<idx>(stride);
  return o < static_cast<idx>(out_len) ? o : -1;
}

}  // namespace

void conv_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight, double* grad_in) {
  const idx outer = static_cast<idx>(g.n * g.c_in * g.d);
#pragma omp parallel for schedule(static)
  for (idx job = 0; job < outer; ++job) {
    const std::size_t iz = job % g.d;
    const std::size_t i = (job / g.d) % g.c_in;
    const std::size_t n = job / (g.d * g.c_in);
    for (std::size_t iy = 0; iy < g.h; ++iy)
      for (std::size_t ix = 0; ix < g.w; ++ix) {
        double acc = 0.0;
        for (std::size_t o = 0; o < g.c_out; ++o)
          for (std::size_t a = 0; a < g.kd; ++a) {
            const idx z = source_output(iz, a, g.sd, g.pd, g.od);
            if (z < 0) continue;
            for (std::size_t b = 0; b < g.kh; ++b) {
              const idx y = source_output(iy, b, g.sh, g.ph, g.oh);
              if (y < 0) continue;
              for (std::size_t c = 0; c < g.kw; ++c) {
                const idx x = source_output(ix, c, g.sw, g.pw, g.ow);
                if (x < 0) continue;
                acc += weight[(((o * g.c_in + i) * g.kd + a) * g.kh + b) * g.kw + c] *
                       grad_out[(((n * g.c_out + o) * g.od + z) * g.oh + y) * g.ow + x];
              }
            }
          }
        grad_in[(((n * g.c_in + i) * g.d + iz) * g.h + iy) * g.w + ix] += acc;
      }
  }
}

void conv_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in, double* grad_weight,
                          double* grad_bias) {
  if (grad_weight) {
    const idx outer = static_cast<idx>(g.c_out * g.c_in);
#pragma omp parallel for schedule(static)
    for (idx job = 0; job < outer; ++job) {
      const std::size_t i = job % g.c_in;
      const std::size_t o = job / g.c_in;
      for (std::size_t a = 0; a < g.kd; ++a)
        for (std::size_t b = 0; b < g.kh; ++b)
          for (std::size_t c = 0; c < g.kw; ++c) {
            double acc = 0.0;
            for (std::size_t n = 0; n < g.n; ++n)
              for (std::size_t z = 0; z < g.od; ++z) {
                const idx iz = static_cast<idx>(z * g.sd + a) - static_cast<idx>(g.pd);
                if (iz < 0 || iz >= static_cast<idx>(g.d)) continue;
                for (std::size_t y = 0; y < g.oh; ++y) {
                  const idx iy = static_cast<idx>(y * g.sh + b) - static_cast<idx>(g.ph);
                  if (iy < 0 || iy >= static_cast<idx>(g.h)) continue;
                  const double* grow = grad_out + (((n * g.c_out + o) * g.od + z) * g.oh + y) * g.ow;
                  const double* irow = in + (((n * g.c_in + i) * g.d + iz) * g.h + iy) * g.w;
                  for (std::size_t x = 0; x < g.ow; ++x) {
                    const idx ix = static_cast<idx>(x * g.sw + c) - static_cast<idx>(g.pw);
                    if (ix < 0 || ix >= static_cast<idx>(g.w)) continue;
                    acc += grow[x] * irow[ix];
                  }
                }
              }
            grad_weight[(((o * g.c_in + i) * g.kd + a) * g.kh + b) * g.kw + c] += acc;
          }
    }
  }
  if (grad_bias) {
    const std::size_t plane = g.od * g.oh * g.ow;
#pragma omp parallel for schedule(static)
    for (idx o = 0; o < static_cast<idx>(g.c_out); ++o) {
      double acc = 0.0;
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t p = 0; p < plane; ++p) acc += grad_out[(n * g.c_out + o) * plane + p];
      grad_bias[o] += acc;
    }
  }
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < static_cast<idx>(m); ++i) {
    double* crow = c + i * n;
    std::vector<double> acc(n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) acc[j] += av * b[j * k + p];
      } else {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) crow[j] = accumulate ? crow[j] + acc[j] : acc[j];
  }
}

void sparse_conv_forward(const SparseRules& r, const double* in, std::size_t c_in, const double* weight,
                         std::size_t c_out, double* out) {
#pragma omp parallel for schedule(static)
  for (idx o = 0; o < static_cast<idx>(r.n_out); ++o) {
    double* orow = out + o * c_out;
    std::fill(orow, orow + c_out, 0.0);
    for (std::size_t k = 0; k < r.k_volume; ++k) {
      const auto i = r.out_nbr[o * r.k_volume + k];
      if (i < 0) continue;
      const double* irow = in + static_cast<std::size_t>(i) * c_in;
      const double* wk = weight + k * c_in * c_out;
      for (std::size_t ci = 0; ci < c_in; ++ci) {
        const double x = irow[ci];
        const double* wrow = wk + ci * c_out;
        for (std::size_t co = 0; co < c_out; ++co) orow[co] += x * wrow[co];
      }
    }
  }
}

void sparse_conv_backward_input(const SparseRules& r, const double* grad_out, const double* weight, std::size_t c_in,
                                std::size_t c_out, double* grad_in) {
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < static_cast<idx>(r.n_in); ++i) {
    double* grow = grad_in + i * c_in;
    for (std::size_t k = 0; k < r.k_volume; ++k) {
      const auto o = r.in_nbr[i * r.k_volume + k];
      if (o < 0) continue;
      const double* go = grad_out + static_cast<std::size_t>(o) * c_out;
      const double* wk = weight + k * c_in * c_out;
      for (std::size_t ci = 0; ci < c_in; ++ci) {
        double acc = 0.0;
        for (std::size_t co = 0; co < c_out; ++co) acc += wk[ci * c_out + co] * go[co];
        grow[ci] += acc;
      }
    }
  }
}

void sparse_conv_backward_weight(const SparseRules& r, const double* grad_out, const double* in, std::size_t c_in,
                                 std::size_t c_out, double* grad_weight) {
#pragma omp parallel for schedule(static)
  for (idx k = 0; k < static_cast<idx>(r.k_volume); ++k) {
    double* gk = grad_weight + k * c_in * c_out;
    for (std::size_t o = 0; o < r.n_out; ++o) {
      const auto i = r.out_nbr[o * r.k_volume + k];
      if (i < 0) continue;
      const double* irow = in + static_cast<std::size_t>(i) * c_in;
      const double* go = grad_out + o * c_out;
      for (std::size_t ci = 0; ci < c_in; ++ci)
        for (std::size_t co = 0; co < c_out; ++co) gk[ci * c_out + co] += irow[ci] * go[co];
    }
  }
}

void splat_forward(const SplatPlan& plan, const double* feat, const double* prob, std::size_t channels, double* out) {
  const auto P = plan.n_pixels;
  const auto V = plan.n_voxels;
#pragma omp parallel for schedule(static)
  for (idx v = 0; v < static_cast<idx>(V); ++v) {
    const auto begin = plan.voxel_offsets[v];
    const auto end = plan.voxel_offsets[v + 1];
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (auto e = begin; e < end; ++e) {
        const auto entry = static_cast<std::size_t>(plan.voxel_entries[e]);
        acc += feat[c * P + entry % P] * prob[entry];
      }
      out[c * V + v] = acc;
    }
  }
}

void splat_backward(const SplatPlan& plan, const double* grad_out, const double* feat, const double* prob,
                    std::size_t channels, double* grad_feat, double* grad_prob) {
  const auto P = plan.n_pixels;
  const auto V = plan.n_voxels;
#pragma omp parallel for schedule(static)
  for (idx p = 0; p < static_cast<idx>(P); ++p) {
    for (std::size_t b = 0; b < plan.n_bins; ++b) {
      const auto v = plan.voxel_of[b * P + p];
      if (v < 0) continue;
      double gp = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double g = grad_out[c * V + v];
        if (grad_feat) grad_feat[c * P + p] += prob[b * P + p] * g;
        gp += feat[c * P + p] * g;
      }
      if (grad_prob) grad_prob[b * P + p] += gp;
    }
  }
}

void attention_forward(std::size_t batch, std::size_t t, std::size_t s, std::size_t c, std::size_t cv,
                       const double* q, const double* k, const double* v, double scale, double* out, double* probs) {
#pragma omp parallel for schedule(static)
  for (idx job = 0; job < static_cast<idx>(batch * t); ++job) {
    const std::size_t bi = job / t;
    const double* qrow = q + job * c;
    const double* kb = k + bi * s * c;
    const double* vb = v + bi * s * cv;
    double* row = probs + job * s;
    double mx = -INFINITY;
    for (std::size_t si = 0; si < s; ++si) {
      double dot = 0.0;
      for (std::size_t ci = 0; ci < c; ++ci) dot += qrow[ci] * kb[si * c + ci];
      row[si] = dot * scale;
      mx = std::max(mx, row[si]);
    }
    double total = 0.0;
    for (std::size_t si = 0; si < s; ++si) {
      row[si] = std::exp(row[si] - mx);
      total += row[si];
    }
    for (std::size_t si = 0; si < s; ++si) row[si] /= total;
    double* orow = out + job * cv;
    std::fill(orow, orow + cv, 0.0);
    for (std::size_t si = 0; si < s; ++si) {
      const double p = row[si];
      const double* vrow = vb + si * cv;
      for (std::size_t ci = 0; ci < cv; ++ci) orow[ci] += p * vrow[ci];
    }
  }
}

void attention_backward(std::size_t batch, std::size_t t, std::size_t s, std::size_t c, std::size_t cv,
                        const double* q, const double* k, const double* v, const double* probs, double scale,
                        const double* grad_out, double* grad_q, double* grad_k, double* grad_v) {
  // Scaled logit gradients, one row per query token.
  std::vector<double> dlogit(batch * t * s);
#pragma omp parallel for schedule(static)
  for (idx job = 0; job < static_cast<idx>(batch * t); ++job) {
    const std::size_t bi = job / t;
    const double* vb = v + bi * s * cv;
    const double* row = probs + job * s;
    const double* go = grad_out + job * cv;
    double* drow = dlogit.data() + job * s;
    double weighted = 0.0;
    for (std::size_t si = 0; si < s; ++si) {
      double dp = 0.0;
      for (std::size_t ci = 0; ci < cv; ++ci) dp += go[ci] * vb[si * cv + ci];
      drow[si] = dp;
      weighted += dp * row[si];
    }
    for (std::size_t si = 0; si < s; ++si) drow[si] = row[si] * (drow[si] - weighted) * scale;
    if (grad_q) {
      const double* kb = k + bi * s * c;
      double* gq = grad_q + job * c;
      for (std::size_t ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (std::size_t si = 0; si < s; ++si) acc += drow[si] * kb[si * c + ci];
        gq[ci] += acc;
      }
    }
  }
  if (!grad_k && !grad_v) return;
#pragma omp parallel for schedule(static)
  for (idx job = 0; job < static_cast<idx>(batch * s); ++job) {
    const std::size_t bi = job / s;
    const std::size_t si = job % s;
    if (grad_k) {
      const double* qb = q + bi * t * c;
      double* gk = grad_k + job * c;
      for (std::size_t ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (std::size_t ti = 0; ti < t; ++ti) acc += dlogit[(bi * t + ti) * s + si] * qb[ti * c + ci];
        gk[ci] += acc;
      }
    }
    if (grad_v) {
      const double* gob = grad_out + bi * t * cv;
      double* gv = grad_v + job * cv;
      for (std::size_t ci = 0; ci < cv; ++ci) {
        double acc = 0.0;
        for (std::size_t ti = 0; ti < t; ++ti) acc += probs[(bi * t + ti) * s + si] * gob[ti * cv + ci];
        gv[ci] += acc;
      }
    }
  }
}

}  // namespace bevfuse::kernels::parallel
