#pragma once
// Helpers shared by the unit tests and the acceptance binary: random inputs,
// a central-difference gradient checker and brute-force dense oracles for the
// sparse operators.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "bevfuse/detection.hpp"
#include "bevfuse/guidance.hpp"
#include "bevfuse/ops.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/sparse.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Values bounded away from zero: |x| in [0.1, 1].
inline Tensor random_nonzero(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

/// Compares the analytic gradient of L = sum(f() * R), R a fixed random
/// tensor, against central differences for every element of `inputs`.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5,
                                 double floor = 1e-4, std::uint64_t seed = 7) {
  Tensor out = f();
  Rng rng(seed, "gradcheck/weights");
  const Tensor r = random_tensor(out.shape(), rng, -1.0, 1.0, false);
  for (auto& t : inputs) t.zero_grad();
  sum(mul(out, r)).backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }
  const auto loss = [&] {
    NoGradGuard ng;
    return sum(mul(f(), r)).item();
  };
  GradCheck res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto v = inputs[i].mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double keep = v[j];
      v[j] = keep + h;
      const double lp = loss();
      v[j] = keep - h;
      const double lm = loss();
      v[j] = keep;
      const double num = (lp - lm) / (2 * h);
      const double a = analytic[i][j];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      res.max_rel_error = std::max(res.max_rel_error, err);
      ++res.checked;
    }
  }
  return res;
}

/// Random sparse set with `n` distinct voxels inside the extent at `stride`.
inline SparseVoxelSet random_sparse_set(Rng& rng, std::array<std::int32_t, 3> grid, std::int32_t stride,
                                        std::size_t n, std::size_t channels, bool requires_grad = false) {
  std::array<std::int32_t, 3> ext{};
  for (int a = 0; a < 3; ++a) ext[a] = (grid[a] + stride - 1) / stride;
  std::set<VoxelCoord> seen;
  const std::size_t cap = static_cast<std::size_t>(ext[0]) * ext[1] * ext[2];
  n = std::min(n, cap);
  while (seen.size() < n) {
    seen.insert({static_cast<std::int32_t>(rng.uniform_int(0, ext[0] - 1)),
                 static_cast<std::int32_t>(rng.uniform_int(0, ext[1] - 1)),
                 static_cast<std::int32_t>(rng.uniform_int(0, ext[2] - 1))});
  }
  std::vector<VoxelCoord> coords(seen.begin(), seen.end());
  Tensor feats;
  if (n > 0) feats = random_tensor({n, channels}, rng, -1.0, 1.0, requires_grad);
  return make_sparse_set(std::move(coords), feats, stride, grid, channels);
}

/// Dense feature grid of a sparse set; empty voxels read as zero.
struct DenseGrid {
  std::array<std::int32_t, 3> ext{};
  std::size_t channels = 0;
  std::vector<double> data;  // ((x * ey + y) * ez + z) * C + c

  explicit DenseGrid(const SparseVoxelSet& s) {
    for (int a = 0; a < 3; ++a) ext[a] = s.extent(a);
    channels = s.channels;
    data.assign(static_cast<std::size_t>(ext[0]) * ext[1] * ext[2] * channels, 0.0);
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t c = 0; c < channels; ++c) data[index(s.coords[i]) * channels + c] = s.feats.values()[i * channels + c];
  }
  bool inside(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < ext[0] && y < ext[1] && z < ext[2];
  }
  std::size_t index(const VoxelCoord& v) const {
    return (static_cast<std::size_t>(v[0]) * ext[1] + v[1]) * ext[2] + v[2];
  }
};

/// Sparse convolution computed by looping over a dense grid. Returns the
/// output value at each of `out_coords`, [N_out x C_out] row-major.
inline std::vector<double> dense_sparse_conv(const SparseVoxelSet& x, const std::vector<double>& weight, int k,
                                             int stride, std::size_t c_out, const std::vector<VoxelCoord>& out_coords) {
  const DenseGrid g(x);
  const int r = k / 2;
  const std::size_t c_in = x.channels;
  std::vector<double> out(out_coords.size() * c_out, 0.0);
  for (std::size_t o = 0; o < out_coords.size(); ++o) {
    for (int dx = -r; dx <= r; ++dx)
      for (int dy = -r; dy <= r; ++dy)
        for (int dz = -r; dz <= r; ++dz) {
          const int ix = stride * out_coords[o][0] + dx, iy = stride * out_coords[o][1] + dy,
                    iz = stride * out_coords[o][2] + dz;
          if (!g.inside(ix, iy, iz)) continue;
          const std::size_t base = g.index({ix, iy, iz}) * c_in;
          const std::size_t off = kernel_offset(dx, dy, dz, k);
          for (std::size_t ci = 0; ci < c_in; ++ci)
            for (std::size_t co = 0; co < c_out; ++co)
              out[o * c_out + co] += g.data[base + ci] * weight[(off * c_in + ci) * c_out + co];
        }
  }
  return out;
}

/// Expected output pattern of a sparse convolution.
/// Submanifold keeps the input, stride 2 takes floor(c / 2), a regular
/// stride-1 conv dilates by the kernel radius (clipped to the grid).
inline std::vector<VoxelCoord> expected_conv_pattern(const SparseVoxelSet& x, int k, int stride, bool submanifold) {
  if (submanifold) return x.coords;
  std::set<VoxelCoord> s;
  if (stride == 2) {
    for (const auto& c : x.coords) s.insert({c[0] / 2, c[1] / 2, c[2] / 2});
    return {s.begin(), s.end()};
  }
  const int r = k / 2;
  for (const auto& c : x.coords)
    for (int dx = -r; dx <= r; ++dx)
      for (int dy = -r; dy <= r; ++dy)
        for (int dz = -r; dz <= r; ++dz) {
          const VoxelCoord o{c[0] + dx, c[1] + dy, c[2] + dz};
          bool in = true;
          for (int a = 0; a < 3; ++a) in = in && o[a] >= 0 && o[a] < x.extent(a);
          if (in) s.insert(o);
        }
  return {s.begin(), s.end()};
}

/// Height compression by summing a dense volume column by column. Result is
/// [C_bev x X x Y] row-major.
inline std::vector<double> dense_height_compression(const SparseVoxelSet& x, const std::vector<double>& proj,
                                                    std::size_t z_bins, std::size_t c_bev) {
  const DenseGrid g(x);
  const std::size_t c = x.channels;
  const std::size_t h = g.ext[0], w = g.ext[1], ze = g.ext[2];
  std::vector<double> out(c_bev * h * w, 0.0);
  std::vector<double> column(z_bins * c);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      std::fill(column.begin(), column.end(), 0.0);
      for (std::size_t z = 0; z < ze; ++z) {
        const std::size_t bin = z * z_bins / ze;
        const std::size_t base = g.index({static_cast<int>(i), static_cast<int>(j), static_cast<int>(z)}) * c;
        for (std::size_t ch = 0; ch < c; ++ch) column[bin * c + ch] += g.data[base + ch];
      }
      for (std::size_t o = 0; o < c_bev; ++o) {
        double acc = 0;
        for (std::size_t q = 0; q < z_bins * c; ++q) acc += column[q] * proj[q * c_bev + o];
        out[(o * h + i) * w + j] = acc;
      }
    }
  return out;
}

/// Union at stride 8 computed with an ordered map keyed by scaled coordinate.
inline std::map<VoxelCoord, std::vector<double>> map_union(std::initializer_list<const SparseVoxelSet*> sets) {
  std::map<VoxelCoord, std::vector<double>> out;
  for (const auto* s : sets) {
    const std::int32_t f = s->stride / 8;
    for (std::size_t i = 0; i < s->size(); ++i) {
      const VoxelCoord m{s->coords[i][0] * f, s->coords[i][1] * f, s->coords[i][2] * f};
      auto& row = out[m];
      row.resize(s->channels, 0.0);
      for (std::size_t c = 0; c < s->channels; ++c) row[c] += s->feats.values()[i * s->channels + c];
    }
  }
  return out;
}

/// F''[c,z,h,w] = F'[c,z,h,w] * O[0,z,h,w] by explicit loops.
inline std::vector<double> loop_occupancy_gate(const Tensor& f, const Tensor& o) {
  const std::size_t c = f.dim(0), z = f.dim(1), h = f.dim(2), w = f.dim(3);
  std::vector<double> out(f.numel());
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t zi = 0; zi < z; ++zi)
      for (std::size_t hi = 0; hi < h; ++hi)
        for (std::size_t wi = 0; wi < w; ++wi)
          out[((ci * z + zi) * h + hi) * w + wi] =
              f.at({ci, zi, hi, wi}) * o.at({0, zi, hi, wi});
  return out;
}

/// Footprint IoU by jittered-grid sampling: one uniform sample in each cell of
/// an n x n grid over the joint bounding square (n * n samples in total).
inline double monte_carlo_iou(const Box3D& a, const Box3D& b, std::size_t n, Rng& rng) {
  const auto inside = [](const Box3D& box, double x, double y) {
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    const double lx = c * (x - box.x) + s * (y - box.y), ly = -s * (x - box.x) + c * (y - box.y);
    return std::abs(lx) <= box.l / 2 && std::abs(ly) <= box.w / 2;
  };
  const double ra = std::hypot(a.l, a.w) / 2, rb = std::hypot(b.l, b.w) / 2;
  const double x0 = std::min(a.x - ra, b.x - rb), x1 = std::max(a.x + ra, b.x + rb);
  const double y0 = std::min(a.y - ra, b.y - rb), y1 = std::max(a.y + ra, b.y + rb);
  const double dx = (x1 - x0) / static_cast<double>(n), dy = (y1 - y0) / static_cast<double>(n);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double x = x0 + (static_cast<double>(i) + rng.uniform()) * dx;
      const double y = y0 + (static_cast<double>(j) + rng.uniform()) * dy;
      const bool ia = inside(a, x, y), ib = inside(b, x, y);
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace bevfuse::testing
