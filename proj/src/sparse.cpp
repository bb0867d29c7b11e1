#include "bevfuse/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"
#include "bevfuse/serialize.hpp"

namespace bevfuse {

namespace {

using CoordIndex = std::unordered_map<std::uint64_t, std::int32_t>;

CoordIndex index_coords(const std::vector<VoxelCoord>& coords) {
  CoordIndex idx;
  idx.reserve(coords.size() * 2);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    idx.emplace(pack_coord(coords[i][0], coords[i][1], coords[i][2]), static_cast<std::int32_t>(i));
  }
  return idx;
}

std::int32_t lookup(const CoordIndex& idx, std::int64_t x, std::int64_t y, std::int64_t z) {
  if (x < 0 || y < 0 || z < 0) return -1;
  auto it = idx.find(pack_coord(x, y, z));
  return it == idx.end() ? -1 : it->second;
}

// Differentiable row gather-multiply-scatter through a rule table.
Tensor sparse_conv_op(const Tensor& in, const Tensor& weight, std::shared_ptr<kernels::SparseRules> rules,
                      std::size_t c_in, std::size_t c_out) {
  std::vector<double> out(rules->n_out * c_out);
  kernels::sparse_conv_forward(*rules, in.impl()->data.data(), c_in, weight.impl()->data.data(), c_out, out.data());
  auto ii = in.impl();
  auto wi = weight.impl();
  return detail::make_result("sparse_conv3d", {rules->n_out, c_out}, std::move(out), {in, weight},
                             [ii, wi, rules, c_in, c_out](const TensorImpl& o) {
                               if (double* g = detail::grad_of(ii)) {
                                 kernels::sparse_conv_backward_input(*rules, o.grad.data(), wi->data.data(), c_in,
                                                                     c_out, g);
                               }
                               if (double* g = detail::grad_of(wi)) {
                                 kernels::sparse_conv_backward_weight(*rules, o.grad.data(), ii->data.data(), c_in,
                                                                      c_out, g);
                               }
                             });
}

}  // namespace

void SparseVoxelSet::validate() const {
  if (stride < 1) throw ContractError("sparse set stride must be positive");
  for (std::size_t i = 0; i < coords.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      if (coords[i][a] < 0 || coords[i][a] >= extent(a)) {
        throw ContractError("sparse voxel coordinate outside the grid at stride " + std::to_string(stride));
      }
    }
    if (i > 0 && !(coords[i - 1] < coords[i])) throw ContractError("sparse coordinates not sorted and unique");
  }
  if (coords.empty()) {
    if (feats.defined()) throw ContractError("empty sparse set carries features");
    return;
  }
  if (!feats.defined() || feats.rank() != 2 || feats.dim(0) != coords.size() || feats.dim(1) != channels) {
    throw ContractError("sparse feature rows do not match " + std::to_string(coords.size()) + " voxels x " +
                        std::to_string(channels) + " channels");
  }
}

SparseVoxelSet make_sparse_set(std::vector<VoxelCoord> coords, Tensor feats, std::int32_t stride,
                               std::array<std::int32_t, 3> grid_shape, std::size_t channels) {
  SparseVoxelSet s;
  s.stride = stride;
  s.grid_shape = grid_shape;
  s.channels = channels;
  if (coords.empty()) {
    s.validate();
    return s;
  }
  std::vector<std::int64_t> order(coords.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return coords[a] < coords[b]; });
  bool identity = true;
  for (std::size_t i = 0; i < order.size(); ++i) identity = identity && order[i] == static_cast<std::int64_t>(i);
  s.coords.resize(coords.size());
  for (std::size_t i = 0; i < order.size(); ++i) s.coords[i] = coords[order[i]];
  if (identity || !feats.defined()) {
    s.feats = feats;
  } else {
    std::vector<std::int64_t> index;
    index.reserve(coords.size() * channels);
    for (auto r : order)
      for (std::size_t c = 0; c < channels; ++c) index.push_back(r * static_cast<std::int64_t>(channels) + c);
    s.feats = take(feats, std::move(index), {coords.size(), channels});
  }
  s.validate();
  return s;
}

std::array<std::int32_t, 3> VoxelizationConfig::grid_shape() const {
  std::array<std::int32_t, 3> g{};
  for (int a = 0; a < 3; ++a) g[a] = static_cast<std::int32_t>(std::lround((range_max[a] - range_min[a]) / voxel_size[a]));
  return g;
}

void VoxelizationConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!(voxel_size[a] > 0.0)) throw ConfigError("voxel size must be positive");
    if (!(range_min[a] < range_max[a])) throw ConfigError("voxelization range min must be below max");
  }
  if (max_points_per_voxel == 0) throw ConfigError("max_points_per_voxel must be positive");
}

SparseVoxelSet voxelize(const PointCloud& points, const VoxelizationConfig& cfg) {
  cfg.validate();
  const auto grid = cfg.grid_shape();
  struct Acc {
    VoxelCoord c;
    std::size_t n = 0;
    std::array<double, k_voxel_features> sum{};
  };
  std::unordered_map<std::uint64_t, std::size_t> slot;
  std::vector<Acc> acc;
  for (const auto& p : points) {
    const double v[3] = {p.x, p.y, p.z};
    VoxelCoord c{};
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double q = std::floor((v[a] - cfg.range_min[a]) / cfg.voxel_size[a]);
      if (!(q >= 0.0) || q >= grid[a]) inside = false;
      c[a] = inside ? static_cast<std::int32_t>(q) : 0;
    }
    if (!inside) continue;
    auto [it, fresh] = slot.emplace(pack_coord(c[0], c[1], c[2]), acc.size());
    if (fresh) acc.push_back({c, 0, {}});
    Acc& a = acc[it->second];
    if (a.n >= cfg.max_points_per_voxel) continue;
    ++a.n;
    a.sum[0] += p.x;
    a.sum[1] += p.y;
    a.sum[2] += p.z;
    a.sum[3] += p.intensity;
    for (int k = 0; k < 3; ++k) a.sum[4 + k] += v[k] - (cfg.range_min[k] + (c[k] + 0.5) * cfg.voxel_size[k]);
  }
  std::sort(acc.begin(), acc.end(), [](const Acc& a, const Acc& b) { return a.c < b.c; });
  std::vector<VoxelCoord> coords;
  std::vector<double> feats;
  for (const auto& a : acc) {
    coords.push_back(a.c);
    for (double s : a.sum) feats.push_back(s / static_cast<double>(a.n));
  }
  Tensor f;
  if (!coords.empty()) f = Tensor::from({coords.size(), k_voxel_features}, std::move(feats));
  return make_sparse_set(std::move(coords), f, 1, grid, k_voxel_features);
}

SparseConvPlan plan_sparse_conv(const SparseVoxelSet& x, int k, int stride, bool submanifold) {
  if (k < 1 || k % 2 == 0) throw ConfigError("sparse conv kernel must be odd, got " + std::to_string(k));
  if (stride != 1 && stride != 2) throw ConfigError("sparse conv stride must be 1 or 2");
  if (submanifold && stride != 1) throw ContractError("submanifold sparse conv requires stride 1");
  const int r = k / 2;
  const std::size_t kv = static_cast<std::size_t>(k) * k * k;
  SparseConvPlan plan;
  const std::int32_t out_stride = x.stride * stride;
  std::array<std::int32_t, 3> out_extent{};
  for (int a = 0; a < 3; ++a) out_extent[a] = (x.grid_shape[a] + out_stride - 1) / out_stride;
  if (submanifold) {
    plan.out_coords = x.coords;
  } else {
    std::vector<VoxelCoord> out;
    for (const auto& c : x.coords) {
      if (stride == 2) {
        out.push_back({c[0] / 2, c[1] / 2, c[2] / 2});
        continue;
      }
      for (int dx = -r; dx <= r; ++dx)
        for (int dy = -r; dy <= r; ++dy)
          for (int dz = -r; dz <= r; ++dz) {
            VoxelCoord o{c[0] - dx, c[1] - dy, c[2] - dz};
            if (o[0] >= 0 && o[1] >= 0 && o[2] >= 0 && o[0] < out_extent[0] && o[1] < out_extent[1] &&
                o[2] < out_extent[2])
              out.push_back(o);
          }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    plan.out_coords = std::move(out);
  }
  auto rules = std::make_shared<kernels::SparseRules>();
  rules->n_in = x.size();
  rules->n_out = plan.out_coords.size();
  rules->k_volume = kv;
  rules->out_nbr.assign(rules->n_out * kv, -1);
  rules->in_nbr.assign(rules->n_in * kv, -1);
  const auto idx = index_coords(x.coords);
  for (std::size_t o = 0; o < rules->n_out; ++o) {
    const auto& oc = plan.out_coords[o];
    for (int dx = -r; dx <= r; ++dx)
      for (int dy = -r; dy <= r; ++dy)
        for (int dz = -r; dz <= r; ++dz) {
          const auto i = lookup(idx, static_cast<std::int64_t>(stride) * oc[0] + dx,
                                static_cast<std::int64_t>(stride) * oc[1] + dy,
                                static_cast<std::int64_t>(stride) * oc[2] + dz);
          if (i < 0) continue;
          const auto kk = kernel_offset(dx, dy, dz, k);
          rules->out_nbr[o * kv + kk] = i;
          rules->in_nbr[static_cast<std::size_t>(i) * kv + kk] = static_cast<std::int32_t>(o);
        }
  }
  plan.rules = std::move(rules);
  return plan;
}

SparseVoxelSet sparse_conv3d(const SparseVoxelSet& x, const Tensor& weight, int k, int stride, bool submanifold) {
  const std::size_t kv = static_cast<std::size_t>(k) * k * k;
  if (weight.rank() != 3 || weight.dim(0) != kv) {
    throw DimensionError("sparse_conv3d: weight " + shape_str(weight.shape()) + " does not match kernel " +
                         std::to_string(k));
  }
  if (weight.dim(1) != x.channels) {
    throw DimensionError("sparse_conv3d: input has " + std::to_string(x.channels) + " channels, weight " +
                         shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  auto plan = plan_sparse_conv(x, k, stride, submanifold);
  const std::size_t c_out = weight.dim(2);
  SparseVoxelSet y;
  y.stride = x.stride * stride;
  y.grid_shape = x.grid_shape;
  y.channels = c_out;
  y.coords = std::move(plan.out_coords);
  if (!y.coords.empty()) {
    if (x.empty()) {
      y.feats = Tensor::zeros({y.coords.size(), c_out});
    } else {
      y.feats = sparse_conv_op(x.feats, weight, plan.rules, x.channels, c_out);
    }
  }
  return y;
}

SparseVoxelSet sparse_relu(const SparseVoxelSet& x) {
  SparseVoxelSet y = x;
  if (x.feats.defined()) y.feats = relu(x.feats);
  return y;
}

SparseVoxelSet union_aligned(std::span<const SparseVoxelSet> sets, std::int32_t target_stride) {
  if (sets.empty()) throw ContractError("union of zero sparse sets");
  const auto grid = sets[0].grid_shape;
  const auto channels = sets[0].channels;
  std::array<std::int32_t, 3> extent{};
  for (int a = 0; a < 3; ++a) extent[a] = (grid[a] + target_stride - 1) / target_stride;
  std::vector<std::vector<VoxelCoord>> mapped(sets.size());
  std::vector<VoxelCoord> all;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    const auto& x = sets[s];
    if (x.grid_shape != grid) throw ContractError("union inputs have different grid shapes");
    if (x.channels != channels) {
      throw ContractError("union inputs must share a channel width (" + std::to_string(x.channels) + " vs " +
                          std::to_string(channels) + ")");
    }
    if (x.stride < target_stride || x.stride % target_stride != 0) {
      throw ContractError("stride " + std::to_string(x.stride) + " cannot be aligned to stride " +
                          std::to_string(target_stride));
    }
    const std::int32_t f = x.stride / target_stride;
    for (const auto& c : x.coords) {
      VoxelCoord m{};
      for (int a = 0; a < 3; ++a) m[a] = std::min(c[a] * f, extent[a] - 1);
      mapped[s].push_back(m);
      all.push_back(m);
    }
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  SparseVoxelSet out;
  out.stride = target_stride;
  out.grid_shape = grid;
  out.channels = channels;
  out.coords = all;
  if (all.empty()) return out;
  const auto idx = index_coords(all);
  Tensor acc;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    if (sets[s].empty()) continue;
    std::vector<std::int32_t> rows;
    rows.reserve(mapped[s].size());
    for (const auto& m : mapped[s]) rows.push_back(lookup(idx, m[0], m[1], m[2]));
    Tensor part = index_add(sets[s].feats, std::move(rows), all.size());
    acc = acc.defined() ? add(acc, part) : part;
  }
  out.feats = acc;
  return out;
}

SparseVoxelSet align_and_union(const SparseVoxelSet& f4, const SparseVoxelSet& f5, const SparseVoxelSet& f6) {
  if (f4.stride != 8 || f5.stride != 16 || f6.stride != 32) {
    throw ContractError("align_and_union expects strides 8, 16, 32, got " + std::to_string(f4.stride) + ", " +
                        std::to_string(f5.stride) + ", " + std::to_string(f6.stride));
  }
  const SparseVoxelSet sets[3] = {f4, f5, f6};
  return union_aligned(sets, 8);
}

Tensor sparse_height_compression(const SparseVoxelSet& x, const Tensor& proj, std::size_t z_bins) {
  const std::size_t c = x.channels;
  const auto h = static_cast<std::size_t>(x.extent(0));
  const auto w = static_cast<std::size_t>(x.extent(1));
  const auto ze = static_cast<std::size_t>(x.extent(2));
  if (z_bins == 0) throw ConfigError("height compression needs at least one z bin");
  if (proj.rank() != 2 || proj.dim(0) != z_bins * c) {
    throw DimensionError("height compression projection " + shape_str(proj.shape()) + " does not take " +
                         std::to_string(z_bins) + " x " + std::to_string(c) + " inputs");
  }
  const std::size_t c_bev = proj.dim(1);
  if (x.empty()) return Tensor::zeros({c_bev, h, w});
  std::vector<std::int32_t> rows;
  rows.reserve(x.size());
  for (const auto& v : x.coords) {
    const std::size_t bin = static_cast<std::size_t>(v[2]) * z_bins / ze;
    rows.push_back(static_cast<std::int32_t>((static_cast<std::size_t>(v[0]) * w + v[1]) * z_bins + bin));
  }
  Tensor binned = index_add(x.feats, std::move(rows), h * w * z_bins);
  Tensor columns = matmul(reshape(binned, {h * w, z_bins * c}), proj);
  return reshape(transpose(columns), {c_bev, h, w});
}

SparseEncoder::SparseEncoder(ParameterStore& store, const std::string& prefix, const SparseEncoderConfig& cfg,
                             std::array<std::int32_t, 3> grid_shape)
    : cfg_(cfg), grid_shape_(grid_shape) {
  if (grid_shape[0] < 32 || grid_shape[1] < 32) {
    throw ConfigError("voxel grid must be at least 32 cells along x and y for six stride levels, got " +
                      std::to_string(grid_shape[0]) + "x" + std::to_string(grid_shape[1]));
  }
  if (cfg.kernel < 1 || cfg.kernel % 2 == 0) throw ConfigError("sparse kernel size must be odd");
  const std::size_t kv = static_cast<std::size_t>(cfg.kernel) * cfg.kernel * cfg.kernel;
  auto conv = [&](const std::string& name, std::size_t ci, std::size_t co, std::size_t taps) {
    return store.glorot(prefix + name, {taps, ci, co}, taps * ci, taps * co);
  };
  stem_ = conv(".stem", k_voxel_features, cfg.widths[0], kv);
  for (std::size_t s = 0; s < 5; ++s) {
    down_[s] = conv(".down" + std::to_string(s + 2), cfg.widths[s], cfg.widths[s + 1], kv);
  }
  for (std::size_t s = 0; s < 2; ++s) {
    refine_[s] = conv(".refine" + std::to_string(s + 2), cfg.widths[s + 1], cfg.widths[s + 1], kv);
  }
  for (std::size_t s = 0; s < 3; ++s) {
    proj_[s] = conv(".proj" + std::to_string(s + 4), cfg.widths[s + 3], cfg.union_width, 1);
  }
  height_ = store.glorot(prefix + ".height", {cfg.z_bins * cfg.union_width, cfg.bev_channels},
                         cfg.z_bins * cfg.union_width, cfg.bev_channels);
}

std::array<SparseVoxelSet, 6> SparseEncoder::downsample_chain(const SparseVoxelSet& x) const {
  if (x.stride != 1) throw ContractError("downsample_chain expects a stride-1 voxel set");
  if (x.grid_shape != grid_shape_) throw ContractError("voxel set grid does not match the encoder grid");
  std::array<SparseVoxelSet, 6> f;
  f[0] = sparse_relu(sparse_conv3d(x, stem_, cfg_.kernel, 1, true));
  for (std::size_t s = 0; s < 5; ++s) {
    auto y = sparse_relu(sparse_conv3d(f[s], down_[s], cfg_.kernel, 2, false));
    if (s < 2) y = sparse_relu(sparse_conv3d(y, refine_[s], cfg_.kernel, 1, true));
    f[s + 1] = std::move(y);
  }
  return f;
}

Tensor SparseEncoder::forward(const SparseVoxelSet& x) const {
  const auto f = downsample_chain(x);
  const SparseVoxelSet p4 = sparse_conv3d(f[3], proj_[0], 1, 1, true);
  const SparseVoxelSet p5 = sparse_conv3d(f[4], proj_[1], 1, 1, true);
  const SparseVoxelSet p6 = sparse_conv3d(f[5], proj_[2], 1, 1, true);
  const SparseVoxelSet f_union = align_and_union(p4, p5, p6);
  return sparse_height_compression(f_union, height_, cfg_.z_bins);
}

void save_sparse_set(const std::filesystem::path& path, const SparseVoxelSet& x) {
  x.validate();
  std::ostringstream os;
  os.write("BFSV", 4);
  write_u32(os, static_cast<std::uint32_t>(x.stride));
  for (auto g : x.grid_shape) write_u32(os, static_cast<std::uint32_t>(g));
  write_u32(os, static_cast<std::uint32_t>(x.channels));
  write_u32(os, static_cast<std::uint32_t>(x.size()));
  for (const auto& c : x.coords)
    for (auto v : c) write_u32(os, static_cast<std::uint32_t>(v));
  if (x.feats.defined()) {
    for (double v : x.feats.values()) write_f64(os, v);
  }
  write_file(path, os.str());
}

SparseVoxelSet load_sparse_set(const std::filesystem::path& path) {
  std::istringstream is(read_file(path));
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "BFSV") throw ContractError(path.string() + ": not a BFSV file");
  const auto stride = static_cast<std::int32_t>(read_u32(is));
  std::array<std::int32_t, 3> grid{};
  for (auto& g : grid) g = static_cast<std::int32_t>(read_u32(is));
  const std::size_t channels = read_u32(is);
  const std::size_t n = read_u32(is);
  std::vector<VoxelCoord> coords(n);
  for (auto& c : coords)
    for (auto& v : c) v = static_cast<std::int32_t>(read_u32(is));
  Tensor feats;
  if (n > 0) {
    std::vector<double> f(n * channels);
    for (auto& v : f) v = read_f64(is);
    feats = Tensor::from({n, channels}, std::move(f));
  }
  return make_sparse_set(std::move(coords), feats, stride, grid, channels);
}

}  // namespace bevfuse
