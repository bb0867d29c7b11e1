#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bevfuse/kernels.hpp"
#include "bevfuse/params.hpp"
#include "bevfuse/types.hpp"

namespace bevfuse {

using VoxelCoord = std::array<std::int32_t, 3>;  // (x, y, z) in grid units at the set's stride

/// Occupied voxels with one feature row each.
///
/// Coordinates are unique and kept in lexicographic (x, y, z) order; every
/// reduction iterates in that order, which makes results independent of
/// hash-map layout. `feats` is [N x C] and undefined when N == 0.
struct SparseVoxelSet {
  std::vector<VoxelCoord> coords;
  Tensor feats;
  std::int32_t stride = 1;
  std::array<std::int32_t, 3> grid_shape{0, 0, 0};  // extent at stride 1
  std::size_t channels = 0;

  std::size_t size() const { return coords.size(); }
  bool empty() const { return coords.empty(); }
  /// Extent along `axis` at this set's stride: ceil(grid_shape / stride).
  std::int32_t extent(int axis) const { return (grid_shape[axis] + stride - 1) / stride; }
  /// Throws ContractError when an invariant is broken.
  void validate() const;
};

/// Sorts the rows by coordinate and checks uniqueness.
SparseVoxelSet make_sparse_set(std::vector<VoxelCoord> coords, Tensor feats, std::int32_t stride,
                               std::array<std::int32_t, 3> grid_shape, std::size_t channels);

struct VoxelizationConfig {
  std::array<double, 3> voxel_size{0.4, 0.4, 0.4};
  std::array<double, 3> range_min{-12.8, -12.8, -1.0};
  std::array<double, 3> range_max{12.8, 12.8, 5.4};
  std::size_t max_points_per_voxel = 32;

  std::array<std::int32_t, 3> grid_shape() const;
  void validate() const;
};

/// Feature width produced by voxelize: (x, y, z, intensity, dx, dy, dz).
inline constexpr std::size_t k_voxel_features = 7;

/// Mean point features per occupied voxel. Points are taken in input order
/// and anything past max_points_per_voxel is ignored; out-of-range points are
/// dropped.
SparseVoxelSet voxelize(const PointCloud& points, const VoxelizationConfig& cfg);

/// Packs a non-negative coordinate (each component < 2^20) into a hash key.
constexpr std::uint64_t pack_coord(std::int64_t x, std::int64_t y, std::int64_t z) {
  return (static_cast<std::uint64_t>(x) << 40) | (static_cast<std::uint64_t>(y) << 20) | static_cast<std::uint64_t>(z);
}

/// Kernel offset index of (dx, dy, dz) in [-r, r]^3 for kernel size k = 2r + 1.
constexpr std::size_t kernel_offset(int dx, int dy, int dz, int k) {
  const int r = k / 2;
  return static_cast<std::size_t>(((dx + r) * k + (dy + r)) * k + (dz + r));
}

/// Output pattern and neighbour tables of a sparse convolution with odd
/// kernel `k`, padding k/2 and the given stride. Submanifold convolutions
/// keep the input pattern; strided ones produce the distinct floor(c / stride).
struct SparseConvPlan {
  std::vector<VoxelCoord> out_coords;
  std::shared_ptr<kernels::SparseRules> rules;
};

SparseConvPlan plan_sparse_conv(const SparseVoxelSet& x, int k, int stride, bool submanifold);

/// Sparse 3D convolution. `weight` is [k^3 x C_in x C_out], indexed by
/// kernel_offset(). Output site o reads inputs at stride * o + offset.
SparseVoxelSet sparse_conv3d(const SparseVoxelSet& x, const Tensor& weight, int k, int stride, bool submanifold);

/// Elementwise ReLU on the features; the pattern is unchanged.
SparseVoxelSet sparse_relu(const SparseVoxelSet& x);

/// Moves every set to `target_stride` by scaling coordinates with
/// stride / target_stride (all three axes, clamped into the target grid) and
/// forms the union. Colliding features are summed in (input order, row order).
SparseVoxelSet union_aligned(std::span<const SparseVoxelSet> sets, std::int32_t target_stride);

/// Multi-scale union of stride-8, -16 and -32 sets into stride-8 units.
SparseVoxelSet align_and_union(const SparseVoxelSet& f4, const SparseVoxelSet& f5, const SparseVoxelSet& f6);

/// Column-wise collapse to a BEV grid: voxels are summed into `z_bins`
/// equal slabs of the set's z extent, the slabs are concatenated per column
/// ([z_bins * C] features) and projected by `proj` ([z_bins * C x C_bev],
/// no bias). Output rows follow x, columns follow y.
Tensor sparse_height_compression(const SparseVoxelSet& x, const Tensor& proj, std::size_t z_bins);

/// The voxel encoder: six stages with strides 1, 2, 4, 8, 16, 32.
struct SparseEncoderConfig {
  std::array<std::size_t, 6> widths{8, 8, 16, 32, 32, 32};
  int kernel = 3;
  std::size_t union_width = 32;
  std::size_t bev_channels = 32;
  std::size_t z_bins = 2;
};

class SparseEncoder {
 public:
  SparseEncoder(ParameterStore& store, const std::string& prefix, const SparseEncoderConfig& cfg,
                std::array<std::int32_t, 3> grid_shape);

  /// F1..F6.
  std::array<SparseVoxelSet, 6> downsample_chain(const SparseVoxelSet& x) const;
  /// Full path to the LiDAR BEV map [C_bev x X/8 x Y/8].
  Tensor forward(const SparseVoxelSet& x) const;

  const SparseEncoderConfig& config() const { return cfg_; }

 private:
  SparseEncoderConfig cfg_;
  std::array<std::int32_t, 3> grid_shape_;
  Tensor stem_;                   // stride 1 submanifold
  std::array<Tensor, 5> down_;    // strided, stages 2..6
  std::array<Tensor, 2> refine_;  // submanifold after stages 2 and 3
  std::array<Tensor, 3> proj_;    // 1x1x1 projections of F4..F6 to union_width
  Tensor height_;                 // height compression projection
};

/// "BFSV" file: stride, grid shape, channels, voxel count, coords, features.
void save_sparse_set(const std::filesystem::path& path, const SparseVoxelSet& x);
SparseVoxelSet load_sparse_set(const std::filesystem::path& path);

}  // namespace bevfuse
