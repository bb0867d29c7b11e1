#include <doctest.h>

#include <filesystem>
#include <set>

#include "bevfuse/error.hpp"
#include "bevfuse/params.hpp"
#include "bevfuse/sparse.hpp"
#include "support.hpp"

using namespace bevfuse;
using namespace bevfuse::testing;

namespace {

std::vector<double> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("voxelize averages points and drops out-of-range ones") {
  VoxelizationConfig cfg;
  cfg.voxel_size = {1, 1, 1};
  cfg.range_min = {0, 0, 0};
  cfg.range_max = {4, 4, 2};
  cfg.max_points_per_voxel = 2;
  const PointCloud pts = {{0.2, 0.2, 0.2, 1.0}, {0.6, 0.4, 0.8, 0.0}, {0.5, 0.5, 0.5, 9.0},  // third is capped
                          {3.5, 1.5, 1.5, 0.5}, {-0.1, 0, 0, 1}, {4.0, 0, 0, 1}};
  const auto s = voxelize(pts, cfg);
  REQUIRE(s.size() == 2);
  CHECK(s.coords[0] == VoxelCoord{0, 0, 0});
  CHECK(s.coords[1] == VoxelCoord{3, 1, 1});
  CHECK(s.channels == k_voxel_features);
  const auto f = s.feats.values();
  CHECK(f[0] == doctest::Approx(0.4));
  CHECK(f[3] == doctest::Approx(0.5));
  CHECK(f[4] == doctest::Approx(-0.1));  // mean x offset from the voxel centre
  CHECK(f[k_voxel_features + 3] == doctest::Approx(0.5));
}

TEST_CASE("voxelize output does not depend on point order") {
  VoxelizationConfig cfg;
  Rng rng(5, "vox");
  PointCloud pts;
  for (int i = 0; i < 300; ++i) pts.push_back({rng.uniform(-12, 12), rng.uniform(-12, 12), rng.uniform(-1, 5), rng.uniform()});
  auto rev = pts;
  std::reverse(rev.begin(), rev.end());
  const auto a = voxelize(pts, cfg), b = voxelize(rev, cfg);
  CHECK(a.coords == b.coords);
  CHECK(max_abs_diff(a.feats.values(), b.feats.values()) < 1e-12);
}

TEST_CASE("make_sparse_set sorts rows and rejects duplicates") {
  const Tensor f = Tensor::from({2, 1}, {1, 2});
  const auto s = make_sparse_set({{1, 0, 0}, {0, 0, 0}}, f, 1, {4, 4, 4}, 1);
  CHECK(s.coords[0] == VoxelCoord{0, 0, 0});
  CHECK(s.feats.values()[0] == 2);
  CHECK_THROWS_AS(make_sparse_set({{1, 0, 0}, {1, 0, 0}}, f, 1, {4, 4, 4}, 1), ContractError);
  CHECK_THROWS_AS(make_sparse_set({{9, 0, 0}}, Tensor::from({1, 1}, {1}), 1, {4, 4, 4}, 1), ContractError);
}

TEST_CASE("sparse_conv3d matches the dense oracle") {
  Rng rng(21, "sparse_conv");
  for (int trial = 0; trial < 50; ++trial) {
    const int k = trial % 3 == 0 ? 1 : 3;
    const int stride = trial % 2 == 0 ? 2 : 1;
    const bool sub = stride == 1 && trial % 4 == 1;
    const std::size_t c_in = 1 + trial % 3, c_out = 1 + (trial / 3) % 3;
    const auto x = random_sparse_set(rng, {12, 10, 6}, 1, 5 + trial, c_in);
    const Tensor w = random_tensor({static_cast<std::size_t>(k * k * k), c_in, c_out}, rng, -1, 1, false);
    const auto y = sparse_conv3d(x, w, k, stride, sub);
    CHECK(y.coords == expected_conv_pattern(x, k, stride, sub));
    CHECK(y.stride == stride);
    const auto ref = dense_sparse_conv(x, values_of(w), k, stride, c_out, y.coords);
    CHECK(max_abs_diff(y.feats.values(), ref) < 1e-9);
  }
}

TEST_CASE("sparse_conv3d gradients") {
  Rng rng(22, "sparse_grad");
  const auto x = random_sparse_set(rng, {8, 8, 4}, 1, 25, 2, true);
  const Tensor w = random_tensor({27, 2, 3}, rng);
  for (int stride : {1, 2}) {
    const auto g = check_gradients([&] { return sparse_conv3d(x, w, 3, stride, stride == 1).feats; }, {x.feats, w});
    CHECK(g.max_rel_error < 1e-5);
  }
}

TEST_CASE("sparse_conv3d rejects bad shapes") {
  Rng rng(23, "sparse_bad");
  const auto x = random_sparse_set(rng, {8, 8, 4}, 1, 10, 2);
  CHECK_THROWS_AS(sparse_conv3d(x, Tensor::zeros({27, 3, 1}), 3, 1, true), DimensionError);
  CHECK_THROWS_AS(sparse_conv3d(x, Tensor::zeros({27, 2, 1}), 3, 2, true), ContractError);
  CHECK_THROWS_AS(sparse_conv3d(x, Tensor::zeros({8, 2, 1}), 2, 1, true), ConfigError);
}

TEST_CASE("height compression matches the dense column sum") {
  Rng rng(24, "height");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + trial % 3, z_bins = 1 + trial % 2, c_bev = 1 + (trial / 2) % 3;
    const auto x = random_sparse_set(rng, {64, 48, 32}, 8, 3 + trial, c);
    const Tensor proj = random_tensor({z_bins * c, c_bev}, rng, -1, 1, false);
    const Tensor bev = sparse_height_compression(x, proj, z_bins);
    CHECK(bev.shape() == Shape{c_bev, 8, 6});
    CHECK(max_abs_diff(bev.values(), dense_height_compression(x, values_of(proj), z_bins, c_bev)) < 1e-9);
  }
  const auto x = random_sparse_set(rng, {64, 64, 32}, 8, 20, 2, true);
  const Tensor proj = random_tensor({4, 3}, rng);
  CHECK(check_gradients([&] { return sparse_height_compression(x, proj, 2); }, {x.feats, proj}).max_rel_error < 1e-5);
  CHECK_THROWS_AS(sparse_height_compression(x, Tensor::zeros({3, 3}), 2), DimensionError);
}

TEST_CASE("align_and_union places every voxel at p, 2p or 4p and sums collisions") {
  Rng rng(25, "union");
  const std::array<std::int32_t, 3> grid{64, 64, 64};
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + trial % 4;
    const auto f4 = random_sparse_set(rng, grid, 8, 10 + trial, c);
    const auto f5 = random_sparse_set(rng, grid, 16, 4 + trial / 2, c);
    const auto f6 = random_sparse_set(rng, grid, 32, 1 + trial % 8, c);
    const auto u = align_and_union(f4, f5, f6);
    CHECK(u.stride == 8);
    std::set<VoxelCoord> allowed(f4.coords.begin(), f4.coords.end());
    for (const auto& p : f5.coords) allowed.insert({2 * p[0], 2 * p[1], 2 * p[2]});
    for (const auto& p : f6.coords) allowed.insert({4 * p[0], 4 * p[1], 4 * p[2]});
    CHECK(u.size() == allowed.size());
    for (const auto& v : u.coords) CHECK(allowed.count(v) == 1);
    const auto ref = map_union({&f4, &f5, &f6});
    REQUIRE(ref.size() == u.size());
    std::size_t row = 0;
    double worst = 0;
    for (const auto& [coord, vals] : ref) {
      CHECK(coord == u.coords[row]);
      for (std::size_t ch = 0; ch < c; ++ch) worst = std::max(worst, std::abs(vals[ch] - u.feats.values()[row * c + ch]));
      ++row;
    }
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("align_and_union gradients and contract checks") {
  Rng rng(26, "union_grad");
  const std::array<std::int32_t, 3> grid{64, 64, 64};
  const auto f4 = random_sparse_set(rng, grid, 8, 20, 2, true);
  const auto f5 = random_sparse_set(rng, grid, 16, 8, 2, true);
  const auto f6 = random_sparse_set(rng, grid, 32, 3, 2, true);
  CHECK(check_gradients([&] { return align_and_union(f4, f5, f6).feats; }, {f4.feats, f5.feats, f6.feats})
            .max_rel_error < 1e-5);
  CHECK_THROWS_AS(align_and_union(f5, f5, f6), ContractError);
  const auto f5c = random_sparse_set(rng, grid, 16, 8, 3);
  CHECK_THROWS_AS(align_and_union(f4, f5c, f6), ContractError);
}

TEST_CASE("sparse encoder produces the BEV map and rejects small grids") {
  ParameterStore store(1);
  SparseEncoderConfig cfg;
  cfg.widths = {2, 2, 2, 2, 2, 2};
  cfg.union_width = 2;
  cfg.bev_channels = 3;
  SparseEncoder enc(store, "lidar", cfg, {64, 64, 16});
  Rng rng(27, "enc");
  const auto x = random_sparse_set(rng, {64, 64, 16}, 1, 200, k_voxel_features);
  const auto chain = enc.downsample_chain(x);
  for (int i = 0; i < 6; ++i) CHECK(chain[i].stride == (1 << i));
  const Tensor bev = enc.forward(x);
  CHECK(bev.shape() == Shape{3, 8, 8});
  ParameterStore other(1);
  CHECK_THROWS_AS(SparseEncoder(other, "lidar", cfg, {16, 64, 16}), ConfigError);
}

TEST_CASE("sparse set files round trip") {
  Rng rng(28, "bfsv");
  const auto x = random_sparse_set(rng, {32, 32, 8}, 2, 30, 3);
  const auto path = std::filesystem::temp_directory_path() / "bevfuse_test_set.bfsv";
  save_sparse_set(path, x);
  const auto y = load_sparse_set(path);
  CHECK(y.coords == x.coords);
  CHECK(y.stride == 2);
  CHECK(y.grid_shape == x.grid_shape);
  CHECK(max_abs_diff(y.feats.values(), x.feats.values()) == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("voxelize edge cases and the quantization oracle") {
  VoxelizationConfig cfg;
  CHECK(voxelize({}, cfg).empty());
  // A point at a voxel centre has zero offset features.
  const PointCloud centre = {{0.2, 0.2, -0.8, 1.0}};
  const auto one = voxelize(centre, cfg);
  REQUIRE(one.size() == 1);
  CHECK(one.coords[0] == VoxelCoord{32, 32, 0});
  for (std::size_t k = 4; k < k_voxel_features; ++k) CHECK(std::abs(one.feats.values()[k]) < 1e-12);

  Rng rng(28, "quantize");
  PointCloud pts;
  for (int i = 0; i < 100; ++i)
    pts.push_back({rng.uniform(-14, 14), rng.uniform(-14, 14), rng.uniform(-2, 6), rng.uniform()});
  std::set<std::uint64_t> keys;
  for (const auto& p : pts) {
    const double q[3] = {p.x, p.y, p.z};
    std::int64_t c[3];
    bool in = true;
    for (int a = 0; a < 3; ++a) {
      in = in && q[a] >= cfg.range_min[a] && q[a] < cfg.range_max[a];
      c[a] = static_cast<std::int64_t>(std::floor((q[a] - cfg.range_min[a]) / cfg.voxel_size[a]));
    }
    if (in) keys.insert(pack_coord(c[0], c[1], c[2]));
  }
  const auto s = voxelize(pts, cfg);
  CHECK(s.size() == keys.size());
  for (const auto& v : s.coords) CHECK(keys.count(pack_coord(v[0], v[1], v[2])) == 1);
}

TEST_CASE("sparse_conv3d with a 1^3 identity kernel and on empty input") {
  const Tensor feats = Tensor::from({1, 3}, {0.5, -1.0, 2.0});
  const auto x = make_sparse_set({{3, 4, 5}}, feats, 1, {8, 8, 8}, 3);
  const Tensor eye = Tensor::from({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto y = sparse_conv3d(x, eye, 1, 1, true);
  REQUIRE(y.size() == 1);
  CHECK(y.coords[0] == VoxelCoord{3, 4, 5});
  CHECK(max_abs_diff(y.feats.values(), feats.values()) == 0.0);

  const auto empty = make_sparse_set({}, Tensor{}, 1, {8, 8, 8}, 3);
  Rng rng(29, "empty");
  const Tensor w = random_tensor({27, 3, 2}, rng, -1, 1, false);
  CHECK(sparse_conv3d(empty, w, 3, 1, true).empty());
  CHECK(sparse_conv3d(empty, w, 3, 2, false).empty());
}

TEST_CASE("sparse encoder strides, origin voxel and shrinking counts") {
  ParameterStore store(2);
  SparseEncoderConfig cfg;
  cfg.widths = {2, 2, 2, 2, 2, 2};
  cfg.union_width = 2;
  cfg.bev_channels = 2;
  SparseEncoder enc(store, "lidar", cfg, {64, 64, 16});
  const auto origin =
      make_sparse_set({{0, 0, 0}}, Tensor::full({1, k_voxel_features}, 1.0), 1, {64, 64, 16}, k_voxel_features);
  const auto chain = enc.downsample_chain(origin);
  for (int i = 0; i < 6; ++i) {
    CHECK(chain[i].stride == (1 << i));
    CHECK(std::find(chain[i].coords.begin(), chain[i].coords.end(), VoxelCoord{0, 0, 0}) != chain[i].coords.end());
  }
  Rng rng(30, "shrink");
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_sparse_set(rng, {64, 64, 16}, 1, 50 + 100 * trial, k_voxel_features);
    const auto c = enc.downsample_chain(x);
    for (int i = 1; i < 6; ++i) CHECK(c[i].size() <= c[i - 1].size());
  }
}

TEST_CASE("union example positions and collision cases") {
  const std::array<std::int32_t, 3> grid{256, 256, 128};
  const auto single = [&](VoxelCoord p, std::int32_t stride, double v) {
    return make_sparse_set({p}, Tensor::from({1, 1}, {v}), stride, grid, 1);
  };
  const auto none = [&](std::int32_t stride) { return make_sparse_set({}, Tensor{}, stride, grid, 1); };
  const auto from6 = align_and_union(none(8), none(16), single({3, 5, 2}, 32, 1.0));
  REQUIRE(from6.size() == 1);
  CHECK(from6.coords[0] == VoxelCoord{12, 20, 8});
  const auto from5 = align_and_union(none(8), single({3, 5, 2}, 16, 1.0), none(32));
  REQUIRE(from5.size() == 1);
  CHECK(from5.coords[0] == VoxelCoord{6, 10, 4});

  const auto disjoint = align_and_union(single({1, 0, 0}, 8, 1.0), single({1, 1, 1}, 16, 2.0), single({2, 2, 2}, 32, 3.0));
  CHECK(disjoint.size() == 3);
  const auto same = align_and_union(single({4, 4, 4}, 8, 1.0), single({2, 2, 2}, 16, 2.0), single({1, 1, 1}, 32, 3.0));
  REQUIRE(same.size() == 1);
  CHECK(same.coords[0] == VoxelCoord{4, 4, 4});
  CHECK(same.feats.values()[0] == 6.0);
}

TEST_CASE("height compression of empty and single-voxel sets") {
  const std::array<std::int32_t, 3> grid{64, 64, 32};
  const Tensor proj = Tensor::full({2, 1}, 1.0);
  const auto empty = make_sparse_set({}, Tensor{}, 8, grid, 1);
  const Tensor z = sparse_height_compression(empty, proj, 2);
  CHECK(z.shape() == Shape{1, 8, 8});
  for (double v : z.values()) CHECK(v == 0.0);
  const auto one = make_sparse_set({{3, 5, 1}}, Tensor::from({1, 1}, {2.5}), 8, grid, 1);
  const Tensor b = sparse_height_compression(one, proj, 2);
  std::size_t nonzero = 0;
  for (double v : b.values()) nonzero += v != 0.0;
  CHECK(nonzero == 1);
  CHECK(b.at({0, 3, 5}) == 2.5);
}
