// Serial vs OpenMP timings of the hot kernels. The benchmark argument picks
// the backend: 0 = serial reference, 1 = parallel.

#include <benchmark/benchmark.h>

#include <memory>

#include "bevfuse/camera_stream.hpp"
#include "bevfuse/config.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/kernels.hpp"
#include "bevfuse/lgaft.hpp"
#include "bevfuse/msdpt.hpp"
#include "bevfuse/ops.hpp"
#include "bevfuse/params.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/scenegen.hpp"
#include "bevfuse/sparse.hpp"

using namespace bevfuse;

namespace {

Tensor random(Shape shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v));
}

/// Inputs sized like one desk-preset frame, built once.
struct Fixture {
  PipelineConfig cfg = preset_config("desk");
  Rng rng{cfg.seed, "bench_kernels"};
  SparseVoxelSet voxels;
  Tensor sparse_w;
  Tensor feat, depth;
  std::shared_ptr<const kernels::SplatPlan> plan;
  ParameterStore store{cfg.seed};
  std::unique_ptr<WindowAttention> attn;
  Tensor slices;
  std::unique_ptr<BevFusion> fusion;
  Tensor lidar, camera, weights;
  Tensor gemm_a, gemm_b;
  Tensor image, conv_w;

  Fixture() {
    NoGradGuard no_grad;
    cfg.sync();
    SceneConfig sc = cfg.scene;
    sc.n_frames = 1;
    const Frame frame = generate_scene(sc).at(0);
    voxels = voxelize(frame.points, cfg.voxel);
    const int k = cfg.sparse.kernel;
    sparse_w = random({static_cast<std::size_t>(k * k * k), k_voxel_features, cfg.sparse.widths[0]}, rng);
    const std::size_t fh = cfg.scene.image_h / k_feature_stride, fw = cfg.scene.image_w / k_feature_stride;
    plan = make_lift_plans(frame.cameras, fh, fw, cfg.camera.bins, cfg.volume).at(0);
    feat = random({cfg.camera.volume_channels, fh, fw}, rng);
    depth = softmax(random({cfg.camera.bins.count, fh, fw}, rng), 0);
    attn = std::make_unique<WindowAttention>(store, "bench.attn", cfg.msdpt.attention);
    slices = random({cfg.camera.volume_channels, cfg.volume.z, cfg.volume.bev.h, cfg.volume.bev.w}, rng);
    FusionConfig fc = cfg.fusion;
    fc.strategy = FusionStrategy::lgaft;
    fusion = std::make_unique<BevFusion>(store, "bench.fusion", fc);
    lidar = fusion->expand_channels(random({fc.lidar_channels, fc.h, fc.w}, rng), BevFusion::Modality::lidar);
    camera = fusion->expand_channels(random({fc.camera_channels, fc.h, fc.w}, rng), BevFusion::Modality::camera);
    weights = fusion->adaptive_weights(lidar, camera);
    gemm_a = random({128, 96}, rng);
    gemm_b = random({96, 128}, rng);
    image = random({1, 3, cfg.scene.image_h, cfg.scene.image_w}, rng);
    conv_w = random({8, 3, 3, 3}, rng);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

template <class F>
void run(benchmark::State& state, F&& fn) {
  auto& f = fixture();
  (void)f;
  kernels::set_backend(state.range(0) == 0 ? kernels::Backend::serial : kernels::Backend::parallel);
  state.SetLabel(state.range(0) == 0 ? "serial" : "parallel");
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(fn());
}

void bm_sparse_conv3d(benchmark::State& s) {
  auto& f = fixture();
  run(s, [&] { return sparse_conv3d(f.voxels, f.sparse_w, f.cfg.sparse.kernel, 1, true); });
}
void bm_lift_splat(benchmark::State& s) {
  auto& f = fixture();
  run(s, [&] { return lift_splat(f.feat, f.depth, f.plan, f.cfg.volume); });
}
void bm_window_attention(benchmark::State& s) {
  auto& f = fixture();
  run(s, [&] { return f.attn->forward_slices(f.slices); });
}
void bm_lgaft_fuse(benchmark::State& s) {
  auto& f = fixture();
  run(s, [&] { return f.fusion->lgaft_fuse(f.lidar, f.camera, f.weights); });
}
void bm_gemm(benchmark::State& s) {
  auto& f = fixture();
  run(s, [&] { return matmul(f.gemm_a, f.gemm_b); });
}
void bm_conv2d(benchmark::State& s) {
  auto& f = fixture();
  run(s, [&] { return conv2d(f.image, f.conv_w, {}, 1, 1); });
}

}  // namespace

BENCHMARK(bm_sparse_conv3d)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_lift_splat)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_window_attention)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_lgaft_fuse)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_gemm)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(bm_conv2d)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
