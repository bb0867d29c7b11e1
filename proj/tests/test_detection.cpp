#include <doctest.h>

#include <cmath>
#include <numbers>

#include "bevfuse/detection.hpp"
#include "bevfuse/error.hpp"
#include "bevfuse/params.hpp"
#include "support.hpp"

using namespace bevfuse;
using namespace bevfuse::testing;

namespace {

Box3D box(double x, double y, double l, double w, double yaw, double score = 1.0) {
  Box3D b;
  b.x = x;
  b.y = y;
  b.z = 0.8;
  b.l = l;
  b.w = w;
  b.h = 1.6;
  b.yaw = yaw;
  b.score = score;
  return b;
}

HeadOutput from_targets(const DetectionTargets& t) {
  return {Tensor::from({t.classes, t.h, t.w}, t.heatmap), Tensor::from({k_regression_channels, t.h, t.w}, t.regression)};
}

}  // namespace

TEST_CASE("yaw normalization lands in (-pi, pi]") {
  CHECK(normalize_yaw(std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(normalize_yaw(-std::numbers::pi) == doctest::Approx(std::numbers::pi));
  CHECK(normalize_yaw(3 * std::numbers::pi / 2) == doctest::Approx(-std::numbers::pi / 2));
  CHECK(normalize_yaw(0.3 + 4 * std::numbers::pi) == doctest::Approx(0.3));
}

TEST_CASE("rotated IoU: identical, disjoint, axis-aligned and symmetric cases") {
  const auto a = box(0, 0, 4, 2, 0.3);
  CHECK(rotated_bev_iou(a, a) == doctest::Approx(1.0));
  CHECK(rotated_bev_iou(a, box(20, 0, 4, 2, 0.3)) == 0.0);
  // Two 2 x 2 squares overlapping by half.
  CHECK(rotated_bev_iou(box(0, 0, 2, 2, 0), box(1, 0, 2, 2, 0)) == doctest::Approx(1.0 / 3.0));
  const auto b = box(0.7, -0.4, 3.5, 1.8, -0.9);
  CHECK(rotated_bev_iou(a, b) == doctest::Approx(rotated_bev_iou(b, a)).epsilon(1e-12));
  // The same square at 0 and 45 degrees overlaps in a regular octagon: IoU = 1/sqrt(2).
  CHECK(std::abs(rotated_bev_iou(box(0, 0, 2, 2, 0), box(0, 0, 2, 2, std::numbers::pi / 4)) - std::sqrt(0.5)) < 1e-12);
}

TEST_CASE("rotated IoU agrees with Monte Carlo sampling") {
  Rng rng(91, "mc_iou");
  const std::vector<std::pair<Box3D, Box3D>> cases = {
      {box(0, 0, 2, 2, 0), box(0, 0, 2, 2, std::numbers::pi / 4)},
      {box(0, 0, 2, 2, 0), box(0.5, 0.3, 2, 2, std::numbers::pi / 4)},
      {box(0, 0, 4.2, 1.8, 0.2), box(0.8, 0.4, 3.9, 1.7, 0.7)},
  };
  for (const auto& [a, b] : cases) CHECK(std::abs(rotated_bev_iou(a, b) - monte_carlo_iou(a, b, 1000, rng)) < 1e-3);
}

TEST_CASE("polygon helpers") {
  const auto sq = box_corners(box(0, 0, 2, 4, 0));
  REQUIRE(sq.size() == 4);
  CHECK(polygon_area(sq) == doctest::Approx(8.0));
  const auto inner = clip_convex(sq, box_corners(box(1, 0, 2, 2, 0)));
  CHECK(polygon_area(inner) == doctest::Approx(2.0));
}

TEST_CASE("targets encode a box that decode recovers") {
  const BevSpec spec{-12.8, -12.8, 3.2, 8, 8};
  const std::vector<Box3D> gt = {box(-6.1, 4.2, 4.4, 1.8, 0.6), box(7.3, -7.9, 3.9, 1.7, -2.5)};
  const auto t = make_targets(gt, spec, 1);
  CHECK(t.positives == 2);
  double peak = 0;
  for (double v : t.heatmap) peak = std::max(peak, v);
  CHECK(peak == 1.0);
  const auto dets = decode(from_targets(t), spec, 0.5, 10);
  REQUIRE(dets.size() == 2);
  for (const auto& g : gt) {
    bool found = false;
    for (const auto& d : dets) {
      if (std::abs(d.x - g.x) < 1e-9 && std::abs(d.y - g.y) < 1e-9) {
        found = true;
        CHECK(std::abs(d.z - g.z) < 1e-9);
        CHECK(std::abs(d.l - g.l) < 1e-9);
        CHECK(std::abs(d.w - g.w) < 1e-9);
        CHECK(std::abs(d.h - g.h) < 1e-9);
        CHECK(std::abs(normalize_yaw(d.yaw - g.yaw)) < 1e-9);
      }
    }
    CHECK(found);
  }
  CHECK(decode(from_targets(t), spec, 0.5, 1).size() == 1);
  // Boxes outside the grid get no target.
  CHECK(make_targets({box(40, 0, 4, 2, 0)}, spec, 1).positives == 0);
}

TEST_CASE("detection loss: zero regression error at the targets, small loss on an empty scene") {
  const BevSpec spec{-12.8, -12.8, 3.2, 8, 8};
  const auto t = make_targets({box(1.0, 2.0, 4, 2, 0.1)}, spec, 1);
  const auto l = detection_loss(from_targets(t), t);
  CHECK(l.regression.item() == 0.0);
  CHECK(l.total.item() == doctest::Approx(l.heatmap.item() + 0.25 * l.regression.item()));
  const auto empty = make_targets({}, spec, 1);
  const HeadOutput low{Tensor::full({1, 8, 8}, 1e-3), Tensor::zeros({8, 8, 8})};
  CHECK(detection_loss(low, empty).total.item() < 1e-4);
  CHECK_THROWS_AS(detection_loss({Tensor::zeros({1, 4, 4}), Tensor::zeros({8, 4, 4})}, t), DimensionError);
}

TEST_CASE("detection head and loss gradients") {
  ParameterStore store(8);
  DetectionHead head(store, "head", 2, 3, 1);
  Rng rng(92, "head_grad");
  for (auto& p : store.all())
    for (auto& v : p.tensor.mutable_values()) v += rng.uniform(-0.1, 0.1);
  const BevSpec spec{-12.8, -12.8, 3.2, 8, 8};
  const auto t = make_targets({box(1.0, 2.0, 4, 2, 0.1), box(-8.0, -3.0, 4, 2, 2.0)}, spec, 1);
  const Tensor bev = random_tensor({2, 8, 8}, rng);
  std::vector<Tensor> in{bev};
  for (auto& p : store.all()) in.push_back(p.tensor);
  CHECK(check_gradients([&] { return detection_loss(head.forward(bev), t).total; }, in).max_rel_error < 1e-5);
  const auto out = head.forward(bev);
  CHECK(out.heatmap.shape() == Shape{1, 8, 8});
  CHECK(out.regression.shape() == Shape{8, 8, 8});
}

TEST_CASE("average precision on hand-built cases") {
  const std::vector<FrameBox> gt = {{0, box(0, 0, 4, 2, 0)}, {1, box(5, 5, 4, 2, 0)}};
  CHECK(average_precision(gt, gt, 0.5) == doctest::Approx(1.0));
  CHECK(average_precision({}, gt, 0.5) == 0.0);
  // Scores 0.9 hit, 0.8 miss, 0.7 hit: precision 1 up to recall 0.5, then 2/3.
  const std::vector<FrameBox> preds = {{0, box(0.1, 0, 4, 2, 0, 0.9)},
                                       {0, box(10, 10, 4, 2, 0, 0.8)},
                                       {1, box(5, 5.1, 4, 2, 0, 0.7)}};
  CHECK(average_precision(preds, gt, 0.5) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
  // A prediction in the wrong frame never matches.
  CHECK(average_precision({{1, box(0, 0, 4, 2, 0)}}, {{0, box(0, 0, 4, 2, 0)}}, 0.5) == 0.0);
  // A duplicate of a matched box counts as a false positive.
  const std::vector<FrameBox> dup = {{0, box(0, 0, 4, 2, 0, 0.9)}, {0, box(0, 0, 4, 2, 0, 0.8)}};
  CHECK(average_precision(dup, {gt[0]}, 0.5) == doctest::Approx(1.0));
  CHECK(average_precision(dup, gt, 0.5) == doctest::Approx(0.5));
}

TEST_CASE("AP does not increase with the IoU threshold") {
  Rng rng(93, "ap_mono");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<FrameBox> gt, preds;
    for (int f = 0; f < 4; ++f)
      for (int k = 0; k < 3; ++k) {
        const auto g = box(rng.uniform(-20, 20), rng.uniform(-20, 20), 4, 2, rng.uniform(-3, 3));
        gt.push_back({f, g});
        if (rng.uniform() < 0.8)
          preds.push_back({f, box(g.x + rng.uniform(-1, 1), g.y + rng.uniform(-1, 1), 4 * rng.uniform(0.8, 1.2), 2,
                                  g.yaw + rng.uniform(-0.3, 0.3), rng.uniform())});
        if (rng.uniform() < 0.3)
          preds.push_back({f, box(rng.uniform(-20, 20), rng.uniform(-20, 20), 4, 2, 0, rng.uniform())});
      }
    double last = 1.0;
    for (double t = 0.05; t < 1.0; t += 0.05) {
      const double ap = average_precision(preds, gt, t);
      CHECK(ap <= last + 1e-12);
      CHECK(ap >= 0.0);
      last = ap;
    }
  }
}

TEST_CASE("rotated IoU equals axis-aligned IoU at zero yaw and stays in [0, 1]") {
  Rng rng(94, "iou_prop");
  for (int t = 0; t < 200; ++t) {
    const auto a = box(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 4), rng.uniform(0.5, 4), 0);
    const auto b = box(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 4), rng.uniform(0.5, 4), 0);
    const double ix = std::max(0.0, std::min(a.x + a.l / 2, b.x + b.l / 2) - std::max(a.x - a.l / 2, b.x - b.l / 2));
    const double iy = std::max(0.0, std::min(a.y + a.w / 2, b.y + b.w / 2) - std::max(a.y - a.w / 2, b.y - b.w / 2));
    const double inter = ix * iy;
    CHECK(std::abs(rotated_bev_iou(a, b) - inter / (a.l * a.w + b.l * b.w - inter)) < 1e-12);
    auto c = a, d = b;
    c.yaw = rng.uniform(-3, 3);
    d.yaw = rng.uniform(-3, 3);
    const double r = rotated_bev_iou(c, d);
    CHECK((r >= 0.0 && r <= 1.0));
    CHECK(std::abs(r - rotated_bev_iou(d, c)) < 1e-12);
  }
}

TEST_CASE("box JSON lines round trip") {
  const std::vector<FrameBox> boxes = {{3, box(1.25, -2.5, 4, 2, 0.3, 0.75)}, {4, box(0, 0, 1, 1, -1, 0.1)}};
  const auto back = boxes_from_jsonl(boxes_to_jsonl(boxes));
  REQUIRE(back.size() == 2);
  CHECK(back[0].frame_id == 3);
  CHECK(back[0].box.x == 1.25);
  CHECK(back[1].box.yaw == -1);
  CHECK(back[0].box.score == 0.75);
  CHECK_THROWS_AS(boxes_from_jsonl("{\"frame_id\": 1}\nnot json\n"), ContractError);
}

TEST_CASE("heatmap targets: empty scene, centred box and two boxes") {
  const BevSpec spec{-12.8, -12.8, 3.2, 8, 8};
  const auto none = make_targets({}, spec, 1);
  for (double v : none.heatmap) CHECK(v == 0.0);
  CHECK(none.positives == 0);

  const auto one = make_targets({box(spec.cell_x(3), spec.cell_y(5), 4, 2, 0)}, spec, 1);
  CHECK(one.heatmap[3 * 8 + 5] == 1.0);
  for (std::size_t i = 0; i < 64; ++i)
    if (i != 3 * 8 + 5) CHECK(one.heatmap[i] < 1.0);

  const auto two = make_targets({box(spec.cell_x(1), spec.cell_y(1), 4, 2, 0), box(spec.cell_x(6), spec.cell_y(6), 4, 2, 0)},
                                spec, 1);
  std::size_t peaks = 0;
  for (double v : two.heatmap) peaks += v == 1.0;
  CHECK(peaks == 2);
  CHECK(two.heatmap[1 * 8 + 1] == 1.0);
  CHECK(two.heatmap[6 * 8 + 6] == 1.0);
}

TEST_CASE("decode respects empty heatmaps and max_dets") {
  const BevSpec spec{-12.8, -12.8, 3.2, 8, 8};
  CHECK(decode({Tensor::zeros({1, 8, 8}), Tensor::zeros({8, 8, 8})}, spec, 0.1, 10).empty());
  Rng rng(95, "decode");
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t cap = 1 + trial % 5;
    const HeadOutput out{random_tensor({1, 8, 8}, rng, 0, 1, false), random_tensor({8, 8, 8}, rng, -1, 1, false)};
    CHECK(decode(out, spec, 0.0, cap).size() <= cap);
  }
}

TEST_CASE("head output is a sigmoid heatmap and overfits a fixed batch") {
  ParameterStore store(9);
  DetectionHead head(store, "head", 4, 8, 1);
  Rng rng(96, "overfit");
  const BevSpec spec{-12.8, -12.8, 3.2, 8, 8};
  const Tensor bev = random_tensor({4, 8, 8}, rng, -1, 1, false);
  const auto t = make_targets({box(-6.1, 4.2, 4.4, 1.8, 0.6), box(7.3, -7.9, 3.9, 1.7, -2.5)}, spec, 1);
  const auto initial = head.forward(bev);
  for (double v : initial.heatmap.values()) CHECK((v > 0.0 && v < 1.0));
  Adam opt(1e-2);
  double first = 0, last = 0;
  for (int step = 0; step < 500; ++step) {
    store.zero_grad();
    const Tensor loss = detection_loss(head.forward(bev), t).total;
    if (step == 0) first = loss.item();
    last = loss.item();
    loss.backward();
    opt.step(store);
  }
  CHECK(last <= 0.1 * first);
}
