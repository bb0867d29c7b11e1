#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bevfuse/params.hpp"
#include "bevfuse/types.hpp"

namespace bevfuse {

struct Box3D {
  double x = 0, y = 0, z = 0;
  double l = 1, w = 1, h = 1;
  double yaw = 0;  // (-pi, pi]
  int class_id = 0;
  double score = 1;
};

/// Wraps an angle into (-pi, pi].
double normalize_yaw(double yaw);

inline constexpr std::size_t k_regression_channels = 8;  // dx, dy, z, log l, log w, log h, sin, cos

struct HeadOutput {
  Tensor heatmap;     // K x H x W, sigmoid
  Tensor regression;  // 8 x H x W
};

class DetectionHead {
 public:
  DetectionHead(ParameterStore& store, const std::string& prefix, std::size_t channels, std::size_t hidden,
                std::size_t classes, double heat_bias = -2.19);

  /// Two 3x3 conv + ReLU layers, then 1x1 heatmap and regression heads.
  HeadOutput forward(const Tensor& bev) const;

 private:
  Tensor w1_, b1_, w2_, b2_, heat_w_, heat_b_, reg_w_, reg_b_;
};

struct DetectionTargets {
  std::size_t classes = 1, h = 0, w = 0;
  std::vector<double> heatmap;     // K x H x W
  std::vector<double> regression;  // 8 x H x W, written at positive cells
  std::vector<double> mask;        // H x W, 1 at box centre cells
  std::size_t positives = 0;
};

/// Gaussian radius (cells) used for a box footprint: half the footprint
/// diagonal in cells, at least 1.
int gaussian_radius(const Box3D& box, const BevSpec& spec);

/// Boxes whose centres fall outside the grid are skipped.
DetectionTargets make_targets(const std::vector<Box3D>& boxes, const BevSpec& spec, std::size_t classes);

struct DetectionLosses {
  Tensor heatmap, regression, total;  // total = heatmap + 0.25 * regression
};

/// Penalty-reduced focal loss on the heatmap (alpha 2, beta 4, predictions
/// clamped to [1e-4, 1 - 1e-4]) plus L1 regression at positives; both are
/// normalised by max(1, #positives).
DetectionLosses detection_loss(const HeadOutput& pred, const DetectionTargets& targets);

/// 3x3 local maxima above `score_thresh`, highest scores first, at most `max_dets`.
std::vector<Box3D> decode(const HeadOutput& pred, const BevSpec& spec, double score_thresh, std::size_t max_dets);

/// Footprint corners in counter-clockwise order.
std::vector<std::array<double, 2>> box_corners(const Box3D& b);
double polygon_area(const std::vector<std::array<double, 2>>& poly);
/// Intersection of two convex counter-clockwise polygons (Sutherland-Hodgman).
std::vector<std::array<double, 2>> clip_convex(const std::vector<std::array<double, 2>>& subject,
                                               const std::vector<std::array<double, 2>>& clip);
double rotated_bev_iou(const Box3D& a, const Box3D& b);

struct FrameBox {
  std::int64_t frame_id = 0;
  Box3D box;
};

/// All-point interpolated AP for one class. Predictions are matched greedily
/// in score order to the best unmatched same-frame ground truth.
double average_precision(const std::vector<FrameBox>& preds, const std::vector<FrameBox>& gts, double iou_thresh,
                         int class_id = 0);

/// JSON-lines, one box per line.
std::string boxes_to_jsonl(const std::vector<FrameBox>& boxes);
std::vector<FrameBox> boxes_from_jsonl(const std::string& text);

}  // namespace bevfuse
