#include "bevfuse/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

double normalize_yaw(double yaw) {
  constexpr double pi = std::numbers::pi;
  double y = std::fmod(yaw, 2.0 * pi);
  if (y <= -pi) y += 2.0 * pi;
  if (y > pi) y -= 2.0 * pi;
  return y;
}

DetectionHead::DetectionHead(ParameterStore& store, const std::string& prefix, std::size_t channels,
                             std::size_t hidden, std::size_t classes, double heat_bias) {
  w1_ = store.glorot(prefix + ".enc1.w", {hidden, channels, 3, 3}, channels * 9, hidden * 9);
  b1_ = store.zeros(prefix + ".enc1.b", {hidden});
  w2_ = store.glorot(prefix + ".enc2.w", {hidden, hidden, 3, 3}, hidden * 9, hidden * 9);
  b2_ = store.zeros(prefix + ".enc2.b", {hidden});
  heat_w_ = store.glorot(prefix + ".heat.w", {classes, hidden, 1, 1}, hidden, classes);
  // Start from a low prior on every cell, as is usual for focal-loss heads.
  heat_b_ = store.constant(prefix + ".heat.b", {classes}, heat_bias);
  reg_w_ = store.glorot(prefix + ".reg.w", {k_regression_channels, hidden, 1, 1}, hidden, k_regression_channels);
  reg_b_ = store.zeros(prefix + ".reg.b", {k_regression_channels});
}

HeadOutput DetectionHead::forward(const Tensor& bev) const {
  Tensor x = relu(conv2d(bev, w1_, b1_, 1, 1));
  x = relu(conv2d(x, w2_, b2_, 1, 1));
  return {sigmoid(conv2d(x, heat_w_, heat_b_)), conv2d(x, reg_w_, reg_b_)};
}

int gaussian_radius(const Box3D& box, const BevSpec& spec) {
  const double diag = 0.5 * std::hypot(box.l, box.w) / spec.res;
  return std::max(1, static_cast<int>(std::lround(diag)));
}

DetectionTargets make_targets(const std::vector<Box3D>& boxes, const BevSpec& spec, std::size_t classes) {
  DetectionTargets t;
  t.classes = classes;
  t.h = spec.h;
  t.w = spec.w;
  const std::size_t plane = spec.h * spec.w;
  t.heatmap.assign(classes * plane, 0.0);
  t.regression.assign(k_regression_channels * plane, 0.0);
  t.mask.assign(plane, 0.0);
  for (const auto& b : boxes) {
    if (b.class_id < 0 || static_cast<std::size_t>(b.class_id) >= classes) continue;
    const double qh = std::floor((b.x - spec.x_min) / spec.res);
    const double qw = std::floor((b.y - spec.y_min) / spec.res);
    if (qh < 0 || qw < 0 || qh >= static_cast<double>(spec.h) || qw >= static_cast<double>(spec.w)) continue;
    const auto ch = static_cast<long>(qh), cw = static_cast<long>(qw);
    const int r = gaussian_radius(b, spec);
    const double sigma = (2.0 * r + 1.0) / 6.0;
    double* hm = t.heatmap.data() + static_cast<std::size_t>(b.class_id) * plane;
    for (long i = ch - r; i <= ch + r; ++i)
      for (long j = cw - r; j <= cw + r; ++j) {
        if (i < 0 || j < 0 || i >= static_cast<long>(spec.h) || j >= static_cast<long>(spec.w)) continue;
        const double d2 = static_cast<double>((i - ch) * (i - ch) + (j - cw) * (j - cw));
        double& cell = hm[static_cast<std::size_t>(i) * spec.w + static_cast<std::size_t>(j)];
        cell = std::max(cell, std::exp(-d2 / (2.0 * sigma * sigma)));
      }
    const std::size_t c = static_cast<std::size_t>(ch) * spec.w + static_cast<std::size_t>(cw);
    if (t.mask[c] == 0.0) ++t.positives;
    t.mask[c] = 1.0;
    const double vals[k_regression_channels] = {(b.x - spec.cell_x(qh)) / spec.res,
                                                (b.y - spec.cell_y(qw)) / spec.res,
                                                b.z,
                                                std::log(b.l),
                                                std::log(b.w),
                                                std::log(b.h),
                                                std::sin(b.yaw),
                                                std::cos(b.yaw)};
    for (std::size_t k = 0; k < k_regression_channels; ++k) t.regression[k * plane + c] = vals[k];
  }
  return t;
}

DetectionLosses detection_loss(const HeadOutput& pred, const DetectionTargets& t) {
  const Shape hs = pred.heatmap.shape();
  if (pred.heatmap.numel() != t.heatmap.size() || pred.regression.numel() != t.regression.size()) {
    throw DimensionError("detection_loss: prediction " + shape_str(hs) + " does not match the targets");
  }
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, t.positives));
  std::vector<double> pos(t.heatmap.size()), neg(t.heatmap.size());
  for (std::size_t i = 0; i < t.heatmap.size(); ++i) {
    const bool is_pos = t.heatmap[i] == 1.0;
    pos[i] = is_pos ? 1.0 : 0.0;
    neg[i] = is_pos ? 0.0 : std::pow(1.0 - t.heatmap[i], 4.0);
  }
  const Tensor p = clamp(pred.heatmap, 1e-4, 1.0 - 1e-4);
  const Tensor q = one_minus(p);
  const Tensor pos_term = mul(mul(mul(q, q), log(p)), Tensor::from(hs, std::move(pos)));
  const Tensor neg_term = mul(mul(mul(p, p), log(q)), Tensor::from(hs, std::move(neg)));
  DetectionLosses out;
  out.heatmap = scale(sum(add(pos_term, neg_term)), -norm);

  const Shape rs = pred.regression.shape();
  const std::size_t plane = t.h * t.w;
  std::vector<double> mask(t.regression.size());
  for (std::size_t k = 0; k < k_regression_channels; ++k)
    for (std::size_t c = 0; c < plane; ++c) mask[k * plane + c] = t.mask[c];
  const Tensor diff = sub(pred.regression, Tensor::from(rs, t.regression));
  out.regression = scale(sum(mul(abs(diff), Tensor::from(rs, std::move(mask)))), norm);
  out.total = add(out.heatmap, scale(out.regression, 0.25));
  return out;
}

std::vector<Box3D> decode(const HeadOutput& pred, const BevSpec& spec, double score_thresh, std::size_t max_dets) {
  const std::size_t k = pred.heatmap.dim(0), h = pred.heatmap.dim(1), w = pred.heatmap.dim(2), plane = h * w;
  const auto hm = pred.heatmap.values();
  const auto reg = pred.regression.values();
  std::vector<Box3D> out;
  for (std::size_t cls = 0; cls < k; ++cls)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t c = i * w + j;
        const double s = hm[cls * plane + c];
        if (!(s >= score_thresh)) continue;
        bool peak = true;
        for (long di = -1; di <= 1 && peak; ++di)
          for (long dj = -1; dj <= 1; ++dj) {
            const long ni = static_cast<long>(i) + di, nj = static_cast<long>(j) + dj;
            if ((di == 0 && dj == 0) || ni < 0 || nj < 0 || ni >= static_cast<long>(h) || nj >= static_cast<long>(w))
              continue;
            const double v = hm[cls * plane + static_cast<std::size_t>(ni) * w + static_cast<std::size_t>(nj)];
            // Ties go to the cell that comes first in raster order.
            const bool earlier = di < 0 || (di == 0 && dj < 0);
            if (v > s || (v == s && earlier)) {
              peak = false;
              break;
            }
          }
        if (!peak) continue;
        Box3D b;
        b.x = spec.cell_x(static_cast<double>(i)) + reg[0 * plane + c] * spec.res;
        b.y = spec.cell_y(static_cast<double>(j)) + reg[1 * plane + c] * spec.res;
        b.z = reg[2 * plane + c];
        b.l = std::exp(reg[3 * plane + c]);
        b.w = std::exp(reg[4 * plane + c]);
        b.h = std::exp(reg[5 * plane + c]);
        b.yaw = normalize_yaw(std::atan2(reg[6 * plane + c], reg[7 * plane + c]));
        b.class_id = static_cast<int>(cls);
        b.score = s;
        out.push_back(b);
      }
  std::stable_sort(out.begin(), out.end(), [](const Box3D& a, const Box3D& b) { return a.score > b.score; });
  if (out.size() > max_dets) out.resize(max_dets);
  return out;
}

std::vector<std::array<double, 2>> box_corners(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = b.l / 2.0, hw = b.w / 2.0;
  const double local[4][2] = {{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}};
  std::vector<std::array<double, 2>> out;
  for (const auto& p : local) out.push_back({b.x + c * p[0] - s * p[1], b.y + s * p[0] + c * p[1]});
  return out;
}

double polygon_area(const std::vector<std::array<double, 2>>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p[0] * q[1] - q[0] * p[1];
  }
  return 0.5 * std::fabs(a);
}

std::vector<std::array<double, 2>> clip_convex(const std::vector<std::array<double, 2>>& subject,
                                               const std::vector<std::array<double, 2>>& clip) {
  std::vector<std::array<double, 2>> out = subject;
  for (std::size_t e = 0; e < clip.size() && !out.empty(); ++e) {
    const auto a = clip[e];
    const auto b = clip[(e + 1) % clip.size()];
    auto side = [&](const std::array<double, 2>& p) {
      return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    };
    std::vector<std::array<double, 2>> in = std::move(out);
    out.clear();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const auto& p = in[i];
      const auto& q = in[(i + 1) % in.size()];
      const double sp = side(p), sq = side(q);
      if (sp >= 0) out.push_back(p);
      if ((sp >= 0) != (sq >= 0)) {
        const double t = sp / (sp - sq);
        out.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
      }
    }
  }
  return out;
}

double rotated_bev_iou(const Box3D& a, const Box3D& b) {
  const auto pa = box_corners(a), pb = box_corners(b);
  const auto inter_poly = clip_convex(pa, pb);
  const double inter = inter_poly.size() >= 3 ? polygon_area(inter_poly) : 0.0;
  const double uni = a.l * a.w + b.l * b.w - inter;
  if (!(uni > 0.0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double average_precision(const std::vector<FrameBox>& preds, const std::vector<FrameBox>& gts, double iou_thresh,
                         int class_id) {
  std::vector<const FrameBox*> gt;
  for (const auto& g : gts)
    if (g.box.class_id == class_id) gt.push_back(&g);
  std::vector<const FrameBox*> pr;
  for (const auto& p : preds)
    if (p.box.class_id == class_id) pr.push_back(&p);
  if (gt.empty() || pr.empty()) return 0.0;
  std::stable_sort(pr.begin(), pr.end(), [](const FrameBox* a, const FrameBox* b) { return a->box.score > b->box.score; });
  std::vector<bool> used(gt.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < pr.size(); ++i) {
    double best = -1.0;
    std::size_t best_j = gt.size();
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (used[j] || gt[j]->frame_id != pr[i]->frame_id) continue;
      const double iou = rotated_bev_iou(pr[i]->box, gt[j]->box);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best_j < gt.size() && best >= iou_thresh) {
      used[best_j] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gt.size()));
  }
  // Precision envelope, then area under the recall staircase.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  return ap;
}

std::string boxes_to_jsonl(const std::vector<FrameBox>& boxes) {
  std::ostringstream os;
  for (const auto& fb : boxes) {
    const auto& b = fb.box;
    nlohmann::json j = {{"frame_id", fb.frame_id}, {"class", b.class_id}, {"score", b.score}, {"x", b.x},
                        {"y", b.y},                {"z", b.z},            {"l", b.l},         {"w", b.w},
                        {"h", b.h},                {"yaw", b.yaw}};
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<FrameBox> boxes_from_jsonl(const std::string& text) {
  std::vector<FrameBox> out;
  std::istringstream is(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      FrameBox fb;
      fb.frame_id = j.at("frame_id").get<std::int64_t>();
      fb.box.class_id = j.at("class").get<int>();
      fb.box.score = j.at("score").get<double>();
      fb.box.x = j.at("x").get<double>();
      fb.box.y = j.at("y").get<double>();
      fb.box.z = j.at("z").get<double>();
      fb.box.l = j.at("l").get<double>();
      fb.box.w = j.at("w").get<double>();
      fb.box.h = j.at("h").get<double>();
      fb.box.yaw = j.at("yaw").get<double>();
      out.push_back(fb);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("box line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace bevfuse
