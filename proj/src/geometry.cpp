#include "bevfuse/geometry.hpp"

#include <cmath>
#include <array>
#include <memory>

#include "bevfuse/error.hpp"

namespace bevfuse {

Rigid Rigid::inverse() const {
  Rigid r;
  r.rotation = rotation.transpose();
  r.translation = -(r.rotation * translation);
  return r;
}

Rigid Rigid::operator*(const Rigid& rhs) const {
  Rigid r;
  r.rotation = rotation * rhs.rotation;
  r.translation = rotation * rhs.translation + translation;
  return r;
}

void Rigid::validate(const char* what) const {
  const double err = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!(err <= 1e-9) || std::fabs(rotation.determinant() - 1.0) > 1e-9) {
    throw ContractError(std::string(what) + ": rotation is not orthonormal");
  }
}

Eigen::Matrix3d yaw_rotation(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Eigen::Matrix3d r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

void CameraModel::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw ContractError("camera focal lengths must be positive");
  if (height == 0 || width == 0) throw ContractError("camera image size must be positive");
  ego_to_cam.validate("camera extrinsics");
}

CameraModel make_camera(Eigen::Vector3d position, double yaw, double hfov, std::size_t height, std::size_t width) {
  CameraModel cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = static_cast<double>(width) / (2.0 * std::tan(hfov / 2.0));
  cam.cx = static_cast<double>(width) / 2.0;
  cam.cy = static_cast<double>(height) / 2.0;
  const Eigen::Vector3d forward(std::cos(yaw), std::sin(yaw), 0.0);
  const Eigen::Vector3d right(std::sin(yaw), -std::cos(yaw), 0.0);
  const Eigen::Vector3d down(0.0, 0.0, -1.0);
  cam.ego_to_cam.rotation.row(0) = right;
  cam.ego_to_cam.rotation.row(1) = down;
  cam.ego_to_cam.rotation.row(2) = forward;
  cam.ego_to_cam.translation = -(cam.ego_to_cam.rotation * position);
  return cam;
}

EgoPose make_planar_pose(double x, double y, double yaw, double timestamp) {
  EgoPose p;
  p.ego_to_world.rotation = yaw_rotation(yaw);
  p.ego_to_world.translation = Eigen::Vector3d(x, y, 0.0);
  p.timestamp = timestamp;
  return p;
}

std::vector<Projection> project_points(const PointCloud& points, const CameraModel& cam) {
  std::vector<Projection> out;
  const double w = static_cast<double>(cam.width), h = static_cast<double>(cam.height);
  for (const auto& p : points) {
    const Eigen::Vector3d c = cam.ego_to_cam.apply(Eigen::Vector3d(p.x, p.y, p.z));
    if (!(c.z() > 0.0)) continue;
    const double u = cam.fx * c.x() / c.z() + cam.cx;
    const double v = cam.fy * c.y() / c.z() + cam.cy;
    if (u < 0.0 || v < 0.0 || u >= w || v >= h) continue;
    out.push_back({u, v, c.z()});
  }
  return out;
}

Eigen::Vector3d unproject(const CameraModel& cam, double u, double v, double depth) {
  const Eigen::Vector3d c((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
  return cam.ego_to_cam.rotation.transpose() * (c - cam.ego_to_cam.translation);
}

DepthMap rasterize_sparse_depth(const std::vector<Projection>& projections, std::size_t height, std::size_t width) {
  DepthMap m;
  m.height = height;
  m.width = width;
  m.values.assign(height * width, 0.0);
  m.valid.assign(height * width, 0);
  for (const auto& p : projections) {
    if (!(p.depth > 0.0) || p.u < 0.0 || p.v < 0.0) continue;
    const auto c = static_cast<std::size_t>(std::floor(p.u));
    const auto r = static_cast<std::size_t>(std::floor(p.v));
    if (r >= height || c >= width) continue;
    const auto i = r * width + c;
    if (!m.valid[i] || p.depth < m.values[i]) {
      m.values[i] = p.depth;
      m.valid[i] = 1;
    }
  }
  return m;
}

int DepthBins::bin_of(double depth) const {
  const double q = std::floor((depth - min) / width);
  if (!(q >= 0.0) || q >= static_cast<double>(count)) return -1;
  return static_cast<int>(q);
}

kernels::SplatPlan make_lift_plan(const CameraModel& cam, std::size_t feat_h, std::size_t feat_w,
                                  std::size_t feature_stride, const DepthBins& bins, const VolumeSpec& vol) {
  const std::size_t n_pixels = feat_h * feat_w;
  std::vector<std::int32_t> voxel_of(bins.count * n_pixels, -1);
  for (std::size_t b = 0; b < bins.count; ++b)
    for (std::size_t i = 0; i < feat_h; ++i)
      for (std::size_t j = 0; j < feat_w; ++j) {
        const double u = static_cast<double>(feature_stride * j) + static_cast<double>(feature_stride) / 2.0;
        const double v = static_cast<double>(feature_stride * i) + static_cast<double>(feature_stride) / 2.0;
        const auto p = unproject(cam, u, v, bins.center(b));
        const double qx = std::floor((p.x() - vol.bev.x_min) / vol.bev.res);
        const double qy = std::floor((p.y() - vol.bev.y_min) / vol.bev.res);
        const double qz = std::floor((p.z() - vol.z_min) / vol.z_res);
        if (qx < 0 || qy < 0 || qz < 0 || qx >= static_cast<double>(vol.bev.h) ||
            qy >= static_cast<double>(vol.bev.w) || qz >= static_cast<double>(vol.z))
          continue;
        const auto flat = (static_cast<std::size_t>(qz) * vol.bev.h + static_cast<std::size_t>(qx)) * vol.bev.w +
                          static_cast<std::size_t>(qy);
        voxel_of[b * n_pixels + i * feat_w + j] = static_cast<std::int32_t>(flat);
      }
  return kernels::make_splat_plan(n_pixels, bins.count, vol.cells(), std::move(voxel_of));
}

Tensor lift_splat(const Tensor& feat, const Tensor& depth_dist, std::shared_ptr<const kernels::SplatPlan> plan,
                  const VolumeSpec& vol) {
  if (feat.rank() != 3 || depth_dist.rank() != 3 || feat.dim(1) != depth_dist.dim(1) ||
      feat.dim(2) != depth_dist.dim(2)) {
    throw DimensionError("lift_splat: features " + shape_str(feat.shape()) + " and depth " +
                         shape_str(depth_dist.shape()) + " are not aligned");
  }
  const std::size_t c = feat.dim(0), d = depth_dist.dim(0), n_pix = feat.dim(1) * feat.dim(2);
  if (plan->n_pixels != n_pix || plan->n_bins != d || plan->n_voxels != vol.cells()) {
    throw DimensionError("lift_splat: plan does not match the feature map / volume");
  }
  const auto& pv = depth_dist.impl()->data;
  for (std::size_t p = 0; p < n_pix; ++p) {
    double s = 0.0;
    for (std::size_t b = 0; b < d; ++b) s += pv[b * n_pix + p];
    if (!(std::fabs(s - 1.0) <= 1e-9)) {
      throw ContractError("lift_splat: depth distribution column " + std::to_string(p) + " sums to " +
                          std::to_string(s));
    }
  }
  std::vector<double> out(c * vol.cells());
  kernels::splat_forward(*plan, feat.impl()->data.data(), pv.data(), c, out.data());
  auto fi = feat.impl();
  auto di = depth_dist.impl();
  return detail::make_result("lift_splat", {c, vol.z, vol.bev.h, vol.bev.w}, std::move(out), {feat, depth_dist},
                             [fi, di, plan, c](const TensorImpl& o) {
                               double* gf = detail::grad_of(fi);
                               double* gd = detail::grad_of(di);
                               if (!gf && !gd) return;
                               kernels::splat_backward(*plan, o.grad.data(), fi->data.data(), di->data.data(), c, gf,
                                                       gd);
                             });
}

PlanarMotion relative_planar_motion(const EgoPose& prev, const EgoPose& cur) {
  const auto& rp = prev.ego_to_world.rotation;
  const auto& rc = cur.ego_to_world.rotation;
  const double yaw_p = std::atan2(rp(1, 0), rp(0, 0));
  const double yaw_c = std::atan2(rc(1, 0), rc(0, 0));
  const double dyaw = yaw_c - yaw_p;
  const double dx = cur.ego_to_world.translation.x() - prev.ego_to_world.translation.x();
  const double dy = cur.ego_to_world.translation.y() - prev.ego_to_world.translation.y();
  PlanarMotion m;
  m.cos_yaw = std::cos(dyaw);
  m.sin_yaw = std::sin(dyaw);
  const double cp = std::cos(yaw_p), sp = std::sin(yaw_p);
  m.tx = cp * dx + sp * dy;
  m.ty = -sp * dx + cp * dy;
  return m;
}

Tensor warp_bev(const Tensor& prev, const BevSpec& spec, const EgoPose& pose_prev, const EgoPose& pose_cur) {
  return warp_bev(prev, spec, relative_planar_motion(pose_prev, pose_cur));
}

Tensor warp_bev(const Tensor& prev, const BevSpec& spec, const PlanarMotion& m) {
  if (prev.rank() != 3 || prev.dim(1) != spec.h || prev.dim(2) != spec.w) {
    throw DimensionError("warp_bev: grid " + shape_str(prev.shape()) + " does not match the BEV spec");
  }
  const std::size_t c = prev.dim(0), h = spec.h, w = spec.w, plane = h * w;
  // Work in cell units around the metric origin so that an identity motion
  // maps every cell index onto itself exactly.
  const double oh = -spec.x_min / spec.res - 0.5;
  const double ow = -spec.y_min / spec.res - 0.5;
  const double th = m.tx / spec.res, tw = m.ty / spec.res;
  struct Tap {
    std::int32_t src;
    double weight;
  };
  auto taps = std::make_shared<std::vector<std::array<Tap, 4>>>(plane);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double a = static_cast<double>(i) - oh, b = static_cast<double>(j) - ow;
      const double sh = (m.cos_yaw * a - m.sin_yaw * b + th) + oh;
      const double sw = (m.sin_yaw * a + m.cos_yaw * b + tw) + ow;
      const double h0 = std::floor(sh), w0 = std::floor(sw);
      const double fh = sh - h0, fw = sw - w0;
      auto& t = (*taps)[i * w + j];
      int k = 0;
      for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj) {
          const double wt = (di ? fh : 1.0 - fh) * (dj ? fw : 1.0 - fw);
          const double hi = h0 + di, wi = w0 + dj;
          const bool inside = hi >= 0 && wi >= 0 && hi < static_cast<double>(h) && wi < static_cast<double>(w);
          if (inside && wt != 0.0) {
            t[k++] = {static_cast<std::int32_t>(static_cast<std::size_t>(hi) * w + static_cast<std::size_t>(wi)), wt};
          } else {
            t[k++] = {-1, 0.0};
          }
        }
    }
  const auto& pv = prev.impl()->data;
  std::vector<double> out(c * plane, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t q = 0; q < plane; ++q) {
      double acc = 0.0;
      bool any = false;
      for (const auto& t : (*taps)[q]) {
        if (t.src < 0) continue;
        const double v = t.weight * pv[ch * plane + t.src];
        acc = any ? acc + v : v;
        any = true;
      }
      out[ch * plane + q] = acc;
    }
  auto pi = prev.impl();
  return detail::make_result("warp_bev", prev.shape(), std::move(out), {prev}, [pi, taps, c, plane](const TensorImpl& o) {
    double* g = detail::grad_of(pi);
    if (!g) return;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t q = 0; q < plane; ++q)
        for (const auto& t : (*taps)[q])
          if (t.src >= 0) g[ch * plane + t.src] += t.weight * o.grad[ch * plane + q];
  });
}

}  // namespace bevfuse
