#include "bevfuse/model.hpp"

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

namespace {

// Re-raises library errors with the failing module's name in front, keeping the error type.
template <class F>
auto in_module(const char* name, F&& f) {
  const auto where = [name](const std::exception& e) { return std::string(name) + ": " + e.what(); };
  try {
    return f();
  } catch (const DimensionError& e) {
    throw DimensionError(where(e));
  } catch (const ContractError& e) {
    throw ContractError(where(e));
  } catch (const ConfigError& e) {
    throw ConfigError(where(e));
  } catch (const NumericError& e) {
    throw NumericError(where(e));
  }
}

PipelineConfig checked(PipelineConfig cfg) {
  cfg.sync();
  cfg.validate();
  return cfg;
}

}  // namespace

Model::Model(const PipelineConfig& cfg)
    : cfg_(checked(cfg)),
      store_(cfg_.seed),
      encoder_(store_, "lidar", cfg_.sparse, cfg_.voxel.grid_shape()),
      camera_(store_, "camera", cfg_.camera),
      fusion_(store_, "fusion", cfg_.fusion),
      head_(store_, "head", cfg_.fusion.out_channels, cfg_.head_hidden, cfg_.classes, cfg_.heat_bias) {
  const std::size_t c_vol = cfg_.camera.volume_channels, z = cfg_.volume.z, c_bev = cfg_.sparse.bev_channels;
  if (cfg_.log) guidance_.emplace(store_, "guidance", c_bev, c_vol, z);
  if (cfg_.msdpt_scales > 0) msdpt_.emplace(store_, "msdpt", cfg_.msdpt);
  cam_bev_w_ = store_.glorot("camera_bev.w", {c_bev, c_vol * z, 1, 1}, c_vol * z, c_bev);
  cam_bev_b_ = store_.zeros("camera_bev.b", {c_bev});
  if (cfg_.temporal) temporal_.emplace(store_, "temporal", cfg_.fusion.out_channels);
}

PreparedFrame Model::prepare(const Frame& frame) const {
  PreparedFrame p;
  p.frame_id = frame.frame_id;
  p.ego = frame.ego;
  p.images = frame.images.detach();
  p.cameras = frame.cameras;
  p.gt_boxes = frame.gt_boxes;
  if (p.images.rank() != 4 || p.images.dim(0) != p.cameras.size())
    throw DimensionError("frame " + std::to_string(frame.frame_id) + ": images " + shape_str(p.images.shape()) +
                         " do not match " + std::to_string(p.cameras.size()) + " cameras");
  p.voxels = voxelize(frame.points, cfg_.voxel);
  for (const auto& cam : p.cameras) {
    p.depth.push_back(rasterize_sparse_depth(project_points(frame.points, cam), cam.height, cam.width));
    p.depth_targets.push_back(depth_targets(p.depth.back(), k_feature_stride, cfg_.camera.bins));
  }
  p.occupancy = occupancy_ground_truth(frame.points, cfg_.volume);
  p.targets = make_targets(frame.gt_boxes, cfg_.volume.bev, cfg_.classes);
  p.plans = make_lift_plans(p.cameras, p.images.dim(2) / k_feature_stride, p.images.dim(3) / k_feature_stride,
                            cfg_.camera.bins, cfg_.volume);
  return p;
}

ForwardResult Model::forward(const PreparedFrame& f, BevBuffer& buffer, bool lidar_only) const {
  const auto& bev_spec = cfg_.volume.bev;
  ForwardResult r;
  const Tensor lidar_bev = in_module("lidar stream", [&] { return encoder_.forward(f.voxels); });

  Tensor camera_bev, depth_dist, occupancy;
  if (lidar_only) {
    camera_bev = Tensor::zeros(lidar_bev.shape());
  } else {
    Tensor vol = in_module("camera stream", [&] {
      const auto mv = camera_.image_backbone(f.images, f.cameras);
      // SDG off: the depth branch is replaced by zeros, so the mixing conv sees image features only.
      const Tensor depth_feats =
          cfg_.sdg ? camera_.encode_sparse_depth(f.depth)
                   : Tensor::zeros({mv.feats.dim(0), cfg_.camera.depth_channels, mv.feats.dim(2), mv.feats.dim(3)});
      const Tensor aware = camera_.make_depth_aware(mv.feats, depth_feats);
      depth_dist = camera_.predict_depth_distribution(aware);
      return build_feature_volume(camera_.context(aware), depth_dist, f.plans, cfg_.volume);
    });
    if (guidance_) {
      vol = in_module("lidar guidance", [&] {
        occupancy = guidance_->occupancy_head(guidance_->lift_bev_to_3d(lidar_bev));
        return apply_occupancy_gate(vol, occupancy);
      });
    }
    if (msdpt_) vol = in_module("msdpt", [&] { return msdpt_->forward(vol); });
    camera_bev = in_module("camera height compression", [&] {
      return conv2d(reshape(vol, {vol.dim(0) * vol.dim(1), vol.dim(2), vol.dim(3)}), cam_bev_w_, cam_bev_b_);
    });
  }

  const Tensor fused = in_module("fusion", [&] { return fusion_.forward(lidar_bev, camera_bev); });
  Tensor bev = fused;
  if (temporal_) {
    bev = in_module("temporal", [&] {
      Tensor out = temporal_->fuse(buffer, f.ego, fused, bev_spec);
      buffer.push(f.frame_id, f.ego, fused);
      return out;
    });
  }

  r.head = in_module("detection head", [&] { return head_.forward(bev); });
  const auto det = detection_loss(r.head, f.targets);
  r.terms.heatmap = det.heatmap.item();
  r.terms.regression = det.regression.item();
  r.terms.detection = det.total.item();
  Tensor loss = scale(det.total, cfg_.w_detection);
  if (depth_dist.defined()) {
    const Tensor d = depth_supervision_loss(depth_dist, f.depth_targets);
    r.terms.depth = d.item();
    loss = add(loss, scale(d, cfg_.w_depth));
  }
  if (occupancy.defined() && cfg_.occ_supervision) {
    const Tensor o = occupancy_loss(occupancy, f.occupancy);
    r.terms.occupancy = o.item();
    loss = add(loss, scale(o, cfg_.w_occupancy));
  }
  r.terms.total = loss.item();
  r.loss = loss;
  r.bev = fused.detach();
  r.detections = decode(r.head, bev_spec, cfg_.score_thresh, cfg_.max_dets);
  return r;
}

}  // namespace bevfuse
