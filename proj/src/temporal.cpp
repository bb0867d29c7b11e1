#include "bevfuse/temporal.hpp"

#include "bevfuse/error.hpp"
#include "bevfuse/ops.hpp"

namespace bevfuse {

BevBuffer::BevBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("BEV buffer capacity must be at least 1");
}

void BevBuffer::push(std::int64_t frame_id, const EgoPose& pose, const Tensor& bev) {
  if (!entries_.empty() && frame_id <= entries_.back().frame_id) {
    throw ContractError("BEV buffer push: frame id " + std::to_string(frame_id) + " does not follow " +
                        std::to_string(entries_.back().frame_id));
  }
  entries_.push_back({frame_id, pose, bev.detach()});
  while (entries_.size() > capacity_) entries_.pop_front();
}

const BevRecord& BevBuffer::latest() const {
  if (entries_.empty()) throw ContractError("BEV buffer is empty");
  return entries_.back();
}

TemporalFusion::TemporalFusion(ParameterStore& store, const std::string& prefix, std::size_t channels) {
  w_ = store.glorot(prefix + ".w", {channels, 2 * channels, 1, 1}, 2 * channels, channels);
  b_ = store.zeros(prefix + ".b", {channels});
}

Tensor TemporalFusion::fuse(const BevBuffer& buffer, const EgoPose& cur_pose, const Tensor& cur_bev,
                            const BevSpec& spec) const {
  Tensor prev = cur_bev;
  if (!buffer.empty()) {
    const auto& rec = buffer.latest();
    if (rec.bev.shape() != cur_bev.shape()) throw DimensionError("temporal fusion: history grid shape changed");
    prev = warp_bev(rec.bev, spec, rec.pose, cur_pose);
  }
  return conv2d(concat({cur_bev, prev}, 0), w_, b_);
}

}  // namespace bevfuse
