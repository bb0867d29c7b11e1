#pragma once

#include <cstdint>
#include <deque>
#include <string>

#include "bevfuse/geometry.hpp"
#include "bevfuse/params.hpp"

namespace bevfuse {

struct BevRecord {
  std::int64_t frame_id = 0;
  EgoPose pose;
  Tensor bev;  // detached: history never receives gradients
};

/// FIFO of past BEV maps. Single owner; not thread-safe.
class BevBuffer {
 public:
  explicit BevBuffer(std::size_t capacity = 1);

  /// Throws ContractError unless frame_id is greater than the last one stored.
  void push(std::int64_t frame_id, const EgoPose& pose, const Tensor& bev);
  void reset() { entries_.clear(); }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const BevRecord& latest() const;
  const std::deque<BevRecord>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<BevRecord> entries_;
};

/// concat(current, previous warped into the current frame) -> 1x1 conv back
/// to C. With an empty buffer the current map stands in for its own history.
class TemporalFusion {
 public:
  TemporalFusion(ParameterStore& store, const std::string& prefix, std::size_t channels);

  Tensor fuse(const BevBuffer& buffer, const EgoPose& cur_pose, const Tensor& cur_bev, const BevSpec& spec) const;

 private:
  Tensor w_, b_;
};

}  // namespace bevfuse
