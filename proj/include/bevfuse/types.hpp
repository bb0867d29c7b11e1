#pragma once

#include <cstddef>
#include <vector>

#include "bevfuse/tensor.hpp"

namespace bevfuse {

struct Point {
  double x = 0, y = 0, z = 0, intensity = 0;
};
using PointCloud = std::vector<Point>;

/// Metric layout of a bird's-eye grid. Row index h runs along x, column
/// index w along y; cell (h, w) has its center at
/// (x_min + (h + 0.5) * res, y_min + (w + 0.5) * res).
struct BevSpec {
  double x_min = -12.8, y_min = -12.8, res = 3.2;
  std::size_t h = 8, w = 8;

  double x_max() const { return x_min + res * static_cast<double>(h); }
  double y_max() const { return y_min + res * static_cast<double>(w); }
  double cell_x(double hi) const { return x_min + (hi + 0.5) * res; }
  double cell_y(double wi) const { return y_min + (wi + 0.5) * res; }
  bool operator==(const BevSpec&) const = default;
};

/// Dense C x H x W feature map over a BevSpec.
struct BevGrid {
  Tensor values;
  BevSpec spec;
};

/// Camera-side 3D volume: the BEV footprint stacked into z slices.
struct VolumeSpec {
  BevSpec bev;
  double z_min = -1.0, z_res = 0.8;
  std::size_t z = 8;

  double z_max() const { return z_min + z_res * static_cast<double>(z); }
  std::size_t cells() const { return z * bev.h * bev.w; }
  bool operator==(const VolumeSpec&) const = default;
};

}  // namespace bevfuse
