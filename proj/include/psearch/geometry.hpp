#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "psearch/rng.hpp"
#include "psearch/tensor.hpp"

namespace psearch {

/// Axis-aligned person bounding box in continuous image coordinates.
/// Corner format (x1, y1, x2, y2) is the canonical storage; the center/size
/// view is computed.
struct Box {
  real x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  real width() const { return x2 - x1; }
  real height() const { return y2 - y1; }
  real center_x() const { return 0.5 * (x1 + x2); }
  real center_y() const { return 0.5 * (y1 + y2); }
  real area() const { return width() * height(); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  static Box from_center(real cx, real cy, real w, real h) {
    return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }
};

real iou(const Box& a, const Box& b);

/// Spatial-noise Augmentation settings: bounded center shifts and size
/// scalings applied to GT boxes to stand in for detector box jitter.
struct SnaConfig {
  real lambda1 = 0.2;  // center-shift scale, in (0,1)
  real lambda2 = 0.2;  // size-scale range, in (0,1)
  int n = 4;           // augmented copies per GT box
  std::uint64_t seed = 0;

  void validate() const;
};

struct ClipRect {
  real width = 0, height = 0;  // image bounds [0,width] x [0,height]
};

/// Draw n noised copies of b. Center shifts are uniform on
/// (-lambda1*w/2, lambda1*w/2) x (-lambda1*h/2, lambda1*h/2) and sizes
/// uniform on [(1-lambda2)*s, (1+lambda2)*s]. When a clip rectangle is
/// given, outputs are clipped to it; a copy that degenerates to zero area
/// after clipping is replaced by the unaugmented GT box and counted in
/// degenerate_fallbacks.
std::vector<Box> sna_augment(const Box& b, const SnaConfig& cfg, Rng& rng,
                             const std::optional<ClipRect>& clip = std::nullopt,
                             int* degenerate_fallbacks = nullptr);

struct GridPoint {
  real x = 0, y = 0;
};

/// Bilinear sampling grid for region pooling: out_h x out_w points placed
/// at the centers of a uniform bin partition of b, row-major. Every point
/// lies strictly inside the box.
std::vector<GridPoint> roi_grid(const Box& b, int out_h, int out_w);

}  // namespace psearch
