#include "psearch/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace psearch {

real iou(const Box& a, const Box& b) {
  const real ix1 = std::max(a.x1, b.x1);
  const real iy1 = std::max(a.y1, b.y1);
  const real ix2 = std::min(a.x2, b.x2);
  const real iy2 = std::min(a.y2, b.y2);
  const real iw = ix2 - ix1;
  const real ih = iy2 - iy1;
  if (iw <= 0 || ih <= 0) return 0.0;
  const real inter = iw * ih;
  const real uni = a.area() + b.area() - inter;
  return inter / uni;
}

void SnaConfig::validate() const {
  if (!(lambda1 > 0 && lambda1 < 1)) throw ConfigError("SnaConfig: lambda1 must be in (0,1)");
  if (!(lambda2 > 0 && lambda2 < 1)) throw ConfigError("SnaConfig: lambda2 must be in (0,1)");
  if (n <= 0) throw ConfigError("SnaConfig: n must be positive");
}

std::vector<Box> sna_augment(const Box& b, const SnaConfig& cfg, Rng& rng,
                             const std::optional<ClipRect>& clip, int* degenerate_fallbacks) {
  cfg.validate();
  if (!b.valid()) throw InputError("sna_augment: invalid box");

  const real cx = b.center_x();
  const real cy = b.center_y();
  const real wb = b.width();
  const real hb = b.height();

  std::vector<Box> out;
  out.reserve(cfg.n);
  for (int i = 0; i < cfg.n; ++i) {
    const real dx = rng.uniform(-cfg.lambda1 * wb / 2, cfg.lambda1 * wb / 2);
    const real dy = rng.uniform(-cfg.lambda1 * hb / 2, cfg.lambda1 * hb / 2);
    const real w = rng.uniform((1 - cfg.lambda2) * wb, (1 + cfg.lambda2) * wb);
    const real h = rng.uniform((1 - cfg.lambda2) * hb, (1 + cfg.lambda2) * hb);
    Box a = Box::from_center(cx + dx, cy + dy, w, h);
    if (clip) {
      a.x1 = std::clamp(a.x1, 0.0, clip->width);
      a.x2 = std::clamp(a.x2, 0.0, clip->width);
      a.y1 = std::clamp(a.y1, 0.0, clip->height);
      a.y2 = std::clamp(a.y2, 0.0, clip->height);
      if (!a.valid()) {
        a = b;  // degenerate after clipping: fall back to the GT box
        if (degenerate_fallbacks) ++*degenerate_fallbacks;
      }
    }
    out.push_back(a);
  }
  return out;
}

std::vector<GridPoint> roi_grid(const Box& b, int out_h, int out_w) {
  if (!b.valid()) throw InputError("roi_grid: invalid box");
  if (out_h < 1 || out_w < 1) throw InputError("roi_grid: output size must be >= 1");
  const real bin_h = b.height() / out_h;
  const real bin_w = b.width() / out_w;
  std::vector<GridPoint> grid;
  grid.reserve(static_cast<std::size_t>(out_h) * out_w);
  for (int i = 0; i < out_h; ++i) {
    for (int j = 0; j < out_w; ++j) {
      grid.push_back(GridPoint{b.x1 + (j + 0.5) * bin_w, b.y1 + (i + 0.5) * bin_h});
    }
  }
  return grid;
}

}  // namespace psearch
