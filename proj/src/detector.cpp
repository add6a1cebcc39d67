#include "psearch/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace psearch {

namespace {

constexpr real kFocalAlpha = 0.25;
constexpr real kFocalGamma = 2.0;
constexpr real kRegClamp = 8.0;

inline real sigmoid(real x) { return 1.0 / (1.0 + std::exp(-x)); }
inline real softplus(real x) { return x > 30 ? x : std::log1p(std::exp(x)); }

// -log sigmoid(z) and -log sigmoid(-z), numerically stable
inline real log_p(real z) { return -softplus(-z); }
inline real log_1mp(real z) { return -softplus(z); }

struct CellAssign {
  int gt = -1;  // assigned GT index, -1 for negatives
};

std::vector<CellAssign> assign_cells(const DensePreds& preds, const std::vector<Box>& gt) {
  const int gh = preds.objectness.h();
  const int gw = preds.objectness.w();
  std::vector<CellAssign> assign(static_cast<std::size_t>(gh) * gw);
  for (int i = 0; i < gh; ++i) {
    for (int j = 0; j < gw; ++j) {
      const real cx = (j + 0.5) * preds.stride;
      const real cy = (i + 0.5) * preds.stride;
      int best = -1;
      real best_d2 = std::numeric_limits<real>::max();
      for (std::size_t g = 0; g < gt.size(); ++g) {
        if (cx <= gt[g].x1 || cx >= gt[g].x2 || cy <= gt[g].y1 || cy >= gt[g].y2) continue;
        const real dx = cx - gt[g].center_x();
        const real dy = cy - gt[g].center_y();
        const real d2 = dx * dx + dy * dy;
        if (d2 < best_d2) {
          best_d2 = d2;
          best = static_cast<int>(g);
        }
      }
      assign[static_cast<std::size_t>(i) * gw + j].gt = best;
    }
  }
  return assign;
}

Box decode_cell(const DensePreds& preds, int i, int j) {
  const real cx = (j + 0.5) * preds.stride;
  const real cy = (i + 0.5) * preds.stride;
  real d[4];
  for (int k = 0; k < 4; ++k) {
    const real raw = std::clamp(preds.box_reg.at(0, k, i, j), -kRegClamp, kRegClamp);
    d[k] = std::exp(raw) * preds.stride;
  }
  return Box{cx - d[0], cy - d[1], cx + d[2], cy + d[3]};
}

}  // namespace

void DetectorConfig::validate() const {
  layer1.validate();
  layer2.validate();
  if (layer2.in_channels != layer1.out_channels)
    throw ConfigError("DetectorConfig: layer2 input channels must match layer1 output");
  if (head_channels < 1) throw ConfigError("DetectorConfig: head_channels must be positive");
  if (!(score_threshold > 0 && score_threshold < 1))
    throw ConfigError("DetectorConfig: score_threshold must be in (0,1)");
  if (!(nms_iou > 0 && nms_iou < 1)) throw ConfigError("DetectorConfig: nms_iou must be in (0,1)");
  if (max_detections < 1) throw ConfigError("DetectorConfig: max_detections must be positive");
}

DetectionNet::DetectionNet(const DetectorConfig& cfg, int in_channels, Rng& rng) : cfg_(cfg) {
  cfg_.layer1.in_channels = in_channels;
  cfg_.validate();
  layer1_ = Stage(cfg_.layer1);
  layer2_ = Stage(cfg_.layer2);
  head_stage_ = Stage(StageSpec{cfg_.layer2.out_channels, cfg_.head_channels, 2, false});
  obj_conv_ = Conv2d(cfg_.head_channels, 1, 1);
  reg_conv_ = Conv2d(cfg_.head_channels, 4, 1);
  Rng r1 = rng.substream("det.layer1");
  Rng r2 = rng.substream("det.layer2");
  Rng r3 = rng.substream("det.head");
  Rng r4 = rng.substream("det.obj");
  Rng r5 = rng.substream("det.reg");
  layer1_.init(r1);
  layer2_.init(r2);
  head_stage_.init(r3);
  obj_conv_.init(r4);
  reg_conv_.init(r5);
}

DetectionNet::Forward DetectionNet::forward(const FeatureMap& x0) {
  check_feature_map(x0, "DetectionNet");
  last_h_ = x0.data.h() * x0.stride;
  last_w_ = x0.data.w() * x0.stride;
  Forward f;
  f.tap1 = layer1_.forward(x0);
  f.tap2 = layer2_.forward(f.tap1);
  Tensor h = head_stage_.forward(f.tap2.data);
  f.preds.objectness = obj_conv_.forward(h);
  f.preds.box_reg = reg_conv_.forward(h);
  f.preds.stride = f.tap2.stride;
  f.preds.image_h = last_h_;
  f.preds.image_w = last_w_;
  return f;
}

Tensor DetectionNet::backward(const Tensor* gobj, const Tensor* gbox, const Tensor* gtap1,
                              const Tensor* gtap2) {
  Tensor g2;  // gradient flowing into layer2's output
  if (gobj || gbox) {
    Tensor gh;
    if (gobj) gh = obj_conv_.backward(*gobj);
    if (gbox) {
      Tensor gh2 = reg_conv_.backward(*gbox);
      if (gh.empty()) {
        gh = std::move(gh2);
      } else {
        gh.axpy(gh2, 1.0);
      }
    }
    g2 = head_stage_.backward(gh);
  }
  if (gtap2) {
    if (g2.empty()) {
      g2 = *gtap2;
    } else {
      g2.axpy(*gtap2, 1.0);
    }
  }
  Tensor g1 = layer2_.backward(g2);
  if (gtap1) g1.axpy(*gtap1, 1.0);
  return layer1_.backward(g1);
}

void DetectionNet::register_params(const std::string& prefix, ParamRefs& out) {
  layer1_.register_params(prefix + ".layer1", out);
  layer2_.register_params(prefix + ".layer2", out);
  head_stage_.register_params(prefix + ".head.stage", out);
  obj_conv_.register_params(prefix + ".head.obj", out);
  reg_conv_.register_params(prefix + ".head.reg", out);
}

DetectionLoss detection_loss(const DensePreds& preds, const std::vector<Box>& gt_boxes,
                             bool with_grads) {
  const int gh = preds.objectness.h();
  const int gw = preds.objectness.w();
  const auto assign = assign_cells(preds, gt_boxes);
  const int num_pos =
      static_cast<int>(std::count_if(assign.begin(), assign.end(), [](const CellAssign& a) {
        return a.gt >= 0;
      }));
  const real norm = std::max(1, num_pos);

  DetectionLoss out;
  out.num_pos = num_pos;
  if (with_grads) {
    out.gobj = Tensor(1, 1, gh, gw);
    out.gbox = Tensor(1, 4, gh, gw);
  }

  real cls = 0, box = 0;
  for (int i = 0; i < gh; ++i) {
    for (int j = 0; j < gw; ++j) {
      const real z = preds.objectness.at(0, 0, i, j);
      const real p = sigmoid(z);
      const bool pos = assign[static_cast<std::size_t>(i) * gw + j].gt >= 0;
      if (pos) {
        cls += -kFocalAlpha * std::pow(1 - p, kFocalGamma) * log_p(z);
        if (with_grads) {
          out.gobj.at(0, 0, i, j) = kFocalAlpha * std::pow(1 - p, kFocalGamma) *
                                    (kFocalGamma * p * log_p(z) - (1 - p)) / norm;
        }
      } else {
        cls += -(1 - kFocalAlpha) * std::pow(p, kFocalGamma) * log_1mp(z);
        if (with_grads) {
          out.gobj.at(0, 0, i, j) = (1 - kFocalAlpha) * std::pow(p, kFocalGamma) *
                                    (p - kFocalGamma * (1 - p) * log_1mp(z)) / norm;
        }
      }
      if (!pos) continue;

      const Box& g = gt_boxes[assign[static_cast<std::size_t>(i) * gw + j].gt];
      const Box b = decode_cell(preds, i, j);
      const real ix1 = std::max(b.x1, g.x1);
      const real iy1 = std::max(b.y1, g.y1);
      const real ix2 = std::min(b.x2, g.x2);
      const real iy2 = std::min(b.y2, g.y2);
      const real iw = std::max(0.0, ix2 - ix1);
      const real ih = std::max(0.0, iy2 - iy1);
      const real inter = iw * ih;
      const real uni = b.area() + g.area() - inter;
      const real v = inter / uni;
      box += (1 - v);
      if (!with_grads) continue;

      // d(iou)/d(pred corner), then chain through corner = center -/+ exp(raw)*stride
      const real dI_dx1 = (iw > 0 && ih > 0 && b.x1 > g.x1) ? -ih : 0.0;
      const real dI_dy1 = (iw > 0 && ih > 0 && b.y1 > g.y1) ? -iw : 0.0;
      const real dI_dx2 = (iw > 0 && ih > 0 && b.x2 < g.x2) ? ih : 0.0;
      const real dI_dy2 = (iw > 0 && ih > 0 && b.y2 < g.y2) ? iw : 0.0;
      const real hp = b.height();
      const real wp = b.width();
      // dA/dcorner: dA/dx1 = -hp, dA/dx2 = hp, dA/dy1 = -wp, dA/dy2 = wp
      const real dU_dx1 = -hp - dI_dx1;
      const real dU_dy1 = -wp - dI_dy1;
      const real dU_dx2 = hp - dI_dx2;
      const real dU_dy2 = wp - dI_dy2;
      const real u2 = uni * uni;
      const real dv_dx1 = (dI_dx1 * uni - inter * dU_dx1) / u2;
      const real dv_dy1 = (dI_dy1 * uni - inter * dU_dy1) / u2;
      const real dv_dx2 = (dI_dx2 * uni - inter * dU_dx2) / u2;
      const real dv_dy2 = (dI_dy2 * uni - inter * dU_dy2) / u2;
      // corners: x1 = cx - l, y1 = cy - t, x2 = cx + r, y2 = cy + b
      // with dist = exp(raw)*stride => d(dist)/d(raw) = dist (zero when clamped)
      const real dv_draw[4] = {-dv_dx1, -dv_dy1, dv_dx2, dv_dy2};
      for (int k = 0; k < 4; ++k) {
        const real raw = preds.box_reg.at(0, k, i, j);
        const real dist = std::exp(std::clamp(raw, -kRegClamp, kRegClamp)) * preds.stride;
        const real clamped = (raw < -kRegClamp || raw > kRegClamp) ? 0.0 : 1.0;
        out.gbox.at(0, k, i, j) = -dv_draw[k] * dist * clamped / norm;
      }
    }
  }
  out.cls = cls / norm;
  out.box = num_pos > 0 ? box / num_pos : 0.0;
  out.total = out.cls + out.box;
  return out;
}

std::vector<Detection> decode_and_nms(const DensePreds& preds, const DetectorConfig& cfg) {
  std::vector<Detection> dets;
  const int gh = preds.objectness.h();
  const int gw = preds.objectness.w();
  for (int i = 0; i < gh; ++i) {
    for (int j = 0; j < gw; ++j) {
      const real score = sigmoid(preds.objectness.at(0, 0, i, j));
      if (score < cfg.score_threshold) continue;
      Box b = decode_cell(preds, i, j);
      b.x1 = std::clamp(b.x1, 0.0, static_cast<real>(preds.image_w));
      b.x2 = std::clamp(b.x2, 0.0, static_cast<real>(preds.image_w));
      b.y1 = std::clamp(b.y1, 0.0, static_cast<real>(preds.image_h));
      b.y2 = std::clamp(b.y2, 0.0, static_cast<real>(preds.image_h));
      if (!b.valid()) continue;
      dets.push_back(Detection{b, score});
    }
  }
  return nms(std::move(dets), cfg.nms_iou, cfg.max_detections);
}

std::vector<Detection> nms(std::vector<Detection> dets, real iou_thresh, int max_out) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou(d.box, k.box) >= iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(d);
      if (static_cast<int>(kept.size()) >= max_out) break;
    }
  }
  return kept;
}

}  // namespace psearch
