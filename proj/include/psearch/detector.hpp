#pragma once

#include <vector>

#include "psearch/blocks.hpp"
#include "psearch/geometry.hpp"

namespace psearch {

struct Detection {
  Box box;
  real score = 0;  // in [0,1]
};

struct DetectorConfig {
  StageSpec layer1{0, 32, 2, true};   // in_channels filled from the input layer
  StageSpec layer2{32, 48, 2, true};
  int head_channels = 48;
  real score_threshold = 0.05;
  real nms_iou = 0.5;
  int max_detections = 50;

  void validate() const;
};

/// Dense per-location predictions on the stride-16 grid.
struct DensePreds {
  Tensor objectness;  // (1, 1, gh, gw) logits
  Tensor box_reg;     // (1, 4, gh, gw) raw l,t,r,b; decoded as exp(raw) * stride
  int stride = 16;
  int image_h = 0;
  int image_w = 0;
};

/// The detection side-network: two downsampling stages plus a dense
/// anchor-free head (objectness + box regression on the stride-16 grid).
/// Intermediate stage outputs are exposed as taps for side-fusion.
class DetectionNet {
 public:
  DetectionNet() = default;
  DetectionNet(const DetectorConfig& cfg, int in_channels, Rng& rng);

  struct Forward {
    FeatureMap tap1;  // layer1 output, stride 8
    FeatureMap tap2;  // layer2 output, stride 16
    DensePreds preds;
  };
  Forward forward(const FeatureMap& x0);

  /// Backward from any subset of heads/taps; null pointers mean no gradient
  /// from that path. Accumulates parameter gradients, returns the gradient
  /// w.r.t. the input-layer output (callers typically drop it).
  Tensor backward(const Tensor* gobj, const Tensor* gbox, const Tensor* gtap1,
                  const Tensor* gtap2);

  void register_params(const std::string& prefix, ParamRefs& out);

  static constexpr int kNumFusionTaps = 2;
  const DetectorConfig& config() const { return cfg_; }

 private:
  DetectorConfig cfg_;
  Stage layer1_, layer2_, head_stage_;
  Conv2d obj_conv_, reg_conv_;
  int last_h_ = 0, last_w_ = 0;
};

struct DetectionLoss {
  real total = 0;
  real cls = 0;
  real box = 0;
  int num_pos = 0;
  Tensor gobj;  // gradient w.r.t. objectness logits
  Tensor gbox;  // gradient w.r.t. raw box regression
};

/// Focal-weighted binary cross-entropy over all grid cells plus an
/// IoU-based box term averaged over positive cells. Positive assignment:
/// cells whose center falls inside a GT box, nearest box center on ties.
/// With no GT boxes the box term is exactly zero.
DetectionLoss detection_loss(const DensePreds& preds, const std::vector<Box>& gt_boxes,
                             bool with_grads = true);

/// Decode dense predictions, threshold, and run greedy NMS. Result is
/// sorted by descending score; pairwise IoU among survivors < nms_iou.
std::vector<Detection> decode_and_nms(const DensePreds& preds, const DetectorConfig& cfg);

/// Greedy NMS on an arbitrary detection list (score order, stable ties).
std::vector<Detection> nms(std::vector<Detection> dets, real iou_thresh, int max_out);

}  // namespace psearch
