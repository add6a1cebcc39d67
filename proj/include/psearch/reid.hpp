#pragma once

#include <vector>

#include "psearch/blocks.hpp"
#include "psearch/geometry.hpp"

namespace psearch {

struct ReidConfig {
  FusionMode mode = FusionMode::homogeneous;
  StageSpec layer1{0, 32, 2, true};  // in_channels filled from side-ada output
  StageSpec layer2{32, 48, 2, true};
  int ada_out_channels = 0;  // heterogeneous only; 0 = keep input-layer channels
  int head_mid_channels = 64;
  int embedding_dim = 128;
  int roi_h = 16;
  int roi_w = 8;
  real bn_momentum = 0.1;

  void validate() const;
};

/// The re-id side-network: side-ada on the shared input-layer output, two
/// stages interleaved with side-fusion taps from the detection branch, and
/// the re-id head (region pooling -> stride-1 conv stage -> global average
/// pooling -> batch norm -> d-dim embedding).
class ReidNet {
 public:
  ReidNet() = default;
  ReidNet(const ReidConfig& cfg, int input_channels, int det_ch1, int det_ch2, Rng& rng);

  /// Scene-level forward through side-ada, stages and both fusions.
  /// det taps must come from the paired DetectionNet forward on the same
  /// image. Returns the fused stride-16 feature map.
  FeatureMap forward_scene(const FeatureMap& x0, const FeatureMap& det_tap1,
                           const FeatureMap& det_tap2);

  /// Box-level head on a fused map: one embedding row per box,
  /// (num_boxes, d, 1, 1). Empty box list yields an empty tensor.
  Tensor forward_boxes(const FeatureMap& fused, const std::vector<Box>& boxes, bool train);

  struct TapGrads {
    Tensor gtap1, gtap2;
  };
  /// Backward from embedding gradients through head and scene branch.
  /// Accumulates this net's parameter gradients and returns the gradients
  /// w.r.t. the two detection taps.
  TapGrads backward(const Tensor& gembed);

  void register_params(const std::string& prefix, ParamRefs& out);
  void register_buffers(const std::string& prefix, BufferRefs& out);

  SideFusion& fusion1() { return fusion1_; }
  SideFusion& fusion2() { return fusion2_; }
  const ReidConfig& config() const { return cfg_; }

 private:
  ReidConfig cfg_;
  SideAda ada_;
  Stage layer1_, layer2_;
  SideFusion fusion1_, fusion2_;
  Stage head_stage_, head_widen_;  // together: the stride-1 conv stage of the head
  GlobalAvgPool gap_;
  BatchNorm1d bn_;
  RoiAlign roi_{16, 8};
  FeatureMap last_fused_;
  bool has_boxes_ = false;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct OimConfig {
  int num_labeled = 0;   // L: labeled identity slots
  int queue_size = 0;    // Q: circular queue of unlabeled features
  real momentum = 0.5;   // LUT momentum gamma
  real temperature = 1.0 / 30.0;

  void validate() const;
};

/// Online instance matching state: a lookup table with one slot per
/// labeled identity plus a circular queue of unlabeled features. The loss
/// is a temperature-scaled softmax over LUT + queue similarities;
/// lut/queue are constants within a step (no gradient flows into state).
class OimState {
 public:
  static constexpr int kUnlabeled = -1;

  OimState() = default;
  explicit OimState(const OimConfig& cfg);

  /// Mean over labeled samples of -log softmax at the true identity.
  /// Embeddings are L2-normalized internally (the normalization is part of
  /// the differentiated path). All-unlabeled batches give loss 0.
  real loss(const Tensor& embeddings, const std::vector<int>& labels,
            Tensor* gembed = nullptr) const;

  /// Post-loss state transition: labeled slots get the momentum update and
  /// renormalize; unlabeled features push into the queue at queue_head.
  void update(const Tensor& embeddings, const std::vector<int>& labels);

  real loss_and_update(const Tensor& embeddings, const std::vector<int>& labels,
                       Tensor* gembed = nullptr);

  const Tensor& lut() const { return lut_; }
  const Tensor& queue() const { return queue_; }
  int queue_head() const { return static_cast<int>(queue_head_[0]); }
  const OimConfig& config() const { return cfg_; }

  void register_buffers(const std::string& prefix, BufferRefs& out);

 private:
  OimConfig cfg_;
  Tensor lut_;         // (L, d, 1, 1) -- d fixed on first use
  Tensor queue_;       // (Q, d, 1, 1)
  Tensor queue_head_;  // (1,1,1,1) scalar position, persisted with the state
  mutable int dim_ = 0;

  void ensure_dim(int d) const;
};

/// Batch-hard triplet loss on L2-normalized embeddings (Euclidean
/// distance): per anchor, hardest positive minus hardest negative plus
/// margin, hinged at zero, averaged over anchors that have both. Unlabeled
/// samples are excluded. Returns 0 when no anchor qualifies.
real triplet_loss(const Tensor& embeddings, const std::vector<int>& labels, real margin,
                  Tensor* gembed = nullptr);

/// Row-wise L2 normalization of (n, d, 1, 1) embeddings.
Tensor l2_normalize_rows(const Tensor& embeddings);

}  // namespace psearch
