#pragma once

#include <optional>
#include <string>
#include <vector>

#include "psearch/geometry.hpp"
#include "psearch/rng.hpp"
#include "psearch/tensor.hpp"

namespace psearch {

/// Named view of a learnable parameter and its gradient buffer.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
};
using ParamRefs = std::vector<ParamRef>;

/// Named view of a non-learnable state buffer (running statistics, ...).
struct BufferRef {
  std::string name;
  Tensor* value = nullptr;
};
using BufferRefs = std::vector<BufferRef>;

/// Activation map flowing between blocks: data plus its downsampling
/// factor relative to the input image.
struct FeatureMap {
  Tensor data;
  int stride = 1;
};

inline void check_feature_map(const FeatureMap& f, const char* what) {
  if (f.data.n() < 1 || f.data.c() < 1 || f.data.h() < 1 || f.data.w() < 1)
    throw ConfigError(std::string(what) + ": empty feature map");
  if (f.stride < 1 || (f.stride & (f.stride - 1)) != 0)
    throw ConfigError(std::string(what) + ": stride must be a positive power of two");
}

// ---------------------------------------------------------------------------
// Elementary layers. Each caches what its backward pass needs; backward
// accumulates into the parameter gradient buffers and returns the input
// gradient.
// ---------------------------------------------------------------------------

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int ksize, int stride = 1, bool with_bias = true);

  void init(Rng& rng);  // He-style initialization
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);

  void register_params(const std::string& prefix, ParamRefs& out);

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  int stride() const { return stride_; }

  Tensor weight;  // (out_ch, in_ch, k, k)
  Tensor bias;    // (1, out_ch, 1, 1)
  Tensor wgrad;
  Tensor bgrad;

 private:
  int in_ch_ = 0, out_ch_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  bool with_bias_ = true;
  Tensor cached_x_;
};

/// Per-sample, per-channel spatial normalization with learnable scale and
/// shift. Behaves identically in train and eval mode; the library's one
/// default norm for conv stages.
class InstanceNorm2d {
 public:
  InstanceNorm2d() = default;
  explicit InstanceNorm2d(int channels);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);
  void register_params(const std::string& prefix, ParamRefs& out);

  Tensor gamma, beta;  // (1, c, 1, 1)
  Tensor ggrad, bgrad;

 private:
  int channels_ = 0;
  Tensor xhat_;
  std::vector<real> inv_std_;
};

/// Batch normalization over the batch dimension of (n, c, 1, 1) feature
/// vectors. Train mode uses batch statistics and updates running ones;
/// eval mode uses running statistics.
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(int channels, real momentum = 0.1);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& gy);  // valid after a train-mode forward
  void register_params(const std::string& prefix, ParamRefs& out);
  void register_buffers(const std::string& prefix, BufferRefs& out);

  Tensor gamma, beta;
  Tensor ggrad, bgrad;
  Tensor running_mean, running_var;

 private:
  int channels_ = 0;
  real momentum_ = 0.1;
  Tensor xhat_;
  std::vector<real> inv_std_;
  bool last_train_ = false;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);

 private:
  std::vector<bool> mask_;
};

class GlobalAvgPool {
 public:
  Tensor forward(const Tensor& x);  // (n,c,h,w) -> (n,c,1,1)
  Tensor backward(const Tensor& gy);

 private:
  int h_ = 0, w_ = 0;
};

// ---------------------------------------------------------------------------
// Architecture blocks.
// ---------------------------------------------------------------------------

/// One conv stage: depth x [3x3 conv + norm + ReLU]. The first conv maps
/// in_channels to out_channels and downsamples by 2 when requested.
struct StageSpec {
  int in_channels = 0;
  int out_channels = 0;
  int depth = 2;
  bool downsample = false;

  void validate() const;
};

class Stage {
 public:
  Stage() = default;
  explicit Stage(const StageSpec& spec);

  void init(Rng& rng);
  FeatureMap forward(const FeatureMap& x);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);
  void register_params(const std::string& prefix, ParamRefs& out);

  const StageSpec& spec() const { return spec_; }

 private:
  StageSpec spec_;
  std::vector<Conv2d> convs_;
  std::vector<InstanceNorm2d> norms_;
  std::vector<ReLU> relus_;
};

/// Shared stem: a two-conv stride-4 stack whose parameters are fixed at
/// construction and never trained, making it independent of both sub-tasks.
class InputLayer {
 public:
  InputLayer() = default;
  InputLayer(int mid_channels, int out_channels, std::uint64_t init_seed);

  FeatureMap forward(const Tensor& image);  // (1,3,H,W) -> stride-4 map
  void register_params(const std::string& prefix, ParamRefs& out);

  int out_channels() const { return out_ch_; }

 private:
  int out_ch_ = 0;
  Conv2d conv1_, conv2_;
  InstanceNorm2d norm1_, norm2_;
  ReLU relu1_, relu2_;
};

enum class FusionMode { homogeneous, heterogeneous };

/// Adapts the shared input-layer output for the re-id branch: identity in
/// homogeneous mode, a single 1x1 convolution otherwise.
class SideAda {
 public:
  SideAda() = default;
  static SideAda identity();
  static SideAda conv(int in_ch, int out_ch, Rng& rng);

  FeatureMap forward(const FeatureMap& x);
  Tensor backward(const Tensor& gy);
  void register_params(const std::string& prefix, ParamRefs& out);

  FusionMode mode() const { return mode_; }

 private:
  FusionMode mode_ = FusionMode::homogeneous;
  std::optional<Conv2d> conv_;
};

/// Blends a detection-branch feature map into the re-id branch.
/// Homogeneous: x_s = alpha * x_d + (1 - alpha) * x_r with alpha in [0,1]
/// (stored as the sigmoid of an unconstrained scalar, its only learnable
/// parameter). Heterogeneous: x_s = Conv(x_d) + x_r with a bare 1x1 conv.
class SideFusion {
 public:
  SideFusion() = default;
  static SideFusion homogeneous(real alpha_init = 0.5);
  static SideFusion heterogeneous(int det_ch, int reid_ch, Rng& rng);

  FeatureMap forward(const FeatureMap& x_d, const FeatureMap& x_r);
  /// Returns (gx_d, gx_r).
  std::pair<Tensor, Tensor> backward(const Tensor& gy);
  void register_params(const std::string& prefix, ParamRefs& out);

  FusionMode mode() const { return mode_; }
  real alpha() const;
  void set_alpha(real a);  // test/inspection hook; clamps into (0,1) range

  Tensor alpha_raw;  // (1,1,1,1), homogeneous mode
  Tensor alpha_raw_grad;

 private:
  FusionMode mode_ = FusionMode::homogeneous;
  std::optional<Conv2d> conv_;
  Tensor cached_xd_, cached_xr_;
};

/// Bilinear region pooling on the roi_grid sample points.
class RoiAlign {
 public:
  RoiAlign(int out_h, int out_w) : out_h_(out_h), out_w_(out_w) {}

  /// feature: single-image map (1, C, Hf, Wf); boxes in image coordinates.
  /// Returns (num_boxes, C, out_h, out_w).
  Tensor forward(const FeatureMap& feature, const std::vector<Box>& boxes);
  Tensor backward(const Tensor& gy);  // gradient w.r.t. the feature map

  int out_h() const { return out_h_; }
  int out_w() const { return out_w_; }

 private:
  struct Sample {
    int idx[4];
    real w[4];
  };
  int out_h_ = 0, out_w_ = 0;
  int fc_ = 0, fh_ = 0, fw_ = 0;
  std::vector<Sample> samples_;  // per (box, cell)
};

}  // namespace psearch
