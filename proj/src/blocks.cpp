#include "psearch/blocks.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace psearch {

namespace {

using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;

constexpr real kNormEps = 1e-5;

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// (c,h,w) sample -> (c*k*k, oh*ow) patch matrix
void im2col(const real* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
            real* col) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        real* dst = col + ((static_cast<std::size_t>(ci) * k + ki) * k + kj) *
                              (static_cast<std::size_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0);
            dst += ow;
            continue;
          }
          const real* src = x + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kj;
            *dst++ = (ix < 0 || ix >= w) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_accum(const real* col, int c, int h, int w, int k, int stride, int pad, int oh,
                  int ow, real* gx) {
  for (int ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const real* src = col + ((static_cast<std::size_t>(ci) * k + ki) * k + kj) *
                                    (static_cast<std::size_t>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) {
            src += ow;
            continue;
          }
          real* dst = gx + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
          src += ow;
        }
      }
    }
  }
}

inline real sigmoid(real x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(int in_ch, int out_ch, int ksize, int stride, bool with_bias)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      k_(ksize),
      stride_(stride),
      pad_(ksize / 2),
      with_bias_(with_bias) {
  if (in_ch < 1 || out_ch < 1 || ksize < 1 || stride < 1)
    throw ConfigError("Conv2d: invalid configuration");
  weight = Tensor(out_ch, in_ch, ksize, ksize);
  wgrad = Tensor(out_ch, in_ch, ksize, ksize);
  if (with_bias_) {
    bias = Tensor(1, out_ch, 1, 1);
    bgrad = Tensor(1, out_ch, 1, 1);
  }
}

void Conv2d::init(Rng& rng) {
  const real std = std::sqrt(2.0 / (static_cast<real>(in_ch_) * k_ * k_));
  for (std::size_t i = 0; i < weight.size(); ++i) weight[i] = rng.normal(0.0, std);
  if (with_bias_) bias.zero();
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.c() != in_ch_)
    throw ConfigError("Conv2d: expected " + std::to_string(in_ch_) + " input channels, got " +
                      std::to_string(x.c()));
  cached_x_ = x;
  const int oh = conv_out_dim(x.h(), k_, stride_, pad_);
  const int ow = conv_out_dim(x.w(), k_, stride_, pad_);
  Tensor y(x.n(), out_ch_, oh, ow);

  const int cols = oh * ow;
  const int patch = in_ch_ * k_ * k_;
  std::vector<real> col(static_cast<std::size_t>(patch) * cols);
  ConstMapRM W(weight.data(), out_ch_, patch);
  for (int i = 0; i < x.n(); ++i) {
    im2col(x.data() + x.offset(i, 0, 0, 0), in_ch_, x.h(), x.w(), k_, stride_, pad_, oh, ow,
           col.data());
    MapRM Y(y.data() + y.offset(i, 0, 0, 0), out_ch_, cols);
    ConstMapRM C(col.data(), patch, cols);
    Y.noalias() = W * C;
    if (with_bias_) {
      for (int oc = 0; oc < out_ch_; ++oc) Y.row(oc).array() += bias[oc];
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& gy) {
  const Tensor& x = cached_x_;
  const int oh = gy.h();
  const int ow = gy.w();
  const int cols = oh * ow;
  const int patch = in_ch_ * k_ * k_;
  Tensor gx = Tensor::zeros_like(x);
  std::vector<real> col(static_cast<std::size_t>(patch) * cols);
  std::vector<real> gcol(static_cast<std::size_t>(patch) * cols);
  ConstMapRM W(weight.data(), out_ch_, patch);
  MapRM GW(wgrad.data(), out_ch_, patch);
  for (int i = 0; i < x.n(); ++i) {
    im2col(x.data() + x.offset(i, 0, 0, 0), in_ch_, x.h(), x.w(), k_, stride_, pad_, oh, ow,
           col.data());
    ConstMapRM GY(gy.data() + gy.offset(i, 0, 0, 0), out_ch_, cols);
    ConstMapRM C(col.data(), patch, cols);
    GW.noalias() += GY * C.transpose();
    if (with_bias_) {
      for (int oc = 0; oc < out_ch_; ++oc) bgrad[oc] += GY.row(oc).sum();
    }
    MapRM GC(gcol.data(), patch, cols);
    GC.noalias() = W.transpose() * GY;
    col2im_accum(gcol.data(), in_ch_, x.h(), x.w(), k_, stride_, pad_, oh, ow,
                 gx.data() + gx.offset(i, 0, 0, 0));
  }
  return gx;
}

void Conv2d::register_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".weight", &weight, &wgrad});
  if (with_bias_) out.push_back({prefix + ".bias", &bias, &bgrad});
}

// ---------------------------------------------------------------------------
// InstanceNorm2d
// ---------------------------------------------------------------------------

InstanceNorm2d::InstanceNorm2d(int channels) : channels_(channels) {
  gamma = Tensor(1, channels, 1, 1);
  beta = Tensor(1, channels, 1, 1);
  ggrad = Tensor(1, channels, 1, 1);
  bgrad = Tensor(1, channels, 1, 1);
  gamma.fill(1.0);
}

Tensor InstanceNorm2d::forward(const Tensor& x) {
  if (x.c() != channels_) throw ConfigError("InstanceNorm2d: channel mismatch");
  const int m = x.h() * x.w();
  xhat_ = Tensor::zeros_like(x);
  inv_std_.assign(static_cast<std::size_t>(x.n()) * channels_, 0.0);
  Tensor y = Tensor::zeros_like(x);
  for (int i = 0; i < x.n(); ++i) {
    for (int ci = 0; ci < channels_; ++ci) {
      const real* xs = x.data() + x.offset(i, ci, 0, 0);
      real mean = 0;
      for (int j = 0; j < m; ++j) mean += xs[j];
      mean /= m;
      real var = 0;
      for (int j = 0; j < m; ++j) var += (xs[j] - mean) * (xs[j] - mean);
      var /= m;
      const real istd = 1.0 / std::sqrt(var + kNormEps);
      inv_std_[static_cast<std::size_t>(i) * channels_ + ci] = istd;
      real* xh = xhat_.data() + xhat_.offset(i, ci, 0, 0);
      real* ys = y.data() + y.offset(i, ci, 0, 0);
      for (int j = 0; j < m; ++j) {
        xh[j] = (xs[j] - mean) * istd;
        ys[j] = gamma[ci] * xh[j] + beta[ci];
      }
    }
  }
  return y;
}

Tensor InstanceNorm2d::backward(const Tensor& gy) {
  const int m = gy.h() * gy.w();
  Tensor gx = Tensor::zeros_like(gy);
  for (int i = 0; i < gy.n(); ++i) {
    for (int ci = 0; ci < channels_; ++ci) {
      const real* g = gy.data() + gy.offset(i, ci, 0, 0);
      const real* xh = xhat_.data() + xhat_.offset(i, ci, 0, 0);
      real sum_g = 0, sum_gx = 0;
      for (int j = 0; j < m; ++j) {
        sum_g += g[j];
        sum_gx += g[j] * xh[j];
      }
      ggrad[ci] += sum_gx;
      bgrad[ci] += sum_g;
      const real istd = inv_std_[static_cast<std::size_t>(i) * channels_ + ci];
      real* gxs = gx.data() + gx.offset(i, ci, 0, 0);
      const real scale = gamma[ci] * istd / m;
      for (int j = 0; j < m; ++j) {
        gxs[j] = scale * (m * g[j] - sum_g - xh[j] * sum_gx);
      }
    }
  }
  return gx;
}

void InstanceNorm2d::register_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".gamma", &gamma, &ggrad});
  out.push_back({prefix + ".beta", &beta, &bgrad});
}

// ---------------------------------------------------------------------------
// BatchNorm1d
// ---------------------------------------------------------------------------

BatchNorm1d::BatchNorm1d(int channels, real momentum) : channels_(channels), momentum_(momentum) {
  gamma = Tensor(1, channels, 1, 1);
  beta = Tensor(1, channels, 1, 1);
  ggrad = Tensor(1, channels, 1, 1);
  bgrad = Tensor(1, channels, 1, 1);
  running_mean = Tensor(1, channels, 1, 1);
  running_var = Tensor(1, channels, 1, 1);
  gamma.fill(1.0);
  running_var.fill(1.0);
}

Tensor BatchNorm1d::forward(const Tensor& x, bool train) {
  if (x.c() != channels_ || x.h() != 1 || x.w() != 1)
    throw ConfigError("BatchNorm1d: expected (n, " + std::to_string(channels_) + ", 1, 1)");
  last_train_ = train;
  const int n = x.n();
  Tensor y = Tensor::zeros_like(x);
  xhat_ = Tensor::zeros_like(x);
  inv_std_.assign(channels_, 0.0);
  for (int ci = 0; ci < channels_; ++ci) {
    real mean, var;
    if (train) {
      mean = 0;
      for (int i = 0; i < n; ++i) mean += x.at(i, ci, 0, 0);
      mean /= n;
      var = 0;
      for (int i = 0; i < n; ++i) {
        const real d = x.at(i, ci, 0, 0) - mean;
        var += d * d;
      }
      var /= n;
      running_mean[ci] = (1 - momentum_) * running_mean[ci] + momentum_ * mean;
      running_var[ci] = (1 - momentum_) * running_var[ci] + momentum_ * var;
    } else {
      mean = running_mean[ci];
      var = running_var[ci];
    }
    const real istd = 1.0 / std::sqrt(var + kNormEps);
    inv_std_[ci] = istd;
    for (int i = 0; i < n; ++i) {
      const real xh = (x.at(i, ci, 0, 0) - mean) * istd;
      xhat_.at(i, ci, 0, 0) = xh;
      y.at(i, ci, 0, 0) = gamma[ci] * xh + beta[ci];
    }
  }
  return y;
}

Tensor BatchNorm1d::backward(const Tensor& gy) {
  const int n = gy.n();
  Tensor gx = Tensor::zeros_like(gy);
  for (int ci = 0; ci < channels_; ++ci) {
    real sum_g = 0, sum_gx = 0;
    for (int i = 0; i < n; ++i) {
      sum_g += gy.at(i, ci, 0, 0);
      sum_gx += gy.at(i, ci, 0, 0) * xhat_.at(i, ci, 0, 0);
    }
    ggrad[ci] += sum_gx;
    bgrad[ci] += sum_g;
    const real istd = inv_std_[ci];
    if (last_train_) {
      const real scale = gamma[ci] * istd / n;
      for (int i = 0; i < n; ++i) {
        gx.at(i, ci, 0, 0) =
            scale * (n * gy.at(i, ci, 0, 0) - sum_g - xhat_.at(i, ci, 0, 0) * sum_gx);
      }
    } else {
      for (int i = 0; i < n; ++i) gx.at(i, ci, 0, 0) = gamma[ci] * istd * gy.at(i, ci, 0, 0);
    }
  }
  return gx;
}

void BatchNorm1d::register_params(const std::string& prefix, ParamRefs& out) {
  out.push_back({prefix + ".gamma", &gamma, &ggrad});
  out.push_back({prefix + ".beta", &beta, &bgrad});
}

void BatchNorm1d::register_buffers(const std::string& prefix, BufferRefs& out) {
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

// ---------------------------------------------------------------------------
// ReLU / GlobalAvgPool
// ---------------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x) {
  mask_.assign(x.size(), false);
  Tensor y = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0) {
      y[i] = x[i];
      mask_[i] = true;
    }
  }
  return y;
}

Tensor ReLU::backward(const Tensor& gy) {
  Tensor gx = Tensor::zeros_like(gy);
  for (std::size_t i = 0; i < gy.size(); ++i) {
    if (mask_[i]) gx[i] = gy[i];
  }
  return gx;
}

Tensor GlobalAvgPool::forward(const Tensor& x) {
  h_ = x.h();
  w_ = x.w();
  const int m = h_ * w_;
  Tensor y(x.n(), x.c(), 1, 1);
  for (int i = 0; i < x.n(); ++i) {
    for (int ci = 0; ci < x.c(); ++ci) {
      const real* xs = x.data() + x.offset(i, ci, 0, 0);
      real s = 0;
      for (int j = 0; j < m; ++j) s += xs[j];
      y.at(i, ci, 0, 0) = s / m;
    }
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& gy) {
  const int m = h_ * w_;
  Tensor gx(gy.n(), gy.c(), h_, w_);
  for (int i = 0; i < gy.n(); ++i) {
    for (int ci = 0; ci < gy.c(); ++ci) {
      real* gxs = gx.data() + gx.offset(i, ci, 0, 0);
      const real g = gy.at(i, ci, 0, 0) / m;
      for (int j = 0; j < m; ++j) gxs[j] = g;
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Stage
// ---------------------------------------------------------------------------

void StageSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("StageSpec: invalid channels");
  if (depth < 1) throw ConfigError("StageSpec: depth must be >= 1");
}

Stage::Stage(const StageSpec& spec) : spec_(spec) {
  spec.validate();
  convs_.reserve(spec.depth);
  norms_.reserve(spec.depth);
  relus_.resize(spec.depth);
  for (int d = 0; d < spec.depth; ++d) {
    const int in_c = d == 0 ? spec.in_channels : spec.out_channels;
    const int stride = (d == 0 && spec.downsample) ? 2 : 1;
    convs_.emplace_back(in_c, spec.out_channels, 3, stride);
    norms_.emplace_back(spec.out_channels);
  }
}

void Stage::init(Rng& rng) {
  for (auto& c : convs_) c.init(rng);
}

FeatureMap Stage::forward(const FeatureMap& x) {
  check_feature_map(x, "Stage");
  return FeatureMap{forward(x.data), x.stride * (spec_.downsample ? 2 : 1)};
}

Tensor Stage::forward(const Tensor& x) {
  Tensor h = x;
  for (int d = 0; d < spec_.depth; ++d) {
    h = relus_[d].forward(norms_[d].forward(convs_[d].forward(h)));
  }
  return h;
}

Tensor Stage::backward(const Tensor& gy) {
  Tensor g = gy;
  for (int d = spec_.depth - 1; d >= 0; --d) {
    g = convs_[d].backward(norms_[d].backward(relus_[d].backward(g)));
  }
  return g;
}

void Stage::register_params(const std::string& prefix, ParamRefs& out) {
  for (int d = 0; d < spec_.depth; ++d) {
    convs_[d].register_params(prefix + ".conv" + std::to_string(d), out);
    norms_[d].register_params(prefix + ".norm" + std::to_string(d), out);
  }
}

// ---------------------------------------------------------------------------
// InputLayer
// ---------------------------------------------------------------------------

InputLayer::InputLayer(int mid_channels, int out_channels, std::uint64_t init_seed)
    : out_ch_(out_channels),
      conv1_(3, mid_channels, 3, 2),
      conv2_(mid_channels, out_channels, 3, 2),
      norm1_(mid_channels),
      norm2_(out_channels) {
  Rng rng(init_seed);
  Rng r1 = rng.substream("input.conv1");
  Rng r2 = rng.substream("input.conv2");
  conv1_.init(r1);
  conv2_.init(r2);
}

FeatureMap InputLayer::forward(const Tensor& image) {
  if (image.c() != 3) throw ConfigError("InputLayer: expected a 3-channel image");
  Tensor h = relu1_.forward(norm1_.forward(conv1_.forward(image)));
  h = relu2_.forward(norm2_.forward(conv2_.forward(h)));
  return FeatureMap{std::move(h), 4};
}

void InputLayer::register_params(const std::string& prefix, ParamRefs& out) {
  conv1_.register_params(prefix + ".conv1", out);
  norm1_.register_params(prefix + ".norm1", out);
  conv2_.register_params(prefix + ".conv2", out);
  norm2_.register_params(prefix + ".norm2", out);
}

// ---------------------------------------------------------------------------
// SideAda
// ---------------------------------------------------------------------------

SideAda SideAda::identity() {
  SideAda a;
  a.mode_ = FusionMode::homogeneous;
  return a;
}

SideAda SideAda::conv(int in_ch, int out_ch, Rng& rng) {
  SideAda a;
  a.mode_ = FusionMode::heterogeneous;
  a.conv_.emplace(in_ch, out_ch, 1, 1);
  a.conv_->init(rng);
  return a;
}

FeatureMap SideAda::forward(const FeatureMap& x) {
  check_feature_map(x, "SideAda");
  if (mode_ == FusionMode::homogeneous) return x;
  return FeatureMap{conv_->forward(x.data), x.stride};
}

Tensor SideAda::backward(const Tensor& gy) {
  if (mode_ == FusionMode::homogeneous) return gy;
  return conv_->backward(gy);
}

void SideAda::register_params(const std::string& prefix, ParamRefs& out) {
  if (conv_) conv_->register_params(prefix + ".conv", out);
}

// ---------------------------------------------------------------------------
// SideFusion
// ---------------------------------------------------------------------------

SideFusion SideFusion::homogeneous(real alpha_init) {
  SideFusion f;
  f.mode_ = FusionMode::homogeneous;
  f.alpha_raw = Tensor(1, 1, 1, 1);
  f.alpha_raw_grad = Tensor(1, 1, 1, 1);
  f.set_alpha(alpha_init);
  return f;
}

SideFusion SideFusion::heterogeneous(int det_ch, int reid_ch, Rng& rng) {
  SideFusion f;
  f.mode_ = FusionMode::heterogeneous;
  f.conv_.emplace(det_ch, reid_ch, 1, 1);
  f.conv_->init(rng);
  return f;
}

real SideFusion::alpha() const {
  if (mode_ != FusionMode::homogeneous) throw ConfigError("SideFusion: alpha is homogeneous-only");
  return sigmoid(alpha_raw[0]);
}

void SideFusion::set_alpha(real a) {
  if (a <= 0) {
    alpha_raw[0] = -40.0;
  } else if (a >= 1) {
    alpha_raw[0] = 40.0;
  } else {
    alpha_raw[0] = std::log(a / (1 - a));
  }
}

FeatureMap SideFusion::forward(const FeatureMap& x_d, const FeatureMap& x_r) {
  check_feature_map(x_d, "SideFusion");
  check_feature_map(x_r, "SideFusion");
  if (x_d.stride != x_r.stride) throw ConfigError("SideFusion: stride mismatch between branches");
  if (mode_ == FusionMode::homogeneous) {
    if (!x_d.data.same_shape(x_r.data))
      throw ConfigError("SideFusion: homogeneous fusion requires identical shapes, got " +
                        x_d.data.shape_str() + " vs " + x_r.data.shape_str());
    cached_xd_ = x_d.data;
    cached_xr_ = x_r.data;
    const real a = alpha();
    Tensor y = Tensor::zeros_like(x_r.data);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a * x_d.data[i] + (1 - a) * x_r.data[i];
    return FeatureMap{std::move(y), x_r.stride};
  }
  Tensor t = conv_->forward(x_d.data);
  if (!t.same_shape(x_r.data))
    throw ConfigError("SideFusion: conv output " + t.shape_str() + " does not match re-id map " +
                      x_r.data.shape_str());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += x_r.data[i];
  return FeatureMap{std::move(t), x_r.stride};
}

std::pair<Tensor, Tensor> SideFusion::backward(const Tensor& gy) {
  if (mode_ == FusionMode::homogeneous) {
    const real a = alpha();
    Tensor gxd = Tensor::zeros_like(gy);
    Tensor gxr = Tensor::zeros_like(gy);
    real ga = 0;
    for (std::size_t i = 0; i < gy.size(); ++i) {
      gxd[i] = a * gy[i];
      gxr[i] = (1 - a) * gy[i];
      ga += gy[i] * (cached_xd_[i] - cached_xr_[i]);
    }
    alpha_raw_grad[0] += ga * a * (1 - a);  // chain through the sigmoid
    return {std::move(gxd), std::move(gxr)};
  }
  Tensor gxd = conv_->backward(gy);
  return {std::move(gxd), gy};
}

void SideFusion::register_params(const std::string& prefix, ParamRefs& out) {
  if (mode_ == FusionMode::homogeneous) {
    out.push_back({prefix + ".alpha_raw", &alpha_raw, &alpha_raw_grad});
  } else {
    conv_->register_params(prefix + ".conv", out);
  }
}

// ---------------------------------------------------------------------------
// RoiAlign
// ---------------------------------------------------------------------------

Tensor RoiAlign::forward(const FeatureMap& feature, const std::vector<Box>& boxes) {
  check_feature_map(feature, "RoiAlign");
  if (feature.data.n() != 1) throw ConfigError("RoiAlign: expects a single-image feature map");
  fc_ = feature.data.c();
  fh_ = feature.data.h();
  fw_ = feature.data.w();
  const int cells = out_h_ * out_w_;
  samples_.assign(static_cast<std::size_t>(boxes.size()) * cells, Sample{});

  Tensor out(static_cast<int>(boxes.size()), fc_, out_h_, out_w_);
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const auto grid = roi_grid(boxes[b], out_h_, out_w_);
    for (int cell = 0; cell < cells; ++cell) {
      // image coords -> feature coords under the half-pixel-center convention
      real u = grid[cell].x / feature.stride - 0.5;
      real v = grid[cell].y / feature.stride - 0.5;
      u = std::clamp(u, 0.0, static_cast<real>(fw_ - 1));
      v = std::clamp(v, 0.0, static_cast<real>(fh_ - 1));
      const int u0 = std::min(static_cast<int>(u), fw_ - 1);
      const int v0 = std::min(static_cast<int>(v), fh_ - 1);
      const int u1 = std::min(u0 + 1, fw_ - 1);
      const int v1 = std::min(v0 + 1, fh_ - 1);
      const real fu = u - u0;
      const real fv = v - v0;
      Sample& s = samples_[b * cells + cell];
      s.idx[0] = v0 * fw_ + u0;
      s.idx[1] = v0 * fw_ + u1;
      s.idx[2] = v1 * fw_ + u0;
      s.idx[3] = v1 * fw_ + u1;
      s.w[0] = (1 - fv) * (1 - fu);
      s.w[1] = (1 - fv) * fu;
      s.w[2] = fv * (1 - fu);
      s.w[3] = fv * fu;
      for (int ci = 0; ci < fc_; ++ci) {
        const real* f = feature.data.data() + feature.data.offset(0, ci, 0, 0);
        real acc = 0;
        for (int t = 0; t < 4; ++t) acc += s.w[t] * f[s.idx[t]];
        out.data()[out.offset(static_cast<int>(b), ci, 0, 0) + cell] = acc;
      }
    }
  }
  return out;
}

Tensor RoiAlign::backward(const Tensor& gy) {
  Tensor gf(1, fc_, fh_, fw_);
  const int cells = out_h_ * out_w_;
  for (int b = 0; b < gy.n(); ++b) {
    for (int ci = 0; ci < fc_; ++ci) {
      real* g = gf.data() + gf.offset(0, ci, 0, 0);
      const real* gys = gy.data() + gy.offset(b, ci, 0, 0);
      for (int cell = 0; cell < cells; ++cell) {
        const Sample& s = samples_[static_cast<std::size_t>(b) * cells + cell];
        for (int t = 0; t < 4; ++t) g[s.idx[t]] += s.w[t] * gys[cell];
      }
    }
  }
  return gf;
}

}  // namespace psearch
