#include "psearch/reid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace psearch {

namespace {
constexpr real kNormGuard = 1e-12;

// gx = (gxhat - (gxhat . xhat) xhat) / ||x||, per row
void backprop_row_normalization(const Tensor& x, const Tensor& xhat, const Tensor& gxhat,
                                Tensor& gx) {
  const int d = x.c();
  for (int i = 0; i < x.n(); ++i) {
    const real* xs = x.data() + x.offset(i, 0, 0, 0);
    const real* xh = xhat.data() + xhat.offset(i, 0, 0, 0);
    const real* gh = gxhat.data() + gxhat.offset(i, 0, 0, 0);
    real* g = gx.data() + gx.offset(i, 0, 0, 0);
    real norm = 0;
    for (int k = 0; k < d; ++k) norm += xs[k] * xs[k];
    norm = std::sqrt(norm) + kNormGuard;
    real dot = 0;
    for (int k = 0; k < d; ++k) dot += gh[k] * xh[k];
    for (int k = 0; k < d; ++k) g[k] += (gh[k] - dot * xh[k]) / norm;
  }
}
}  // namespace

Tensor l2_normalize_rows(const Tensor& embeddings) {
  if (embeddings.h() != 1 || embeddings.w() != 1)
    throw InputError("l2_normalize_rows: expected (n, d, 1, 1)");
  Tensor out = embeddings;
  const int d = embeddings.c();
  for (int i = 0; i < embeddings.n(); ++i) {
    real* row = out.data() + out.offset(i, 0, 0, 0);
    real norm = 0;
    for (int k = 0; k < d; ++k) norm += row[k] * row[k];
    norm = std::sqrt(norm) + kNormGuard;
    for (int k = 0; k < d; ++k) row[k] /= norm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// ReidNet
// ---------------------------------------------------------------------------

void ReidConfig::validate() const {
  layer1.validate();
  layer2.validate();
  if (layer2.in_channels != layer1.out_channels)
    throw ConfigError("ReidConfig: layer2 input channels must match layer1 output");
  if (head_mid_channels < 1 || embedding_dim < 1)
    throw ConfigError("ReidConfig: invalid head channels");
  if (roi_h < 1 || roi_w < 1) throw ConfigError("ReidConfig: invalid roi pooling size");
  if (!(bn_momentum > 0 && bn_momentum < 1))
    throw ConfigError("ReidConfig: bn_momentum must be in (0,1)");
}

ReidNet::ReidNet(const ReidConfig& cfg, int input_channels, int det_ch1, int det_ch2, Rng& rng)
    : cfg_(cfg), roi_(cfg.roi_h, cfg.roi_w) {
  Rng ra = rng.substream("reid.ada");
  Rng r1 = rng.substream("reid.layer1");
  Rng r2 = rng.substream("reid.layer2");
  Rng rf1 = rng.substream("reid.fusion1");
  Rng rf2 = rng.substream("reid.fusion2");
  Rng rh = rng.substream("reid.head");

  if (cfg_.mode == FusionMode::homogeneous) {
    ada_ = SideAda::identity();
    cfg_.layer1.in_channels = input_channels;
    if (cfg_.layer1.out_channels != det_ch1 || cfg_.layer2.out_channels != det_ch2)
      throw ConfigError(
          "ReidConfig: homogeneous side-net requires stage widths matching the detector (" +
          std::to_string(det_ch1) + ", " + std::to_string(det_ch2) + ")");
    fusion1_ = SideFusion::homogeneous();
    fusion2_ = SideFusion::homogeneous();
  } else {
    const int ada_out = cfg_.ada_out_channels > 0 ? cfg_.ada_out_channels : input_channels;
    ada_ = SideAda::conv(input_channels, ada_out, ra);
    cfg_.layer1.in_channels = ada_out;
    fusion1_ = SideFusion::heterogeneous(det_ch1, cfg_.layer1.out_channels, rf1);
    fusion2_ = SideFusion::heterogeneous(det_ch2, cfg_.layer2.out_channels, rf2);
  }
  cfg_.validate();
  layer1_ = Stage(cfg_.layer1);
  layer2_ = Stage(cfg_.layer2);
  head_stage_ = Stage(StageSpec{cfg_.layer2.out_channels, cfg_.head_mid_channels, 1, false});
  // second head conv widens to the embedding dim; kept as its own stage so
  // the whole head stays stride 1
  head_widen_ = Stage(StageSpec{cfg_.head_mid_channels, cfg_.embedding_dim, 1, false});
  bn_ = BatchNorm1d(cfg_.embedding_dim, cfg_.bn_momentum);
  roi_ = RoiAlign(cfg_.roi_h, cfg_.roi_w);
  layer1_.init(r1);
  layer2_.init(r2);
  Rng rh1 = rh.substream("a");
  Rng rh2 = rh.substream("b");
  head_stage_.init(rh1);
  head_widen_.init(rh2);
}

FeatureMap ReidNet::forward_scene(const FeatureMap& x0, const FeatureMap& det_tap1,
                                  const FeatureMap& det_tap2) {
  FeatureMap xa = ada_.forward(x0);
  FeatureMap xr1 = layer1_.forward(xa);
  FeatureMap xs1 = fusion1_.forward(det_tap1, xr1);
  FeatureMap xr2 = layer2_.forward(xs1);
  last_fused_ = fusion2_.forward(det_tap2, xr2);
  return last_fused_;
}

Tensor ReidNet::forward_boxes(const FeatureMap& fused, const std::vector<Box>& boxes,
                              bool train) {
  if (boxes.empty()) {
    has_boxes_ = false;
    return Tensor(0, cfg_.embedding_dim, 1, 1);
  }
  has_boxes_ = true;
  Tensor rois = roi_.forward(fused, boxes);
  Tensor h = head_stage_.forward(rois);
  h = head_widen_.forward(h);
  Tensor g = gap_.forward(h);
  return bn_.forward(g, train);
}

ReidNet::TapGrads ReidNet::backward(const Tensor& gembed) {
  if (!has_boxes_) throw InputError("ReidNet::backward: no cached box forward");
  Tensor g = bn_.backward(gembed);
  g = gap_.backward(g);
  g = head_widen_.backward(g);
  g = head_stage_.backward(g);
  Tensor gfused = roi_.backward(g);

  TapGrads taps;
  auto [gtap2, gxr2] = fusion2_.backward(gfused);
  taps.gtap2 = std::move(gtap2);
  Tensor gxs1 = layer2_.backward(gxr2);
  auto [gtap1, gxr1] = fusion1_.backward(gxs1);
  taps.gtap1 = std::move(gtap1);
  Tensor gxa = layer1_.backward(gxr1);
  ada_.backward(gxa);  // input layer is frozen; its gradient is dropped
  return taps;
}

void ReidNet::register_params(const std::string& prefix, ParamRefs& out) {
  ada_.register_params(prefix + ".ada", out);
  layer1_.register_params(prefix + ".layer1", out);
  layer2_.register_params(prefix + ".layer2", out);
  fusion1_.register_params(prefix + ".fusion1", out);
  fusion2_.register_params(prefix + ".fusion2", out);
  head_stage_.register_params(prefix + ".head.stage", out);
  head_widen_.register_params(prefix + ".head.widen", out);
  bn_.register_params(prefix + ".head.bn", out);
}

void ReidNet::register_buffers(const std::string& prefix, BufferRefs& out) {
  bn_.register_buffers(prefix + ".head.bn", out);
}

// ---------------------------------------------------------------------------
// OIM
// ---------------------------------------------------------------------------

void OimConfig::validate() const {
  if (num_labeled < 1) throw ConfigError("OimConfig: num_labeled must be >= 1");
  if (queue_size < 0) throw ConfigError("OimConfig: queue_size must be >= 0");
  if (!(momentum > 0 && momentum < 1)) throw ConfigError("OimConfig: momentum must be in (0,1)");
  if (!(temperature > 0)) throw ConfigError("OimConfig: temperature must be positive");
}

OimState::OimState(const OimConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  queue_head_ = Tensor(1, 1, 1, 1);
}

void OimState::ensure_dim(int d) const {
  if (dim_ == 0 && !lut_.empty()) {
    // state restored from a checkpoint: adopt its dimension
    if (lut_.n() != cfg_.num_labeled)
      throw ConfigError("OimState: restored LUT has " + std::to_string(lut_.n()) +
                        " slots, config expects " + std::to_string(cfg_.num_labeled));
    dim_ = lut_.c();
  }
  if (dim_ == 0) {
    dim_ = d;
    auto* self = const_cast<OimState*>(this);
    self->lut_ = Tensor(cfg_.num_labeled, d, 1, 1);
    self->queue_ = Tensor(cfg_.queue_size, d, 1, 1);
  } else if (dim_ != d) {
    throw InputError("OimState: embedding dimension changed from " + std::to_string(dim_) +
                     " to " + std::to_string(d));
  }
}

real OimState::loss(const Tensor& embeddings, const std::vector<int>& labels,
                    Tensor* gembed) const {
  if (static_cast<std::size_t>(embeddings.n()) != labels.size())
    throw InputError("oim_loss: embeddings/labels size mismatch");
  if (embeddings.n() == 0) return 0.0;
  ensure_dim(embeddings.c());
  const int d = dim_;
  const int L = cfg_.num_labeled;
  const int Q = cfg_.queue_size;
  const int K = L + Q;

  for (int lbl : labels) {
    if (lbl != kUnlabeled && (lbl < 0 || lbl >= L))
      throw InputError("oim_loss: label " + std::to_string(lbl) + " outside [0," +
                       std::to_string(L) + ")");
  }

  const Tensor xhat = l2_normalize_rows(embeddings);
  Tensor gxhat;
  if (gembed) {
    *gembed = Tensor::zeros_like(embeddings);
    gxhat = Tensor::zeros_like(embeddings);
  }

  int labeled = 0;
  real total = 0;
  std::vector<real> logits(K), probs(K);
  for (int i = 0; i < embeddings.n(); ++i) {
    if (labels[i] == kUnlabeled) continue;
    ++labeled;
    const real* x = xhat.data() + xhat.offset(i, 0, 0, 0);
    for (int k = 0; k < K; ++k) {
      const real* w =
          k < L ? lut_.data() + lut_.offset(k, 0, 0, 0) : queue_.data() + queue_.offset(k - L, 0, 0, 0);
      real s = 0;
      for (int t = 0; t < d; ++t) s += x[t] * w[t];
      logits[k] = s / cfg_.temperature;
    }
    const real zmax = *std::max_element(logits.begin(), logits.end());
    real denom = 0;
    for (int k = 0; k < K; ++k) {
      probs[k] = std::exp(logits[k] - zmax);
      denom += probs[k];
    }
    for (int k = 0; k < K; ++k) probs[k] /= denom;
    total += -(logits[labels[i]] - zmax - std::log(denom));

    if (gembed) {
      real* g = gxhat.data() + gxhat.offset(i, 0, 0, 0);
      for (int k = 0; k < K; ++k) {
        const real coef = (probs[k] - (k == labels[i] ? 1.0 : 0.0)) / cfg_.temperature;
        if (coef == 0) continue;
        const real* w = k < L ? lut_.data() + lut_.offset(k, 0, 0, 0)
                              : queue_.data() + queue_.offset(k - L, 0, 0, 0);
        for (int t = 0; t < d; ++t) g[t] += coef * w[t];
      }
    }
  }
  if (labeled == 0) return 0.0;
  total /= labeled;
  if (gembed) {
    for (std::size_t i = 0; i < gxhat.size(); ++i) gxhat[i] /= labeled;
    backprop_row_normalization(embeddings, xhat, gxhat, *gembed);
  }
  return total;
}

void OimState::update(const Tensor& embeddings, const std::vector<int>& labels) {
  if (embeddings.n() == 0) return;
  ensure_dim(embeddings.c());
  const int d = dim_;
  const Tensor xhat = l2_normalize_rows(embeddings);
  for (int i = 0; i < embeddings.n(); ++i) {
    const real* x = xhat.data() + xhat.offset(i, 0, 0, 0);
    if (labels[i] == kUnlabeled) {
      if (cfg_.queue_size == 0) continue;
      int head = static_cast<int>(queue_head_[0]);
      real* q = queue_.data() + queue_.offset(head, 0, 0, 0);
      std::copy(x, x + d, q);
      queue_head_[0] = (head + 1) % cfg_.queue_size;
      continue;
    }
    real* v = lut_.data() + lut_.offset(labels[i], 0, 0, 0);
    real norm = 0;
    for (int t = 0; t < d; ++t) {
      v[t] = cfg_.momentum * v[t] + (1 - cfg_.momentum) * x[t];
      norm += v[t] * v[t];
    }
    norm = std::sqrt(norm) + kNormGuard;
    for (int t = 0; t < d; ++t) v[t] /= norm;
  }
}

real OimState::loss_and_update(const Tensor& embeddings, const std::vector<int>& labels,
                               Tensor* gembed) {
  const real l = loss(embeddings, labels, gembed);
  update(embeddings, labels);
  return l;
}

void OimState::register_buffers(const std::string& prefix, BufferRefs& out) {
  out.push_back({prefix + ".lut", &lut_});
  out.push_back({prefix + ".queue", &queue_});
  out.push_back({prefix + ".queue_head", &queue_head_});
}

// ---------------------------------------------------------------------------
// Triplet
// ---------------------------------------------------------------------------

real triplet_loss(const Tensor& embeddings, const std::vector<int>& labels, real margin,
                  Tensor* gembed) {
  if (static_cast<std::size_t>(embeddings.n()) != labels.size())
    throw InputError("triplet_loss: embeddings/labels size mismatch");
  const int n = embeddings.n();
  const int d = embeddings.c();
  if (gembed) *gembed = Tensor::zeros_like(embeddings);
  if (n < 3) return 0.0;

  const Tensor xhat = l2_normalize_rows(embeddings);
  auto dist = [&](int i, int j) {
    const real* a = xhat.data() + xhat.offset(i, 0, 0, 0);
    const real* b = xhat.data() + xhat.offset(j, 0, 0, 0);
    real s = 0;
    for (int t = 0; t < d; ++t) s += (a[t] - b[t]) * (a[t] - b[t]);
    return std::sqrt(s);
  };

  Tensor gxhat = Tensor::zeros_like(embeddings);
  // accumulate +/- coef * (xhat_i - xhat_j) / dist into rows i and j
  auto add_dist_grad = [&](int i, int j, real coef) {
    const real dij = dist(i, j);
    if (dij < kNormGuard) return;
    const real* a = xhat.data() + xhat.offset(i, 0, 0, 0);
    const real* b = xhat.data() + xhat.offset(j, 0, 0, 0);
    real* ga = gxhat.data() + gxhat.offset(i, 0, 0, 0);
    real* gb = gxhat.data() + gxhat.offset(j, 0, 0, 0);
    for (int t = 0; t < d; ++t) {
      const real u = coef * (a[t] - b[t]) / dij;
      ga[t] += u;
      gb[t] -= u;
    }
  };

  real total = 0;
  int anchors = 0;
  struct Term {
    int a, p, ng;
  };
  std::vector<Term> active;
  for (int a = 0; a < n; ++a) {
    if (labels[a] == OimState::kUnlabeled) continue;
    int hard_pos = -1, hard_neg = -1;
    real dpos = -1, dneg = std::numeric_limits<real>::max();
    for (int j = 0; j < n; ++j) {
      if (j == a || labels[j] == OimState::kUnlabeled) continue;
      const real dj = dist(a, j);
      if (labels[j] == labels[a]) {
        if (dj > dpos) {
          dpos = dj;
          hard_pos = j;
        }
      } else if (dj < dneg) {
        dneg = dj;
        hard_neg = j;
      }
    }
    if (hard_pos < 0 || hard_neg < 0) continue;
    ++anchors;
    const real term = dpos - dneg + margin;
    if (term > 0) {
      total += term;
      active.push_back({a, hard_pos, hard_neg});
    }
  }
  if (anchors == 0) return 0.0;
  total /= anchors;
  if (gembed) {
    const real scale = 1.0 / anchors;
    for (const Term& t : active) {
      add_dist_grad(t.a, t.p, scale);
      add_dist_grad(t.a, t.ng, -scale);
    }
    backprop_row_normalization(embeddings, xhat, gxhat, *gembed);
  }
  return total;
}

}  // namespace psearch
