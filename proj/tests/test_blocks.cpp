#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "psearch/blocks.hpp"

using namespace psearch;
using psearch::testing::finite_diff_check;
using psearch::testing::random_tensor;

namespace {

/// Scalar probe: dot the block output with a fixed random tensor so every
/// output element participates in the gradient.
Tensor random_probe(const Tensor& like, std::uint64_t seed) {
  Rng rng(seed);
  Tensor p = Tensor::zeros_like(like);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.normal();
  return p;
}

}  // namespace

TEST_CASE("conv2d shapes") {
  Rng rng(1);
  Conv2d conv(3, 8, 3, 2);
  conv.init(rng);
  Tensor x = random_tensor(2, 3, 16, 16, rng);
  Tensor y = conv.forward(x);
  CHECK(y.n() == 2);
  CHECK(y.c() == 8);
  CHECK(y.h() == 8);
  CHECK(y.w() == 8);
  CHECK_THROWS_AS(conv.forward(Tensor(1, 5, 8, 8)), ConfigError);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(2);
  Conv2d conv(4, 6, 3, 1);
  conv.init(rng);
  Tensor x = random_tensor(2, 4, 7, 7, rng);
  Tensor probe;

  auto loss = [&]() {
    Tensor y = conv.forward(x);
    if (probe.empty()) probe = random_probe(y, 77);
    return tensor_dot(y, probe);
  };
  loss();  // initialize probe

  SUBCASE("w.r.t. weight") {
    auto grad = [&]() {
      conv.wgrad.zero();
      conv.bgrad.zero();
      conv.forward(x);
      conv.backward(probe);
      return conv.wgrad;
    };
    Rng pick(3);
    CHECK(finite_diff_check(conv.weight, loss, grad, pick) < 1e-3);
  }
  SUBCASE("w.r.t. bias") {
    auto grad = [&]() {
      conv.wgrad.zero();
      conv.bgrad.zero();
      conv.forward(x);
      conv.backward(probe);
      return conv.bgrad;
    };
    Rng pick(4);
    CHECK(finite_diff_check(conv.bias, loss, grad, pick) < 1e-3);
  }
  SUBCASE("w.r.t. input") {
    auto grad = [&]() {
      conv.forward(x);
      return conv.backward(probe);
    };
    Rng pick(5);
    CHECK(finite_diff_check(x, loss, grad, pick) < 1e-3);
  }
}

TEST_CASE("instance norm normalizes per sample and channel") {
  Rng rng(6);
  InstanceNorm2d norm(3);
  Tensor x = random_tensor(2, 3, 5, 5, rng, 4.0);
  Tensor y = norm.forward(x);
  for (int i = 0; i < 2; ++i) {
    for (int c = 0; c < 3; ++c) {
      real mean = 0, var = 0;
      for (int j = 0; j < 25; ++j) mean += y.data()[y.offset(i, c, 0, 0) + j];
      mean /= 25;
      for (int j = 0; j < 25; ++j) {
        const real d = y.data()[y.offset(i, c, 0, 0) + j] - mean;
        var += d * d;
      }
      var /= 25;
      CHECK(std::fabs(mean) < 1e-9);
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
}

TEST_CASE("instance norm gradients") {
  Rng rng(8);
  InstanceNorm2d norm(4);
  for (std::size_t i = 0; i < norm.gamma.size(); ++i) norm.gamma[i] = rng.uniform(0.5, 1.5);
  Tensor x = random_tensor(2, 4, 6, 6, rng, 2.0);
  Tensor probe;
  auto loss = [&]() {
    Tensor y = norm.forward(x);
    if (probe.empty()) probe = random_probe(y, 13);
    return tensor_dot(y, probe);
  };
  loss();
  auto gx = [&]() {
    norm.ggrad.zero();
    norm.bgrad.zero();
    norm.forward(x);
    return norm.backward(probe);
  };
  Rng pick(9);
  CHECK(finite_diff_check(x, loss, gx, pick) < 1e-3);
  auto ggamma = [&]() {
    norm.ggrad.zero();
    norm.bgrad.zero();
    norm.forward(x);
    norm.backward(probe);
    return norm.ggrad;
  };
  Rng pick2(10);
  CHECK(finite_diff_check(norm.gamma, loss, ggamma, pick2) < 1e-3);
}

TEST_CASE("batch norm train/eval semantics") {
  Rng rng(11);
  BatchNorm1d bn(4, 0.1);
  Tensor x = random_tensor(16, 4, 1, 1, rng, 3.0);

  Tensor y = bn.forward(x, /*train=*/true);
  for (int c = 0; c < 4; ++c) {
    real mean = 0;
    for (int i = 0; i < 16; ++i) mean += y.at(i, c, 0, 0);
    CHECK(std::fabs(mean / 16) < 1e-9);
  }
  // running stats moved toward the batch stats
  CHECK(bn.running_mean[0] != 0.0);

  // eval mode uses running statistics: a duplicated row maps identically
  Tensor two(2, 4, 1, 1);
  for (int c = 0; c < 4; ++c) {
    two.at(0, c, 0, 0) = 1.0 + c;
    two.at(1, c, 0, 0) = 1.0 + c;
  }
  Tensor e = bn.forward(two, /*train=*/false);
  for (int c = 0; c < 4; ++c) CHECK(e.at(0, c, 0, 0) == e.at(1, c, 0, 0));
}

TEST_CASE("batch norm gradients (train mode)") {
  Rng rng(12);
  BatchNorm1d bn(3, 0.1);
  for (std::size_t i = 0; i < bn.gamma.size(); ++i) bn.gamma[i] = rng.uniform(0.5, 1.5);
  Tensor x = random_tensor(10, 3, 1, 1, rng, 2.0);
  Tensor probe;
  auto loss = [&]() {
    BatchNorm1d fresh = bn;  // keep running stats fixed across evaluations
    Tensor y = fresh.forward(x, true);
    if (probe.empty()) probe = random_probe(y, 21);
    return tensor_dot(y, probe);
  };
  loss();
  auto gx = [&]() {
    BatchNorm1d fresh = bn;
    fresh.forward(x, true);
    Tensor g = fresh.backward(probe);
    return g;
  };
  Rng pick(13);
  CHECK(finite_diff_check(x, loss, gx, pick) < 1e-3);
}

TEST_CASE("stage shape contract") {
  Rng rng(14);
  Stage keep(StageSpec{8, 8, 2, false});
  keep.init(rng);
  FeatureMap x{random_tensor(1, 8, 12, 12, rng), 4};
  FeatureMap y = keep.forward(x);
  CHECK(y.data.h() == 12);
  CHECK(y.data.w() == 12);
  CHECK(y.stride == 4);

  // chained downsampling stages: stride 4 -> 8 -> 16
  Stage d1(StageSpec{8, 12, 2, true});
  Stage d2(StageSpec{12, 16, 2, true});
  d1.init(rng);
  d2.init(rng);
  FeatureMap h1 = d1.forward(x);
  FeatureMap h2 = d2.forward(h1);
  CHECK(h1.stride == 8);
  CHECK(h2.stride == 16);
  CHECK(h1.data.h() == 6);
  CHECK(h2.data.h() == 3);
  CHECK(h2.data.c() == 16);
}

TEST_CASE("stage gradient matches finite differences") {
  Rng rng(15);
  Stage stage(StageSpec{3, 5, 2, true});
  stage.init(rng);
  Tensor x = random_tensor(1, 3, 8, 8, rng);
  Tensor probe;
  auto loss = [&]() {
    Tensor y = stage.forward(x);
    if (probe.empty()) probe = random_probe(y, 31);
    return tensor_dot(y, probe);
  };
  loss();
  ParamRefs params;
  stage.register_params("stage", params);
  Rng pick(16);
  for (auto& p : params) {
    auto grad = [&]() {
      for (auto& q : params) q.grad->zero();
      stage.forward(x);
      stage.backward(probe);
      return *p.grad;
    };
    CHECK_MESSAGE(finite_diff_check(*p.value, loss, grad, pick, 4) < 1e-3, p.name);
  }
}

TEST_CASE("input layer is deterministic and stride 4") {
  InputLayer layer(6, 12, 42);
  Rng rng(17);
  Tensor img = random_tensor(1, 3, 128, 128, rng, 0.5);
  FeatureMap a = layer.forward(img);
  FeatureMap b = layer.forward(img);
  CHECK(a.stride == 4);
  CHECK(a.data.h() == 32);
  CHECK(a.data.w() == 32);
  CHECK(a.data.c() == 12);
  CHECK(tensor_max_abs_diff(a.data, b.data) == 0.0);
  CHECK_THROWS_AS(layer.forward(Tensor(1, 1, 64, 64)), ConfigError);

  // same seed, same parameters
  InputLayer again(6, 12, 42);
  FeatureMap c = again.forward(img);
  CHECK(tensor_max_abs_diff(a.data, c.data) == 0.0);
}

TEST_CASE("side-ada homogeneous is the identity with no parameters") {
  SideAda ada = SideAda::identity();
  Rng rng(18);
  FeatureMap x{random_tensor(1, 6, 9, 9, rng), 4};
  FeatureMap y = ada.forward(x);
  CHECK(tensor_max_abs_diff(x.data, y.data) == 0.0);
  ParamRefs params;
  ada.register_params("ada", params);
  CHECK(params.empty());
}

TEST_CASE("side-ada heterogeneous reshapes channels") {
  Rng rng(19);
  SideAda ada = SideAda::conv(64, 32, rng);
  FeatureMap x{random_tensor(1, 64, 7, 5, rng), 4};
  FeatureMap y = ada.forward(x);
  CHECK(y.data.c() == 32);
  CHECK(y.data.h() == 7);
  CHECK(y.data.w() == 5);
  ParamRefs params;
  ada.register_params("ada", params);
  CHECK(params.size() == 2);
}

TEST_CASE("side-fusion endpoints and algebra") {
  Rng rng(20);
  SideFusion f = SideFusion::homogeneous(0.5);
  FeatureMap xd{Tensor(1, 3, 4, 4), 8};
  FeatureMap xr{Tensor(1, 3, 4, 4), 8};
  xd.data.fill(2.0);
  xr.data.fill(4.0);

  FeatureMap mid = f.forward(xd, xr);
  for (std::size_t i = 0; i < mid.data.size(); ++i) CHECK(mid.data[i] == doctest::Approx(3.0));

  f.set_alpha(1.0);
  CHECK(f.alpha() == doctest::Approx(1.0).epsilon(1e-12));
  FeatureMap top = f.forward(xd, xr);
  CHECK(tensor_max_abs_diff(top.data, xd.data) < 1e-7);

  f.set_alpha(0.0);
  FeatureMap bot = f.forward(xd, xr);
  CHECK(tensor_max_abs_diff(bot.data, xr.data) < 1e-7);

  FeatureMap bad{Tensor(1, 4, 4, 4), 8};
  f.set_alpha(0.5);
  CHECK_THROWS_AS(f.forward(bad, xr), ConfigError);
}

TEST_CASE("side-fusion gradient reaches alpha and both inputs") {
  Rng rng(21);
  SideFusion f = SideFusion::homogeneous(0.37);
  Tensor xd = random_tensor(1, 3, 5, 5, rng);
  Tensor xr = random_tensor(1, 3, 5, 5, rng);
  Tensor probe = random_probe(xd, 55);

  auto loss = [&]() {
    FeatureMap y = f.forward(FeatureMap{xd, 8}, FeatureMap{xr, 8});
    return tensor_dot(y.data, probe);
  };
  auto galpha = [&]() {
    f.alpha_raw_grad.zero();
    f.forward(FeatureMap{xd, 8}, FeatureMap{xr, 8});
    f.backward(probe);
    return f.alpha_raw_grad;
  };
  Rng pick(22);
  CHECK(finite_diff_check(f.alpha_raw, loss, galpha, pick, 3) < 1e-3);

  // dxs/dxd == alpha * I, checked numerically
  f.forward(FeatureMap{xd, 8}, FeatureMap{xr, 8});
  auto [gxd, gxr] = f.backward(probe);
  const real a = f.alpha();
  for (std::size_t i = 0; i < gxd.size(); ++i) {
    CHECK(gxd[i] == doctest::Approx(a * probe[i]).epsilon(1e-10));
    CHECK(gxr[i] == doctest::Approx((1 - a) * probe[i]).epsilon(1e-10));
  }
}

TEST_CASE("heterogeneous side-fusion adds a projected tap") {
  Rng rng(23);
  SideFusion f = SideFusion::heterogeneous(6, 4, rng);
  Tensor xd = random_tensor(1, 6, 5, 5, rng);
  Tensor xr = random_tensor(1, 4, 5, 5, rng);
  FeatureMap y = f.forward(FeatureMap{xd, 8}, FeatureMap{xr, 8});
  CHECK(y.data.c() == 4);
  Tensor probe = random_probe(y.data, 88);
  auto [gxd, gxr] = f.backward(probe);
  CHECK(gxd.c() == 6);
  // the re-id branch sees the gradient unchanged
  CHECK(tensor_max_abs_diff(gxr, probe) == 0.0);
}

TEST_CASE("alpha parameterization keeps alpha in [0,1]") {
  SideFusion f = SideFusion::homogeneous(0.5);
  for (real raw : {-100.0, -5.0, 0.0, 5.0, 100.0}) {
    f.alpha_raw[0] = raw;
    CHECK(f.alpha() >= 0.0);
    CHECK(f.alpha() <= 1.0);
  }
}

TEST_CASE("roi align: constant map pools to the constant") {
  FeatureMap fmap{Tensor(1, 2, 8, 8), 16};
  fmap.data.fill(3.25);
  RoiAlign roi(16, 8);
  const std::vector<Box> boxes = {Box{10, 20, 50, 90}, Box{0.5, 0.5, 30, 40}};
  Tensor out = roi.forward(fmap, boxes);
  CHECK(out.n() == 2);
  CHECK(out.c() == 2);
  CHECK(out.h() == 16);
  CHECK(out.w() == 8);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("roi align reproduces a linear ramp exactly") {
  // feature value = 2*u + 3*v + 1 at feature coords; bilinear sampling of an
  // affine map is exact away from the clamped border
  const int stride = 16;
  FeatureMap fmap{Tensor(1, 1, 8, 8), stride};
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) fmap.data.at(0, 0, v, u) = 2.0 * u + 3.0 * v + 1.0;
  RoiAlign roi(5, 4);
  const Box b{30, 26, 100, 96};  // safely interior
  Tensor out = roi.forward(fmap, {b});
  const auto grid = roi_grid(b, 5, 4);
  for (int cell = 0; cell < 20; ++cell) {
    const real u = grid[cell].x / stride - 0.5;
    const real v = grid[cell].y / stride - 0.5;
    CHECK(std::fabs(out[cell] - (2.0 * u + 3.0 * v + 1.0)) < 1e-5);
  }
}

TEST_CASE("roi align backward matches finite differences") {
  Rng rng(29);
  Tensor fdata = random_tensor(1, 3, 8, 8, rng);
  RoiAlign roi(4, 3);
  const std::vector<Box> boxes = {Box{5, 5, 60, 100}, Box{40, 10, 90, 70}};
  Tensor probe;
  auto loss = [&]() {
    Tensor y = roi.forward(FeatureMap{fdata, 16}, boxes);
    if (probe.empty()) probe = random_probe(y, 91);
    return tensor_dot(y, probe);
  };
  loss();
  auto grad = [&]() {
    roi.forward(FeatureMap{fdata, 16}, boxes);
    return roi.backward(probe);
  };
  Rng pick(30);
  CHECK(finite_diff_check(fdata, loss, grad, pick) < 1e-3);
}

TEST_CASE("global average pool") {
  Rng rng(31);
  Tensor x = random_tensor(2, 3, 4, 4, rng);
  GlobalAvgPool gap;
  Tensor y = gap.forward(x);
  CHECK(y.h() == 1);
  real mean = 0;
  for (int j = 0; j < 16; ++j) mean += x.data()[x.offset(1, 2, 0, 0) + j];
  CHECK(y.at(1, 2, 0, 0) == doctest::Approx(mean / 16));
  Tensor probe = random_probe(y, 93);
  Tensor gx = gap.backward(probe);
  CHECK(gx.same_shape(x));
  CHECK(gx.at(0, 0, 0, 0) == doctest::Approx(probe.at(0, 0, 0, 0) / 16));
}
