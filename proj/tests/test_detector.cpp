#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "psearch/detector.hpp"

using namespace psearch;
using psearch::testing::finite_diff_check;
using psearch::testing::random_tensor;

namespace {

DetectorConfig small_config() {
  DetectorConfig cfg;
  cfg.layer1 = StageSpec{0, 8, 1, true};
  cfg.layer2 = StageSpec{8, 12, 1, true};
  cfg.head_channels = 12;
  return cfg;
}

DensePreds make_preds(int gh, int gw, int stride = 16) {
  DensePreds p;
  p.objectness = Tensor(1, 1, gh, gw);
  p.box_reg = Tensor(1, 4, gh, gw);
  p.stride = stride;
  p.image_h = gh * stride;
  p.image_w = gw * stride;
  return p;
}

// raw regression targets that decode exactly onto gt at cell (i,j)
void set_perfect_cell(DensePreds& p, int i, int j, const Box& gt) {
  const real cx = (j + 0.5) * p.stride;
  const real cy = (i + 0.5) * p.stride;
  p.box_reg.at(0, 0, i, j) = std::log((cx - gt.x1) / p.stride);
  p.box_reg.at(0, 1, i, j) = std::log((cy - gt.y1) / p.stride);
  p.box_reg.at(0, 2, i, j) = std::log((gt.x2 - cx) / p.stride);
  p.box_reg.at(0, 3, i, j) = std::log((gt.y2 - cy) / p.stride);
}

}  // namespace

TEST_CASE("detect_forward grid arithmetic and taps") {
  Rng rng(1);
  DetectionNet net(small_config(), 6, rng);
  FeatureMap x0{random_tensor(1, 6, 32, 32, rng), 4};  // a 128x128 image after the input layer
  auto f = net.forward(x0);
  CHECK(f.preds.objectness.h() == 8);
  CHECK(f.preds.objectness.w() == 8);
  CHECK(f.preds.box_reg.c() == 4);
  CHECK(f.preds.stride == 16);
  CHECK(f.tap1.stride == 8);
  CHECK(f.tap2.stride == 16);
  CHECK(DetectionNet::kNumFusionTaps == 2);
}

TEST_CASE("zero weights give uniform 0.5 objectness") {
  Rng rng(2);
  DetectionNet net(small_config(), 6, rng);
  ParamRefs params;
  net.register_params("det", params);
  for (auto& p : params) p.value->zero();
  FeatureMap x0{random_tensor(1, 6, 16, 16, rng), 4};
  auto f = net.forward(x0);
  for (std::size_t i = 0; i < f.preds.objectness.size(); ++i) {
    CHECK(1.0 / (1.0 + std::exp(-f.preds.objectness[i])) == doctest::Approx(0.5));
  }
}

TEST_CASE("detection loss at the optimum is tiny") {
  DensePreds p = make_preds(8, 8);
  const Box gt{30, 40, 60, 90};
  // strong negative logits everywhere, strong positive at assigned cells
  p.objectness.fill(-12.0);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      const real cx = (j + 0.5) * 16, cy = (i + 0.5) * 16;
      if (cx > gt.x1 && cx < gt.x2 && cy > gt.y1 && cy < gt.y2) {
        p.objectness.at(0, 0, i, j) = 12.0;
        set_perfect_cell(p, i, j, gt);
      }
    }
  }
  const DetectionLoss l = detection_loss(p, {gt});
  CHECK(l.num_pos > 0);
  CHECK(l.total < 1e-3);
}

TEST_CASE("empty GT yields a zero box term") {
  DensePreds p = make_preds(4, 4);
  Rng rng(3);
  for (std::size_t i = 0; i < p.objectness.size(); ++i) p.objectness[i] = rng.normal();
  const DetectionLoss l = detection_loss(p, {});
  CHECK(l.num_pos == 0);
  CHECK(l.box == 0.0);
  CHECK(l.cls > 0.0);
}

TEST_CASE("detection loss gradients match finite differences") {
  DensePreds p = make_preds(6, 6);
  Rng rng(4);
  for (std::size_t i = 0; i < p.objectness.size(); ++i) p.objectness[i] = rng.normal(0, 0.7);
  for (std::size_t i = 0; i < p.box_reg.size(); ++i) p.box_reg[i] = rng.normal(0, 0.4);
  const std::vector<Box> gt = {Box{20, 15, 60, 80}, Box{55, 40, 90, 92}};

  auto loss = [&]() { return detection_loss(p, gt, false).total; };
  auto gobj = [&]() { return detection_loss(p, gt, true).gobj; };
  auto gbox = [&]() { return detection_loss(p, gt, true).gbox; };
  Rng pick(5);
  CHECK(finite_diff_check(p.objectness, loss, gobj, pick) < 1e-3);
  Rng pick2(6);
  CHECK(finite_diff_check(p.box_reg, loss, gbox, pick2) < 1e-3);
}

TEST_CASE("single-image overfit drives the loss down monotonically-ish") {
  Rng rng(7);
  DetectionNet net(small_config(), 6, rng);
  FeatureMap x0{random_tensor(1, 6, 32, 32, rng, 0.5), 4};
  const std::vector<Box> gt = {Box{20, 20, 56, 88}};
  ParamRefs params;
  net.register_params("det", params);

  real first = 0, last = 0;
  real prev = 1e30;
  int increases = 0;
  for (int step = 0; step < 50; ++step) {
    for (auto& p : params) p.grad->zero();
    auto f = net.forward(x0);
    DetectionLoss l = detection_loss(f.preds, gt);
    net.backward(&l.gobj, &l.gbox, nullptr, nullptr);
    for (auto& p : params) {
      for (std::size_t i = 0; i < p.value->size(); ++i) (*p.value)[i] -= 0.01 * (*p.grad)[i];
    }
    if (step == 0) first = l.total;
    last = l.total;
    if (l.total > prev + 1e-9) ++increases;
    prev = l.total;
  }
  CHECK(last < first);
  CHECK(last < 0.25 * first);
  CHECK(increases <= 5);  // plain SGD may wobble a little
}

TEST_CASE("nms removes duplicates and keeps score order") {
  std::vector<Detection> dets = {{Box{0, 0, 10, 10}, 0.9}, {Box{0, 0, 10, 10}, 0.8}};
  auto kept = nms(dets, 0.5, 100);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == doctest::Approx(0.9));

  // pairwise IoUs {0.9, 0.1, 0.1}: the overlapping pair collapses
  std::vector<Detection> three = {{Box{0, 0, 10, 10}, 0.9},
                                  {Box{0, 0.5, 10, 10.5}, 0.8},
                                  {Box{30, 30, 40, 40}, 0.7}};
  CHECK(iou(three[0].box, three[1].box) > 0.8);
  CHECK(iou(three[0].box, three[2].box) < 0.2);
  auto kept3 = nms(three, 0.5, 100);
  REQUIRE(kept3.size() == 2);
  CHECK(kept3[0].score == doctest::Approx(0.9));
  CHECK(kept3[1].score == doctest::Approx(0.7));
  for (std::size_t a = 0; a < kept3.size(); ++a)
    for (std::size_t b = a + 1; b < kept3.size(); ++b) CHECK(iou(kept3[a].box, kept3[b].box) < 0.5);
}

TEST_CASE("decode_and_nms respects threshold and caps") {
  DetectorConfig cfg = small_config();
  cfg.score_threshold = 0.6;
  DensePreds p = make_preds(4, 4);
  p.objectness.fill(-3.0);  // sigmoid ~ 0.047, all below threshold
  CHECK(decode_and_nms(p, cfg).empty());

  p.objectness.at(0, 0, 1, 1) = 3.0;
  p.objectness.at(0, 0, 2, 2) = 2.0;
  auto dets = decode_and_nms(p, cfg);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].score > dets[1].score);
  for (const auto& d : dets) {
    CHECK(d.box.valid());
    CHECK(d.box.x1 >= 0.0);
    CHECK(d.box.x2 <= p.image_w);
  }

  cfg.max_detections = 1;
  CHECK(decode_and_nms(p, cfg).size() == 1);
}
