#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "psearch/geometry.hpp"
#include "psearch/rng.hpp"

using namespace psearch;

TEST_CASE("iou basics") {
  const Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, Box{5, 5, 7, 7}) == 0.0);
  // areas 4 and 4, intersection 2, union 6
  const Box b{1, 0, 3, 2};
  CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(iou(a, b) == doctest::Approx(iou(b, a)));
}

TEST_CASE("iou is monotone as boxes separate") {
  const Box a{0, 0, 10, 10};
  real prev = 1.0;
  for (int shift = 0; shift <= 12; ++shift) {
    const Box b{static_cast<real>(shift), 0, static_cast<real>(shift + 10), 10};
    const real v = iou(a, b);
    CHECK(v <= prev + 1e-12);
    prev = v;
  }
  CHECK(prev == 0.0);
}

TEST_CASE("iou symmetry on random pairs") {
  Rng rng(7);
  for (int k = 0; k < 200; ++k) {
    const Box a{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(51, 100), rng.uniform(51, 100)};
    const Box b{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(51, 100), rng.uniform(51, 100)};
    CHECK(iou(a, b) == doctest::Approx(iou(b, a)).epsilon(1e-14));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
}

TEST_CASE("box corner/center round trip") {
  Rng rng(3);
  for (int k = 0; k < 100; ++k) {
    const Box b{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(41, 90), rng.uniform(41, 90)};
    const Box r = Box::from_center(b.center_x(), b.center_y(), b.width(), b.height());
    CHECK(std::fabs(r.x1 - b.x1) < 1e-6);
    CHECK(std::fabs(r.y1 - b.y1) < 1e-6);
    CHECK(std::fabs(r.x2 - b.x2) < 1e-6);
    CHECK(std::fabs(r.y2 - b.y2) < 1e-6);
  }
}

TEST_CASE("sna_augment returns n boxes obeying the noise bounds") {
  const Box b = Box::from_center(10, 10, 4, 6);
  SnaConfig cfg;
  cfg.lambda1 = 0.5;
  cfg.lambda2 = 0.3;
  cfg.n = 5;
  Rng rng(11);
  const auto out = sna_augment(b, cfg, rng);
  CHECK(out.size() == 5);

  // Monte-Carlo bound check: centers stay in (9,11) x (8.5,11.5)
  Rng mc(12);
  cfg.n = 1;
  for (int k = 0; k < 10000; ++k) {
    const auto v = sna_augment(b, cfg, mc);
    const Box& a = v[0];
    CHECK(std::fabs(a.center_x() - 10.0) < cfg.lambda1 * b.width() / 2);
    CHECK(std::fabs(a.center_y() - 10.0) < cfg.lambda1 * b.height() / 2);
    CHECK(a.width() >= (1 - cfg.lambda2) * b.width());
    CHECK(a.width() <= (1 + cfg.lambda2) * b.width());
    CHECK(a.height() >= (1 - cfg.lambda2) * b.height());
    CHECK(a.height() <= (1 + cfg.lambda2) * b.height());
  }
}

TEST_CASE("sna_augment zero-noise limit reproduces the box") {
  const Box b = Box::from_center(30, 40, 12, 20);
  SnaConfig cfg;
  cfg.lambda1 = 1e-9;
  cfg.lambda2 = 1e-9;
  cfg.n = 8;
  Rng rng(5);
  for (const Box& a : sna_augment(b, cfg, rng)) {
    CHECK(std::fabs(a.x1 - b.x1) < 1e-6);
    CHECK(std::fabs(a.y1 - b.y1) < 1e-6);
    CHECK(std::fabs(a.x2 - b.x2) < 1e-6);
    CHECK(std::fabs(a.y2 - b.y2) < 1e-6);
  }
}

TEST_CASE("sna_augment is deterministic for a fixed stream") {
  const Box b = Box::from_center(20, 20, 10, 16);
  SnaConfig cfg;
  Rng r1(99), r2(99);
  const auto a = sna_augment(b, cfg, r1);
  const auto c = sna_augment(b, cfg, r2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].x1 == c[i].x1);
    CHECK(a[i].y2 == c[i].y2);
  }
}

TEST_CASE("sna_augment clips to the image and falls back on degenerates") {
  // box hugging the left edge; strong noise pushes copies outside
  const Box b{0.0, 0.0, 3.0, 3.0};
  SnaConfig cfg;
  cfg.lambda1 = 0.9;
  cfg.lambda2 = 0.9;
  cfg.n = 500;
  Rng rng(41);
  int fallbacks = 0;
  const auto out = sna_augment(b, cfg, rng, ClipRect{8, 8}, &fallbacks);
  for (const Box& a : out) {
    CHECK(a.valid());
    CHECK(a.x1 >= 0.0);
    CHECK(a.y1 >= 0.0);
    CHECK(a.x2 <= 8.0);
    CHECK(a.y2 <= 8.0);
  }
  // a clipped-away copy is replaced by the GT box, never dropped
  CHECK(out.size() == 500);
}

TEST_CASE("sna config validation") {
  SnaConfig cfg;
  cfg.lambda1 = 1.5;
  Rng rng(1);
  CHECK_THROWS_AS(sna_augment(Box{0, 0, 1, 1}, cfg, rng), ConfigError);
  cfg.lambda1 = 0.2;
  cfg.n = 0;
  CHECK_THROWS_AS(sna_augment(Box{0, 0, 1, 1}, cfg, rng), ConfigError);
}

TEST_CASE("roi_grid layout") {
  const Box b{4, 8, 12, 40};
  const auto grid = roi_grid(b, 16, 8);
  CHECK(grid.size() == 128);
  for (const auto& p : grid) {
    CHECK(p.x > b.x1);
    CHECK(p.x < b.x2);
    CHECK(p.y > b.y1);
    CHECK(p.y < b.y2);
  }
  // degenerate 1x1 grid sits at the box center
  const auto center = roi_grid(b, 1, 1);
  CHECK(center.size() == 1);
  CHECK(center[0].x == doctest::Approx(b.center_x()));
  CHECK(center[0].y == doctest::Approx(b.center_y()));
}

TEST_CASE("roi_grid spacing is uniform") {
  const Box b{0, 0, 8, 16};
  const auto grid = roi_grid(b, 4, 2);
  // first row: x = 2, 6; y = 2
  CHECK(grid[0].x == doctest::Approx(2.0));
  CHECK(grid[1].x == doctest::Approx(6.0));
  CHECK(grid[0].y == doctest::Approx(2.0));
  CHECK(grid[2].y == doctest::Approx(6.0));
}
