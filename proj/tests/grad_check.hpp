#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "psearch/rng.hpp"
#include "psearch/tensor.hpp"

namespace psearch::testing {

/// Central finite differences against an analytic gradient at
/// num_points randomly chosen coordinates of `target`.
///
/// loss_fn  : recomputes the scalar loss from current tensor contents
/// grad_fn  : recomputes and returns the analytic gradient of `target`
/// Returns the worst relative error over the sampled coordinates.
inline real finite_diff_check(Tensor& target, const std::function<real()>& loss_fn,
                              const std::function<Tensor()>& grad_fn, Rng& rng,
                              int num_points = 10, real eps = 1e-6) {
  const Tensor analytic = grad_fn();
  real worst = 0;
  for (int p = 0; p < num_points; ++p) {
    const std::size_t i = rng.next_u64() % target.size();
    const real saved = target[i];
    const real step = eps * std::max(1.0, std::fabs(saved));
    target[i] = saved + step;
    const real up = loss_fn();
    target[i] = saved - step;
    const real down = loss_fn();
    target[i] = saved;
    const real numeric = (up - down) / (2 * step);
    const real denom = std::max({std::fabs(numeric), std::fabs(analytic[i]), 1e-8});
    worst = std::max(worst, std::fabs(numeric - analytic[i]) / denom);
  }
  return worst;
}

inline Tensor random_tensor(int n, int c, int h, int w, Rng& rng, real scale = 1.0) {
  Tensor t(n, c, h, w);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

}  // namespace psearch::testing
