#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace psearch {

using real = double;

/// Dense row-major (n, c, h, w) array. Scene images use n == 1, batched
/// box features use n == number of boxes. All arithmetic in the library
/// runs in double precision.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w)
      : n_(n), c_(c), h_(h), w_(w), data_(static_cast<std::size_t>(n) * c * h * w, 0.0) {
    if (n < 0 || c < 0 || h < 0 || w < 0) {
      throw std::invalid_argument("Tensor: negative dimension");
    }
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  real& at(int i, int ci, int y, int x) { return data_[offset(i, ci, y, x)]; }
  real at(int i, int ci, int y, int x) const { return data_[offset(i, ci, y, x)]; }

  std::size_t offset(int i, int ci, int y, int x) const {
    return ((static_cast<std::size_t>(i) * c_ + ci) * h_ + y) * w_ + x;
  }

  void fill(real v) { data_.assign(data_.size(), v); }
  void zero() { fill(0.0); }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_str() const {
    return "(" + std::to_string(n_) + "," + std::to_string(c_) + "," + std::to_string(h_) +
           "," + std::to_string(w_) + ")";
  }

  static Tensor zeros_like(const Tensor& o) { return Tensor(o.n_, o.c_, o.h_, o.w_); }

  /// this += a * s
  void axpy(const Tensor& a, real s) {
    require_same_shape(a, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * a.data_[i];
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (!same_shape(o)) {
      throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str() +
                                  " vs " + o.shape_str());
    }
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<real> data_;
};

inline real tensor_dot(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "tensor_dot");
  real s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline real tensor_max_abs_diff(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "tensor_max_abs_diff");
  real m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    real d = a[i] > b[i] ? a[i] - b[i] : b[i] - a[i];
    if (d > m) m = d;
  }
  return m;
}

/// Input error: bad data fed to an operation (labels out of range, ...).
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Configuration error: invalid or inconsistent configs, shape mismatches
/// between configured components, checkpoint/architecture mismatches.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace psearch
