#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace psearch {

/// Deterministic random stream. Every source of randomness in the library
/// is derived from one master seed through named substreams, so runs with
/// the same seed and config replay exactly (on one platform).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(mix(seed)) {}

  /// Derive an independent stream identified by a name (and optional index).
  Rng substream(std::string_view name, std::uint64_t index = 0) const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a over the name
    for (char ch : name) {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ull;
    }
    h ^= index + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return Rng(mix(seed_ ^ h));
  }

  std::uint64_t next_u64() { return gen_(); }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(gen_);
  }

  /// Inclusive range [lo, hi].
  int uniform_int(int lo, int hi) {
    std::uniform_int_distribution<int> d(lo, hi);
    return d(gen_);
  }

  bool bernoulli(double p) {
    std::bernoulli_distribution d(p);
    return d(gen_);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

}  // namespace psearch
