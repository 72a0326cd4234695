#pragma once

#include <cmath>
#include <random>

#include "bixnas/common.hpp"

namespace bixnas {

// mt19937_64 with hand-rolled value mappings. The std distributions are
// implementation-defined, so all sampling goes through the mappings below
// to keep seeded runs reproducible.
class Rng {
 public:
  explicit Rng(u64 seed) : gen_(seed) {}

  u64 next() { return gen_(); }

  // Uniform in [0, 1).
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [lo, hi], inclusive.
  i64 uniform_int(i64 lo, i64 hi) {
    const u64 range = static_cast<u64>(hi - lo) + 1;
    const u64 v = static_cast<u64>((static_cast<unsigned __int128>(next()) * range) >> 64);
    return lo + static_cast<i64>(v);
  }

  // Box-Muller, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Standard Gumbel(0, 1) noise: -log(-log(u)).
  double gumbel() {
    double u = uniform01();
    if (u < 1e-300) u = 1e-300;
    return -std::log(-std::log(u));
  }

  // Deterministic partial Fisher-Yates: uniformly permutes the first k slots.
  template <class T>
  void shuffle_prefix(std::vector<T>& v, std::size_t k) {
    const std::size_t n = v.size();
    for (std::size_t i = 0; i < k && i + 1 < n; ++i) {
      const auto j = static_cast<std::size_t>(uniform_int(static_cast<i64>(i), static_cast<i64>(n - 1)));
      std::swap(v[i], v[j]);
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    shuffle_prefix(v, v.size());
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace bixnas
