#pragma once

#include <cstdint>
#include <random>

namespace mevs {

// Stream splitting: substream k of a master seed is
// splitmix64(master + (k+1) * 0x9E3779B97F4A7C15), i.e. the (k+1)-th output
// of a SplitMix64 sequence started at the master seed. Used to derive
// independent per-replication (and per-chunk) seeds.
std::uint64_t split_seed(std::uint64_t master, std::uint64_t substream);

// Deterministic generator: mt19937_64 engine with our own inverse-CDF
// transforms so draws do not depend on the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // uniform on [0,1) with 53-bit resolution
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // standard normal via Wichura's PPND16 inverse CDF
  double normal() { return norm_inv_cdf(nonzero_uniform()); }
  double normal(double mean, double sd) { return mean + sd * normal(); }

  // P(true) = p
  bool bernoulli(double p) { return uniform() < p; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t next_u64() { return eng_(); }

  // Inverse of the standard normal CDF (AS 241, double precision).
  static double norm_inv_cdf(double p);

  static const char* generator_name() { return "mt19937_64+splitmix64"; }

 private:
  double nonzero_uniform() {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return u;
  }
  std::mt19937_64 eng_;
};

}  // namespace mevs
