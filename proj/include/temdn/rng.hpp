#pragma once

#include <cmath>
#include <cstdint>

namespace temdn {

// Counter-seedable PRNG built on splitmix64. Every sampling primitive is
// implemented explicitly so streams are bit-reproducible across platforms
// and library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Independent per-record stream: hashes (seed, stream_id) into a fresh state.
  static Rng stream(uint64_t seed, uint64_t stream_id) {
    uint64_t s = mix(seed) ^ mix(stream_id * 0x9E3779B97F4A7C15ULL + 0x243F6A8885A308D3ULL);
    return Rng(mix(s));
  }

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  // [0, 1)
  double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * u01(); }

  double log_uniform(double a, double b) {
    return std::exp(uniform(std::log(a), std::log(b)));
  }

  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(u01() * static_cast<double>(n));
  }

  // Standard normal via Box-Muller; the second deviate is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - u01();  // (0, 1]
    double u2 = u01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Knuth's product method; adequate for the small rates used here.
  int poisson(double mean) {
    if (mean <= 0.0) return 0;
    double limit = std::exp(-mean);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= u01();
    } while (p > limit);
    return k - 1;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace temdn
