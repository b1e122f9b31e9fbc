// Shared basics: error type, checks, deterministic RNG.
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dfc {

// Raised for invalid configuration or arguments (CLI maps it to exit code 1).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised for runtime failures: shape mismatches, IO errors, violated
// preconditions (CLI maps it to exit code 2).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void raise(const std::string& msg) { throw Error(msg); }
}  // namespace detail

#define DFC_CHECK(cond, msg)                                        \
  do {                                                              \
    if (!(cond)) {                                                  \
      std::ostringstream oss_;                                      \
      oss_ << "check failed: " << msg;                              \
      ::dfc::detail::raise(oss_.str());                             \
    }                                                               \
  } while (0)

// splitmix64. All randomness in the library flows through this generator so
// that a (seed, draw order) pair fully determines every stream. Constants are
// the standard ones from Steele et al.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller on (u1, u2); the second value of each pair
  // is cached. Draw order is part of the documented stream contract.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return r * std::cos(theta);
  }

  // Range [0, n). Rejection-free modulo is fine for our n << 2^64 uses except
  // that we keep it unbiased anyway since shuffles feed determinism tests.
  std::uint64_t below(std::uint64_t n) {
    DFC_CHECK(n > 0, "Rng::below needs n > 0");
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

// Stream derivation: mixes a base seed with a stream tag so independent
// consumers (dataset samples, init, noise) never share a draw sequence.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  Rng r(seed ^ (0xD1B54A32D192ED03ull * (tag + 1)));
  return r.next_u64();
}

}  // namespace dfc
