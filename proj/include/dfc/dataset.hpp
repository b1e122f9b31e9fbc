// Seeded synthetic image data: 10 classes of 8x8 single-channel Gaussian
// blobs. Every sample is a pure function of (seed, index), so any two runs
// (and any two machines with the same libm) produce identical bytes.
//
// Construction, fully specified:
//   class c = index mod 10
//   per-sample rng  = Rng(mix_seed(seed, index))   (splitmix64, see common.hpp)
//   draw order      = jx, jy, amp, then 64 pixel noises row-major
//   centre_x = 3.5 + 2.4 cos(2 pi c / 10) + 0.2 * jx,   jx ~ N(0,1)
//   centre_y = 3.5 + 2.4 sin(2 pi c / 10) + 0.2 * jy,   jy ~ N(0,1)
//   sigma_c  = 0.9 + 0.04 c
//   amp      = 1 + 0.1 * N(0,1)
//   pixel(y,x) = amp * exp(-((x-cx)^2 + (y-cy)^2) / (2 sigma_c^2)) + 0.05 * N(0,1)
#pragma once

#include <cmath>

#include "dfc/tensor.hpp"

namespace dfc {

constexpr int kImageSide = 8;
constexpr int kNumClasses = 10;

// Index blocks: train data starts at 0, held-out evaluation data and the
// distillation agreement probe live far away so the streams never overlap.
constexpr std::int64_t kEvalIndexBase = 1 << 20;
constexpr std::int64_t kProbeIndexBase = 1 << 21;

inline int synth_label(std::int64_t index) {
  return static_cast<int>(index % kNumClasses);
}

inline void synth_image(std::uint64_t seed, std::int64_t index, double* out64) {
  int c = synth_label(index);
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  double jx = rng.normal();
  double jy = rng.normal();
  double amp = 1.0 + 0.1 * rng.normal();
  const double tau = 2.0 * 3.14159265358979323846;
  double cx = 3.5 + 2.4 * std::cos(tau * c / 10.0) + 0.2 * jx;
  double cy = 3.5 + 2.4 * std::sin(tau * c / 10.0) + 0.2 * jy;
  double sigma = 0.9 + 0.04 * c;
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (int y = 0; y < kImageSide; ++y)
    for (int x = 0; x < kImageSide; ++x) {
      double dx = x - cx, dy = y - cy;
      out64[y * kImageSide + x] =
          amp * std::exp(-(dx * dx + dy * dy) * inv) + 0.05 * rng.normal();
    }
}

// Batch of consecutive indices [start, start+n) as an (n,1,8,8) tensor.
inline Tensor synth_batch(std::uint64_t seed, std::int64_t start, std::int64_t n,
                          std::vector<std::int64_t>* labels = nullptr) {
  Tensor t(Shape{n, 1, kImageSide, kImageSide});
  if (labels) labels->resize(n);
  for (std::int64_t i = 0; i < n; ++i) {
    synth_image(seed, start + i, t.data.data() + i * kImageSide * kImageSide);
    if (labels) (*labels)[i] = synth_label(start + i);
  }
  return t;
}

// Batch at explicit (possibly shuffled) indices.
inline Tensor synth_batch_at(std::uint64_t seed, const std::vector<std::int64_t>& idx,
                             std::vector<std::int64_t>* labels = nullptr) {
  std::int64_t n = static_cast<std::int64_t>(idx.size());
  Tensor t(Shape{n, 1, kImageSide, kImageSide});
  if (labels) labels->resize(n);
  for (std::int64_t i = 0; i < n; ++i) {
    synth_image(seed, idx[i], t.data.data() + i * kImageSide * kImageSide);
    if (labels) (*labels)[i] = synth_label(idx[i]);
  }
  return t;
}

}  // namespace dfc
