// Dense row-major double tensor. No views, no strides; data is always owned.
#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dfc/common.hpp"

namespace dfc {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    DFC_CHECK(d >= 0, "negative shape extent");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty means "no gradient stored"

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
  Tensor(Shape s, double fill)
      : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    DFC_CHECK(static_cast<std::int64_t>(data.size()) == shape_numel(shape),
              "data size " << data.size() << " does not match shape "
                           << shape_str(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim() const { return static_cast<std::int64_t>(shape.size()); }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline Tensor zeros(Shape s) { return Tensor(std::move(s)); }
inline Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
inline Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

inline Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = stddev * rng.normal();
  return t;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Flat index helpers for the 4-d (N, C, H, W) layout used by conv paths.
inline std::int64_t idx4(std::int64_t n, std::int64_t c, std::int64_t h,
                         std::int64_t w, std::int64_t C, std::int64_t H,
                         std::int64_t W) {
  return ((n * C + c) * H + h) * W + w;
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  DFC_CHECK(a.size() == b.size(), "max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = std::abs(a[i] - b[i]);
    if (d > m) m = d;
  }
  return m;
}

}  // namespace dfc
