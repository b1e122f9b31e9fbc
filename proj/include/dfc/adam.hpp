// Optimizers. Both operate on raw coefficient vectors so the same update
// path serves live parameters, sign-quantization buffers, and masked
// (lottery) training. State is keyed by parameter id.
#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dfc/common.hpp"

namespace dfc {

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // Call once per optimizer step, before the per-parameter updates; the bias
  // correction uses the shared step count.
  void begin_step() { ++t_; }

  // In-place update of w given gradient g. With `ascent` the step is taken
  // uphill (generator maximization). `mask`, if present, freezes entries:
  // masked-out coordinates keep zero moments and are left untouched.
  void update(const std::string& key, std::vector<double>& w,
              const std::vector<double>& g,
              const std::vector<double>* mask = nullptr, bool ascent = false) {
    DFC_CHECK(t_ >= 1, "Adam::update called before begin_step");
    DFC_CHECK(w.size() == g.size(), "Adam::update size mismatch for " << key);
    auto& m = m_[key];
    auto& v = v_[key];
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    DFC_CHECK(m.size() == w.size(), "Adam state size changed for " << key);
    double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    double sgn = ascent ? 1.0 : -1.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (mask && (*mask)[i] == 0.0) continue;
      double gi = g[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
      v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
      double mh = m[i] / c1, vh = v[i] / c2;
      w[i] += sgn * lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }

  double lr() const { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, std::vector<double>> m_, v_;
};

class SgdMomentum {
 public:
  explicit SgdMomentum(double lr, double momentum = 0.9)
      : lr_(lr), mu_(momentum) {}

  void update(const std::string& key, std::vector<double>& w,
              const std::vector<double>& g,
              const std::vector<double>* mask = nullptr) {
    DFC_CHECK(w.size() == g.size(), "SgdMomentum size mismatch for " << key);
    auto& v = v_[key];
    if (v.empty()) v.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (mask && (*mask)[i] == 0.0) continue;
      v[i] = mu_ * v[i] + g[i];
      w[i] -= lr_ * v[i];
    }
  }

 private:
  double lr_, mu_;
  std::unordered_map<std::string, std::vector<double>> v_;
};

}  // namespace dfc
