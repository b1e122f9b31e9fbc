// Sign quantization with full-precision shadow buffers. Quantized parameters
// live on the two-point grid {-delta, +delta}. Gradients are taken at the
// live (quantized) values, the optimizer updates the shadow buffer, the
// buffer is projected back into [-delta, delta], and the live value is
// re-derived as delta * sign(buffer). Optimizer moments are not projected.
// sign(0) counts as +1.
#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dfc/adam.hpp"
#include "dfc/checkpoint.hpp"
#include "dfc/network.hpp"

namespace dfc {

inline double sign_pm(double x) { return x >= 0.0 ? 1.0 : -1.0; }

struct QuantState {
  double delta = 0.1;
  std::set<std::string> quantized;  // param ids under sign quantization
  std::map<std::string, std::vector<double>> buffers;  // full-precision shadows
};

// Puts every quantizable parameter of `net` onto the sign grid. Shadow
// buffers start as the current live values clipped into [-delta, delta], so
// a teacher-initialized student keeps the teacher's sign pattern and small
// weights stay close to the flip boundary.
inline QuantState init_quantizer(NetworkGraph& net, double delta) {
  DFC_CHECK(delta > 0.0, "quantizer needs delta > 0");
  QuantState qs;
  qs.delta = delta;
  qs.quantized = quantizable_param_ids(net);
  for (const auto& id : qs.quantized) {
    Tensor& t = net.param(id);
    std::vector<double> buf(t.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      buf[i] = std::clamp(t.data[i], -delta, delta);
      t.data[i] = delta * sign_pm(buf[i]);
    }
    qs.buffers.emplace(id, std::move(buf));
  }
  return qs;
}

// One optimizer step for a quantized parameter: gradient (taken at the live
// values) drives the buffer, then project and requantize.
inline void quantized_step(QuantState& qs, Adam& opt, NetworkGraph& net,
                           const std::string& id,
                           const std::vector<double>& grad) {
  auto it = qs.buffers.find(id);
  DFC_CHECK(it != qs.buffers.end(), "'" << id << "' is not quantized");
  std::vector<double>& buf = it->second;
  opt.update(id, buf, grad);
  Tensor& live = net.param(id);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = std::clamp(buf[i], -qs.delta, qs.delta);
    live.data[i] = qs.delta * sign_pm(buf[i]);
  }
}

// Largest |live - buffer| distance; bounded by delta * sqrt(d) in L2, and by
// delta per coordinate, because the buffer lives inside the box the grid
// spans. Used by tests.
inline double max_quantization_gap(const QuantState& qs,
                                   const NetworkGraph& net) {
  double worst = 0.0;
  for (const auto& [id, buf] : qs.buffers) {
    const Tensor& live = net.param(id);
    for (std::size_t i = 0; i < buf.size(); ++i)
      worst = std::max(worst, std::abs(live.data[i] - buf[i]));
  }
  return worst;
}

}  // namespace dfc
