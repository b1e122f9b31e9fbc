// Structured filter pruning on shared scale vectors. A channel of a scale
// group is dropped when |s| falls below the threshold; because every consumer
// of a group's feature stream reads it through a member norm, and a norm with
// s[c] = 0 outputs exactly zero on channel c in both train and eval mode,
// zeroing and physically removing a channel are the same function. The
// compaction here is therefore an exact graph rewrite, which tests verify to
// tight floating-point tolerance.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dfc/network.hpp"

namespace dfc {

struct PruneDecision {
  double threshold = 0.0;
  std::map<int, std::vector<std::int64_t>> kept;  // group id -> surviving channels
};

// Keep channel i iff |s_i| >= threshold. If a group would lose every
// channel, its largest-|s| channel is kept instead (lowest index on ties) so
// the graph stays connected.
inline PruneDecision threshold_prune(const NetworkGraph& net, double threshold) {
  PruneDecision d;
  d.threshold = threshold;
  for (const auto& [gid, g] : net.groups) {
    const Tensor& s = net.param(g.s_id);
    std::vector<std::int64_t> kept;
    for (std::int64_t i = 0; i < s.numel(); ++i)
      if (std::abs(s.data[i]) >= threshold) kept.push_back(i);
    if (kept.empty()) {
      std::int64_t best = 0;
      for (std::int64_t i = 1; i < s.numel(); ++i)
        if (std::abs(s.data[i]) > std::abs(s.data[best])) best = i;
      kept.push_back(best);
    }
    d.kept[gid] = std::move(kept);
  }
  return d;
}

// Zeroes the scale entries of dropped channels, leaving the graph's shape
// untouched. This is the reference semantics compaction must reproduce.
inline void apply_zero(NetworkGraph& net, const PruneDecision& d) {
  for (const auto& [gid, kept] : d.kept) {
    Tensor& s = net.param(net.groups.at(gid).s_id);
    std::vector<bool> keep(s.numel(), false);
    for (auto i : kept) keep[static_cast<std::size_t>(i)] = true;
    for (std::int64_t i = 0; i < s.numel(); ++i)
      if (!keep[static_cast<std::size_t>(i)]) s.data[i] = 0.0;
  }
}

namespace detail {

inline Tensor gather_axis0(const Tensor& t, const std::vector<std::int64_t>& idx) {
  Shape s = t.shape;
  s[0] = static_cast<std::int64_t>(idx.size());
  Tensor out(s);
  std::int64_t inner = t.numel() / t.shape[0];
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(t.data.data() + idx[r] * inner, inner,
                out.data.data() + static_cast<std::int64_t>(r) * inner);
  return out;
}

inline Tensor gather_axis1(const Tensor& t, const std::vector<std::int64_t>& idx) {
  Shape s = t.shape;
  s[1] = static_cast<std::int64_t>(idx.size());
  Tensor out(s);
  std::int64_t outer = t.shape[0];
  std::int64_t inner = t.numel() / (t.shape[0] * t.shape[1]);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy_n(t.data.data() + (o * t.shape[1] + idx[r]) * inner, inner,
                  out.data.data() +
                      (o * static_cast<std::int64_t>(idx.size()) +
                       static_cast<std::int64_t>(r)) *
                          inner);
  return out;
}

inline const std::vector<std::int64_t>* kept_for(const PruneDecision& d, int group) {
  if (group < 0) return nullptr;
  auto it = d.kept.find(group);
  DFC_CHECK(it != d.kept.end(), "prune decision lacks group " << group);
  return &it->second;
}

inline void compact_layers(NetworkGraph& net, std::vector<Layer>& layers,
                           const PruneDecision& d) {
  for (Layer& ly : layers) {
    switch (ly.kind) {
      case LayerKind::conv: {
        Tensor& w = net.param(ly.conv.wid);
        if (const auto* out = kept_for(d, ly.conv.out_group)) {
          w = gather_axis0(w, *out);
          ly.conv.out_c = static_cast<int>(out->size());
        }
        if (const auto* in = kept_for(d, ly.conv.in_group)) {
          w = gather_axis1(w, *in);
          ly.conv.in_c = static_cast<int>(in->size());
        }
        break;
      }
      case LayerKind::bn: {
        if (const auto* kept = kept_for(d, ly.bn.group)) {
          net.buffers.at(ly.bn.path + ".rm") =
              gather_axis0(net.buffers.at(ly.bn.path + ".rm"), *kept);
          net.buffers.at(ly.bn.path + ".rv") =
              gather_axis0(net.buffers.at(ly.bn.path + ".rv"), *kept);
          ly.bn.channels = static_cast<int>(kept->size());
        }
        break;
      }
      case LayerKind::dense: {
        if (const auto* in = kept_for(d, ly.dense.in_group)) {
          net.param(ly.dense.wid) = gather_axis0(net.param(ly.dense.wid), *in);
          ly.dense.in_f = static_cast<int>(in->size());
        }
        break;
      }
      case LayerKind::block:
        compact_layers(net, ly.pre, d);
        compact_layers(net, ly.body, d);
        compact_layers(net, ly.shortcut, d);
        break;
      default:
        break;
    }
  }
}

}  // namespace detail

// Physically removes dropped channels: slices scale/shift vectors, norm
// running stats, conv weights along both channel axes, and dense input rows,
// then updates the recorded dimensions. Exact by construction (see header
// comment); callers can verify with zero_then_compare.
inline void compact_network(NetworkGraph& net, const PruneDecision& d) {
  detail::compact_layers(net, net.layers, d);
  for (auto& [gid, g] : net.groups) {
    const auto* kept = detail::kept_for(d, gid);
    if (!kept) continue;
    net.param(g.s_id) = detail::gather_axis0(net.param(g.s_id), *kept);
    net.param(g.b_id) = detail::gather_axis0(net.param(g.b_id), *kept);
    g.channels = static_cast<int>(kept->size());
  }
  output_shape(net);  // validates the rewritten geometry
}

// Max |logit difference| between the zeroed and the compacted network on a
// probe batch, eval and train mode both (running stats are not updated).
inline double zero_then_compare(const NetworkGraph& net, const PruneDecision& d,
                                const Tensor& probe) {
  NetworkGraph zeroed = net;
  apply_zero(zeroed, d);
  NetworkGraph compacted = zeroed;
  compact_network(compacted, d);
  double worst = 0.0;
  for (BnMode mode : {BnMode::eval, BnMode::train}) {
    Tape ta, tb;
    ValueId ia = ta.constant(probe), ib = tb.constant(probe);
    Tensor oa = ta.value(forward(zeroed, ta, ia, mode, false, false, false).output);
    Tensor ob = tb.value(forward(compacted, tb, ib, mode, false, false, false).output);
    worst = std::max(worst, max_abs_diff(oa.data, ob.data));
  }
  return worst;
}

struct CountReport {
  std::int64_t params = 0;  // trainable coefficients
  std::int64_t macs = 0;    // per-sample multiply-accumulates, conv and dense
  std::int64_t flops = 0;   // 2 * macs
};

// Parameter and per-sample FLOP counts from the layer specs (conv and dense
// carry all the arithmetic; norms, activations, and pooling are not
// counted). Shared scale vectors count once per group.
inline CountReport count_params_flops(const NetworkGraph& net) {
  CountReport r;
  struct Walk {
    static Shape run(const NetworkGraph& net, const std::vector<Layer>& ls,
                     Shape s, CountReport& r) {
      for (const Layer& ly : ls) {
        switch (ly.kind) {
          case LayerKind::conv: {
            std::int64_t H = (s[1] + 2 * ly.conv.pad - ly.conv.k) / ly.conv.stride + 1;
            std::int64_t W = (s[2] + 2 * ly.conv.pad - ly.conv.k) / ly.conv.stride + 1;
            std::int64_t kk = static_cast<std::int64_t>(ly.conv.k) * ly.conv.k;
            r.params += static_cast<std::int64_t>(ly.conv.out_c) * ly.conv.in_c * kk;
            if (!ly.conv.bias_id.empty()) r.params += ly.conv.out_c;
            r.macs += static_cast<std::int64_t>(ly.conv.out_c) * H * W *
                      ly.conv.in_c * kk;
            s = {ly.conv.out_c, H, W};
            break;
          }
          case LayerKind::dense:
            r.params += static_cast<std::int64_t>(ly.dense.in_f) * ly.dense.out_f +
                        ly.dense.out_f;
            r.macs += static_cast<std::int64_t>(ly.dense.in_f) * ly.dense.out_f;
            s = {ly.dense.out_f};
            break;
          case LayerKind::bn:
            break;
          case LayerKind::act:
            break;
          case LayerKind::pool:
            s = {s[0]};
            break;
          case LayerKind::reshape:
            s = ly.reshape_to;
            break;
          case LayerKind::upsample:
            s = {s[0], 2 * s[1], 2 * s[2]};
            break;
          case LayerKind::squash:
            break;
          case LayerKind::block: {
            Shape in = run(net, ly.pre, s, r);
            Shape a = run(net, ly.body, in, r);
            if (!ly.shortcut.empty()) {
              Shape b = run(net, ly.shortcut, in, r);
              DFC_CHECK(a == b, "block branch shapes diverge");
            }
            s = a;
            break;
          }
        }
      }
      return s;
    }
  };
  Walk::run(net, net.layers, net.input_shape, r);
  for (const auto& [gid, g] : net.groups) r.params += 2 * g.channels;
  r.flops = 2 * r.macs;
  return r;
}

}  // namespace dfc
