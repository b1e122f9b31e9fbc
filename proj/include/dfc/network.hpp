// Network zoo: a small layer-tree representation, forward pass on the tape,
// and builders for the three toy architectures (teacher classifier, thinner
// student, upsampling generator).
//
// Residual blocks are pre-activation. Every batch norm is the scaled form
//   y = s * ((x - mu)/sqrt(var + eps) + b)
// and belongs to exactly one scale group; a group shares one (s, b) pair
// across all member norms. Grouping follows channel-count stages: every norm
// acting on a map with a stage's channel count uses that stage's shared
// vectors, including the first norm of a downsampling block, which still
// sees the previous stage's map. Because every consumer of a stage's feature
// stream reads it through some member norm, zeroing s[c] makes channel c
// invisible to the whole network, which is what makes threshold pruning an
// exact graph rewrite (see pruner.hpp).
#pragma once

#include <map>
#include <string>
#include <vector>

#include "dfc/tape.hpp"

namespace dfc {

enum class Act { relu, gelu };
enum class LayerKind { conv, bn, act, dense, pool, reshape, upsample, block, squash };

struct ConvP {
  int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
  std::string wid;
  std::string bias_id;  // empty: no bias (the toy nets never use conv bias)
  bool quantizable = true;
  int in_group = -1, out_group = -1;  // scale-group ids for pruning, -1 = ungrouped
};

struct BnP {
  int channels = 0;
  int group = -1;
  std::string path;  // buffer ids are path + ".rm" / ".rv"
};

struct DenseP {
  int in_f = 0, out_f = 0;
  std::string wid, bid;
  bool quantizable = true;
  int in_group = -1;
};

struct Layer {
  LayerKind kind = LayerKind::act;
  ConvP conv;
  BnP bn;
  DenseP dense;
  Shape reshape_to;  // per-sample shape, batch dim implied
  std::vector<Layer> pre;       // block: shared stem, run once
  std::vector<Layer> body;      // block trunk
  std::vector<Layer> shortcut;  // block shortcut; empty = identity
  bool tap_after = false;       // expose this layer's output as an attention tap
};

struct ScaleGroup {
  int id = -1;
  int channels = 0;
  int width = 0;  // spatial width w_l of member maps, used for gamma_l = gamma / w_l
  std::string s_id, b_id;
  std::vector<std::string> member_bns;  // bn paths, for reports
};

struct NetworkGraph {
  std::string name;
  Shape input_shape;  // per-sample, e.g. {1,8,8} or {zdim}
  Act activation = Act::relu;
  std::vector<Layer> layers;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;
  std::map<int, ScaleGroup> groups;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;

  Tensor& param(const std::string& id) {
    auto it = params.find(id);
    DFC_CHECK(it != params.end(), "unknown parameter '" << id << "' in " << name);
    return it->second;
  }
  const Tensor& param(const std::string& id) const {
    auto it = params.find(id);
    DFC_CHECK(it != params.end(), "unknown parameter '" << id << "' in " << name);
    return it->second;
  }
};

struct ForwardResult {
  ValueId output = -1;
  std::vector<ValueId> attention;         // tapped maps, in layer order
  std::map<std::string, ValueId> leaves;  // param id -> tape leaf
};

namespace detail {

inline ValueId run_layers(NetworkGraph& net, Tape& tape,
                          const std::vector<Layer>& layers, ValueId x,
                          BnMode mode, bool update_running, bool collect,
                          ForwardResult& res) {
  for (const Layer& ly : layers) {
    switch (ly.kind) {
      case LayerKind::conv:
        x = tape.conv2d(x, res.leaves.at(ly.conv.wid), ly.conv.stride,
                        ly.conv.pad);
        if (!ly.conv.bias_id.empty()) {
          // conv bias is supported for completeness; reshape to rows of HW
          // so the (N,M)+(M) broadcast cannot apply, then widen manually.
          DFC_CHECK(false, "conv bias is not wired into the forward pass");
        }
        break;
      case LayerKind::bn: {
        const ScaleGroup& g = net.groups.at(ly.bn.group);
        x = tape.scaled_bn(x, res.leaves.at(g.s_id), res.leaves.at(g.b_id),
                           mode, net.bn_eps, &net.buffers.at(ly.bn.path + ".rm"),
                           &net.buffers.at(ly.bn.path + ".rv"), net.bn_momentum,
                           update_running && mode == BnMode::train);
        break;
      }
      case LayerKind::act:
        x = net.activation == Act::relu ? tape.relu(x) : tape.gelu(x);
        break;
      case LayerKind::dense:
        x = tape.add(tape.matmul(x, res.leaves.at(ly.dense.wid)),
                     res.leaves.at(ly.dense.bid));
        break;
      case LayerKind::pool:
        x = tape.mean_axis(x, {2, 3});
        break;
      case LayerKind::reshape: {
        Shape s = ly.reshape_to;
        s.insert(s.begin(), tape.value(x).shape[0]);
        x = tape.reshape(x, s);
        break;
      }
      case LayerKind::upsample:
        x = tape.upsample2x(x);
        break;
      case LayerKind::squash:
        x = tape.sigmoid(x);
        break;
      case LayerKind::block: {
        ValueId in =
            run_layers(net, tape, ly.pre, x, mode, update_running, collect, res);
        ValueId trunk = run_layers(net, tape, ly.body, in, mode, update_running,
                                   collect, res);
        ValueId sc = ly.shortcut.empty()
                         ? in
                         : run_layers(net, tape, ly.shortcut, in, mode,
                                      update_running, collect, res);
        x = tape.add(trunk, sc);
        break;
      }
    }
    if (ly.tap_after && collect) res.attention.push_back(x);
  }
  return x;
}

}  // namespace detail

// Runs the whole graph. `input` is an existing tape value of shape
// (N, *input_shape). Creates one leaf per parameter (id order), so gradients
// can be read back via result.leaves after tape.backward().
inline ForwardResult forward(NetworkGraph& net, Tape& tape, ValueId input,
                             BnMode mode, bool update_running = false,
                             bool collect_attention = false,
                             bool params_require_grad = true) {
  ForwardResult res;
  for (auto& [id, t] : net.params) {
    Tensor copy = t;
    copy.requires_grad = params_require_grad;
    res.leaves[id] = tape.leaf(std::move(copy));
  }
  res.output = detail::run_layers(net, tape, net.layers, input, mode,
                                  update_running, collect_attention, res);
  return res;
}

// Convenience: run in eval mode on plain data, no gradients.
inline Tensor eval_logits(NetworkGraph& net, const Tensor& batch) {
  Tape tape;
  ValueId in = tape.constant(batch);
  ForwardResult r = forward(net, tape, in, BnMode::eval, false, false, false);
  return tape.value(r.output);
}

// ---- builders ---------------------------------------------------------

namespace detail {

inline Layer conv_layer(int in_c, int out_c, int k, int stride, int pad,
                        std::string wid, bool quantizable, int in_group,
                        int out_group) {
  Layer l;
  l.kind = LayerKind::conv;
  l.conv = {in_c, out_c, k, stride, pad, std::move(wid), "", quantizable,
            in_group, out_group};
  return l;
}

inline Layer bn_layer(int channels, int group, std::string path) {
  Layer l;
  l.kind = LayerKind::bn;
  l.bn = {channels, group, std::move(path)};
  return l;
}

inline Layer act_layer(bool tap = false) {
  Layer l;
  l.kind = LayerKind::act;
  l.tap_after = tap;
  return l;
}

inline void register_bn(NetworkGraph& net, int group, const std::string& path) {
  net.buffers.emplace(path + ".rm", Tensor(Shape{net.groups.at(group).channels}, 0.0));
  net.buffers.emplace(path + ".rv", Tensor(Shape{net.groups.at(group).channels}, 1.0));
  net.groups.at(group).member_bns.push_back(path);
}

inline void add_group(NetworkGraph& net, int id, int channels, int width,
                      double s_init = 0.5, double b_init = 0.0) {
  ScaleGroup g;
  g.id = id;
  g.channels = channels;
  g.width = width;
  g.s_id = "sg" + std::to_string(id) + ".s";
  g.b_id = "sg" + std::to_string(id) + ".b";
  net.groups[id] = g;
  net.params.emplace(g.s_id, Tensor(Shape{channels}, s_init));
  net.params.emplace(g.b_id, Tensor(Shape{channels}, b_init));
}

// Identity residual block: x + conv(act(bn(conv(act(bn(x)))))).
inline Layer identity_block(NetworkGraph& net, const std::string& path,
                            int channels, int group) {
  Layer b;
  b.kind = LayerKind::block;
  b.body.push_back(bn_layer(channels, group, path + ".bn1"));
  register_bn(net, group, path + ".bn1");
  b.body.push_back(act_layer(false));
  b.body.push_back(conv_layer(channels, channels, 3, 1, 1, path + ".conv1.w",
                              true, group, group));
  net.params.emplace(path + ".conv1.w", Tensor(Shape{channels, channels, 3, 3}));
  b.body.push_back(bn_layer(channels, group, path + ".bn2"));
  register_bn(net, group, path + ".bn2");
  b.body.push_back(act_layer(false));
  b.body.push_back(conv_layer(channels, channels, 3, 1, 1, path + ".conv2.w",
                              true, group, group));
  net.params.emplace(path + ".conv2.w", Tensor(Shape{channels, channels, 3, 3}));
  return b;
}

// Downsampling block: shared pre-activation feeds both the strided trunk and
// a strided shortcut, so the previous stage's stream is only ever read
// through the pre norm (group `in_group`). Kernel sizes 4 (trunk) and 2
// (shortcut) tile the 8x8 map into 4x4 exactly; conv2d refuses geometries
// whose stride leaves a remainder.
inline Layer down_block(NetworkGraph& net, const std::string& path, int in_c,
                        int out_c, int in_group, int out_group,
                        bool tap_pre_act) {
  Layer b;
  b.kind = LayerKind::block;
  b.pre.push_back(bn_layer(in_c, in_group, path + ".bn1"));
  register_bn(net, in_group, path + ".bn1");
  b.pre.push_back(act_layer(tap_pre_act));
  b.body.push_back(conv_layer(in_c, out_c, 4, 2, 1, path + ".conv1.w", true,
                              in_group, out_group));
  net.params.emplace(path + ".conv1.w", Tensor(Shape{out_c, in_c, 4, 4}));
  b.body.push_back(bn_layer(out_c, out_group, path + ".bn2"));
  register_bn(net, out_group, path + ".bn2");
  b.body.push_back(act_layer(false));
  b.body.push_back(conv_layer(out_c, out_c, 3, 1, 1, path + ".conv2.w", true,
                              out_group, out_group));
  net.params.emplace(path + ".conv2.w", Tensor(Shape{out_c, out_c, 3, 3}));
  b.shortcut.push_back(conv_layer(in_c, out_c, 2, 2, 0, path + ".sc.w", true,
                                  in_group, out_group));
  net.params.emplace(path + ".sc.w", Tensor(Shape{out_c, in_c, 2, 2}));
  return b;
}

}  // namespace detail

// Classifier over 8x8 single-channel images: conv stem, one stage of two
// identity blocks at `base` channels, a downsampling stage to 2*base at 4x4,
// final norm + activation, global average pool, dense head. The stem conv and
// the head are never quantized. Attention taps: the pre-activation feeding the
// downsampling stage (8x8) and the final activation before pooling (4x4).
inline NetworkGraph make_classifier(const std::string& name, int base,
                                    int classes = 10, Act act = Act::relu) {
  DFC_CHECK(base >= 2, "classifier needs at least 2 base channels");
  NetworkGraph net;
  net.name = name;
  net.activation = act;
  net.input_shape = {1, 8, 8};
  int c1 = base, c2 = 2 * base;
  detail::add_group(net, 0, c1, 8);
  detail::add_group(net, 1, c2, 4);

  net.layers.push_back(detail::conv_layer(1, c1, 3, 1, 1, "stem.w",
                                          /*quantizable=*/false, -1, 0));
  net.params.emplace("stem.w", Tensor(Shape{c1, 1, 3, 3}));

  net.layers.push_back(detail::identity_block(net, "g1.b1", c1, 0));
  net.layers.push_back(detail::identity_block(net, "g1.b2", c1, 0));
  net.layers.push_back(detail::down_block(net, "g2.b1", c1, c2, 0, 1,
                                          /*tap_pre_act=*/true));
  net.layers.push_back(detail::identity_block(net, "g2.b2", c2, 1));

  net.layers.push_back(detail::bn_layer(c2, 1, "final_bn"));
  detail::register_bn(net, 1, "final_bn");
  net.layers.push_back(detail::act_layer(/*tap=*/true));
  Layer pool;
  pool.kind = LayerKind::pool;
  net.layers.push_back(pool);

  Layer head;
  head.kind = LayerKind::dense;
  head.dense = {c2, classes, "head.w", "head.b", /*quantizable=*/false, 1};
  net.layers.push_back(head);
  net.params.emplace("head.w", Tensor(Shape{c2, classes}));
  net.params.emplace("head.b", Tensor(Shape{classes}));
  return net;
}

// Generator: dense projection of z, reshape to (4*base, 2, 2), then two
// upsample+conv+norm+act stages down to `base` channels at 8x8 and a final
// conv+norm to a single-channel image.
inline NetworkGraph make_generator(const std::string& name, int zdim = 100,
                                   int base = 8, Act act = Act::relu) {
  NetworkGraph net;
  net.name = name;
  net.activation = act;
  net.input_shape = {zdim};
  int c0 = 4 * base, c1 = 2 * base, c2 = base;
  detail::add_group(net, 0, c1, 4);
  detail::add_group(net, 1, c2, 8);
  detail::add_group(net, 2, 1, 8);

  Layer proj;
  proj.kind = LayerKind::dense;
  proj.dense = {zdim, c0 * 2 * 2, "proj.w", "proj.b", false, -1};
  net.layers.push_back(proj);
  net.params.emplace("proj.w", Tensor(Shape{zdim, c0 * 2 * 2}));
  net.params.emplace("proj.b", Tensor(Shape{c0 * 2 * 2}));

  Layer rs;
  rs.kind = LayerKind::reshape;
  rs.reshape_to = {c0, 2, 2};
  net.layers.push_back(rs);

  Layer up;
  up.kind = LayerKind::upsample;
  net.layers.push_back(up);  // 2 -> 4
  net.layers.push_back(detail::conv_layer(c0, c1, 3, 1, 1, "up1.conv.w", false, -1, 0));
  net.params.emplace("up1.conv.w", Tensor(Shape{c1, c0, 3, 3}));
  net.layers.push_back(detail::bn_layer(c1, 0, "up1.bn"));
  detail::register_bn(net, 0, "up1.bn");
  net.layers.push_back(detail::act_layer());

  net.layers.push_back(up);  // 4 -> 8
  net.layers.push_back(detail::conv_layer(c1, c2, 3, 1, 1, "up2.conv.w", false, 0, 1));
  net.params.emplace("up2.conv.w", Tensor(Shape{c2, c1, 3, 3}));
  net.layers.push_back(detail::bn_layer(c2, 1, "up2.bn"));
  detail::register_bn(net, 1, "up2.bn");
  net.layers.push_back(detail::act_layer());

  net.layers.push_back(detail::conv_layer(c2, 1, 3, 1, 1, "out.conv.w", false, 1, 2));
  net.params.emplace("out.conv.w", Tensor(Shape{1, c2, 3, 3}));
  net.layers.push_back(detail::bn_layer(1, 2, "out.bn"));
  detail::register_bn(net, 2, "out.bn");
  // The output is deliberately unbounded. A squash head pinned to the data
  // range was measured to collapse transfer: the logistic output hugs 1/2
  // while the evaluation images are mostly near zero, so the student never
  // sees the region the data occupies. The unbounded norm output spreads
  // wider than the data and covers it as a subset, which is what matters
  // for teacher-student transfer.
  return net;
}

// He fan-in init for conv/dense weights, zeros for dense bias; scale vectors
// start at 0.5 and shifts at 0 (set at construction). Iterates parameters in
// id order, so the draw sequence is part of the determinism contract.
inline void init_params(NetworkGraph& net, Rng& rng) {
  for (auto& [id, t] : net.params) {
    if (t.dim() == 4) {  // conv weight (F,C,k,k)
      double std = std::sqrt(2.0 / (static_cast<double>(t.shape[1]) * t.shape[2] * t.shape[3]));
      for (auto& v : t.data) v = std * rng.normal();
    } else if (t.dim() == 2) {  // dense weight (in,out)
      double std = std::sqrt(2.0 / static_cast<double>(t.shape[0]));
      for (auto& v : t.data) v = std * rng.normal();
    }
    // 1-d tensors (scale/shift/bias) keep their constructed values
  }
}

// Copies teacher parameters into an identically-shaped or thinner network by
// taking the leading slice along every axis. Shared by the quantizer's
// teacher-initialized student and by pruning (same-width copy).
inline void transfer_params_prefix(const NetworkGraph& src, NetworkGraph& dst) {
  auto slice_copy = [](const Tensor& s, Tensor& d) {
    std::int64_t nd = d.dim();
    DFC_CHECK(s.dim() == nd, "prefix transfer rank mismatch");
    for (std::int64_t i = 0; i < nd; ++i)
      DFC_CHECK(d.shape[i] <= s.shape[i],
                "prefix transfer needs destination no larger than source");
    // iterate destination indices, map to source flat index
    std::vector<std::int64_t> coord(nd, 0);
    for (std::int64_t flat = 0; flat < d.numel(); ++flat) {
      std::int64_t rem = flat, sidx = 0;
      for (std::int64_t i = 0; i < nd; ++i) {
        std::int64_t block = 1;
        for (std::int64_t j = i + 1; j < nd; ++j) block *= d.shape[j];
        std::int64_t c = rem / block;
        rem %= block;
        sidx = sidx * s.shape[i] + c;
      }
      d.data[flat] = s.data[sidx];
    }
  };
  for (auto& [id, t] : dst.params) {
    auto it = src.params.find(id);
    DFC_CHECK(it != src.params.end(), "prefix transfer: source lacks '" << id << "'");
    slice_copy(it->second, t);
  }
  for (auto& [id, t] : dst.buffers) {
    auto it = src.buffers.find(id);
    DFC_CHECK(it != src.buffers.end(), "prefix transfer: source lacks buffer '" << id << "'");
    slice_copy(it->second, t);
  }
}

// Depth-first visit of every layer in the tree (pre, body, shortcut).
template <typename Fn>
inline void for_each_layer(const std::vector<Layer>& layers, Fn&& fn) {
  for (const Layer& ly : layers) {
    fn(ly);
    if (ly.kind == LayerKind::block) {
      for_each_layer(ly.pre, fn);
      for_each_layer(ly.body, fn);
      for_each_layer(ly.shortcut, fn);
    }
  }
}

template <typename Fn>
inline void for_each_layer(const NetworkGraph& net, Fn&& fn) {
  for_each_layer(net.layers, std::forward<Fn>(fn));
}

// Per-sample output shape walk; also validates the layer tree geometry.
inline Shape output_shape(const NetworkGraph& net) {
  struct Walk {
    static Shape run(const NetworkGraph& net, const std::vector<Layer>& ls, Shape s) {
      for (const Layer& ly : ls) {
        switch (ly.kind) {
          case LayerKind::conv: {
            DFC_CHECK(s.size() == 3 && s[0] == ly.conv.in_c,
                      "conv input mismatch at " << ly.conv.wid);
            std::int64_t H = (s[1] + 2 * ly.conv.pad - ly.conv.k) / ly.conv.stride + 1;
            std::int64_t W = (s[2] + 2 * ly.conv.pad - ly.conv.k) / ly.conv.stride + 1;
            s = {ly.conv.out_c, H, W};
            break;
          }
          case LayerKind::bn:
            DFC_CHECK(s.size() == 3 && s[0] == ly.bn.channels,
                      "norm channel mismatch at " << ly.bn.path);
            break;
          case LayerKind::act:
            break;
          case LayerKind::dense:
            DFC_CHECK(s.size() == 1 && s[0] == ly.dense.in_f,
                      "dense input mismatch at " << ly.dense.wid);
            s = {ly.dense.out_f};
            break;
          case LayerKind::pool:
            DFC_CHECK(s.size() == 3, "pool needs a spatial map");
            s = {s[0]};
            break;
          case LayerKind::reshape:
            s = ly.reshape_to;
            break;
          case LayerKind::upsample:
            DFC_CHECK(s.size() == 3, "upsample needs a spatial map");
            s = {s[0], 2 * s[1], 2 * s[2]};
            break;
          case LayerKind::squash:
            break;
          case LayerKind::block: {
            Shape in = run(net, ly.pre, s);
            Shape a = run(net, ly.body, in);
            Shape b = ly.shortcut.empty() ? in : run(net, ly.shortcut, in);
            DFC_CHECK(a == b, "block trunk/shortcut shape mismatch");
            s = a;
            break;
          }
        }
      }
      return s;
    }
  };
  return Walk::run(net, net.layers, net.input_shape);
}

}  // namespace dfc
