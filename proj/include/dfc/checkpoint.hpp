// Checkpoint I/O. Two little-endian binary containers:
//   DFCK: full network graph with raw f64 parameters and buffers.
//   DFCQ: same graph, but sign-quantized parameters stored as one bit per
//         coefficient (value = delta * sign, LSB-first packing); parameters
//         exempt from quantization stay raw.
// Doubles are written bit-exactly, so save/load round-trips are identity.
#pragma once

#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dfc/network.hpp"

namespace dfc {
namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : out_(path, std::ios::binary) {
    DFC_CHECK(out_.good(), "cannot open '" << path << "' for writing");
    path_ = path;
  }
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void i64(std::int64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) i64(d);
  }
  void close() {
    out_.close();
    DFC_CHECK(out_.good(), "write to '" << path_ << "' failed");
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : in_(path, std::ios::binary) {
    DFC_CHECK(in_.good(), "cannot open '" << path << "' for reading");
    path_ = path;
  }
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    DFC_CHECK(in_.gcount() == static_cast<std::streamsize>(n),
              "truncated checkpoint '" << path_ << "'");
  }
  std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::int64_t i64() { std::int64_t v; raw(&v, 8); return v; }
  double f64() { double v; raw(&v, 8); return v; }
  std::string str() {
    std::uint32_t n = u32();
    DFC_CHECK(n <= (1u << 20), "implausible string length in checkpoint");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  Shape shape() {
    std::uint32_t n = u32();
    DFC_CHECK(n <= 8, "implausible tensor rank in checkpoint");
    Shape s(n);
    for (auto& d : s) d = i64();
    return s;
  }

 private:
  std::ifstream in_;
  std::string path_;
};

inline void write_layers(ByteWriter& w, const std::vector<Layer>& ls);

inline void write_layer(ByteWriter& w, const Layer& ly) {
  w.u8(static_cast<std::uint8_t>(ly.kind));
  switch (ly.kind) {
    case LayerKind::conv:
      w.i64(ly.conv.in_c); w.i64(ly.conv.out_c); w.i64(ly.conv.k);
      w.i64(ly.conv.stride); w.i64(ly.conv.pad);
      w.str(ly.conv.wid); w.str(ly.conv.bias_id);
      w.u8(ly.conv.quantizable ? 1 : 0);
      w.i64(ly.conv.in_group); w.i64(ly.conv.out_group);
      break;
    case LayerKind::bn:
      w.i64(ly.bn.channels); w.i64(ly.bn.group); w.str(ly.bn.path);
      break;
    case LayerKind::dense:
      w.i64(ly.dense.in_f); w.i64(ly.dense.out_f);
      w.str(ly.dense.wid); w.str(ly.dense.bid);
      w.u8(ly.dense.quantizable ? 1 : 0);
      w.i64(ly.dense.in_group);
      break;
    case LayerKind::reshape:
      w.shape(ly.reshape_to);
      break;
    case LayerKind::block:
      write_layers(w, ly.pre);
      write_layers(w, ly.body);
      write_layers(w, ly.shortcut);
      break;
    case LayerKind::act:
    case LayerKind::pool:
    case LayerKind::upsample:
    case LayerKind::squash:
      break;
  }
  w.u8(ly.tap_after ? 1 : 0);
}

inline void write_layers(ByteWriter& w, const std::vector<Layer>& ls) {
  w.u32(static_cast<std::uint32_t>(ls.size()));
  for (const Layer& ly : ls) write_layer(w, ly);
}

inline std::vector<Layer> read_layers(ByteReader& r);

inline Layer read_layer(ByteReader& r) {
  Layer ly;
  std::uint8_t kind_byte = r.u8();
  DFC_CHECK(kind_byte <= static_cast<std::uint8_t>(LayerKind::squash),
            "unknown layer kind in checkpoint");
  ly.kind = static_cast<LayerKind>(kind_byte);
  switch (ly.kind) {
    case LayerKind::conv:
      ly.conv.in_c = static_cast<int>(r.i64());
      ly.conv.out_c = static_cast<int>(r.i64());
      ly.conv.k = static_cast<int>(r.i64());
      ly.conv.stride = static_cast<int>(r.i64());
      ly.conv.pad = static_cast<int>(r.i64());
      ly.conv.wid = r.str(); ly.conv.bias_id = r.str();
      ly.conv.quantizable = r.u8() != 0;
      ly.conv.in_group = static_cast<int>(r.i64());
      ly.conv.out_group = static_cast<int>(r.i64());
      break;
    case LayerKind::bn:
      ly.bn.channels = static_cast<int>(r.i64());
      ly.bn.group = static_cast<int>(r.i64());
      ly.bn.path = r.str();
      break;
    case LayerKind::dense:
      ly.dense.in_f = static_cast<int>(r.i64());
      ly.dense.out_f = static_cast<int>(r.i64());
      ly.dense.wid = r.str(); ly.dense.bid = r.str();
      ly.dense.quantizable = r.u8() != 0;
      ly.dense.in_group = static_cast<int>(r.i64());
      break;
    case LayerKind::reshape:
      ly.reshape_to = r.shape();
      break;
    case LayerKind::block:
      ly.pre = read_layers(r);
      ly.body = read_layers(r);
      ly.shortcut = read_layers(r);
      break;
    case LayerKind::act:
    case LayerKind::pool:
    case LayerKind::upsample:
    case LayerKind::squash:
      break;
  }
  ly.tap_after = r.u8() != 0;
  return ly;
}

inline std::vector<Layer> read_layers(ByteReader& r) {
  std::uint32_t n = r.u32();
  DFC_CHECK(n <= 4096, "implausible layer count in checkpoint");
  std::vector<Layer> ls;
  ls.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) ls.push_back(read_layer(r));
  return ls;
}

inline void write_graph_common(ByteWriter& w, const NetworkGraph& net) {
  w.str(net.name);
  w.u8(net.activation == Act::relu ? 0 : 1);
  w.shape(net.input_shape);
  w.f64(net.bn_eps);
  w.f64(net.bn_momentum);
  write_layers(w, net.layers);
  w.u32(static_cast<std::uint32_t>(net.groups.size()));
  for (const auto& [gid, g] : net.groups) {
    w.i64(g.id); w.i64(g.channels); w.i64(g.width);
    w.str(g.s_id); w.str(g.b_id);
    w.u32(static_cast<std::uint32_t>(g.member_bns.size()));
    for (const auto& m : g.member_bns) w.str(m);
  }
}

inline NetworkGraph read_graph_common(ByteReader& r) {
  NetworkGraph net;
  net.name = r.str();
  net.activation = r.u8() == 0 ? Act::relu : Act::gelu;
  net.input_shape = r.shape();
  net.bn_eps = r.f64();
  net.bn_momentum = r.f64();
  net.layers = read_layers(r);
  std::uint32_t ng = r.u32();
  DFC_CHECK(ng <= 1024, "implausible group count in checkpoint");
  for (std::uint32_t i = 0; i < ng; ++i) {
    ScaleGroup g;
    g.id = static_cast<int>(r.i64());
    g.channels = static_cast<int>(r.i64());
    g.width = static_cast<int>(r.i64());
    g.s_id = r.str(); g.b_id = r.str();
    std::uint32_t nm = r.u32();
    DFC_CHECK(nm <= 4096, "implausible member count in checkpoint");
    for (std::uint32_t j = 0; j < nm; ++j) g.member_bns.push_back(r.str());
    net.groups[g.id] = g;
  }
  return net;
}

inline void write_tensor_map(ByteWriter& w,
                             const std::map<std::string, Tensor>& m) {
  w.u32(static_cast<std::uint32_t>(m.size()));
  for (const auto& [id, t] : m) {  // std::map iterates in id order
    w.str(id);
    w.shape(t.shape);
    w.raw(t.data.data(), t.data.size() * sizeof(double));
  }
}

inline std::map<std::string, Tensor> read_tensor_map(ByteReader& r) {
  std::uint32_t n = r.u32();
  DFC_CHECK(n <= 65536, "implausible tensor count in checkpoint");
  std::map<std::string, Tensor> m;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string id = r.str();
    Tensor t(r.shape());
    r.raw(t.data.data(), t.data.size() * sizeof(double));
    m.emplace(std::move(id), std::move(t));
  }
  return m;
}

}  // namespace detail

inline void save_checkpoint(const NetworkGraph& net, const std::string& path) {
  detail::ByteWriter w(path);
  w.raw("DFCK", 4);
  w.u32(1);
  detail::write_graph_common(w, net);
  detail::write_tensor_map(w, net.params);
  detail::write_tensor_map(w, net.buffers);
  w.close();
}

inline NetworkGraph load_checkpoint(const std::string& path) {
  detail::ByteReader r(path);
  char magic[4];
  r.raw(magic, 4);
  DFC_CHECK(std::memcmp(magic, "DFCK", 4) == 0,
            "'" << path << "' is not a network checkpoint");
  DFC_CHECK(r.u32() == 1, "unsupported checkpoint version in '" << path << "'");
  NetworkGraph net = detail::read_graph_common(r);
  net.params = detail::read_tensor_map(r);
  net.buffers = detail::read_tensor_map(r);
  output_shape(net);  // validates geometry
  return net;
}

// Parameter ids eligible for sign quantization in this graph.
inline std::set<std::string> quantizable_param_ids(const NetworkGraph& net) {
  std::set<std::string> ids;
  for_each_layer(net, [&](const Layer& ly) {
    if (ly.kind == LayerKind::conv && ly.conv.quantizable) {
      ids.insert(ly.conv.wid);
      if (!ly.conv.bias_id.empty()) ids.insert(ly.conv.bias_id);
    } else if (ly.kind == LayerKind::dense && ly.dense.quantizable) {
      ids.insert(ly.dense.wid);
      ids.insert(ly.dense.bid);
    }
  });
  return ids;
}

// Saves `net` with every quantizable parameter packed to sign bits. The live
// values must already be of the form +-delta; loading reproduces them
// bit-exactly as delta * sign.
inline void save_quantized(const NetworkGraph& net, double delta,
                           const std::string& path) {
  std::set<std::string> packed = quantizable_param_ids(net);
  detail::ByteWriter w(path);
  w.raw("DFCQ", 4);
  w.u32(1);
  w.f64(delta);
  detail::write_graph_common(w, net);
  w.u32(static_cast<std::uint32_t>(net.params.size()));
  for (const auto& [id, t] : net.params) {
    w.str(id);
    w.shape(t.shape);
    bool pack = packed.count(id) > 0;
    w.u8(pack ? 1 : 0);
    if (!pack) {
      w.raw(t.data.data(), t.data.size() * sizeof(double));
      continue;
    }
    std::vector<std::uint8_t> bits((t.data.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      double v = t.data[i];
      DFC_CHECK(v == delta || v == -delta,
                "parameter '" << id << "' entry " << i
                              << " is not +-delta; cannot pack");
      if (v > 0.0) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    w.raw(bits.data(), bits.size());
  }
  detail::write_tensor_map(w, net.buffers);
  w.close();
}

inline NetworkGraph load_quantized(const std::string& path,
                                   double* delta_out = nullptr) {
  detail::ByteReader r(path);
  char magic[4];
  r.raw(magic, 4);
  DFC_CHECK(std::memcmp(magic, "DFCQ", 4) == 0,
            "'" << path << "' is not a quantized checkpoint");
  DFC_CHECK(r.u32() == 1, "unsupported checkpoint version in '" << path << "'");
  double delta = r.f64();
  if (delta_out) *delta_out = delta;
  NetworkGraph net = detail::read_graph_common(r);
  std::uint32_t np = r.u32();
  DFC_CHECK(np <= 65536, "implausible tensor count in checkpoint");
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string id = r.str();
    Tensor t(r.shape());
    if (r.u8() == 0) {
      r.raw(t.data.data(), t.data.size() * sizeof(double));
    } else {
      std::vector<std::uint8_t> bits((t.data.size() + 7) / 8);
      r.raw(bits.data(), bits.size());
      for (std::size_t j = 0; j < t.data.size(); ++j)
        t.data[j] = (bits[j / 8] >> (j % 8)) & 1u ? delta : -delta;
    }
    net.params.emplace(std::move(id), std::move(t));
  }
  net.buffers = detail::read_tensor_map(r);
  output_shape(net);
  return net;
}

}  // namespace dfc
