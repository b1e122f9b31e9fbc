// Reverse-mode autodiff on an explicit tape.
//
// Every operation appends one node holding a backward closure; nodes are
// replayed in reverse to propagate adjoints. Ops are single-threaded with
// fixed loop orders, so a given build of the library is bitwise deterministic.
//
// Elementwise binary ops accept: identical shapes, or a scalar (numel 1)
// second operand. add() additionally accepts (N,M) + (M) row broadcast.
// No other broadcasting exists.
#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <vector>

#include "dfc/tensor.hpp"

namespace dfc {

using ValueId = std::int32_t;

enum class BnMode { train, eval };

class Tape {
 public:

  ValueId leaf(Tensor t) {
    bool rg = t.requires_grad;
    return push(std::move(t), rg);
  }

  ValueId constant(Tensor t) {
    t.requires_grad = false;
    return push(std::move(t), false);
  }

  // The returned reference stays valid while further ops are added (entries
  // live in a deque), so callers may hold it across op construction.
  const Tensor& value(ValueId id) const { return entries_[check_id(id)].val; }
  bool requires_grad(ValueId id) const { return entries_[check_id(id)].rg; }

  // Valid after backward(); zeros for ids the root does not depend on.
  const std::vector<double>& grad(ValueId id) const {
    const Entry& e = entries_[check_id(id)];
    DFC_CHECK(e.rg, "grad requested for a value that does not require it");
    return e.adj;
  }

  std::size_t size() const { return entries_.size(); }

  void backward(ValueId root) {
    Entry& r = entries_[check_id(root)];
    DFC_CHECK(r.val.numel() == 1, "backward root must be scalar, got shape "
                                      << shape_str(r.val.shape));
    DFC_CHECK(r.rg, "backward root does not depend on any differentiable leaf");
    DFC_CHECK(!ran_backward_, "backward may run once per tape");
    ran_backward_ = true;
    r.adj[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
  }

  // ---- primitives ----------------------------------------------------

  ValueId matmul(ValueId a, ValueId b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    DFC_CHECK(A.dim() == 2 && B.dim() == 2,
              "matmul expects 2-d operands, got " << shape_str(A.shape) << " x "
                                                  << shape_str(B.shape));
    std::int64_t m = A.shape[0], k = A.shape[1], k2 = B.shape[0], n = B.shape[1];
    DFC_CHECK(k == k2, "matmul inner dims differ: " << shape_str(A.shape)
                                                    << " x " << shape_str(B.shape));
    Tensor out(Shape{m, n});
    mm(A.data.data(), B.data.data(), out.data.data(), m, k, n, false, false);
    ValueId o = push(std::move(out), requires_grad(a) || requires_grad(b));
    if (entries_[o].rg) {
      nodes_.push_back([a, b, o, m, k, n](Tape& t) {
        const auto& g = t.entries_[o].adj;
        if (t.requires_grad(a)) {  // dA = G * B^T
          mm(g.data(), t.value(b).data.data(), t.entries_[a].adj.data(), m, n,
             k, false, true);
        }
        if (t.requires_grad(b)) {  // dB = A^T * G
          mm(t.value(a).data.data(), g.data(), t.entries_[b].adj.data(), k, m,
             n, true, false);
        }
      });
    }
    return o;
  }

  // x: (N,C,H,W), w: (F,C,k,k) with square kernel, zero padding `pad`,
  // stride in {1,2}. Spatial extents must tile exactly.
  ValueId conv2d(ValueId x, ValueId w, int stride, int pad) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    DFC_CHECK(X.dim() == 4, "conv2d input must be 4-d, got " << shape_str(X.shape));
    DFC_CHECK(W.dim() == 4, "conv2d weight must be 4-d, got " << shape_str(W.shape));
    DFC_CHECK(W.shape[2] == W.shape[3], "conv2d kernel must be square");
    DFC_CHECK(X.shape[1] == W.shape[1],
              "conv2d channel mismatch: input " << shape_str(X.shape)
                                                << " weight " << shape_str(W.shape));
    DFC_CHECK(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
    DFC_CHECK(pad >= 0, "conv2d pad must be >= 0");
    std::int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], Wi = X.shape[3];
    std::int64_t F = W.shape[0], K = W.shape[2];
    DFC_CHECK(H + 2 * pad >= K && Wi + 2 * pad >= K, "conv2d kernel larger than padded input");
    DFC_CHECK((H + 2 * pad - K) % stride == 0 && (Wi + 2 * pad - K) % stride == 0,
              "conv2d geometry does not tile: input " << shape_str(X.shape)
                                                      << " kernel " << K
                                                      << " stride " << stride
                                                      << " pad " << pad);
    std::int64_t OH = (H + 2 * pad - K) / stride + 1;
    std::int64_t OW = (Wi + 2 * pad - K) / stride + 1;
    Tensor out(Shape{N, F, OH, OW});
    conv_fwd(X, W, out, stride, pad);
    ValueId o = push(std::move(out), requires_grad(x) || requires_grad(w));
    if (entries_[o].rg) {
      nodes_.push_back([x, w, o, stride, pad](Tape& t) {
        conv_bwd(t.value(x), t.value(w), t.entries_[o].adj,
                 t.requires_grad(x) ? &t.entries_[x].adj : nullptr,
                 t.requires_grad(w) ? &t.entries_[w].adj : nullptr, stride, pad,
                 t.value(o).shape);
      });
    }
    return o;
  }

  ValueId add(ValueId a, ValueId b) { return binary(a, b, Bin::add); }
  ValueId sub(ValueId a, ValueId b) { return binary(a, b, Bin::sub); }
  ValueId mul(ValueId a, ValueId b) { return binary(a, b, Bin::mul); }
  ValueId div(ValueId a, ValueId b) { return binary(a, b, Bin::div); }

  ValueId relu(ValueId x) {
    const Tensor& X = value(x);
    Tensor out(X.shape);
    for (std::int64_t i = 0; i < X.numel(); ++i)
      out.data[i] = X.data[i] > 0.0 ? X.data[i] : 0.0;
    return unary(x, std::move(out), [](Tape& t, ValueId in, ValueId o) {
      const auto& g = t.entries_[o].adj;
      const auto& xv = t.value(in).data;
      auto& d = t.entries_[in].adj;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > 0.0) d[i] += g[i];  // derivative at 0 is taken as 0
    });
  }

  // Exact Gaussian-CDF form: x * Phi(x).
  ValueId gelu(ValueId x) {
    const Tensor& X = value(x);
    Tensor out(X.shape);
    for (std::int64_t i = 0; i < X.numel(); ++i)
      out.data[i] = X.data[i] * phi_cdf(X.data[i]);
    return unary(x, std::move(out), [](Tape& t, ValueId in, ValueId o) {
      const auto& g = t.entries_[o].adj;
      const auto& xv = t.value(in).data;
      auto& d = t.entries_[in].adj;
      for (std::size_t i = 0; i < g.size(); ++i) {
        double v = xv[i];
        d[i] += g[i] * (phi_cdf(v) + v * phi_pdf(v));
      }
    });
  }

  // Logistic squash, evaluated on the side that keeps exp() bounded.
  ValueId sigmoid(ValueId x) {
    const Tensor& X = value(x);
    Tensor out(X.shape);
    for (std::int64_t i = 0; i < X.numel(); ++i) {
      double v = X.data[i];
      if (v >= 0.0) {
        out.data[i] = 1.0 / (1.0 + std::exp(-v));
      } else {
        double e = std::exp(v);
        out.data[i] = e / (1.0 + e);
      }
    }
    return unary(x, std::move(out), [](Tape& t, ValueId in, ValueId o) {
      const auto& g = t.entries_[o].adj;
      const auto& yv = t.value(o).data;
      auto& d = t.entries_[in].adj;
      for (std::size_t i = 0; i < g.size(); ++i)
        d[i] += g[i] * yv[i] * (1.0 - yv[i]);
    });
  }

  // Row softmax over the last axis of a 1-d or 2-d tensor.
  ValueId softmax(ValueId x) {
    const Tensor& X = value(x);
    DFC_CHECK(X.dim() == 1 || X.dim() == 2,
              "softmax expects 1-d or 2-d input, got " << shape_str(X.shape));
    std::int64_t rows = X.dim() == 2 ? X.shape[0] : 1;
    std::int64_t cols = X.dim() == 2 ? X.shape[1] : X.shape[0];
    DFC_CHECK(cols > 0, "softmax over empty axis");
    Tensor out(X.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = X.data.data() + r * cols;
      double* yr = out.data.data() + r * cols;
      double mx = xr[0];
      for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < cols; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        sum += yr[j];
      }
      for (std::int64_t j = 0; j < cols; ++j) yr[j] /= sum;
    }
    return unary(x, std::move(out),
                 [rows, cols](Tape& t, ValueId in, ValueId o) {
                   const auto& g = t.entries_[o].adj;
                   const auto& p = t.value(o).data;
                   auto& d = t.entries_[in].adj;
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* gr = g.data() + r * cols;
                     const double* pr = p.data() + r * cols;
                     double dot = 0.0;
                     for (std::int64_t j = 0; j < cols; ++j) dot += gr[j] * pr[j];
                     double* dr = d.data() + r * cols;
                     for (std::int64_t j = 0; j < cols; ++j)
                       dr[j] += pr[j] * (gr[j] - dot);
                   }
                 });
  }

  ValueId log(ValueId x) {
    const Tensor& X = value(x);
    Tensor out(X.shape);
    for (std::int64_t i = 0; i < X.numel(); ++i) out.data[i] = std::log(X.data[i]);
    return unary(x, std::move(out), [](Tape& t, ValueId in, ValueId o) {
      const auto& g = t.entries_[o].adj;
      const auto& xv = t.value(in).data;
      auto& d = t.entries_[in].adj;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / xv[i];
    });
  }

  ValueId sqrt(ValueId x) {
    const Tensor& X = value(x);
    Tensor out(X.shape);
    for (std::int64_t i = 0; i < X.numel(); ++i) out.data[i] = std::sqrt(X.data[i]);
    return unary(x, std::move(out), [](Tape& t, ValueId in, ValueId o) {
      const auto& g = t.entries_[o].adj;
      const auto& yv = t.value(o).data;
      auto& d = t.entries_[in].adj;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / (2.0 * yv[i]);
    });
  }

  ValueId clip(ValueId x, double lo, double hi) {
    DFC_CHECK(lo <= hi, "clip bounds inverted");
    const Tensor& X = value(x);
    Tensor out(X.shape);
    for (std::int64_t i = 0; i < X.numel(); ++i)
      out.data[i] = std::min(hi, std::max(lo, X.data[i]));
    return unary(x, std::move(out), [lo, hi](Tape& t, ValueId in, ValueId o) {
      const auto& g = t.entries_[o].adj;
      const auto& xv = t.value(in).data;
      auto& d = t.entries_[in].adj;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > lo && xv[i] < hi) d[i] += g[i];
    });
  }

  ValueId mean_axis(ValueId x, std::vector<int> axes) {
    return reduce(x, std::move(axes), false);
  }

  // Biased (divide by n) variance over the given axes.
  ValueId var_axis(ValueId x, std::vector<int> axes) {
    return reduce(x, std::move(axes), true);
  }

  ValueId reshape(ValueId x, Shape s) {
    const Tensor& X = value(x);
    DFC_CHECK(shape_numel(s) == X.numel(),
              "reshape " << shape_str(X.shape) << " -> " << shape_str(s)
                         << " changes element count");
    Tensor out(std::move(s), X.data);
    return unary(x, std::move(out), [](Tape& t, ValueId in, ValueId o) {
      const auto& g = t.entries_[o].adj;
      auto& d = t.entries_[in].adj;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    });
  }

  // Nearest-neighbour doubling of the two spatial axes of (N,C,H,W).
  ValueId upsample2x(ValueId x) {
    const Tensor& X = value(x);
    DFC_CHECK(X.dim() == 4, "upsample2x expects 4-d input, got " << shape_str(X.shape));
    std::int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
    Tensor out(Shape{N, C, 2 * H, 2 * W});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double* src = X.data.data() + nc * H * W;
      double* dst = out.data.data() + nc * 4 * H * W;
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          double v = src[h * W + w];
          double* d0 = dst + (2 * h) * 2 * W + 2 * w;
          d0[0] = v;
          d0[1] = v;
          d0[2 * W] = v;
          d0[2 * W + 1] = v;
        }
    }
    return unary(x, std::move(out), [N, C, H, W](Tape& t, ValueId in, ValueId o) {
      const auto& g = t.entries_[o].adj;
      auto& d = t.entries_[in].adj;
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* gs = g.data() + nc * 4 * H * W;
        double* dd = d.data() + nc * H * W;
        for (std::int64_t h = 0; h < H; ++h)
          for (std::int64_t w = 0; w < W; ++w) {
            const double* g0 = gs + (2 * h) * 2 * W + 2 * w;
            dd[h * W + w] += g0[0] + g0[1] + g0[2 * W] + g0[2 * W + 1];
          }
      }
    });
  }

  ValueId l1_norm(ValueId x) {
    const Tensor& X = value(x);
    double s = 0.0;
    for (double v : X.data) s += std::abs(v);
    ValueId o = push(scalar(s), requires_grad(x));
    if (entries_[o].rg) {
      nodes_.push_back([x, o](Tape& t) {
        double g = t.entries_[o].adj[0];
        const auto& xv = t.value(x).data;
        auto& d = t.entries_[x].adj;
        for (std::size_t i = 0; i < xv.size(); ++i) {
          if (xv[i] > 0.0)
            d[i] += g;
          else if (xv[i] < 0.0)
            d[i] -= g;  // subgradient 0 at exactly 0
        }
      });
    }
    return o;
  }

  ValueId sq_frobenius(ValueId x) {
    const Tensor& X = value(x);
    double s = 0.0;
    for (double v : X.data) s += v * v;
    ValueId o = push(scalar(s), requires_grad(x));
    if (entries_[o].rg) {
      nodes_.push_back([x, o](Tape& t) {
        double g = t.entries_[o].adj[0];
        const auto& xv = t.value(x).data;
        auto& d = t.entries_[x].adj;
        for (std::size_t i = 0; i < xv.size(); ++i) d[i] += 2.0 * xv[i] * g;
      });
    }
    return o;
  }

  // ---- fused composites ----------------------------------------------

  // y = s * ((x - mu) / sqrt(var + eps) + b), statistics per channel of a
  // 4-d (N,C,H,W) input. In train mode mu/var are biased batch statistics
  // and, when update_running is set, running stats are folded as
  // running = momentum * running + (1 - momentum) * batch.
  // Train mode requires N >= 2. Eval mode reads the running stats.
  ValueId scaled_bn(ValueId x, ValueId s, ValueId b, BnMode mode, double eps,
                    Tensor* running_mean, Tensor* running_var, double momentum,
                    bool update_running) {
    const Tensor& X = value(x);
    const Tensor& S = value(s);
    const Tensor& B = value(b);
    DFC_CHECK(X.dim() == 4, "scaled_bn expects 4-d input, got " << shape_str(X.shape));
    std::int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
    DFC_CHECK(S.numel() == C && B.numel() == C,
              "scaled_bn scale/shift must have one entry per channel");
    DFC_CHECK(running_mean && running_var && running_mean->numel() == C &&
                  running_var->numel() == C,
              "scaled_bn requires per-channel running stats");
    if (mode == BnMode::train)
      DFC_CHECK(N >= 2, "scaled_bn train mode needs batch size >= 2");

    std::int64_t hw = H * W;
    double inv_m = 1.0 / static_cast<double>(N * hw);
    std::vector<double> mean(C, 0.0), inv_std(C, 0.0);
    if (mode == BnMode::train) {
      for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const double* p = X.data.data() + (n * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
        }
        mean[c] = acc * inv_m;
        double var = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const double* p = X.data.data() + (n * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            double d = p[i] - mean[c];
            var += d * d;
          }
        }
        var *= inv_m;
        inv_std[c] = 1.0 / std::sqrt(var + eps);
        if (update_running) {
          running_mean->data[c] = momentum * running_mean->data[c] + (1.0 - momentum) * mean[c];
          running_var->data[c] = momentum * running_var->data[c] + (1.0 - momentum) * var;
        }
      }
    } else {
      for (std::int64_t c = 0; c < C; ++c) {
        mean[c] = running_mean->data[c];
        inv_std[c] = 1.0 / std::sqrt(running_var->data[c] + eps);
      }
    }

    Tensor out(X.shape);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const double* p = X.data.data() + (n * C + c) * hw;
        double* q = out.data.data() + (n * C + c) * hw;
        double mu = mean[c], is = inv_std[c], sc = S.data[c], bc = B.data[c];
        for (std::int64_t i = 0; i < hw; ++i) q[i] = sc * ((p[i] - mu) * is + bc);
      }

    bool rg = requires_grad(x) || requires_grad(s) || requires_grad(b);
    ValueId o = push(std::move(out), rg);
    if (rg) {
      bool train = mode == BnMode::train;
      nodes_.push_back([x, s, b, o, N, C, hw, inv_m, mean, inv_std,
                        train](Tape& t) {
        const auto& g = t.entries_[o].adj;
        const auto& xv = t.value(x).data;
        const auto& sv = t.value(s).data;
        const auto& bv = t.value(b).data;
        bool need_x = t.requires_grad(x);
        bool need_s = t.requires_grad(s);
        bool need_b = t.requires_grad(b);
        for (std::int64_t c = 0; c < C; ++c) {
          double mu = mean[c], is = inv_std[c], sc = sv[c], bc = bv[c];
          double sum_g = 0.0, sum_gx = 0.0, ds = 0.0;
          for (std::int64_t n = 0; n < N; ++n) {
            const double* gp = g.data() + (n * C + c) * hw;
            const double* xp = xv.data() + (n * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              double xh = (xp[i] - mu) * is;
              sum_g += gp[i];
              sum_gx += gp[i] * xh;
              ds += gp[i] * (xh + bc);
            }
          }
          if (need_s) t.entries_[s].adj[c] += ds;
          if (need_b) t.entries_[b].adj[c] += sum_g * sc;
          if (need_x) {
            double* base = t.entries_[x].adj.data();
            if (train) {
              double mg = sum_g * inv_m, mgx = sum_gx * inv_m;
              for (std::int64_t n = 0; n < N; ++n) {
                const double* gp = g.data() + (n * C + c) * hw;
                const double* xp = xv.data() + (n * C + c) * hw;
                double* dp = base + (n * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                  double xh = (xp[i] - mu) * is;
                  dp[i] += sc * is * (gp[i] - mg - xh * mgx);
                }
              }
            } else {
              for (std::int64_t n = 0; n < N; ++n) {
                const double* gp = g.data() + (n * C + c) * hw;
                double* dp = base + (n * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) dp[i] += sc * is * gp[i];
              }
            }
          }
        }
      });
    }
    return o;
  }

  // Each row of (N,M) divided by its own l2 norm; zero rows stay zero.
  ValueId normalize_rows(ValueId x) {
    const Tensor& X = value(x);
    DFC_CHECK(X.dim() == 2, "normalize_rows expects 2-d input");
    std::int64_t N = X.shape[0], M = X.shape[1];
    Tensor out(X.shape);
    std::vector<double> norms(N, 0.0);
    for (std::int64_t n = 0; n < N; ++n) {
      const double* p = X.data.data() + n * M;
      double acc = 0.0;
      for (std::int64_t j = 0; j < M; ++j) acc += p[j] * p[j];
      norms[n] = std::sqrt(acc);
      double* q = out.data.data() + n * M;
      if (norms[n] > 0.0)
        for (std::int64_t j = 0; j < M; ++j) q[j] = p[j] / norms[n];
    }
    ValueId o = push(std::move(out), requires_grad(x));
    if (entries_[o].rg) {
      nodes_.push_back([x, o, N, M, norms](Tape& t) {
        const auto& g = t.entries_[o].adj;
        const auto& u = t.value(o).data;
        auto& d = t.entries_[x].adj;
        for (std::int64_t n = 0; n < N; ++n) {
          if (norms[n] == 0.0) continue;
          const double* gr = g.data() + n * M;
          const double* ur = u.data() + n * M;
          double dot = 0.0;
          for (std::int64_t j = 0; j < M; ++j) dot += gr[j] * ur[j];
          double* dr = d.data() + n * M;
          double inv = 1.0 / norms[n];
          for (std::int64_t j = 0; j < M; ++j)
            dr[j] += inv * (gr[j] - ur[j] * dot);
        }
      });
    }
    return o;
  }

  // l2 norm of each row of (N,M) -> (N). Gradient at a zero row is 0.
  ValueId row_l2_norm(ValueId x) {
    const Tensor& X = value(x);
    DFC_CHECK(X.dim() == 2, "row_l2_norm expects 2-d input");
    std::int64_t N = X.shape[0], M = X.shape[1];
    Tensor out(Shape{N});
    for (std::int64_t n = 0; n < N; ++n) {
      const double* p = X.data.data() + n * M;
      double acc = 0.0;
      for (std::int64_t j = 0; j < M; ++j) acc += p[j] * p[j];
      out.data[n] = std::sqrt(acc);
    }
    ValueId o = push(std::move(out), requires_grad(x));
    if (entries_[o].rg) {
      nodes_.push_back([x, o, N, M](Tape& t) {
        const auto& g = t.entries_[o].adj;
        const auto& r = t.value(o).data;
        const auto& xv = t.value(x).data;
        auto& d = t.entries_[x].adj;
        for (std::int64_t n = 0; n < N; ++n) {
          if (r[n] == 0.0) continue;
          double scale = g[n] / r[n];
          const double* xr = xv.data() + n * M;
          double* dr = d.data() + n * M;
          for (std::int64_t j = 0; j < M; ++j) dr[j] += scale * xr[j];
        }
      });
    }
    return o;
  }

 private:
  struct Entry {
    Tensor val;
    std::vector<double> adj;
    bool rg = false;
  };

  std::deque<Entry> entries_;  // deque: value() references stay valid as ops are added
  std::vector<std::function<void(Tape&)>> nodes_;
  bool ran_backward_ = false;

  ValueId check_id(ValueId id) const {
    DFC_CHECK(id >= 0 && static_cast<std::size_t>(id) < entries_.size(),
              "bad tape id " << id);
    return id;
  }

  ValueId push(Tensor t, bool rg) {
    Entry e;
    e.rg = rg;
    if (rg) e.adj.assign(t.data.size(), 0.0);
    e.val = std::move(t);
    entries_.push_back(std::move(e));
    return static_cast<ValueId>(entries_.size() - 1);
  }

  template <class Back>
  ValueId unary(ValueId x, Tensor out, Back&& back) {
    ValueId o = push(std::move(out), requires_grad(x));
    if (entries_[o].rg) {
      nodes_.push_back(
          [x, o, back = std::forward<Back>(back)](Tape& t) { back(t, x, o); });
    }
    return o;
  }

  enum class Bin { add, sub, mul, div };

  ValueId binary(ValueId a, ValueId b, Bin op) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    enum class Bc { same, scalar_rhs, row_rhs } bc;
    if (same_shape(A.shape, B.shape)) {
      bc = Bc::same;
    } else if (B.numel() == 1) {
      bc = Bc::scalar_rhs;
    } else if (op == Bin::add && A.dim() == 2 && B.dim() == 1 &&
               B.shape[0] == A.shape[1]) {
      bc = Bc::row_rhs;
    } else {
      DFC_CHECK(false, "binary op shape mismatch: " << shape_str(A.shape)
                                                    << " vs " << shape_str(B.shape));
      bc = Bc::same;  // unreachable
    }
    std::int64_t n = A.numel();
    std::int64_t cols = bc == Bc::row_rhs ? A.shape[1] : 0;
    Tensor out(A.shape);
    auto rhs_at = [&](std::int64_t i) -> double {
      switch (bc) {
        case Bc::same: return B.data[i];
        case Bc::scalar_rhs: return B.data[0];
        default: return B.data[i % cols];
      }
    };
    switch (op) {
      case Bin::add:
        for (std::int64_t i = 0; i < n; ++i) out.data[i] = A.data[i] + rhs_at(i);
        break;
      case Bin::sub:
        for (std::int64_t i = 0; i < n; ++i) out.data[i] = A.data[i] - rhs_at(i);
        break;
      case Bin::mul:
        for (std::int64_t i = 0; i < n; ++i) out.data[i] = A.data[i] * rhs_at(i);
        break;
      case Bin::div:
        for (std::int64_t i = 0; i < n; ++i) out.data[i] = A.data[i] / rhs_at(i);
        break;
    }
    ValueId o = push(std::move(out), requires_grad(a) || requires_grad(b));
    if (entries_[o].rg) {
      nodes_.push_back([a, b, o, op, bc, n, cols](Tape& t) {
        const auto& g = t.entries_[o].adj;
        const auto& av = t.value(a).data;
        const auto& bv = t.value(b).data;
        auto rhs = [&](std::int64_t i) -> double {
          switch (bc) {
            case Bc::same: return bv[i];
            case Bc::scalar_rhs: return bv[0];
            default: return bv[i % cols];
          }
        };
        auto scatter_b = [&](std::int64_t i, double v) {
          auto& db = t.entries_[b].adj;
          switch (bc) {
            case Bc::same: db[i] += v; break;
            case Bc::scalar_rhs: db[0] += v; break;
            default: db[i % cols] += v; break;
          }
        };
        bool na = t.requires_grad(a), nb = t.requires_grad(b);
        for (std::int64_t i = 0; i < n; ++i) {
          double gi = g[i];
          switch (op) {
            case Bin::add:
              if (na) t.entries_[a].adj[i] += gi;
              if (nb) scatter_b(i, gi);
              break;
            case Bin::sub:
              if (na) t.entries_[a].adj[i] += gi;
              if (nb) scatter_b(i, -gi);
              break;
            case Bin::mul:
              if (na) t.entries_[a].adj[i] += gi * rhs(i);
              if (nb) scatter_b(i, gi * av[i]);
              break;
            case Bin::div: {
              double bvi = rhs(i);
              if (na) t.entries_[a].adj[i] += gi / bvi;
              if (nb) scatter_b(i, -gi * av[i] / (bvi * bvi));
              break;
            }
          }
        }
      });
    }
    return o;
  }

  // Shared mean/variance reduction. Output keeps the non-reduced axes in
  // order (scalar shape {1} when everything is reduced).
  ValueId reduce(ValueId x, std::vector<int> axes, bool variance) {
    const Tensor& X = value(x);
    std::int64_t nd = X.dim();
    std::sort(axes.begin(), axes.end());
    DFC_CHECK(!axes.empty(), "reduction needs at least one axis");
    DFC_CHECK(std::unique(axes.begin(), axes.end()) == axes.end(),
              "duplicate reduction axis");
    std::vector<bool> reduced(nd, false);
    std::int64_t count = 1;
    for (int ax : axes) {
      DFC_CHECK(ax >= 0 && ax < nd, "reduction axis " << ax << " out of range for "
                                                      << shape_str(X.shape));
      reduced[ax] = true;
      count *= X.shape[ax];
    }
    DFC_CHECK(count > 0, "reduction over empty extent");
    Shape out_shape;
    for (std::int64_t i = 0; i < nd; ++i)
      if (!reduced[i]) out_shape.push_back(X.shape[i]);
    if (out_shape.empty()) out_shape.push_back(1);

    // Map each input flat index to its output flat index once.
    std::vector<std::int64_t> omap(X.numel());
    {
      std::vector<std::int64_t> strides_in(nd, 1);
      for (std::int64_t i = nd - 2; i >= 0; --i)
        strides_in[i] = strides_in[i + 1] * X.shape[i + 1];
      for (std::int64_t flat = 0; flat < X.numel(); ++flat) {
        std::int64_t rem = flat, out_idx = 0;
        for (std::int64_t i = 0; i < nd; ++i) {
          std::int64_t coord = rem / strides_in[i];
          rem %= strides_in[i];
          if (!reduced[i]) out_idx = out_idx * X.shape[i] + coord;
        }
        omap[flat] = out_idx;
      }
    }

    double inv = 1.0 / static_cast<double>(count);
    Tensor mean_t(out_shape);
    for (std::int64_t i = 0; i < X.numel(); ++i) mean_t.data[omap[i]] += X.data[i] * inv;
    Tensor out = mean_t;
    if (variance) {
      Tensor var_t(out_shape);
      for (std::int64_t i = 0; i < X.numel(); ++i) {
        double d = X.data[i] - mean_t.data[omap[i]];
        var_t.data[omap[i]] += d * d * inv;
      }
      out = std::move(var_t);
    }
    ValueId o = push(std::move(out), requires_grad(x));
    if (entries_[o].rg) {
      std::vector<double> means = variance ? mean_t.data : std::vector<double>{};
      nodes_.push_back([x, o, omap = std::move(omap), inv, variance,
                        means = std::move(means)](Tape& t) {
        const auto& g = t.entries_[o].adj;
        const auto& xv = t.value(x).data;
        auto& d = t.entries_[x].adj;
        if (variance) {
          for (std::size_t i = 0; i < xv.size(); ++i)
            d[i] += g[omap[i]] * 2.0 * (xv[i] - means[omap[i]]) * inv;
        } else {
          for (std::size_t i = 0; i < xv.size(); ++i) d[i] += g[omap[i]] * inv;
        }
      });
    }
    return o;
  }

  static double phi_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }
  static double phi_pdf(double x) { return std::exp(-0.5 * x * x) * 0.39894228040143267794; }

  // C += op(A) * op(B) where transposition is resolved by flags; used for
  // both forward products and the two matmul adjoints. Accumulates.
  static void mm(const double* A, const double* B, double* C, std::int64_t m,
                 std::int64_t k, std::int64_t n, bool ta, bool tb) {
    // A is (m,k) logical; physical layout depends on ta. Same for B.
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t kk = 0; kk < k; ++kk) {
        double av = ta ? A[kk * m + i] : A[i * k + kk];
        if (av == 0.0) continue;
        if (!tb) {
          const double* Br = B + kk * n;
          double* Cr = C + i * n;
          for (std::int64_t j = 0; j < n; ++j) Cr[j] += av * Br[j];
        } else {
          const double* Bc = B + kk;  // B physical (n,k): element (kk,j) at j*k+kk
          double* Cr = C + i * n;
          for (std::int64_t j = 0; j < n; ++j) Cr[j] += av * Bc[j * k];
        }
      }
    }
  }

  static void conv_fwd(const Tensor& X, const Tensor& W, Tensor& out, int stride,
                       int pad) {
    std::int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], Wi = X.shape[3];
    std::int64_t F = W.shape[0], K = W.shape[2];
    std::int64_t OH = out.shape[2], OW = out.shape[3];
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t f = 0; f < F; ++f) {
        double* op = out.data.data() + (n * F + f) * OH * OW;
        for (std::int64_t c = 0; c < C; ++c) {
          const double* xp = X.data.data() + (n * C + c) * H * Wi;
          const double* wp = W.data.data() + (f * C + c) * K * K;
          for (std::int64_t ky = 0; ky < K; ++ky)
            for (std::int64_t kx = 0; kx < K; ++kx) {
              double wv = wp[ky * K + kx];
              if (wv == 0.0) continue;
              // valid output column range for this kernel column
              std::int64_t lo = 0, hi = OW - 1;
              clamp_range(kx, pad, stride, Wi, &lo, &hi);
              for (std::int64_t oy = 0; oy < OH; ++oy) {
                std::int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                const double* xrow = xp + iy * Wi;
                double* orow = op + oy * OW;
                std::int64_t ix = lo * stride - pad + kx;
                for (std::int64_t ox = lo; ox <= hi; ++ox, ix += stride)
                  orow[ox] += wv * xrow[ix];
              }
            }
        }
      }
  }

  static void conv_bwd(const Tensor& X, const Tensor& W,
                       const std::vector<double>& g, std::vector<double>* dx,
                       std::vector<double>* dw, int stride, int pad,
                       const Shape& out_shape) {
    std::int64_t N = X.shape[0], C = X.shape[1], H = X.shape[2], Wi = X.shape[3];
    std::int64_t F = W.shape[0], K = W.shape[2];
    std::int64_t OH = out_shape[2], OW = out_shape[3];
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t f = 0; f < F; ++f) {
        const double* gp = g.data() + (n * F + f) * OH * OW;
        for (std::int64_t c = 0; c < C; ++c) {
          const double* xp = X.data.data() + (n * C + c) * H * Wi;
          const double* wp = W.data.data() + (f * C + c) * K * K;
          double* dxp = dx ? dx->data() + (n * C + c) * H * Wi : nullptr;
          double* dwp = dw ? dw->data() + (f * C + c) * K * K : nullptr;
          for (std::int64_t ky = 0; ky < K; ++ky)
            for (std::int64_t kx = 0; kx < K; ++kx) {
              double wv = wp[ky * K + kx];
              double wacc = 0.0;
              std::int64_t lo = 0, hi = OW - 1;
              clamp_range(kx, pad, stride, Wi, &lo, &hi);
              for (std::int64_t oy = 0; oy < OH; ++oy) {
                std::int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                const double* xrow = xp + iy * Wi;
                const double* grow = gp + oy * OW;
                double* dxrow = dxp ? dxp + iy * Wi : nullptr;
                std::int64_t ix = lo * stride - pad + kx;
                for (std::int64_t ox = lo; ox <= hi; ++ox, ix += stride) {
                  double gv = grow[ox];
                  if (dxrow) dxrow[ix] += wv * gv;
                  wacc += gv * xrow[ix];
                }
              }
              if (dwp) dwp[ky * K + kx] += wacc;
            }
        }
      }
  }

  static void clamp_range(std::int64_t kx, int pad, int stride, std::int64_t Wi,
                          std::int64_t* lo, std::int64_t* hi) {
    // ox*stride - pad + kx in [0, Wi)
    std::int64_t off = kx - pad;
    if (off < 0) *lo = std::max<std::int64_t>(*lo, (-off + stride - 1) / stride);
    std::int64_t top = Wi - 1 - off;
    if (top < 0)
      *hi = -1;
    else
      *hi = std::min<std::int64_t>(*hi, top / stride);
  }
};

// Central finite differences against the tape gradient.
// build must construct a scalar from one leaf: (tape, leaf id) -> root id.
// Returns the spec'd discrepancy max_i |a_i - c_i| / (|a_i| + |c_i| + 1e-12).
struct FdReport {
  double max_rel = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// `max_probes` > 0 limits the check to that many coordinates, sampled
// without replacement from `probe_rng`; composite whole-network checks would
// otherwise cost two forward passes per coordinate.
template <class BuildFn>
FdReport finite_diff_check(BuildFn&& build, const Tensor& x, double step,
                           std::int64_t max_probes = 0, Rng* probe_rng = nullptr) {
  DFC_CHECK(step > 0.0, "finite_diff_check needs a positive step");
  Tensor base = x;
  base.requires_grad = true;
  std::vector<double> analytic;
  {
    Tape tape;
    ValueId leaf = tape.leaf(base);
    ValueId root = build(tape, leaf);
    DFC_CHECK(tape.value(root).numel() == 1, "finite_diff_check target must be scalar");
    tape.backward(root);
    analytic = tape.grad(leaf);
  }
  auto eval = [&](const Tensor& pt) {
    Tape tape;
    Tensor cp = pt;
    cp.requires_grad = false;
    ValueId leaf = tape.leaf(std::move(cp));
    ValueId root = build(tape, leaf);
    return tape.value(root).data[0];
  };
  std::vector<std::int64_t> indices;
  if (max_probes > 0 && max_probes < x.numel()) {
    DFC_CHECK(probe_rng, "finite_diff_check needs an rng to subsample probes");
    std::vector<std::int64_t> all(static_cast<std::size_t>(x.numel()));
    for (std::int64_t i = 0; i < x.numel(); ++i) all[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = 0; i < max_probes; ++i) {
      std::uint64_t j = i + probe_rng->below(static_cast<std::uint64_t>(x.numel() - i));
      std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
    }
    indices.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_probes));
  } else {
    for (std::int64_t i = 0; i < x.numel(); ++i) indices.push_back(i);
  }
  FdReport rep;
  Tensor probe = x;
  probe.requires_grad = false;
  for (std::int64_t i : indices) {
    double keep = probe.data[i];
    probe.data[i] = keep + step;
    double fp = eval(probe);
    probe.data[i] = keep - step;
    double fm = eval(probe);
    probe.data[i] = keep;
    double num = (fp - fm) / (2.0 * step);
    double rel = std::abs(analytic[i] - num) /
                 (std::abs(analytic[i]) + std::abs(num) + 1e-12);
    if (rel > rep.max_rel) {
      rep.max_rel = rel;
      rep.worst_index = i;
      rep.analytic = analytic[i];
      rep.numeric = num;
    }
  }
  return rep;
}

}  // namespace dfc
