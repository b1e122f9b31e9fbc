// Losses and metrics: divergence between teacher and student predictive
// distributions, the attention-matching regularizer, the group-sparsity
// penalty used for structured pruning, cross entropy for supervised runs,
// and a few plain (off-tape) evaluation metrics.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dfc/network.hpp"
#include "dfc/tape.hpp"

namespace dfc {

enum class Divergence { kl, js_symmetric };

constexpr double kProbFloor = 1e-12;

// ---- plain (off-tape) reference implementations -----------------------

// KL(p || q) with q floored at kProbFloor and the 0 * log 0 = 0 convention.
inline double kl_divergence(const std::vector<double>& p,
                            const std::vector<double>& q) {
  DFC_CHECK(p.size() == q.size(), "kl_divergence: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    DFC_CHECK(p[i] >= 0.0 && q[i] >= 0.0, "kl_divergence: negative entry");
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / std::max(q[i], kProbFloor));
  }
  return acc;
}

// Symmetrized KL, (KL(p||q) + KL(q||p)) / 2. Note this is the sum of the two
// directed divergences, not the Jensen-Shannon midpoint construction; the
// "js" configuration option selects this quantity.
inline double js_symmetric(const std::vector<double>& p,
                           const std::vector<double>& q) {
  return 0.5 * (kl_divergence(p, q) + kl_divergence(q, p));
}

// Shannon entropy, natural log, 0 * log 0 = 0.
inline double prediction_entropy(const std::vector<double>& p) {
  double acc = 0.0;
  for (double v : p) {
    DFC_CHECK(v >= 0.0, "prediction_entropy: negative entry");
    if (v > 0.0) acc -= v * std::log(v);
  }
  return acc;
}

inline std::int64_t argmax_row(const Tensor& t, std::int64_t row) {
  std::int64_t K = t.shape.back();
  const double* p = t.data.data() + row * K;
  std::int64_t best = 0;
  for (std::int64_t k = 1; k < K; ++k)
    if (p[k] > p[best]) best = k;
  return best;
}

inline double accuracy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  std::int64_t N = logits.shape[0];
  DFC_CHECK(static_cast<std::int64_t>(labels.size()) == N, "accuracy: label count mismatch");
  std::int64_t hit = 0;
  for (std::int64_t n = 0; n < N; ++n)
    if (argmax_row(logits, n) == labels[n]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(N);
}

// Fraction of rows where the two logit matrices pick the same class.
inline double agreement(const Tensor& a, const Tensor& b) {
  DFC_CHECK(a.shape == b.shape && a.dim() == 2, "agreement: shape mismatch");
  std::int64_t N = a.shape[0], hit = 0;
  for (std::int64_t n = 0; n < N; ++n)
    if (argmax_row(a, n) == argmax_row(b, n)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(N);
}

inline std::vector<double> softmax_row(const Tensor& logits, std::int64_t row) {
  std::int64_t K = logits.shape.back();
  const double* p = logits.data.data() + row * K;
  double mx = *std::max_element(p, p + K);
  std::vector<double> out(K);
  double z = 0.0;
  for (std::int64_t k = 0; k < K; ++k) z += (out[k] = std::exp(p[k] - mx));
  for (auto& v : out) v /= z;
  return out;
}

// Mean predictive entropy over the rows of a logit matrix.
inline double mean_entropy(const Tensor& logits) {
  std::int64_t N = logits.shape[0];
  double acc = 0.0;
  for (std::int64_t n = 0; n < N; ++n)
    acc += prediction_entropy(softmax_row(logits, n));
  return acc / static_cast<double>(N);
}

// ---- on-tape losses ----------------------------------------------------

namespace detail {

// sum_nk a * (log a~ - log b~) / N  where ~ is the floor clip. `a` and `b`
// are (N,K) probability matrices already on the tape.
inline ValueId directed_kl(Tape& tape, ValueId a, ValueId b) {
  const Tensor& A = tape.value(a);
  std::int64_t N = A.shape[0], K = A.shape[1];
  ValueId la = tape.log(tape.clip(a, kProbFloor, 1.0));
  ValueId lb = tape.log(tape.clip(b, kProbFloor, 1.0));
  ValueId cell = tape.mul(a, tape.sub(la, lb));
  ValueId m = tape.mean_axis(cell, {0, 1});  // sum / (N*K)
  return tape.mul(m, tape.constant(scalar(static_cast<double>(K))));
}

}  // namespace detail

// Batch-mean divergence D(p_teacher || softmax(student_logits)). The teacher
// distribution enters as a constant, so gradients flow only through the
// student logits (and, via them, the generator when the images are on tape).
inline ValueId batch_divergence(Tape& tape, ValueId teacher_probs,
                                ValueId student_logits, Divergence kind) {
  ValueId q = tape.softmax(student_logits);
  if (kind == Divergence::kl) return detail::directed_kl(tape, teacher_probs, q);
  ValueId half = tape.constant(scalar(0.5));
  return tape.mul(tape.add(detail::directed_kl(tape, teacher_probs, q),
                           detail::directed_kl(tape, q, teacher_probs)),
                  half);
}

// Attention map of a feature tensor: channel mean of squares, flattened to
// one row per sample.
inline ValueId attention_map_rows(Tape& tape, ValueId feat) {
  const Tensor& F = tape.value(feat);
  DFC_CHECK(F.dim() == 4, "attention map needs a (N,C,H,W) tensor");
  ValueId f = tape.mean_axis(tape.mul(feat, feat), {1});  // (N,H,W)
  return tape.reshape(f, Shape{F.shape[0], F.shape[2] * F.shape[3]});
}

// beta * mean_n sum_l || s_hat_l(n) - t_hat_l(n) ||_2 with s_hat, t_hat the
// row-normalized attention maps. A sample-layer term where either side has a
// zero-norm map contributes exactly zero (enforced by a constant 0/1 mask, so
// its gradient is zero too). Teacher maps arrive as plain tensors because
// they are computed once per round and reused across student steps.
inline ValueId attention_penalty(Tape& tape,
                                 const std::vector<ValueId>& student_taps,
                                 const std::vector<Tensor>& teacher_taps,
                                 double beta) {
  DFC_CHECK(student_taps.size() == teacher_taps.size() && !student_taps.empty(),
            "attention_penalty: tap count mismatch");
  ValueId acc = -1;
  for (std::size_t l = 0; l < student_taps.size(); ++l) {
    ValueId sf = attention_map_rows(tape, student_taps[l]);
    ValueId tf = attention_map_rows(tape, tape.constant(teacher_taps[l]));
    const Tensor& SF = tape.value(sf);
    const Tensor& TF = tape.value(tf);
    DFC_CHECK(SF.shape == TF.shape,
              "attention_penalty: teacher/student map shape mismatch "
                  << shape_str(SF.shape) << " vs " << shape_str(TF.shape));
    std::int64_t N = SF.shape[0], M = SF.shape[1];
    Tensor mask(Shape{N});
    for (std::int64_t n = 0; n < N; ++n) {
      double ns = 0.0, nt = 0.0;
      for (std::int64_t j = 0; j < M; ++j) {
        ns += SF.data[n * M + j] * SF.data[n * M + j];
        nt += TF.data[n * M + j] * TF.data[n * M + j];
      }
      mask.data[n] = (ns > 0.0 && nt > 0.0) ? 1.0 : 0.0;
    }
    ValueId d = tape.row_l2_norm(
        tape.sub(tape.normalize_rows(sf), tape.normalize_rows(tf)));
    ValueId term = tape.mul(d, tape.constant(std::move(mask)));
    acc = (acc < 0) ? term : tape.add(acc, term);
  }
  ValueId per_sample_mean = tape.mean_axis(acc, {0});
  return tape.mul(per_sample_mean, tape.constant(scalar(beta)));
}

// Group-sparsity penalty: sum_g (gamma / w_g) ||s_g||_1 plus a ridge term
// lambda * (sum of squared conv and dense weights, dense biases, and group
// shifts). Shared scale vectors are counted once per group. The scale
// vectors themselves are excluded from the ridge so the L1 pull is the only
// force on them.
inline ValueId prune_penalty(Tape& tape, const NetworkGraph& net,
                             const std::map<std::string, ValueId>& leaves,
                             double gamma, double lambda) {
  ValueId acc = -1;
  auto plus = [&](ValueId term) { acc = (acc < 0) ? term : tape.add(acc, term); };
  for (const auto& [gid, g] : net.groups) {
    ValueId l1 = tape.l1_norm(leaves.at(g.s_id));
    plus(tape.mul(l1, tape.constant(scalar(gamma / static_cast<double>(g.width)))));
  }
  if (lambda != 0.0) {
    ValueId ridge = -1;
    auto ridge_plus = [&](ValueId term) {
      ridge = (ridge < 0) ? term : tape.add(ridge, term);
    };
    for_each_layer(net, [&](const Layer& ly) {
      if (ly.kind == LayerKind::conv) {
        ridge_plus(tape.sq_frobenius(leaves.at(ly.conv.wid)));
      } else if (ly.kind == LayerKind::dense) {
        ridge_plus(tape.sq_frobenius(leaves.at(ly.dense.wid)));
        ridge_plus(tape.sq_frobenius(leaves.at(ly.dense.bid)));
      }
    });
    for (const auto& [gid, g] : net.groups)
      ridge_plus(tape.sq_frobenius(leaves.at(g.b_id)));
    plus(tape.mul(ridge, tape.constant(scalar(lambda))));
  }
  DFC_CHECK(acc >= 0, "prune_penalty: network has no scale groups");
  return acc;
}

// Mean cross entropy of softmax(logits) against integer labels.
inline ValueId cross_entropy(Tape& tape, ValueId logits,
                             const std::vector<std::int64_t>& labels) {
  const Tensor& L = tape.value(logits);
  std::int64_t N = L.shape[0], K = L.shape[1];
  DFC_CHECK(static_cast<std::int64_t>(labels.size()) == N,
            "cross_entropy: label count mismatch");
  Tensor onehot(Shape{N, K});
  for (std::int64_t n = 0; n < N; ++n) {
    DFC_CHECK(labels[n] >= 0 && labels[n] < K, "cross_entropy: label out of range");
    onehot.data[n * K + labels[n]] = 1.0;
  }
  ValueId lq = tape.log(tape.clip(tape.softmax(logits), kProbFloor, 1.0));
  ValueId cell = tape.mul(tape.constant(std::move(onehot)), lq);
  ValueId m = tape.mean_axis(cell, {0, 1});
  return tape.mul(m, tape.constant(scalar(-static_cast<double>(K))));
}

inline Divergence parse_divergence(const std::string& s) {
  if (s == "kl") return Divergence::kl;
  if (s == "js") return Divergence::js_symmetric;
  throw ConfigError("divergence must be 'kl' or 'js', got '" + s + "'");
}

inline const char* divergence_name(Divergence d) {
  return d == Divergence::kl ? "kl" : "js";
}

}  // namespace dfc
