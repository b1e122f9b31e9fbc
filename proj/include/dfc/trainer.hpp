// Training loops: supervised teacher pretraining and the adversarial
// data-free compression loop (plain, quantized, or pruned student).
//
// One round of the data-free loop:
//   1. draw z once; `generator_steps` ascent steps on the generator, maximizing
//      the teacher-student divergence through frozen teacher and student;
//   2. regenerate the batch from the same z with the updated generator; run
//      the teacher once and cache its probabilities and attention maps;
//   3. `student_steps` descent steps on the student against the cached
//      teacher targets (divergence + attention term + optional sparsity term).
// The sparsity weights (gamma, lambda) ramp linearly over the first `warmup`
// rounds and are exact at round == warmup (rounds are 1-based).
//
// Determinism: every random stream is derived from the config seed with a
// fixed tag (teacher init 1, student init 2, generator init 3, z draws 4,
// pretrain shuffling 5), loops are single threaded with fixed order, and
// `timing = false` writes wall_ms as 0, making metrics byte-reproducible.
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "dfc/adam.hpp"
#include "dfc/checkpoint.hpp"
#include "dfc/dataset.hpp"
#include "dfc/network.hpp"
#include "dfc/objectives.hpp"
#include "dfc/pruner.hpp"
#include "dfc/quantizer.hpp"

namespace dfc {

using ordered_json = nlohmann::ordered_json;

struct TrainProtocol {
  std::string mode = "plain";  // plain | quantize | prune
  std::uint64_t seed = 1;
  int rounds = 2000;
  int batch = 64;
  int zdim = 100;
  int student_base = 4;  // prune mode clones the teacher width instead
  int generator_steps = 1;
  int student_steps = 10;
  double lr_student = 2e-3;
  double lr_generator = 1e-3;
  Divergence divergence = Divergence::kl;
  double beta = 1.0;     // attention term weight
  double gamma = 2e-3;   // group L1 weight (prune mode)
  double lambda = 1e-4;  // ridge weight (prune mode)
  int warmup = 200;      // rounds of linear (gamma, lambda) ramp
  double delta = 0.1;    // quantization half-width (quantize mode)
  double ts = 0.1;       // pruning threshold on |s| (prune mode)
  bool timing = true;    // false: wall_ms recorded as 0 for byte-stable metrics
  std::string out_dir;   // empty: no artifacts written

  double warm_factor(int round) const {
    if (warmup <= 0) return 1.0;
    return std::min(1.0, static_cast<double>(round) / static_cast<double>(warmup));
  }
};

struct RoundMetrics {
  int round = 0;
  double loss = 0.0;
  double divergence = 0.0;
  double attn_reg = 0.0;
  double prune_reg = 0.0;
  double entropy = 0.0;    // teacher predictive entropy on the generated batch
  double agreement = 0.0;  // student-teacher argmax agreement on the probe set
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double wall_ms = 0.0;
  // quantize mode extras
  double q_buffer_inf = 0.0;
  bool q_two_valued = true;

  ordered_json to_json(bool quantize_fields) const {
    ordered_json j;
    j["round"] = round;
    j["loss"] = loss;
    j["divergence"] = divergence;
    j["attn_reg"] = attn_reg;
    j["prune_reg"] = prune_reg;
    j["entropy"] = entropy;
    j["agreement"] = agreement;
    j["params"] = params;
    j["flops"] = flops;
    j["wall_ms"] = wall_ms;
    if (quantize_fields) {
      j["q_buffer_inf"] = q_buffer_inf;
      j["q_two_valued"] = q_two_valued;
    }
    return j;
  }
};

struct TrainOutcome {
  NetworkGraph student;
  NetworkGraph generator;
  double final_agreement = 0.0;
  CountReport counts_before, counts_after;
  double q_buffer_inf_max = 0.0;  // max over all steps of the run
  bool q_two_valued_all = true;
  double prune_equivalence_diff = 0.0;  // zeroed-vs-compacted probe diff
  ordered_json prune_report;
};

// ---- teacher pretraining ----------------------------------------------

// Supervised training on the synthetic distribution until held-out accuracy
// clears `target` (early stop at target + margin). Throws if the cap is hit
// without reaching `target`.
inline NetworkGraph pretrain_teacher(std::uint64_t seed, int base = 8,
                                     double target = 0.95, int max_epochs = 15,
                                     std::vector<double>* epoch_acc = nullptr) {
  Rng init_rng(mix_seed(seed, 1));
  Rng shuffle_rng(mix_seed(seed, 5));
  NetworkGraph net = make_classifier("teacher", base);
  init_params(net, init_rng);
  Adam opt(1e-3);

  const int train_n = 4096, batch = 64;
  std::vector<std::int64_t> order(train_n);
  std::iota(order.begin(), order.end(), 0);

  std::vector<std::int64_t> eval_labels;
  Tensor eval_x = synth_batch(seed, kEvalIndexBase, 1024, &eval_labels);

  double acc = 0.0;
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    for (int i = train_n - 1; i > 0; --i) {
      std::int64_t j = static_cast<std::int64_t>(
          shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[i], order[j]);
    }
    for (int b = 0; b < train_n / batch; ++b) {
      std::vector<std::int64_t> idx(order.begin() + b * batch,
                                    order.begin() + (b + 1) * batch);
      std::vector<std::int64_t> labels;
      Tensor x = synth_batch_at(seed, idx, &labels);
      Tape tape;
      ForwardResult r =
          forward(net, tape, tape.constant(x), BnMode::train, true, false, true);
      ValueId loss = cross_entropy(tape, r.output, labels);
      tape.backward(loss);
      opt.begin_step();
      for (auto& [id, t] : net.params)
        opt.update(id, t.data, tape.grad(r.leaves.at(id)));
    }
    acc = accuracy(eval_logits(net, eval_x), eval_labels);
    if (epoch_acc) epoch_acc->push_back(acc);
    if (acc >= target + 0.02) break;
  }
  DFC_CHECK(acc >= target, "teacher stalled at held-out accuracy "
                               << acc << " (target " << target << ")");
  return net;
}

// ---- data-free compression loop ---------------------------------------

namespace detail {

inline Tensor cache_softmax(const Tensor& logits) {
  Tensor p(logits.shape);
  std::int64_t N = logits.shape[0], K = logits.shape[1];
  for (std::int64_t n = 0; n < N; ++n) {
    auto row = softmax_row(logits, n);
    std::copy(row.begin(), row.end(), p.data.begin() + n * K);
  }
  return p;
}

}  // namespace detail

// student_io, when given, supplies the starting student (trained in place and
// copied back at the end); conv_mask freezes the listed per-tensor coordinates
// throughout, keeping masked weights exactly as they start.
inline TrainOutcome train_data_free(
    const TrainProtocol& pr, const NetworkGraph& teacher,
    std::vector<RoundMetrics>* out_metrics = nullptr,
    NetworkGraph* student_io = nullptr,
    const std::map<std::string, std::vector<double>>* conv_mask = nullptr) {
  DFC_CHECK(pr.mode == "plain" || pr.mode == "quantize" || pr.mode == "prune",
            "unknown training mode '" << pr.mode << "'");
  DFC_CHECK(pr.rounds >= 1 && pr.batch >= 2 && pr.student_steps >= 1 &&
                pr.generator_steps >= 1,
            "degenerate training protocol");
  const bool quantize = pr.mode == "quantize";
  const bool prune = pr.mode == "prune";
  DFC_CHECK(!conv_mask || !quantize, "masked training does not combine with quantization");

  // Teacher width is recovered from its first scale group.
  int teacher_base = teacher.groups.at(0).channels;

  TrainOutcome out;
  Rng srng(mix_seed(pr.seed, 2));
  Rng grng(mix_seed(pr.seed, 3));
  Rng zrng(mix_seed(pr.seed, 4));

  NetworkGraph& student = out.student;
  if (student_io) {
    student = *student_io;
  } else if (prune) {
    student = teacher;  // same width, same weights: prune the trained network
    student.name = "student";
  } else {
    student = make_classifier("student", pr.student_base, 10, teacher.activation);
    init_params(student, srng);
  }
  NetworkGraph& gen = out.generator;
  gen = make_generator("generator", pr.zdim, teacher_base, teacher.activation);
  init_params(gen, grng);

  QuantState qs;
  if (quantize) qs = init_quantizer(student, pr.delta);

  Adam opt_s(pr.lr_student), opt_g(pr.lr_generator);

  NetworkGraph teacher_run = teacher;  // non-const for forward(); never updated

  // Probe set for the per-round agreement curve; teacher targets are fixed.
  Tensor probe = synth_batch(pr.seed, kProbeIndexBase, 256, nullptr);
  Tensor teacher_probe_logits = eval_logits(teacher_run, probe);

  out.counts_before = count_params_flops(student);

  std::ofstream jsonl;
  if (!pr.out_dir.empty()) {
    std::filesystem::create_directories(pr.out_dir);
    jsonl.open(pr.out_dir + "/metrics.jsonl", std::ios::binary);
    DFC_CHECK(jsonl.good(), "cannot open metrics.jsonl under " << pr.out_dir);
  }

  using Clock = std::chrono::steady_clock;

  for (int round = 1; round <= pr.rounds; ++round) {
    auto t0 = Clock::now();
    RoundMetrics m;
    m.round = round;

    Tensor z = randn(Shape{pr.batch, pr.zdim}, zrng);

    // 1. generator ascent
    for (int g = 0; g < pr.generator_steps; ++g) {
      Tape tape;
      ForwardResult gr =
          forward(gen, tape, tape.constant(z), BnMode::train, true, false, true);
      ForwardResult tr = forward(teacher_run, tape, gr.output, BnMode::eval,
                                 false, false, false);
      ForwardResult sr = forward(student, tape, gr.output, BnMode::train, false,
                                 false, false);
      ValueId pt = tape.softmax(tr.output);
      ValueId loss_g = batch_divergence(tape, pt, sr.output, pr.divergence);
      tape.backward(loss_g);
      opt_g.begin_step();
      for (auto& [id, t] : gen.params)
        opt_g.update(id, t.data, tape.grad(gr.leaves.at(id)), nullptr,
                     /*ascent=*/true);
    }

    // 2. regenerate the batch with the updated generator, same z
    Tensor images;
    {
      Tape tape;
      ForwardResult gr = forward(gen, tape, tape.constant(z), BnMode::train,
                                 false, false, false);
      images = tape.value(gr.output);
    }
    Tensor t_logits;
    std::vector<Tensor> t_taps;
    {
      Tape tape;
      ForwardResult tr = forward(teacher_run, tape, tape.constant(images),
                                 BnMode::eval, false, true, false);
      t_logits = tape.value(tr.output);
      for (ValueId tap : tr.attention) t_taps.push_back(tape.value(tap));
    }
    Tensor t_probs = detail::cache_softmax(t_logits);
    m.entropy = mean_entropy(t_logits);

    // 3. student descent
    double warm = pr.warm_factor(round);
    for (int s = 0; s < pr.student_steps; ++s) {
      Tape tape;
      ForwardResult sr = forward(student, tape, tape.constant(images),
                                 BnMode::train, true, true, true);
      ValueId div = batch_divergence(tape, tape.constant(t_probs), sr.output,
                                     pr.divergence);
      ValueId loss = div;
      ValueId attn = -1;
      if (pr.beta != 0.0) {
        attn = attention_penalty(tape, sr.attention, t_taps, pr.beta);
        loss = tape.add(loss, attn);
      }
      ValueId preg = -1;
      if (prune) {
        preg = prune_penalty(tape, student, sr.leaves, pr.gamma * warm,
                             pr.lambda * warm);
        loss = tape.add(loss, preg);
      }
      tape.backward(loss);
      opt_s.begin_step();
      for (auto& [id, t] : student.params) {
        const std::vector<double>& grad = tape.grad(sr.leaves.at(id));
        if (quantize && qs.quantized.count(id)) {
          quantized_step(qs, opt_s, student, id, grad);
        } else {
          const std::vector<double>* mask = nullptr;
          if (conv_mask) {
            auto it = conv_mask->find(id);
            if (it != conv_mask->end()) mask = &it->second;
          }
          opt_s.update(id, t.data, grad, mask);
        }
      }
      if (quantize) {
        for (const auto& [id, buf] : qs.buffers)
          for (double v : buf)
            m.q_buffer_inf = std::max(m.q_buffer_inf, std::abs(v));
        for (const auto& id : qs.quantized)
          for (double v : student.param(id).data)
            if (v != qs.delta && v != -qs.delta) m.q_two_valued = false;
      }
      if (s + 1 == pr.student_steps) {
        m.divergence = tape.value(div).data[0];
        m.attn_reg = attn >= 0 ? tape.value(attn).data[0] : 0.0;
        m.prune_reg = preg >= 0 ? tape.value(preg).data[0] : 0.0;
        m.loss = tape.value(loss).data[0];
      }
    }
    if (quantize) {
      out.q_buffer_inf_max = std::max(out.q_buffer_inf_max, m.q_buffer_inf);
      out.q_two_valued_all = out.q_two_valued_all && m.q_two_valued;
    }

    m.agreement = agreement(eval_logits(student, probe), teacher_probe_logits);
    if (prune) {
      NetworkGraph trial = student;
      PruneDecision d = threshold_prune(trial, pr.ts);
      apply_zero(trial, d);
      compact_network(trial, d);
      CountReport c = count_params_flops(trial);
      m.params = c.params;
      m.flops = c.flops;
    } else {
      m.params = out.counts_before.params;
      m.flops = out.counts_before.flops;
    }
    m.wall_ms = pr.timing
                    ? std::chrono::duration<double, std::milli>(Clock::now() - t0)
                          .count()
                    : 0.0;
    if (out_metrics) out_metrics->push_back(m);
    if (jsonl.is_open()) jsonl << m.to_json(quantize).dump() << "\n";
  }
  if (jsonl.is_open()) {
    jsonl.close();
    DFC_CHECK(jsonl.good(), "failed writing metrics.jsonl");
  }

  // finalize
  if (prune) {
    PruneDecision d = threshold_prune(student, pr.ts);
    out.prune_equivalence_diff = zero_then_compare(student, d, probe);
    apply_zero(student, d);
    compact_network(student, d);
    out.counts_after = count_params_flops(student);
    ordered_json rep;
    rep["threshold"] = pr.ts;
    rep["max_probe_logit_diff"] = out.prune_equivalence_diff;
    ordered_json groups = ordered_json::object();
    for (const auto& [gid, g] : student.groups) {
      ordered_json row;
      row["kept"] = g.channels;
      row["of"] = teacher.groups.at(gid).channels;
      groups["group" + std::to_string(gid)] = row;
    }
    rep["groups"] = groups;
    rep["params_before"] = out.counts_before.params;
    rep["params_after"] = out.counts_after.params;
    rep["flops_before"] = out.counts_before.flops;
    rep["flops_after"] = out.counts_after.flops;
    out.prune_report = rep;
    if (!pr.out_dir.empty()) {
      std::ofstream f(pr.out_dir + "/prune_report.json", std::ios::binary);
      f << rep.dump(2) << "\n";
      save_checkpoint(student, pr.out_dir + "/student_pruned.dfck");
    }
  } else {
    out.counts_after = out.counts_before;
    if (!pr.out_dir.empty()) {
      if (quantize)
        save_quantized(student, qs.delta, pr.out_dir + "/student.dfcq");
      else
        save_checkpoint(student, pr.out_dir + "/student.dfck");
    }
  }
  out.final_agreement = agreement(eval_logits(student, probe), teacher_probe_logits);
  if (student_io) *student_io = student;
  return out;
}

// Agreement of an arbitrary classifier pair on fresh held-out data.
inline double heldout_agreement(NetworkGraph& a, NetworkGraph& b,
                                std::uint64_t seed, int n = 1024) {
  Tensor x = synth_batch(seed, kEvalIndexBase, n, nullptr);
  return agreement(eval_logits(a, x), eval_logits(b, x));
}

}  // namespace dfc
