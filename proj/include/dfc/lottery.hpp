// Iterative magnitude pruning over convolution weights: search alternates
// reset-to-initial, masked training, and global magnitude ranking; the
// resulting mask plus the stored initial weights form a ticket that can be
// retrained in isolation and compared against a fresh re-initialization
// under the identical mask.
#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "dfc/adam.hpp"
#include "dfc/dataset.hpp"
#include "dfc/network.hpp"
#include "dfc/objectives.hpp"
#include "dfc/trainer.hpp"

namespace dfc {

struct TicketMask {
  // conv weight tensor id -> 0/1 keep flags, same length as the tensor
  std::map<std::string, std::vector<double>> keep;
  // complete initial state the search started from
  std::map<std::string, Tensor> init_params;
  std::map<std::string, Tensor> init_buffers;
  // rounds actually applied; search stops before a round that would leave
  // some conv layer with zero surviving weights, and says which one
  int rounds_done = 0;
  std::string stop_reason;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [id, m] : keep) n += m.size();
    return n;
  }
  std::size_t kept() const {
    std::size_t n = 0;
    for (const auto& [id, m] : keep)
      for (double v : m) n += (v != 0.0);
    return n;
  }
  double density() const {
    return total() ? static_cast<double>(kept()) / static_cast<double>(total()) : 1.0;
  }
};

struct LotterySetting {
  std::string mode = "supervised";  // supervised | data_free
  std::uint64_t seed = 1;
  int student_base = 4;
  double prune_fraction = 0.2;
  int n_rounds = 3;
  int iterations = 300;  // training iterations (supervised) or rounds (data-free) per stage
  int batch = 64;
  double lr = 0.03, momentum = 0.9;  // supervised search optimizer
  // data-free stages reuse the adversarial protocol with these fields
  TrainProtocol protocol;
};

namespace detail {

inline std::vector<std::string> conv_weight_ids(const NetworkGraph& net) {
  std::vector<std::string> ids;
  for_each_layer(net, [&](const Layer& l) {
    if (l.kind == LayerKind::conv) ids.push_back(l.conv.wid);
  });
  return ids;
}

inline void reset_to_init(NetworkGraph& net, const TicketMask& t) {
  for (auto& [id, p] : net.params) {
    p.data = t.init_params.at(id).data;
    auto it = t.keep.find(id);
    if (it != t.keep.end())
      for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] *= it->second[i];
  }
  for (auto& [id, b] : net.buffers) b.data = t.init_buffers.at(id).data;
}

// One supervised training stage on the synthetic stream: sequential fresh
// batches, cross-entropy, SGD with momentum, masked coordinates frozen.
inline void supervised_stage(NetworkGraph& net, const TicketMask& t,
                             const LotterySetting& s) {
  SgdMomentum opt(s.lr, s.momentum);
  for (int it = 0; it < s.iterations; ++it) {
    std::vector<std::int64_t> labels;
    Tensor x = synth_batch(s.seed, static_cast<std::int64_t>(it) * s.batch,
                           s.batch, &labels);
    Tape tape;
    ForwardResult r = forward(net, tape, tape.constant(x), BnMode::train, true,
                              false, true);
    tape.backward(cross_entropy(tape, r.output, labels));
    for (auto& [id, p] : net.params) {
      auto m = t.keep.find(id);
      opt.update(id, p.data, tape.grad(r.leaves.at(id)),
                 m == t.keep.end() ? nullptr : &m->second);
    }
  }
}

inline void data_free_stage(NetworkGraph& net, const TicketMask& t,
                            const LotterySetting& s, const NetworkGraph& teacher) {
  TrainProtocol pr = s.protocol;
  pr.mode = "plain";
  pr.seed = s.seed;
  pr.rounds = s.iterations;
  pr.batch = s.batch;
  pr.warmup = 0;  // plain mode has no ramped coefficients
  pr.out_dir.clear();
  pr.timing = false;
  train_data_free(pr, teacher, nullptr, &net, &t.keep);
}

inline void run_stage(NetworkGraph& net, const TicketMask& t,
                      const LotterySetting& s, const NetworkGraph* teacher) {
  if (s.mode == "supervised") {
    supervised_stage(net, t, s);
  } else {
    DFC_CHECK(s.mode == "data_free", "unknown lottery mode '" << s.mode << "'");
    DFC_CHECK(teacher, "data_free lottery needs a teacher");
    data_free_stage(net, t, s, *teacher);
  }
}

}  // namespace detail

// Iterative magnitude pruning. Each round: reset to the masked initial
// weights, train a stage, then drop the smallest-magnitude fraction of the
// still-kept conv weights, ranked globally across all conv layers.
inline TicketMask lottery_search(const LotterySetting& s,
                                 const NetworkGraph* teacher = nullptr) {
  DFC_CHECK(s.prune_fraction >= 0.0 && s.prune_fraction < 1.0,
            "prune fraction must lie in [0, 1)");
  DFC_CHECK(s.n_rounds >= 0 && s.iterations >= 1, "bad lottery schedule");
  Act act = teacher ? teacher->activation : Act::relu;
  NetworkGraph net = make_classifier("lottery", s.student_base, 10, act);
  Rng rng(mix_seed(s.seed, 2));
  init_params(net, rng);

  TicketMask t;
  t.init_params = net.params;
  t.init_buffers = net.buffers;
  for (const std::string& id : detail::conv_weight_ids(net))
    t.keep[id] = std::vector<double>(net.param(id).numel(), 1.0);

  for (int round = 0; round < s.n_rounds; ++round) {
    detail::reset_to_init(net, t);
    detail::run_stage(net, t, s, teacher);

    // global magnitude ranking over surviving weights
    std::vector<std::pair<double, std::pair<const std::string*, std::size_t>>> mag;
    for (auto& [id, m] : t.keep) {
      const Tensor& w = net.param(id);
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i] != 0.0) mag.push_back({std::abs(w.data[i]), {&id, i}});
    }
    std::size_t cut = static_cast<std::size_t>(std::floor(
        static_cast<double>(mag.size()) * s.prune_fraction + 0.5));
    cut = std::min(cut, mag.size());
    auto order = [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      if (*a.second.first != *b.second.first)
        return *a.second.first < *b.second.first;
      return a.second.second < b.second.second;
    };
    std::nth_element(mag.begin(), mag.begin() + static_cast<std::ptrdiff_t>(cut),
                     mag.end(), order);

    // A round that would leave some conv layer with no surviving weights is
    // not applied; the search stops with the mask as of the previous round.
    std::map<std::string, std::size_t> dropped;
    for (std::size_t i = 0; i < cut; ++i) ++dropped[*mag[i].second.first];
    const std::string* emptied = nullptr;
    for (const auto& [id, m] : t.keep) {
      std::size_t kept_now = 0;
      for (double v : m) kept_now += (v != 0.0);
      auto it = dropped.find(id);
      if (it != dropped.end() && it->second >= kept_now) { emptied = &id; break; }
    }
    if (emptied) {
      t.stop_reason = "round " + std::to_string(round + 1) +
                      " would empty conv layer '" + *emptied + "'";
      break;
    }
    for (std::size_t i = 0; i < cut; ++i)
      t.keep[*mag[i].second.first][mag[i].second.second] = 0.0;
    t.rounds_done = round + 1;
  }
  return t;
}

struct TicketEval {
  double score = 0.0;      // held-out accuracy (supervised) or teacher agreement
  double density = 0.0;
  bool masked_zero = true; // masked weights stayed exactly zero through training
};

// Train a network under the ticket's mask and score it. arm = "ticket" uses
// the stored initial weights; arm = "random" draws a fresh initialization of
// the same structure (identical mask, hence identical density).
inline TicketEval evaluate_ticket(const TicketMask& t, const LotterySetting& s,
                                  const std::string& arm,
                                  const NetworkGraph* teacher = nullptr) {
  DFC_CHECK(arm == "ticket" || arm == "random", "arm must be ticket or random");
  Act act = teacher ? teacher->activation : Act::relu;
  NetworkGraph net = make_classifier("lottery", s.student_base, 10, act);

  TicketMask start = t;
  if (arm == "random") {
    Rng rng(mix_seed(s.seed, 6));
    init_params(net, rng);
    start.init_params = net.params;
    start.init_buffers = net.buffers;
  }
  detail::reset_to_init(net, start);
  detail::run_stage(net, start, s, teacher);

  TicketEval ev;
  ev.density = t.density();
  for (const auto& [id, m] : t.keep) {
    const Tensor& w = net.param(id);
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] == 0.0 && w.data[i] != 0.0) ev.masked_zero = false;
  }
  if (s.mode == "supervised") {
    std::vector<std::int64_t> labels;
    Tensor x = synth_batch(s.seed, kEvalIndexBase, 1024, &labels);
    ev.score = accuracy(eval_logits(net, x), labels);
  } else {
    NetworkGraph tr = *teacher;
    ev.score = heldout_agreement(net, tr, s.seed);
  }
  return ev;
}

struct PairedLotteryRow {
  std::uint64_t seed = 0;
  double ticket = 0.0, random = 0.0;
};

struct PairedLotteryReport {
  std::vector<PairedLotteryRow> rows;
  double mean_ticket = 0.0, mean_random = 0.0, mean_diff = 0.0;
  double density = 0.0;
  bool masked_zero = true;
};

// Search + paired evaluation across seeds; every arm of a pair shares the
// seed, data stream, and mask, differing only in initial weight values.
inline PairedLotteryReport lottery_paired(const LotterySetting& base,
                                          const std::vector<std::uint64_t>& seeds,
                                          const NetworkGraph* teacher = nullptr) {
  DFC_CHECK(!seeds.empty(), "paired lottery needs at least one seed");
  PairedLotteryReport rep;
  for (std::uint64_t seed : seeds) {
    LotterySetting s = base;
    s.seed = seed;
    TicketMask t = lottery_search(s, teacher);
    TicketEval a = evaluate_ticket(t, s, "ticket", teacher);
    TicketEval b = evaluate_ticket(t, s, "random", teacher);
    rep.rows.push_back({seed, a.score, b.score});
    rep.mean_ticket += a.score;
    rep.mean_random += b.score;
    rep.density = t.density();
    rep.masked_zero = rep.masked_zero && a.masked_zero && b.masked_zero;
  }
  double n = static_cast<double>(seeds.size());
  rep.mean_ticket /= n;
  rep.mean_random /= n;
  rep.mean_diff = rep.mean_ticket - rep.mean_random;
  return rep;
}

}  // namespace dfc
