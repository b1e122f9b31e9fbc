// Structured channel pruning: threshold selection, zeroed-reference
// semantics, exact compaction, parameter and FLOP accounting.
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dfc/network.hpp"
#include "dfc/pruner.hpp"

using namespace dfc;

namespace {

NetworkGraph random_classifier(int base, std::uint64_t seed, double s_spread) {
  NetworkGraph net = make_classifier("n", base);
  Rng rng(seed);
  for (auto& [id, t] : net.params)
    for (double& v : t.data) v = rng.normal() * 0.3;
  // rewrite scales into [0, s_spread) so thresholds bite gradually
  for (auto& [gid, g] : net.groups)
    for (double& v : net.param(g.s_id).data) v = rng.uniform(0.0, s_spread);
  return net;
}

Tensor probe_batch(std::uint64_t seed, std::int64_t n = 4) {
  Tensor t(Shape{n, 1, 8, 8});
  Rng rng(seed);
  for (double& v : t.data) v = rng.normal();
  return t;
}

bool is_subset(const std::vector<std::int64_t>& a,
               const std::vector<std::int64_t>& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

}  // namespace

TEST_CASE("threshold selection") {
  NetworkGraph net = make_classifier("s", 4);
  Tensor& s0 = net.param(net.groups.at(0).s_id);
  Tensor& s1 = net.param(net.groups.at(1).s_id);
  std::fill(s0.data.begin(), s0.data.end(), 0.01);
  std::fill(s1.data.begin(), s1.data.end(), 0.01);
  s0.data[0] = 0.5;
  s0.data[2] = -0.4;  // magnitude decides, sign does not
  s1.data[1] = 0.3;
  s1.data[4] = -0.9;
  s1.data[6] = 0.2;

  PruneDecision d = threshold_prune(net, 0.1);
  CHECK(d.kept.at(0) == std::vector<std::int64_t>{0, 2});
  CHECK(d.kept.at(1) == std::vector<std::int64_t>{1, 4, 6});

  SECTION("threshold is inclusive") {
    PruneDecision e = threshold_prune(net, 0.2);
    CHECK(e.kept.at(1) == std::vector<std::int64_t>{1, 4, 6});  // 0.2 survives
    PruneDecision f = threshold_prune(net, 0.2000001);
    CHECK(f.kept.at(1) == std::vector<std::int64_t>{1, 4});
  }

  SECTION("a group never loses its last channel") {
    PruneDecision g = threshold_prune(net, 10.0);
    REQUIRE(g.kept.at(0).size() == 1);
    REQUIRE(g.kept.at(1).size() == 1);
    CHECK(g.kept.at(0)[0] == 0);  // largest |s| in group 0
    CHECK(g.kept.at(1)[0] == 4);  // largest |s| in group 1
  }

  SECTION("argmax fallback breaks ties toward the lowest index") {
    std::fill(s0.data.begin(), s0.data.end(), 0.05);
    PruneDecision h = threshold_prune(net, 1.0);
    CHECK(h.kept.at(0) == std::vector<std::int64_t>{0});
  }

  SECTION("keep sets are nested as the threshold grows") {
    NetworkGraph r = random_classifier(4, 17, 0.3);
    std::vector<double> ladder{0.01, 0.05, 0.1, 0.2};
    PruneDecision prev = threshold_prune(r, ladder[0]);
    for (std::size_t i = 1; i < ladder.size(); ++i) {
      PruneDecision cur = threshold_prune(r, ladder[i]);
      for (const auto& [gid, kept] : cur.kept) {
        INFO("threshold " << ladder[i] << " group " << gid);
        CHECK(is_subset(kept, prev.kept.at(gid)));
      }
      prev = cur;
    }
  }
}

TEST_CASE("zeroing drops exactly the discarded channels") {
  NetworkGraph net = random_classifier(4, 3, 0.2);
  PruneDecision d = threshold_prune(net, 0.1);
  NetworkGraph z = net;
  apply_zero(z, d);
  for (const auto& [gid, g] : net.groups) {
    const Tensor& before = net.param(g.s_id);
    const Tensor& after = z.param(g.s_id);
    std::vector<bool> kept(before.numel(), false);
    for (auto i : d.kept.at(gid)) kept[static_cast<std::size_t>(i)] = true;
    for (std::int64_t i = 0; i < before.numel(); ++i) {
      if (kept[static_cast<std::size_t>(i)])
        CHECK(after.data[i] == before.data[i]);
      else
        CHECK(after.data[i] == 0.0);
    }
  }
  // weights and shapes untouched
  CHECK(z.param("stem.w").shape == net.param("stem.w").shape);
  CHECK(z.param("stem.w").data == net.param("stem.w").data);
}

TEST_CASE("compaction reproduces the zeroed network exactly") {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    for (double t : {0.05, 0.1, 0.15}) {
      NetworkGraph net = random_classifier(4, seed, 0.2);
      PruneDecision d = threshold_prune(net, t);
      double diff = zero_then_compare(net, d, probe_batch(seed + 100));
      INFO("seed " << seed << " threshold " << t);
      CHECK(diff <= 1e-9);
    }
  }
}

TEST_CASE("compaction rewrites shapes and counts") {
  NetworkGraph net = make_classifier("s", 4);
  Rng rng(5);
  for (auto& [id, t] : net.params)
    for (double& v : t.data) v = rng.normal() * 0.3;
  Tensor& s0 = net.param(net.groups.at(0).s_id);
  Tensor& s1 = net.param(net.groups.at(1).s_id);
  std::fill(s0.data.begin(), s0.data.end(), 0.01);
  std::fill(s1.data.begin(), s1.data.end(), 0.01);
  s0.data[0] = 0.5;
  s0.data[2] = -0.4;
  s1.data[1] = 0.3;
  s1.data[4] = -0.9;
  s1.data[6] = 0.2;

  PruneDecision d = threshold_prune(net, 0.1);
  NetworkGraph c = net;
  apply_zero(c, d);
  compact_network(c, d);

  CHECK(c.groups.at(0).channels == 2);
  CHECK(c.groups.at(1).channels == 3);
  CHECK(c.param("stem.w").shape == Shape{2, 1, 3, 3});
  CHECK(c.param("g2.b1.conv1.w").shape == Shape{3, 2, 4, 4});
  CHECK(c.param("g2.b1.sc.w").shape == Shape{3, 2, 2, 2});
  CHECK(c.param("head.w").shape == Shape{3, 10});
  CHECK(c.param(c.groups.at(0).s_id).numel() == 2);

  // hand-derived coefficient and multiply-accumulate totals
  CountReport full = count_params_flops(net);
  CHECK(full.params == 3094);
  CHECK(full.macs == 77136);
  CHECK(full.flops == 2 * full.macs);

  CountReport compact = count_params_flops(c);
  CHECK(compact.params == 575);
  CHECK(compact.macs == 16206);
  CHECK(compact.flops == 32412);
}

TEST_CASE("count report on a dense-only graph") {
  NetworkGraph net;
  net.name = "d";
  net.input_shape = {3};
  Layer head;
  head.kind = LayerKind::dense;
  head.dense = {3, 5, "w", "b", false, -1};
  net.layers.push_back(head);
  net.params.emplace("w", Tensor(Shape{3, 5}));
  net.params.emplace("b", Tensor(Shape{5}));
  CountReport r = count_params_flops(net);
  CHECK(r.params == 20);
  CHECK(r.macs == 15);
  CHECK(r.flops == 30);
}
