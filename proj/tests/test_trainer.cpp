// Training loops: warm-up schedule, determinism, teacher immutability,
// generator ascent direction, quantized and pruned pipeline composition.
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dfc/trainer.hpp"

using namespace dfc;

namespace {

// A deterministic, untrained stand-in teacher. Unit tests exercise loop
// mechanics, not transfer quality, so pretraining is not needed here.
NetworkGraph stub_teacher(int base, std::uint64_t seed) {
  NetworkGraph t = make_classifier("teacher", base);
  Rng rng(seed);
  init_params(t, rng);
  return t;
}

TrainProtocol tiny_protocol() {
  TrainProtocol pr;
  pr.seed = 5;
  pr.rounds = 4;
  pr.batch = 8;
  pr.zdim = 16;
  pr.student_base = 2;
  pr.warmup = 2;
  pr.student_steps = 4;
  pr.timing = false;
  return pr;
}

std::string metrics_blob(const std::vector<RoundMetrics>& ms, bool q) {
  std::ostringstream os;
  for (const RoundMetrics& m : ms) os << m.to_json(q).dump() << "\n";
  return os.str();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("warm-up factor") {
  TrainProtocol pr;
  pr.warmup = 200;
  CHECK(pr.warm_factor(1) == Catch::Approx(0.005).epsilon(1e-15));
  CHECK(pr.warm_factor(100) == 0.5);
  CHECK(pr.warm_factor(200) == 1.0);  // exact at the boundary
  CHECK(pr.warm_factor(201) == 1.0);
  pr.warmup = 0;
  CHECK(pr.warm_factor(1) == 1.0);
}

TEST_CASE("identical protocol and seed reproduce metrics byte for byte") {
  NetworkGraph teacher = stub_teacher(4, 99);
  TrainProtocol pr = tiny_protocol();

  std::vector<RoundMetrics> a, b;
  TrainOutcome oa = train_data_free(pr, teacher, &a);
  TrainOutcome ob = train_data_free(pr, teacher, &b);
  REQUIRE(a.size() == 4);
  CHECK(metrics_blob(a, false) == metrics_blob(b, false));
  CHECK(oa.final_agreement == ob.final_agreement);
  for (const auto& [id, t] : oa.student.params)
    CHECK(t.data == ob.student.param(id).data);
  for (const auto& [id, t] : oa.generator.params)
    CHECK(t.data == ob.generator.param(id).data);

  TrainProtocol other = pr;
  other.seed = 6;
  std::vector<RoundMetrics> c;
  train_data_free(other, teacher, &c);
  CHECK(metrics_blob(a, false) != metrics_blob(c, false));
}

TEST_CASE("the teacher is read-only during distillation") {
  NetworkGraph teacher = stub_teacher(4, 42);
  NetworkGraph before = teacher;
  TrainProtocol pr = tiny_protocol();
  train_data_free(pr, teacher);
  for (const auto& [id, t] : before.params)
    CHECK(teacher.param(id).data == t.data);
  for (const auto& [id, t] : before.buffers)
    CHECK(teacher.buffers.at(id).data == t.data);
}

TEST_CASE("metrics compose: loss = divergence + regularizers") {
  NetworkGraph teacher = stub_teacher(4, 7);
  TrainProtocol pr = tiny_protocol();
  pr.beta = 0.0;  // attention off: loss must equal the divergence alone
  std::vector<RoundMetrics> ms;
  train_data_free(pr, teacher, &ms);
  for (const RoundMetrics& m : ms) {
    CHECK(m.attn_reg == 0.0);
    CHECK(m.prune_reg == 0.0);
    CHECK(m.loss == m.divergence);
    CHECK(m.wall_ms == 0.0);  // timing disabled
    CHECK(m.entropy > 0.0);
    CHECK(m.params == 816);  // base-2 student coefficient count
    CHECK(m.flops == 39760);
  }
}

TEST_CASE("one tiny ascent step cannot lower the divergence it climbs") {
  NetworkGraph teacher = stub_teacher(4, 13);
  NetworkGraph student = make_classifier("student", 2);
  NetworkGraph gen = make_generator("generator", 16, 4);
  Rng srng(1), grng(2), zrng(3);
  init_params(student, srng);
  init_params(gen, grng);
  Tensor z = randn(Shape{8, 16}, zrng);

  auto divergence_at = [&](NetworkGraph& g) {
    Tape tape;
    ForwardResult gr = forward(g, tape, tape.constant(z), BnMode::train,
                               false, false, false);
    ForwardResult tr = forward(teacher, tape, gr.output, BnMode::eval,
                               false, false, false);
    ForwardResult sr = forward(student, tape, gr.output, BnMode::train,
                               false, false, false);
    ValueId pt = tape.softmax(tr.output);
    return tape.value(batch_divergence(tape, pt, sr.output, Divergence::kl))
        .data[0];
  };

  double before = divergence_at(gen);
  {
    Tape tape;
    ForwardResult gr = forward(gen, tape, tape.constant(z), BnMode::train,
                               false, false, true);
    ForwardResult tr = forward(teacher, tape, gr.output, BnMode::eval,
                               false, false, false);
    ForwardResult sr = forward(student, tape, gr.output, BnMode::train,
                               false, false, false);
    ValueId pt = tape.softmax(tr.output);
    ValueId loss = batch_divergence(tape, pt, sr.output, Divergence::kl);
    tape.backward(loss);
    Adam opt(1e-6);
    opt.begin_step();
    for (auto& [id, t] : gen.params)
      opt.update(id, t.data, tape.grad(gr.leaves.at(id)), nullptr,
                 /*ascent=*/true);
  }
  double after = divergence_at(gen);
  CHECK(after >= before - 1e-8);
}

TEST_CASE("quantized pipeline composition") {
  NetworkGraph teacher = stub_teacher(4, 21);
  TrainProtocol pr = tiny_protocol();
  pr.mode = "quantize";
  pr.delta = 0.1;
  pr.rounds = 3;

  SECTION("live weights stay two-valued and buffers boxed through training") {
    std::vector<RoundMetrics> ms;
    TrainOutcome out = train_data_free(pr, teacher, &ms);
    CHECK(out.q_two_valued_all);
    CHECK(out.q_buffer_inf_max > 0.0);
    CHECK(out.q_buffer_inf_max <= 0.1);
    for (const RoundMetrics& m : ms) {
      CHECK(m.q_two_valued);
      CHECK(m.q_buffer_inf <= 0.1);
    }
    for (const auto& id : quantizable_param_ids(out.student))
      for (double v : out.student.param(id).data)
        CHECK((v == 0.1 || v == -0.1));
    CHECK(out.counts_after.params == out.counts_before.params);
  }

  SECTION("degenerate protocols are rejected") {
    for (auto mutate : {+[](TrainProtocol& p) { p.rounds = 0; },
                        +[](TrainProtocol& p) { p.batch = 1; },
                        +[](TrainProtocol& p) { p.student_steps = 0; },
                        +[](TrainProtocol& p) { p.generator_steps = 0; }}) {
      TrainProtocol bad = pr;
      mutate(bad);
      CHECK_THROWS_AS(train_data_free(bad, teacher), Error);
    }
    TrainProtocol wrong = pr;
    wrong.mode = "sideways";
    CHECK_THROWS_AS(train_data_free(wrong, teacher), Error);
  }

  SECTION("an injected teacher-weight start is quantized before training") {
    pr.rounds = 1;
    pr.student_steps = 1;
    NetworkGraph start = teacher;  // teacher-width, teacher-weight start
    start.name = "student";
    NetworkGraph io = start;
    TrainOutcome out = train_data_free(pr, teacher, nullptr, &io);
    for (const auto& id : quantizable_param_ids(io))
      for (double v : io.param(id).data) CHECK((v == 0.1 || v == -0.1));
    CHECK(out.q_buffer_inf_max <= 0.1);
  }
}

TEST_CASE("pruned pipeline composition") {
  NetworkGraph teacher = stub_teacher(4, 31);
  // spread the teacher scales so a mid ladder threshold separates channels
  Rng rng(77);
  for (auto& [gid, g] : teacher.groups)
    for (double& v : teacher.param(g.s_id).data) v = rng.uniform(0.0, 0.4);

  TrainProtocol pr = tiny_protocol();
  pr.mode = "prune";
  pr.rounds = 2;
  pr.ts = 0.15;
  pr.gamma = 2e-3;
  pr.lambda = 1e-4;

  TrainOutcome out = train_data_free(pr, teacher, nullptr);
  CHECK(out.prune_equivalence_diff <= 1e-9);
  CHECK(out.counts_after.params < out.counts_before.params);
  CHECK(out.counts_after.flops == 2 * out.counts_after.macs);

  const ordered_json& rep = out.prune_report;
  REQUIRE(rep.contains("groups"));
  CHECK(rep["threshold"] == 0.15);
  CHECK(rep["params_after"] == out.counts_after.params);
  CHECK(rep["flops_before"] == out.counts_before.flops);
  for (const auto& [gid, g] : out.student.groups) {
    int kept = rep["groups"]["group" + std::to_string(gid)]["kept"];
    CHECK(kept == g.channels);
    CHECK(g.channels >= 1);
  }
}

TEST_CASE("metrics stream to disk and reproduce byte for byte") {
  NetworkGraph teacher = stub_teacher(4, 55);
  TrainProtocol pr = tiny_protocol();
  std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "dfc_trainer_test";
  std::filesystem::remove_all(dir);
  pr.out_dir = (dir / "a").string();
  train_data_free(pr, teacher);
  pr.out_dir = (dir / "b").string();
  train_data_free(pr, teacher);

  std::string a = slurp((dir / "a" / "metrics.jsonl").string());
  std::string b = slurp((dir / "b" / "metrics.jsonl").string());
  REQUIRE(!a.empty());
  CHECK(a == b);
  CHECK(std::count(a.begin(), a.end(), '\n') == pr.rounds);

  NetworkGraph reloaded = load_checkpoint((dir / "a" / "student.dfck").string());
  CHECK(reloaded.groups.at(0).channels == 2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("held-out agreement of a network with itself is one") {
  NetworkGraph t = stub_teacher(4, 3);
  CHECK(heldout_agreement(t, t, 11) == 1.0);
  CHECK(heldout_agreement(t, t, 11, 64) == 1.0);
}

TEST_CASE("teacher pretraining honors the epoch cap") {
  CHECK_THROWS_AS(pretrain_teacher(1, 4, 0.95, 0), Error);
  std::vector<double> curve;
  NetworkGraph t = pretrain_teacher(1, 2, 0.05, 1, &curve);
  REQUIRE(curve.size() == 1);
  CHECK(curve.back() >= 0.05);
}
