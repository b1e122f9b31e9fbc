// Reverse-mode tape: forward values on hand examples, finite-difference
// gradient checks for every primitive, and a whole-network composite check.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "dfc/network.hpp"
#include "dfc/objectives.hpp"
#include "dfc/tape.hpp"

using namespace dfc;

namespace {

constexpr double kStep = 1e-5;
constexpr double kRelTol = 1e-4;

using Build = std::function<ValueId(Tape&, ValueId)>;

void check_grad(const char* label, const Build& build, const Tensor& x) {
  FdReport rep = finite_diff_check(build, x, kStep);
  INFO(label << ": worst coordinate " << rep.worst_index << " analytic "
             << rep.analytic << " numeric " << rep.numeric);
  CHECK(rep.max_rel < kRelTol);
}

// normal draws pushed away from zero, for kinked ops
Tensor offset_randn(Shape s, Rng& rng, double gap = 0.3) {
  Tensor t = randn(std::move(s), rng);
  for (double& v : t.data) v += (v >= 0.0 ? gap : -gap);
  return t;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.dim() == 2);
  CHECK(scalar(4.0).data == std::vector<double>{4.0});
  Rng rng(1);
  CHECK(randn(Shape{3, 4}, rng).shape == Shape{3, 4});
}

TEST_CASE("forward values on hand examples") {
  Tape tape;

  SECTION("matmul") {
    ValueId a = tape.constant(Tensor(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
    ValueId b = tape.constant(Tensor(Shape{3, 2}, {7, 8, 9, 10, 11, 12}));
    CHECK(tape.value(tape.matmul(a, b)).data ==
          std::vector<double>{58, 64, 139, 154});
  }

  SECTION("conv2d valid and padded") {
    ValueId x = tape.constant(Tensor(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    ValueId w = tape.constant(Tensor(Shape{1, 1, 2, 2}, 1.0));
    CHECK(tape.value(tape.conv2d(x, w, 1, 0)).data ==
          std::vector<double>{12, 16, 24, 28});
    // kernel 3, stride 2, pad 1 tiles the 3x3 map into 2x2
    ValueId w3 = tape.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
    Tensor out = tape.value(tape.conv2d(x, w3, 2, 1));
    CHECK(out.shape == Shape{1, 1, 2, 2});
    CHECK(out.data == std::vector<double>{12, 16, 24, 28});
  }

  SECTION("conv2d rejects a stride that leaves a remainder") {
    ValueId x = tape.constant(Tensor(Shape{1, 1, 5, 5}, 0.0));
    ValueId w = tape.constant(Tensor(Shape{1, 1, 2, 2}, 1.0));
    CHECK_THROWS_AS(tape.conv2d(x, w, 2, 0), Error);
  }

  SECTION("softmax") {
    ValueId x = tape.constant(Tensor(Shape{1, 2}, {0.0, std::log(2.0)}));
    Tensor p = tape.value(tape.softmax(x));
    CHECK(p.data[0] == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(p.data[1] == Catch::Approx(2.0 / 3.0).epsilon(1e-14));
  }

  SECTION("activations") {
    ValueId x = tape.constant(Tensor(Shape{3}, {-2.0, 0.0, 1.5}));
    CHECK(tape.value(tape.relu(x)).data == std::vector<double>{0.0, 0.0, 1.5});
    Tensor g = tape.value(tape.gelu(x));
    double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    CHECK(g.data[1] == 0.0);
    ValueId one = tape.constant(scalar(1.0));
    CHECK(tape.value(tape.gelu(one)).data[0] == Catch::Approx(phi1).epsilon(1e-14));
  }

  SECTION("clip pins and log floors") {
    ValueId x = tape.constant(Tensor(Shape{3}, {-0.5, 0.25, 2.0}));
    CHECK(tape.value(tape.clip(x, 0.0, 1.0)).data ==
          std::vector<double>{0.0, 0.25, 1.0});
  }

  SECTION("reductions") {
    ValueId x = tape.constant(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
    CHECK(tape.value(tape.mean_axis(x, {0, 1})).data[0] == 2.5);
    CHECK(tape.value(tape.mean_axis(x, {1})).data == std::vector<double>{1.5, 3.5});
    CHECK(tape.value(tape.var_axis(x, {1})).data == std::vector<double>{0.25, 0.25});
    CHECK(tape.value(tape.l1_norm(tape.constant(Tensor(Shape{3}, {-1, 2, -3})))).data[0] == 6.0);
    CHECK(tape.value(tape.sq_frobenius(tape.constant(Tensor(Shape{2}, {3, 4})))).data[0] == 25.0);
  }

  SECTION("upsample duplicates each cell into a 2x2 tile") {
    ValueId x = tape.constant(Tensor(Shape{1, 1, 1, 2}, {5.0, 7.0}));
    Tensor u = tape.value(tape.upsample2x(x));
    CHECK(u.shape == Shape{1, 1, 2, 4});
    CHECK(u.data == std::vector<double>{5, 5, 7, 7, 5, 5, 7, 7});
  }

  SECTION("row geometry") {
    ValueId x = tape.constant(Tensor(Shape{2, 2}, {3.0, 4.0, 0.0, 0.0}));
    Tensor n = tape.value(tape.normalize_rows(x));
    CHECK(n.data == std::vector<double>{0.6, 0.8, 0.0, 0.0});  // zero row stays zero
    CHECK(tape.value(tape.row_l2_norm(x)).data == std::vector<double>{5.0, 0.0});
  }
}

TEST_CASE("gradients accumulate across reuse") {
  Tensor x(Shape{3}, {0.5, -1.0, 2.0});
  x.requires_grad = true;
  Tape tape;
  ValueId v = tape.leaf(std::move(x));
  // y = sum(v * v + v); dy/dv = 2v + 1
  ValueId y = tape.add(tape.mul(v, v), v);
  ValueId root = tape.mul(tape.mean_axis(y, {0}), tape.constant(scalar(3.0)));
  tape.backward(root);
  const std::vector<double>& g = tape.grad(v);
  CHECK(g[0] == Catch::Approx(2.0 * 0.5 + 1.0).epsilon(1e-14));
  CHECK(g[1] == Catch::Approx(2.0 * -1.0 + 1.0).epsilon(1e-14));
  CHECK(g[2] == Catch::Approx(2.0 * 2.0 + 1.0).epsilon(1e-14));
}

TEST_CASE("finite differences per primitive") {
  Rng rng(2024);

  SECTION("binary ops") {
    Tensor a = randn(Shape{3, 4}, rng);
    Tensor b = offset_randn(Shape{3, 4}, rng, 0.5);  // keep divisors away from 0
    for (auto [label, op] : {std::pair<const char*, int>{"add", 0},
                             {"sub", 1},
                             {"mul", 2},
                             {"div", 3}}) {
      Build build = [op = op, &b](Tape& t, ValueId x) {
        ValueId c = t.constant(b);
        ValueId y = op == 0   ? t.add(x, c)
                    : op == 1 ? t.sub(x, c)
                    : op == 2 ? t.mul(x, c)
                              : t.div(x, c);
        return t.sq_frobenius(y);
      };
      check_grad(label, build, a);
      // denominator side of div
      if (op == 3) {
        Build denom = [&a](Tape& t, ValueId x) {
          return t.sq_frobenius(t.div(t.constant(a), x));
        };
        check_grad("div-denominator", denom, b);
      }
    }
  }

  SECTION("matmul, both sides") {
    Tensor a = randn(Shape{3, 5}, rng);
    Tensor b = randn(Shape{5, 2}, rng);
    check_grad("matmul-left",
               [&b](Tape& t, ValueId x) {
                 return t.sq_frobenius(t.matmul(x, t.constant(b)));
               },
               a);
    check_grad("matmul-right",
               [&a](Tape& t, ValueId x) {
                 return t.sq_frobenius(t.matmul(t.constant(a), x));
               },
               b);
  }

  SECTION("conv2d, both sides, strided and padded") {
    Tensor x = randn(Shape{2, 3, 4, 4}, rng);
    Tensor w = randn(Shape{5, 3, 2, 2}, rng);
    check_grad("conv2d-input",
               [&w](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.conv2d(v, t.constant(w), 2, 1));
               },
               x);
    check_grad("conv2d-weight",
               [&x](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.conv2d(t.constant(x), v, 2, 1));
               },
               w);
  }

  SECTION("kinked and clamped ops away from their corners") {
    Tensor x = offset_randn(Shape{4, 4}, rng);
    check_grad("relu",
               [](Tape& t, ValueId v) { return t.sq_frobenius(t.relu(v)); }, x);
    check_grad("l1",
               [](Tape& t, ValueId v) { return t.l1_norm(v); }, x);
    Tensor interior(Shape{6}, {0.1, 0.3, 0.45, 0.6, 0.75, 0.9});
    check_grad("clip-interior",
               [](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.clip(v, 0.0, 1.0));
               },
               interior);
  }

  SECTION("smooth unaries") {
    Tensor x = randn(Shape{3, 3}, rng);
    check_grad("gelu",
               [](Tape& t, ValueId v) { return t.sq_frobenius(t.gelu(v)); }, x);
    Tensor pos = offset_randn(Shape{5}, rng, 1.5);
    for (double& v : pos.data) v = std::abs(v);
    check_grad("log",
               [](Tape& t, ValueId v) {
                 return t.mean_axis(t.log(v), {0});
               },
               pos);
    check_grad("sqrt",
               [](Tape& t, ValueId v) {
                 return t.mean_axis(t.sqrt(v), {0});
               },
               pos);
  }

  SECTION("softmax and log-softmax composite") {
    Tensor x = randn(Shape{4, 6}, rng);
    check_grad("softmax",
               [](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.softmax(v));
               },
               x);
    check_grad("log-softmax",
               [](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.log(t.clip(t.softmax(v), 1e-12, 1.0)));
               },
               x);
  }

  SECTION("reductions and reshapes") {
    Tensor x = randn(Shape{3, 4}, rng);
    check_grad("mean",
               [](Tape& t, ValueId v) {
                 return t.mean_axis(v, {0, 1});
               },
               x);
    check_grad("variance",
               [](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.var_axis(v, {1}));
               },
               x);
    check_grad("reshape",
               [](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.reshape(v, Shape{4, 3}));
               },
               x);
    Tensor img = randn(Shape{2, 2, 3, 3}, rng);
    check_grad("upsample",
               [](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.upsample2x(v));
               },
               img);
  }

  SECTION("row geometry") {
    Tensor x = offset_randn(Shape{4, 5}, rng, 0.2);
    check_grad("normalize-rows",
               [](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.sub(t.normalize_rows(v),
                                             t.constant(Tensor(Shape{4, 5}, 0.1))));
               },
               x);
    check_grad("row-l2-norm",
               [](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.row_l2_norm(v));
               },
               x);
  }

  SECTION("scaled normalization, all three inputs") {
    Tensor x = randn(Shape{3, 2, 2, 2}, rng);
    Tensor s(Shape{2}, {0.8, 1.3});
    Tensor b(Shape{2}, {0.1, -0.4});
    Tensor rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
    auto bn = [&](Tape& t, ValueId xx, ValueId ss, ValueId bb) {
      return t.sq_frobenius(t.scaled_bn(xx, ss, bb, BnMode::train, 1e-5, &rm,
                                        &rv, 0.9, false));
    };
    check_grad("bn-input",
               [&](Tape& t, ValueId v) {
                 return bn(t, v, t.constant(s), t.constant(b));
               },
               x);
    check_grad("bn-scale",
               [&](Tape& t, ValueId v) {
                 return bn(t, t.constant(x), v, t.constant(b));
               },
               s);
    check_grad("bn-shift",
               [&](Tape& t, ValueId v) {
                 return bn(t, t.constant(x), t.constant(s), v);
               },
               b);
    // eval mode reads fixed statistics
    rm.data = {0.2, -0.1};
    rv.data = {1.5, 0.7};
    check_grad("bn-eval-input",
               [&](Tape& t, ValueId v) {
                 return t.sq_frobenius(t.scaled_bn(v, t.constant(s),
                                                   t.constant(b), BnMode::eval,
                                                   1e-5, &rm, &rv, 0.9, false));
               },
               x);
  }
}

TEST_CASE("composite whole-network gradient") {
  // full student loss wrt the input image: flows through convs, shared
  // norms (train mode), activations, pooling, the head, the divergence, and
  // the attention penalty.
  NetworkGraph student = make_classifier("s", 2, 10, Act::gelu);
  NetworkGraph teacher = make_classifier("t", 2, 10, Act::gelu);
  Rng rng(7);
  init_params(student, rng);
  init_params(teacher, rng);

  Tensor x = randn(Shape{2, 1, 8, 8}, rng);
  Tensor t_logits, t_tap0, t_tap1;
  {
    Tape tape;
    ForwardResult tr = forward(teacher, tape, tape.constant(x), BnMode::eval,
                               false, true, false);
    t_logits = tape.value(tr.output);
    t_tap0 = tape.value(tr.attention[0]);
    t_tap1 = tape.value(tr.attention[1]);
  }
  Tensor t_probs(t_logits.shape);
  for (std::int64_t n = 0; n < t_logits.shape[0]; ++n) {
    std::vector<double> row = softmax_row(t_logits, n);
    for (std::int64_t k = 0; k < t_logits.shape[1]; ++k)
      t_probs.data[n * t_logits.shape[1] + k] = row[k];
  }

  Build loss = [&](Tape& tape, ValueId img) {
    ForwardResult sr =
        forward(student, tape, img, BnMode::train, false, true, false);
    ValueId div = batch_divergence(tape, tape.constant(t_probs), sr.output,
                                   Divergence::kl);
    ValueId attn = attention_penalty(tape, sr.attention, {t_tap0, t_tap1}, 1.0);
    return tape.add(div, attn);
  };
  FdReport rep = finite_diff_check(loss, x, kStep, 24, &rng);
  INFO("worst " << rep.worst_index << " analytic " << rep.analytic
                << " numeric " << rep.numeric);
  CHECK(rep.max_rel < kRelTol);
}
