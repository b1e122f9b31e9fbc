// Sign quantization: shadow buffers, projection, live-value derivation.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "dfc/network.hpp"
#include "dfc/quantizer.hpp"

using namespace dfc;

TEST_CASE("sign convention") {
  CHECK(sign_pm(3.2) == 1.0);
  CHECK(sign_pm(-0.001) == -1.0);
  CHECK(sign_pm(0.0) == 1.0);
  CHECK(sign_pm(-0.0) == 1.0);
}

TEST_CASE("initialization clips the shadow and snaps the live value") {
  NetworkGraph net = make_classifier("s", 4);
  // stem and head stay full precision
  std::set<std::string> q = quantizable_param_ids(net);
  CHECK(q.count("stem.w") == 0);
  CHECK(q.count("head.w") == 0);
  CHECK(q.count("head.b") == 0);
  CHECK(!q.empty());

  const std::string wid = *q.begin();
  Tensor& w = net.param(wid);
  REQUIRE(w.data.size() >= 4);
  w.data[0] = 0.0;    // sign(0) = +1
  w.data[1] = -0.5;   // clips to -delta
  w.data[2] = 0.03;   // inside the box, snaps up
  w.data[3] = -0.02;  // inside the box, snaps down
  double stem0 = net.param("stem.w").data[0] = 0.37;

  QuantState qs = init_quantizer(net, 0.1);
  const std::vector<double>& buf = qs.buffers.at(wid);
  CHECK(buf[0] == 0.0);
  CHECK(net.param(wid).data[0] == 0.1);
  CHECK(buf[1] == -0.1);
  CHECK(net.param(wid).data[1] == -0.1);
  CHECK(buf[2] == 0.03);
  CHECK(net.param(wid).data[2] == 0.1);
  CHECK(buf[3] == -0.02);
  CHECK(net.param(wid).data[3] == -0.1);
  CHECK(net.param("stem.w").data[0] == stem0);

  SECTION("every live value is exactly delta times the sign of the original") {
    NetworkGraph fresh = make_classifier("t", 4);
    Rng rng(7);
    for (auto& [id, t] : fresh.params)
      for (double& v : t.data) v = rng.normal() * 0.2;
    NetworkGraph orig = fresh;
    QuantState st = init_quantizer(fresh, 0.1);
    for (const auto& id : st.quantized) {
      const Tensor& live = fresh.param(id);
      const Tensor& before = orig.param(id);
      for (std::size_t i = 0; i < live.data.size(); ++i)
        CHECK(live.data[i] == 0.1 * sign_pm(before.data[i]));
    }
    CHECK(max_quantization_gap(st, fresh) <= 0.1);
  }

  SECTION("initialization is idempotent on an already-quantized net") {
    QuantState again = init_quantizer(net, 0.1);
    CHECK(again.buffers.at(wid)[0] == 0.1);  // live +delta clips to +delta
    CHECK(net.param(wid).data[0] == 0.1);
    CHECK(net.param(wid).data[1] == -0.1);
    CHECK(max_quantization_gap(again, net) == 0.0);
  }

  CHECK_THROWS_AS(init_quantizer(net, 0.0), Error);
}

TEST_CASE("quantized step arithmetic") {
  NetworkGraph net = make_classifier("s", 4);
  const std::string wid = *quantizable_param_ids(net).begin();
  Tensor& w = net.param(wid);
  w.data[0] = 0.04;
  w.data[1] = -0.09;
  QuantState qs = init_quantizer(net, 0.1);

  SECTION("first step moves the buffer by about lr, live follows the sign") {
    Adam opt(0.05);
    std::vector<double> g(w.data.size(), 0.0);
    g[0] = 1.0;   // pushes buffer down
    g[1] = -1.0;  // pushes buffer up
    opt.begin_step();
    quantized_step(qs, opt, net, wid, g);
    // bias-corrected first step is lr * g / (|g| + eps), essentially lr
    CHECK(qs.buffers.at(wid)[0] == Catch::Approx(0.04 - 0.05).margin(1e-8));
    CHECK(net.param(wid).data[0] == -0.1);  // crossed zero, sign flipped
    CHECK(qs.buffers.at(wid)[1] == Catch::Approx(-0.09 + 0.05).margin(1e-8));
    CHECK(net.param(wid).data[1] == -0.1);  // still negative
  }

  SECTION("projection pins runaway buffers to the box edge") {
    Adam opt(5.0);
    std::vector<double> g(w.data.size(), -1.0);
    for (int step = 0; step < 3; ++step) {
      opt.begin_step();
      quantized_step(qs, opt, net, wid, g);
      for (double b : qs.buffers.at(wid)) {
        CHECK(std::abs(b) <= 0.1);
        CHECK(b == 0.1);  // one huge uphill step saturates everything
      }
      for (double v : net.param(wid).data) CHECK(v == 0.1);
    }
    CHECK(max_quantization_gap(qs, net) <= 0.1);
  }

  SECTION("live values stay two-valued through noisy training") {
    Adam opt(0.02);
    Rng rng(3);
    for (int step = 0; step < 50; ++step) {
      std::vector<double> g(w.data.size());
      for (double& v : g) v = rng.normal();
      opt.begin_step();
      quantized_step(qs, opt, net, wid, g);
      for (double v : net.param(wid).data)
        CHECK((v == 0.1 || v == -0.1));
      CHECK(max_quantization_gap(qs, net) <= 0.1);
    }
  }

  SECTION("stepping an unquantized parameter is rejected") {
    Adam opt(0.01);
    std::vector<double> g(net.param("stem.w").data.size(), 0.0);
    opt.begin_step();
    CHECK_THROWS_AS(quantized_step(qs, opt, net, "stem.w", g), Error);
  }
}
