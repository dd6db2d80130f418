#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstdio>
#include <vector>

#include "tiltflow/net.hpp"
#include "tiltflow/rng.hpp"

using namespace tiltflow;
using Catch::Approx;

namespace {

Mlp make_net(std::vector<std::uint32_t> widths, Activation act, std::uint64_t seed,
             bool zero_final = false) {
  Mlp net;
  net.widths = std::move(widths);
  net.act = act;
  Rng rng(seed);
  init_params(net, rng, zero_final);
  return net;
}

// central finite differences of cot . f(x) along a single coordinate of x
double fd_input(const Mlp& net, std::vector<double> x, const std::vector<double>& cot,
                std::size_t i, double h) {
  x[i] += h;
  const std::vector<double> up = forward(net, x);
  x[i] -= 2.0 * h;
  const std::vector<double> dn = forward(net, x);
  double acc = 0.0;
  for (std::size_t k = 0; k < cot.size(); ++k) acc += cot[k] * (up[k] - dn[k]);
  return acc / (2.0 * h);
}

double fd_param(Mlp net, const std::vector<double>& x, const std::vector<double>& cot,
                std::size_t i, double h) {
  net.params[i] += h;
  const std::vector<double> up = forward(net, x);
  net.params[i] -= 2.0 * h;
  const std::vector<double> dn = forward(net, x);
  double acc = 0.0;
  for (std::size_t k = 0; k < cot.size(); ++k) acc += cot[k] * (up[k] - dn[k]);
  return acc / (2.0 * h);
}

}  // namespace

TEST_CASE("zero-initialized final layer returns the final bias") {
  Mlp net = make_net({3, 16, 2}, Activation::tanh_act, 41, true);
  const std::size_t off = net.layer_offset(1);
  const std::size_t bias_off = off + 16 * 2;
  net.params[bias_off] = 0.7;
  net.params[bias_off + 1] = -0.3;
  const std::vector<double> out = forward(net, {0.4, -1.1, 2.0});
  REQUIRE(out[0] == 0.7);
  REQUIRE(out[1] == -0.3);
}

TEST_CASE("linear net computes Wx + b exactly") {
  Mlp net;
  net.widths = {3, 2};
  net.act = Activation::tanh_act;
  // layout: W row-major (2x3), then bias (2)
  net.params = {1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 10.0, -10.0};
  const std::vector<double> x = {1.0, -1.0, 2.0};
  const std::vector<double> out = forward(net, x);
  REQUIRE(out[0] == Approx(1.0 - 2.0 + 6.0 + 10.0).margin(1e-15));
  REQUIRE(out[1] == Approx(-1.0 - 0.5 + 0.0 - 10.0).margin(1e-15));

  const std::vector<double> cot = {2.0, -3.0};
  const std::vector<double> gx = vjp_input(net, x, cot);
  REQUIRE(gx[0] == Approx(2.0 * 1.0 - 3.0 * -1.0).margin(1e-15));
  REQUIRE(gx[1] == Approx(2.0 * 2.0 - 3.0 * 0.5).margin(1e-15));
  REQUIRE(gx[2] == Approx(2.0 * 3.0 - 3.0 * 0.0).margin(1e-15));
}

TEST_CASE("deterministic init and forward") {
  const Mlp a = make_net({2, 8, 8, 1}, Activation::softplus, 42);
  const Mlp b = make_net({2, 8, 8, 1}, Activation::softplus, 42);
  REQUIRE(a.params == b.params);
  REQUIRE(forward(a, {0.3, -0.9}) == forward(b, {0.3, -0.9}));
}

TEST_CASE("dimension mismatches are rejected") {
  const Mlp net = make_net({2, 4, 1}, Activation::tanh_act, 43);
  REQUIRE_THROWS_WITH(forward(net, {1.0, 2.0, 3.0}), "input dimension mismatch");
  REQUIRE_THROWS_WITH(vjp_input(net, {1.0, 2.0}, {1.0, 2.0}), "cotangent dimension mismatch");
}

TEST_CASE("zero cotangent gives zero input gradient") {
  const Mlp net = make_net({2, 8, 2}, Activation::tanh_act, 44);
  const std::vector<double> g = vjp_input(net, {0.5, 0.5}, {0.0, 0.0});
  REQUIRE(g[0] == 0.0);
  REQUIRE(g[1] == 0.0);
}

TEST_CASE("input gradients match finite differences") {
  Rng rng(45);
  for (Activation act : {Activation::tanh_act, Activation::softplus}) {
    const Mlp net = make_net({3, 10, 7, 2}, act, 46 + static_cast<int>(act));
    for (int rep = 0; rep < 10; ++rep) {
      const std::vector<double> x = {rng.normal(), rng.normal(), rng.normal()};
      const std::vector<double> cot = {rng.normal(), rng.normal()};
      const std::vector<double> g = vjp_input(net, x, cot);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double fd = fd_input(net, x, cot, i, 1e-5);
        REQUIRE(g[i] == Approx(fd).margin(1e-5 * std::max(1.0, std::abs(fd))));
      }
    }
  }
}

TEST_CASE("parameter gradients match finite differences") {
  Rng rng(47);
  const Mlp net = make_net({3, 10, 7, 2}, Activation::tanh_act, 48);
  for (int rep = 0; rep < 5; ++rep) {
    const std::vector<double> x = {rng.normal(), rng.normal(), rng.normal()};
    const std::vector<double> cot = {rng.normal(), rng.normal()};
    const std::vector<double> g = grad_params(net, x, cot);
    for (int probe = 0; probe < 40; ++probe) {
      const std::size_t i = static_cast<std::size_t>(rng.below(g.size()));
      const double fd = fd_param(net, x, cot, i, 1e-5);
      REQUIRE(g[i] == Approx(fd).margin(1e-5 * std::max(1.0, std::abs(fd))));
    }
  }
}

TEST_CASE("production architectures pass gradient checks") {
  Rng rng(49);
  for (const auto& widths :
       {std::vector<std::uint32_t>{11, 128, 128, 128, 2},
        std::vector<std::uint32_t>{11, 128, 128, 128, 1}}) {
    const Mlp net = make_net(widths, Activation::tanh_act, 50);
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<double> x(net.d_in()), cot(net.d_out());
      for (auto& v : x) v = rng.normal();
      for (auto& v : cot) v = rng.normal();
      const std::vector<double> gin = vjp_input(net, x, cot);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double fd = fd_input(net, x, cot, i, 1e-5);
        REQUIRE(gin[i] == Approx(fd).margin(1e-5 * std::max(1.0, std::abs(fd))));
      }
      const std::vector<double> gp = grad_params(net, x, cot);
      for (int probe = 0; probe < 20; ++probe) {
        const std::size_t i = static_cast<std::size_t>(rng.below(gp.size()));
        const double fd = fd_param(net, x, cot, i, 1e-5);
        REQUIRE(gp[i] == Approx(fd).margin(1e-5 * std::max(1.0, std::abs(fd))));
      }
    }
  }
}

TEST_CASE("output-layer bias gradient equals the cotangent") {
  const Mlp net = make_net({2, 6, 3}, Activation::tanh_act, 51);
  const std::vector<double> cot = {1.5, -2.0, 0.25};
  const std::vector<double> g = grad_params(net, {0.1, 0.2}, cot);
  const std::size_t bias_off = net.layer_offset(1) + 6 * 3;
  REQUIRE(g[bias_off] == 1.5);
  REQUIRE(g[bias_off + 1] == -2.0);
  REQUIRE(g[bias_off + 2] == 0.25);
}

TEST_CASE("odd activation at zero input kills first-layer weight gradients") {
  Mlp net = make_net({2, 6, 1}, Activation::tanh_act, 52);
  // zero hidden biases so every pre-activation is 0
  const std::size_t b0 = net.layer_offset(0) + 2 * 6;
  for (std::size_t i = 0; i < 6; ++i) net.params[b0 + i] = 0.0;
  const std::vector<double> g = grad_params(net, {0.0, 0.0}, {1.0});
  for (std::size_t i = 0; i < 12; ++i) REQUIRE(g[net.layer_offset(0) + i] == 0.0);
}

TEST_CASE("train step: zero gradient, closed form at step 1, overflow") {
  Mlp net = make_net({2, 4, 1}, Activation::tanh_act, 53);
  const std::vector<double> before = net.params;
  TrainState st;
  st.lr = 1e-2;
  train_step(net, st, std::vector<double>(net.params.size(), 0.0));
  REQUIRE(net.params == before);
  REQUIRE(st.step == 1);

  // constant gradient at (fresh) step 1: delta = -lr g / (|g| + eps)
  Mlp net2 = make_net({2, 4, 1}, Activation::tanh_act, 53);
  TrainState st2;
  st2.lr = 1e-2;
  std::vector<double> g(net2.params.size());
  Rng rng(54);
  for (auto& v : g) v = rng.normal();
  const std::vector<double> before2 = net2.params;
  train_step(net2, st2, g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double expect = -st2.lr * g[i] / (std::abs(g[i]) + st2.eps);
    REQUIRE(net2.params[i] - before2[i] == Approx(expect).margin(1e-15));
  }

  std::vector<double> bad(net2.params.size(), 0.0);
  bad[3] = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_WITH(train_step(net2, st2, bad), "gradient overflow");
}

TEST_CASE("tanh net stays finite over the test box") {
  const Mlp net = make_net({2, 32, 32, 2}, Activation::tanh_act, 55);
  for (double x = -10.0; x <= 10.0; x += 2.5)
    for (double y = -10.0; y <= 10.0; y += 2.5) {
      const std::vector<double> out = forward(net, {x, y});
      REQUIRE(std::isfinite(out[0]));
      REQUIRE(std::isfinite(out[1]));
    }
}

TEST_CASE("scalar embedding layout and determinism") {
  ScalarEmbedding e;
  REQUIRE(e.dim() == 9);
  std::vector<double> out(e.dim());
  e.embed(0.3, out.data());
  REQUIRE(out[0] == 0.3);
  REQUIRE(out[1] == Approx(std::sin(1.5 * 0.3)).margin(1e-15));
  REQUIRE(out[2] == Approx(std::cos(1.5 * 0.3)).margin(1e-15));
  REQUIRE(out[3] == Approx(std::sin(3.0 * 0.3)).margin(1e-15));
  REQUIRE(out[8] == Approx(std::cos(12.0 * 0.3)).margin(1e-15));
}

TEST_CASE("checkpoint round trip preserves everything") {
  NetCheckpoint ck;
  ck.kind = 1;
  ck.net = make_net({11, 16, 1}, Activation::tanh_act, 56);
  ck.emb.n_freq = 4;
  ck.lambda_min = 0.1;
  ck.lambda_max = 100.0;
  const std::string path = "test_ckpt_roundtrip.tfnn";
  save_net(ck, path);
  const NetCheckpoint lk = load_net(path);
  REQUIRE(lk.kind == 1);
  REQUIRE(lk.net.widths == ck.net.widths);
  REQUIRE(lk.net.act == ck.net.act);
  REQUIRE(lk.net.params == ck.net.params);
  REQUIRE(lk.emb.n_freq == 4);
  REQUIRE(lk.lambda_min == 0.1);
  REQUIRE(lk.lambda_max == 100.0);
  std::remove(path.c_str());
}
