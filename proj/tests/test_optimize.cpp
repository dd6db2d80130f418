#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "tiltflow/optimize.hpp"
#include "tiltflow/oracle.hpp"

using namespace tiltflow;

namespace {

struct ConstCost : CostFn {
  double c = 1.0;
  double value(const Vec2&, double) const override { return c; }
  Vec2 grad(const Vec2&, double) const override { return {0.0, 0.0}; }
};

struct ZeroFlow : FlowField {
  Vec2 velocity(const Vec2&, double) const override { return {0.0, 0.0}; }
  Vec2 velocity_vjp(const Vec2&, double, const Vec2&) const override { return {0.0, 0.0}; }
};

}  // namespace

TEST_CASE("noising is exact at the path endpoints") {
  Schedule sched;
  const Vec2 x{0.8, -1.3};

  Rng r1(5);
  Rng probe = r1;
  probe.normal2();  // one pair is always consumed
  const Vec2 at_one = add_noise(sched, x, 1.0, r1);
  CHECK(at_one.x == x.x);
  CHECK(at_one.y == x.y);

  Rng r2(6);
  Rng probe2 = r2;
  const Vec2 eps = probe2.normal2();
  const Vec2 at_zero = add_noise(sched, x, 0.0, r2);
  CHECK(at_zero.x == eps.x);
  CHECK(at_zero.y == eps.y);
}

TEST_CASE("noising matches the path moments") {
  Schedule sched;
  const Vec2 x{1.0, -2.0};
  const double t = 0.3;
  Rng rng(7);
  const std::size_t n = 100000;
  double mx = 0.0, my = 0.0, vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 z = add_noise(sched, x, t, rng);
    mx += z.x / n;
    my += z.y / n;
    vx += z.x * z.x / n;
    vy += z.y * z.y / n;
  }
  vx -= mx * mx;
  vy -= my * my;
  const double se_mean = 0.7 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(mx - t * x.x) < 4.0 * se_mean);
  CHECK(std::abs(my - t * x.y) < 4.0 * se_mean);
  const double var_ref = (1.0 - t) * (1.0 - t);
  CHECK(std::abs(vx - var_ref) < 0.01);
  CHECK(std::abs(vy - var_ref) < 0.01);
}

TEST_CASE("with the flow term off the annealed run is plain gradient descent") {
  QuadraticCost cost(Eigen::Matrix2d::Identity(), {0.5, -0.7});
  ZeroFlow flow;
  Schedule sched;
  AnnealConfig cfg;
  cfg.n_iters = 50;
  cfg.eta = 0.1;
  cfg.flow_term = false;

  const Vec2 x0{2.0, 1.5};
  const OptTrace a = optimize_point(x0, cost, flow, sched, cfg, Rng(3));
  const OptTrace b = optimize_cost_only(x0, cost, cfg);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t k = 0; k < a.rows.size(); ++k) {
    CHECK(a.rows[k].x.x == b.rows[k].x.x);
    CHECK(a.rows[k].x.y == b.rows[k].x.y);
    CHECK(a.rows[k].cost == b.rows[k].cost);
    CHECK(a.rows[k].g_norm == b.rows[k].g_norm);
    CHECK(std::isnan(a.rows[k].neg_log_p));
  }

  // and no randomness is consumed
  Rng used(9);
  density_grad_step(x0, cost, flow, sched, cfg, 0, used);
  CHECK(used.uniform() == Rng(9).uniform());
}

TEST_CASE("annealed optimization is deterministic in its seed") {
  QuadraticCost cost(Eigen::Matrix2d::Identity(), {0.0, 0.0});
  AnalyticGaussianFlow flow{GaussianWorld{{0.0, 0.0}, Eigen::Matrix2d::Identity()}};
  Schedule sched;
  AnnealConfig cfg;
  cfg.n_iters = 40;

  const OptTrace a = optimize_point({1.0, -1.0}, cost, flow, sched, cfg, Rng(11));
  const OptTrace b = optimize_point({1.0, -1.0}, cost, flow, sched, cfg, Rng(11));
  REQUIRE(a.rows.size() == 41);
  for (std::size_t k = 0; k < a.rows.size(); ++k) {
    CHECK(a.rows[k].x.x == b.rows[k].x.x);
    CHECK(a.rows[k].x.y == b.rows[k].x.y);
  }
}

TEST_CASE("plain descent contracts a quadratic to its minimizer") {
  QuadraticCost cost(Eigen::Matrix2d::Identity(), {0.4, -0.9});
  AnnealConfig cfg;
  cfg.n_iters = 300;
  cfg.eta = 0.1;
  const OptTrace tr = optimize_cost_only({3.0, 2.0}, cost, cfg);
  const Vec2 last = tr.rows.back().x;
  CHECK(std::abs(last.x - 0.4) < 1e-10);
  CHECK(std::abs(last.y + 0.9) < 1e-10);
  for (std::size_t k = 1; k < tr.rows.size(); ++k)
    CHECK(tr.rows[k].cost <= tr.rows[k - 1].cost);
}

TEST_CASE("a flat cost leaves the iterate untouched") {
  ConstCost cost;
  AnnealConfig cfg;
  cfg.n_iters = 25;
  const Vec2 x0{0.3, 0.4};
  const OptTrace tr = optimize_cost_only(x0, cost, cfg);
  for (const auto& row : tr.rows) {
    CHECK(row.x.x == x0.x);
    CHECK(row.x.y == x0.y);
    CHECK(row.g_norm == 0.0);
  }
}

TEST_CASE("zero iterations yield the bare starting row") {
  ConstCost cost;
  ZeroFlow flow;
  Schedule sched;
  AnnealConfig cfg;
  cfg.n_iters = 0;
  const OptTrace tr = optimize_point({1.0, 2.0}, cost, flow, sched, cfg, Rng(1));
  REQUIRE(tr.rows.size() == 1);
  CHECK(tr.rows[0].x.x == 1.0);
  CHECK(tr.rows[0].k == 0);
  CHECK(tr.rows[0].g_norm == 0.0);
}

TEST_CASE("the noise-level window ramps up and respects its ceiling") {
  AnnealConfig cfg;
  cfg.n_iters = 100;
  CHECK(t_min_at(cfg, 0) == cfg.t_min_start);
  CHECK(t_min_at(cfg, 99) == Catch::Approx(cfg.t_min_end).margin(1e-15));
  double prev = -1.0;
  for (std::uint32_t k = 0; k < 100; ++k) {
    const double t = t_min_at(cfg, k);
    CHECK(t >= prev);
    CHECK(t <= cfg.t_max);
    prev = t;
  }

  AnnealConfig high = cfg;
  high.t_min_end = 1.5;  // would cross the ceiling without the clamp
  CHECK(t_min_at(high, 99) == high.t_max);

  // drawn noise levels live inside the window
  QuadraticCost cost(Eigen::Matrix2d::Identity(), {0.0, 0.0});
  ZeroFlow flow;
  Schedule sched;
  Rng rng(13);
  for (std::uint32_t k : {0u, 25u, 50u, 99u}) {
    OptStepDiag d;
    density_grad_step({0.5, 0.5}, cost, flow, sched, cfg, k, rng, &d);
    CHECK(d.t >= t_min_at(cfg, k));
    CHECK(d.t <= cfg.t_max);
  }
}

TEST_CASE("multiple score draws average bitwise over the replayed stream") {
  QuadraticCost cost(Eigen::Matrix2d::Identity(), {0.0, 0.0});
  AnalyticGaussianFlow flow{GaussianWorld{{0.2, -0.1}, Eigen::Matrix2d::Identity()}};
  Schedule sched;
  AnnealConfig cfg;
  cfg.score_samples = 4;
  const Vec2 x{0.7, 0.3};
  const std::uint32_t k = 10;

  Rng rng(17);
  Rng replay = rng;
  OptStepDiag d;
  density_grad_step(x, cost, flow, sched, cfg, k, rng, &d);

  Vec2 acc{0.0, 0.0};
  const double t_lo = t_min_at(cfg, k);
  for (int i = 0; i < 4; ++i) {
    const double t = replay.uniform(t_lo, cfg.t_max);
    const Vec2 xt = add_noise(sched, x, t, replay);
    acc += score_from_velocity(sched, xt, flow.velocity(xt, t), t);
  }
  acc *= 1.0 / 4.0;
  CHECK(d.score.x == acc.x);
  CHECK(d.score.y == acc.y);
}

TEST_CASE("pure score ascent pulls a far iterate toward the data") {
  ConstCost cost;
  cost.c = 0.0;
  AnalyticGaussianFlow flow{GaussianWorld{{0.0, 0.0}, Eigen::Matrix2d::Identity()}};
  Schedule sched;
  AnnealConfig cfg;
  cfg.n_iters = 300;
  const Vec2 x0{3.0, 3.0};
  const OptTrace tr = optimize_point(x0, cost, flow, sched, cfg, Rng(19));
  const Vec2 last = tr.rows.back().x;
  CHECK(norm(last) < 0.5 * norm(x0));
}

TEST_CASE("runaway steps are reported") {
  QuadraticCost cost(Eigen::Matrix2d::Identity(), {0.0, 0.0});
  ZeroFlow flow;
  Schedule sched;
  AnnealConfig cfg;
  cfg.n_iters = 300;
  cfg.lambda = 1e4;  // eta lambda >> 2 diverges on a quadratic
  cfg.flow_term = false;
  CHECK_THROWS_WITH(optimize_point({1.0, 0.0}, cost, flow, sched, cfg, Rng(1)),
                    "optimizer diverged");
  CHECK_THROWS_WITH(optimize_cost_only({1.0, 0.0}, cost, cfg), "optimizer diverged");
}

TEST_CASE("the plausibility column comes from the supplied functor") {
  ConstCost cost;
  ZeroFlow flow;
  Schedule sched;
  AnnealConfig cfg;
  cfg.n_iters = 5;
  cfg.flow_term = false;
  const OptTrace tr = optimize_point_impl({0.6, -0.2}, cost, flow, sched, cfg, Rng(1),
                                          [](const Vec2& p) { return p.x + 2.0 * p.y; });
  for (const auto& row : tr.rows)
    CHECK(row.neg_log_p == row.x.x + 2.0 * row.x.y);
}

TEST_CASE("optimization trace writer emits its header") {
  ConstCost cost;
  AnnealConfig cfg;
  cfg.n_iters = 3;
  std::vector<OptTrace> traces{optimize_cost_only({0.1, 0.2}, cost, cfg)};
  const std::string path = "/tmp/tiltflow_test_opt.csv";
  write_opt_traces_csv(traces, path);
  std::ifstream is(path);
  std::string line;
  REQUIRE(std::getline(is, line));
  CHECK(line == "start,iter,t,x,y,cost,neg_log_p,g_norm");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 4);
  std::remove(path.c_str());
}
