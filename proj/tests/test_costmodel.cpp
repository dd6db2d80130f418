#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "tiltflow/costmodel.hpp"
#include "tiltflow/oracle.hpp"

using namespace tiltflow;

namespace {

CostPredictor tiny_predictor(std::uint64_t seed, std::vector<std::uint32_t> hidden = {6, 5}) {
  Rng rng(seed);
  ScalarEmbedding emb;
  emb.n_freq = 2;
  return CostPredictor(std::move(hidden), emb, rng);
}

void randomize_params(Mlp& net, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& p : net.params) p = scale * rng.normal();
}

// All-zero parameters keep tanh layers at zero, so the output is the final
// bias alone; this builds an exactly constant predictor.
CostPredictor constant_predictor(double c) {
  CostPredictor m = tiny_predictor(1);
  m.net.params.assign(m.net.params.size(), 0.0);
  const std::size_t final_layer = m.net.widths.size() - 2;
  const std::size_t w_count =
      static_cast<std::size_t>(m.net.widths[final_layer]) * m.net.widths[final_layer + 1];
  m.net.params[m.net.layer_offset(final_layer) + w_count] = c;
  return m;
}

// Population functionals on a grid world: discrepancy between the true tilt
// and the predictor tilt, the matching squared-error terms, and the variance
// of the unscaled prediction error. Everything is an exact sum over cells.
struct PopStats {
  double skl, mse, expw, var;
};

PopStats population_stats(const GridPmf& p, const std::vector<double>& jt,
                          const std::vector<double>& jm, double lambda) {
  auto weights = [&](const std::vector<double>& f) {
    std::vector<double> w(p.cells(), 0.0);
    double m = -1e300;
    for (std::size_t i = 0; i < p.cells(); ++i)
      if (p.mass[i] > 0.0) m = std::max(m, -lambda * f[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < p.cells(); ++i)
      if (p.mass[i] > 0.0) {
        w[i] = std::exp(-lambda * f[i] - m);
        z += p.mass[i] * w[i];
      }
    for (double& v : w) v /= z;
    return w;
  };
  const std::vector<double> wt = weights(jt);
  const std::vector<double> wm = weights(jm);
  PopStats s{0.0, 0.0, 0.0, 0.0};
  double mean_d = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < p.cells(); ++i) {
    if (p.mass[i] <= 0.0) continue;
    const double d = lambda * (jm[i] - jt[i]);
    s.skl += p.mass[i] * d * (wt[i] - wm[i]);
    s.mse += p.mass[i] * d * d;
    s.expw += p.mass[i] * (wm[i] - wt[i]) * (wm[i] - wt[i]);
    mean_d += p.mass[i] * (jm[i] - jt[i]);
    m2 += p.mass[i] * (jm[i] - jt[i]) * (jm[i] - jt[i]);
  }
  s.var = m2 - mean_d * mean_d;
  return s;
}

}  // namespace

TEST_CASE("two-point batch with a unit cost gap hits the pinned loss value") {
  CostPredictor model = constant_predictor(0.0);
  const std::vector<Vec2> batch{{0.3, 0.4}, {-0.2, 0.1}};
  const std::vector<double> true_cost{0.0, 1.0};
  const double loss = skl_loss_batch(model, batch, true_cost, 1.0, nullptr);
  CHECK(std::abs(loss - 0.231059) < 1e-6);

  // closed form for this batch: both model weights are 1, so the loss is
  // (1 - w1)/2 with w1 the softmax weight of the costlier point
  const double w1 = 2.0 * std::exp(-1.0) / (1.0 + std::exp(-1.0));
  CHECK(loss == Catch::Approx((1.0 - w1) / 2.0).margin(1e-15));
}

TEST_CASE("a perfect predictor has exactly zero loss") {
  CostPredictor model = constant_predictor(0.75);
  const std::vector<Vec2> batch{{0.1, 0.9}, {-1.2, 0.3}, {0.6, -0.4}};
  const std::vector<double> true_cost{0.75, 0.75, 0.75};
  std::vector<double> grads;
  const double loss = skl_loss_batch(model, batch, true_cost, 1.0, &grads);
  CHECK(loss == 0.0);
}

TEST_CASE("shifting the true cost by a constant leaves the loss unchanged") {
  CostPredictor model = tiny_predictor(7);
  randomize_params(model.net, 8);
  const std::vector<Vec2> batch{{0.3, 0.4}, {-0.2, 0.1}, {1.1, -0.7}, {0.0, 0.9}};
  std::vector<double> j{0.2, 1.4, -0.5, 0.8};
  const double base = skl_loss_batch(model, batch, j, 1.0, nullptr);
  for (double& v : j) v += 3.7;
  const double shifted = skl_loss_batch(model, batch, j, 1.0, nullptr);
  CHECK(std::abs(shifted - base) < 1e-12 * std::max(1.0, std::abs(base)));
}

TEST_CASE("batch weights are normalized to unit mean and survive extreme scores") {
  const std::vector<double> equal{-2.0, -2.0, -2.0};
  const std::vector<double> w_eq = detail::batch_weights(equal);
  for (double w : w_eq) CHECK(w == 1.0);

  const std::vector<double> varied{0.3, -1.2, 2.0, 0.7, -0.1};
  const std::vector<double> w = detail::batch_weights(varied);
  double mean = 0.0;
  for (double v : w) mean += v / static_cast<double>(w.size());
  CHECK(std::abs(mean - 1.0) < 1e-14);
  for (double v : w) CHECK(v > 0.0);

  const std::vector<double> extreme{-1e5, -1e5 + 1.0};
  const std::vector<double> w_ex = detail::batch_weights(extreme);
  for (double v : w_ex) CHECK(std::isfinite(v));
  CHECK(w_ex[1] > w_ex[0]);
}

TEST_CASE("cost losses reject degenerate batches") {
  CostPredictor model = tiny_predictor(2);
  const std::vector<Vec2> one{{0.1, 0.2}};
  const std::vector<double> j1{0.5};
  CHECK_THROWS_WITH(skl_loss_batch(model, one, j1, 1.0, nullptr), "degenerate batch");
  CHECK_THROWS_WITH(mse_loss_batch(model, {}, {}, 1.0, nullptr), "empty batch");
  const std::vector<Vec2> two{{0.1, 0.2}, {0.3, 0.4}};
  CHECK_THROWS_WITH(skl_loss_batch(model, two, j1, 1.0, nullptr), "batch size mismatch");
}

TEST_CASE("loss gradients match finite differences") {
  CostPredictor model = tiny_predictor(21);
  randomize_params(model.net, 22);
  const std::vector<Vec2> batch{{0.7, -0.2}, {-1.1, 0.5}, {0.2, 1.3}, {0.9, 0.8}};
  const std::vector<double> j{0.4, -0.3, 1.1, 0.2};
  const double lambda = 2.5;
  const double h = 1e-5;
  Rng probe(31);

  SECTION("full objective") {
    std::vector<double> grads;
    skl_loss_batch(model, batch, j, lambda, &grads);
    for (int k = 0; k < 25; ++k) {
      const std::size_t i = probe.below(model.net.params.size());
      const double saved = model.net.params[i];
      model.net.params[i] = saved + h;
      const double lp = skl_loss_batch(model, batch, j, lambda, nullptr);
      model.net.params[i] = saved - h;
      const double lm = skl_loss_batch(model, batch, j, lambda, nullptr);
      model.net.params[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      CHECK(std::abs(grads[i] - fd) < 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }

  SECTION("frozen model weights") {
    // the stop-gradient variant differentiates the loss with the predictor
    // softmax held at its current value; finite-difference the frozen form
    std::vector<double> grads;
    skl_loss_batch(model, batch, j, lambda, &grads, /*stop_gradient=*/true);

    const std::size_t n = batch.size();
    std::vector<double> neg_f(n), neg_lj(n);
    for (std::size_t i = 0; i < n; ++i) {
      neg_f[i] = -model.value(batch[i], lambda);
      neg_lj[i] = -lambda * j[i];
    }
    const std::vector<double> w_model = detail::batch_weights(neg_f);
    const std::vector<double> w_true = detail::batch_weights(neg_lj);
    auto frozen_loss = [&](void) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        acc += (model.value(batch[i], lambda) - lambda * j[i]) * (w_true[i] - w_model[i]) / n;
      return acc;
    };
    for (int k = 0; k < 25; ++k) {
      const std::size_t i = probe.below(model.net.params.size());
      const double saved = model.net.params[i];
      model.net.params[i] = saved + h;
      const double lp = frozen_loss();
      model.net.params[i] = saved - h;
      const double lm = frozen_loss();
      model.net.params[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      CHECK(std::abs(grads[i] - fd) < 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }

  SECTION("squared error") {
    std::vector<double> grads;
    mse_loss_batch(model, batch, j, lambda, &grads);
    for (int k = 0; k < 25; ++k) {
      const std::size_t i = probe.below(model.net.params.size());
      const double saved = model.net.params[i];
      model.net.params[i] = saved + h;
      const double lp = mse_loss_batch(model, batch, j, lambda, nullptr);
      model.net.params[i] = saved - h;
      const double lm = mse_loss_batch(model, batch, j, lambda, nullptr);
      model.net.params[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      CHECK(std::abs(grads[i] - fd) < 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("single-point squared error is the squared residual") {
  CostPredictor model = constant_predictor(0.0);
  const std::vector<Vec2> batch{{0.4, -0.6}};
  const std::vector<double> j{2.0};
  const double loss = mse_loss_batch(model, batch, j, 1.0, nullptr);
  CHECK(loss == 4.0);
}

TEST_CASE("predictor input gradient matches finite differences") {
  CostPredictor model = tiny_predictor(41);
  randomize_params(model.net, 42);
  const Vec2 x{0.37, -0.81};
  const double lambda = 3.0;
  const Vec2 g = model.grad(x, lambda);
  const double h = 1e-6;
  const double fx = (model.value({x.x + h, x.y}, lambda) - model.value({x.x - h, x.y}, lambda)) / (2.0 * h);
  const double fy = (model.value({x.x, x.y + h}, lambda) - model.value({x.x, x.y - h}, lambda)) / (2.0 * h);
  CHECK(std::abs(g.x - fx) < 1e-6 * std::max(1.0, std::abs(fx)));
  CHECK(std::abs(g.y - fy) < 1e-6 * std::max(1.0, std::abs(fy)));
}

TEST_CASE("model tilt of a constant predictor returns the base pmf") {
  CostPredictor model = constant_predictor(1.3);
  WorldSpec spec;
  spec.density_kind = WorldSpec::DensityKind::gaussian_mixture;
  spec.nx = spec.ny = 16;
  spec.mixture = {{{0.0, 0.0}, 1.0, 0.0, 1.0, 1.0}};
  const GridPmf p = mixture_pmf(spec);
  const GridPmf q = model_tilted_pmf(model, p, 2.0);
  REQUIRE(q.mass.size() == p.mass.size());
  for (std::size_t i = 0; i < p.cells(); ++i)
    CHECK(std::abs(q.mass[i] - p.mass[i]) < 1e-15);
}

TEST_CASE("model tilt agrees with the grid tilt of the implied cost field") {
  CostPredictor model = tiny_predictor(51);
  randomize_params(model.net, 52);
  WorldSpec spec;
  spec.density_kind = WorldSpec::DensityKind::gaussian_mixture;
  spec.nx = spec.ny = 24;
  spec.mixture = {{{-0.8, 0.2}, 0.5, 0.1, 0.7, 1.0}, {{1.0, -0.5}, 0.6, 0.0, 0.4, 0.6}};
  const GridPmf p = mixture_pmf(spec);

  const double lambda = 2.0;
  GridField implied(p.b, p.nx, p.ny);
  for (std::uint32_t ix = 0; ix < p.nx; ++ix)
    for (std::uint32_t iy = 0; iy < p.ny; ++iy)
      implied.at(ix, iy) = model.value({p.cx(ix), p.cy(iy)}, lambda) / lambda;

  const GridPmf via_field = tilt(p, implied, lambda);
  const GridPmf direct = model_tilted_pmf(model, p, lambda);
  for (std::size_t i = 0; i < p.cells(); ++i)
    CHECK(std::abs(direct.mass[i] - via_field.mass[i]) <
          1e-12 * std::max(1e-12, via_field.mass[i]));
}

TEST_CASE("model tilt keeps empty cells empty") {
  CostPredictor model = tiny_predictor(61);
  randomize_params(model.net, 62);
  GridPmf p(Bounds{}, 2, 2);
  p.mass = {0.5, 0.5, 0.0, 0.0};
  const GridPmf q = model_tilted_pmf(model, p, 1.0);
  CHECK(q.mass[2] == 0.0);
  CHECK(q.mass[3] == 0.0);
  CHECK(q.mass[0] + q.mass[1] == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("cost training tracks metrics and restores the best checkpoint") {
  WorldSpec spec;
  spec.density_kind = WorldSpec::DensityKind::gaussian_mixture;
  spec.nx = spec.ny = 48;
  spec.mixture = {{{-1.0, -0.4}, 0.5, 0.0, 0.5, 1.0}, {{1.2, 0.6}, 0.4, 0.0, 0.4, 0.8}};
  const GridPmf p = mixture_pmf(spec);
  WorldSpec cspec = spec;
  cspec.seed = 9;
  const GridField cost = make_grf(cspec, "cost");

  Rng init(71);
  ScalarEmbedding lemb;
  CostPredictor model({32, 32}, lemb, init);

  CostTrainConfig cfg;
  cfg.steps = 300;
  cfg.batch = 64;
  cfg.eval_interval = 100;
  cfg.eval_nx = cfg.eval_ny = 48;
  cfg.eval_lambdas = {1.0};

  const CostTrainResult res = train_cost(model, p, cost, cfg, Rng(72));
  REQUIRE(res.loss_history.size() == cfg.steps);
  for (double l : res.loss_history) REQUIRE(std::isfinite(l));
  REQUIRE(res.metrics.size() == 3);
  double best = 1e300;
  for (const auto& row : res.metrics) {
    CHECK(row.lambda_eval == 1.0);
    CHECK(row.skl == Catch::Approx(0.5 * (row.kl_qr_qm + row.kl_qm_qr)).margin(1e-15));
    best = std::min(best, row.skl);
  }
  CHECK(res.best_skl == best);

  // returned parameters must reproduce the reported best metric exactly
  const GridField cost_eval = resample_field(cost, cfg.eval_nx, cfg.eval_ny);
  GridPmf p_eval(p.b, cfg.eval_nx, cfg.eval_ny);
  for (std::uint32_t ix = 0; ix < p_eval.nx; ++ix)
    for (std::uint32_t iy = 0; iy < p_eval.ny; ++iy)
      p_eval.at(ix, iy) = std::max(interp_density(p, {p_eval.cx(ix), p_eval.cy(iy)}), 1e-300);
  double zp = 0.0;
  for (double v : p_eval.mass) zp += v;
  for (double& v : p_eval.mass) v /= zp;
  const GridPmf q_real = tilt(p_eval, cost_eval, 1.0);
  const GridPmf q_model = model_tilted_pmf(model, p_eval, 1.0);
  const double skl_now = 0.5 * (kl(q_real, q_model) + kl(q_model, q_real));
  CHECK(skl_now == Catch::Approx(res.best_skl).margin(1e-12));

  Rng init2(71);
  CostPredictor model2({32, 32}, lemb, init2);
  const CostTrainResult res2 = train_cost(model2, p, cost, cfg, Rng(72));
  CHECK(res2.loss_history == res.loss_history);
  CHECK(res2.best_skl == res.best_skl);
  CHECK(model2.net.params == model.net.params);
}

TEST_CASE("population discrepancy behaves like the scaled error variance at small tilt") {
  WorldSpec spec;
  spec.density_kind = WorldSpec::DensityKind::gaussian_mixture;
  spec.nx = spec.ny = 64;
  spec.mixture = {{{-0.9, 0.3}, 0.6, 0.1, 0.8, 1.0}, {{1.1, -0.6}, 0.5, 0.0, 0.5, 0.7}};
  const GridPmf p = mixture_pmf(spec);

  WorldSpec fspec = spec;
  fspec.seed = 3;
  const GridField jt = make_grf(fspec, "cost");

  for (int k = 0; k < 5; ++k) {
    WorldSpec gspec = spec;
    gspec.seed = 100 + static_cast<std::uint64_t>(k);
    const GridField pert = make_grf(gspec, "pert");
    std::vector<double> jm(jt.values.size());
    for (std::size_t i = 0; i < jm.size(); ++i) jm[i] = jt.values[i] + 0.5 * pert.values[i];

    const double lambda = 1e-3;
    const PopStats s = population_stats(p, jt.values, jm, lambda);
    REQUIRE(s.var > 0.0);
    const double ratio = s.skl / (lambda * lambda * s.var);
    CAPTURE(k, ratio);
    CHECK(ratio > 0.95);
    CHECK(ratio < 1.05);
    CHECK(s.skl <= s.mse * 1.01);

    for (double big : {0.1, 1.0, 10.0}) {
      const PopStats sb = population_stats(p, jt.values, jm, big);
      CHECK(sb.skl >= -1e-15);
      CHECK(sb.skl <= std::sqrt(sb.mse * sb.expw) * (1.0 + 1e-12));

      // the library-side functionals agree with this local replica
      const PopulationFunctionals lib = population_functionals(p, jt.values, jm, big);
      CHECK(lib.skl == Catch::Approx(sb.skl).margin(1e-15));
      CHECK(lib.mse == Catch::Approx(sb.mse).margin(1e-15));
      CHECK(lib.expw == Catch::Approx(sb.expw).margin(1e-15));
      CHECK(lib.var == Catch::Approx(sb.var).margin(1e-15));
    }
  }
}
