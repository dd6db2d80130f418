#pragma once

// Point-solution inverse design: time-annealed descent on the tilted
// objective. Each iteration draws a noise level, perturbs the iterate along
// the interpolation path, reads the marginal score off the velocity model at
// the perturbed point, and steps against cost gradient minus score. The
// score term keeps iterates on the data manifold; disabling it recovers the
// plain cost-gradient baseline.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/rng.hpp"
#include "tiltflow/schedule.hpp"

namespace tiltflow {

struct AnnealConfig {
  std::uint32_t n_iters = 300;
  double eta = 0.02;
  double t_min_start = 0.02;
  double t_min_end = 0.5;
  double t_max = 0.98;
  double lambda = 1.0;
  std::uint64_t seed = 1;
  bool flow_term = true;            // off: plain cost descent, no rng consumed
  std::uint32_t score_samples = 1;  // independent (t, eps) draws averaged per step
};

// Lower bound of the noise-level window at iteration k; linear ramp, clamped
// so it never crosses t_max.
inline double t_min_at(const AnnealConfig& cfg, std::uint32_t k) {
  const double span = cfg.n_iters > 1 ? static_cast<double>(cfg.n_iters - 1) : 1.0;
  const double frac = static_cast<double>(k) / span;
  const double t = cfg.t_min_start + (cfg.t_min_end - cfg.t_min_start) * frac;
  return std::min(t, cfg.t_max);
}

// x_t = alpha_t x + sigma_t eps along the sampling path.
inline Vec2 add_noise(const Schedule& sched, const Vec2& x, double t, Rng& rng) {
  const Coeffs c = coeffs(sched, t);
  const Vec2 eps = rng.normal2();
  return c.alpha * x + c.sigma * eps;
}

struct OptStepDiag {
  double t = 0.0;  // last noise level drawn this step
  Vec2 g;
  Vec2 cost_grad;
  Vec2 score;
};

// One annealed step: g = grad J(x_k, lambda) - score(x_{t_k}, t_k), then
// x <- x - eta g. The cost gradient sees the clean iterate; the score sees
// the noised copy.
inline Vec2 density_grad_step(const Vec2& x, const CostFn& cost, const FlowField& flow,
                              const Schedule& sched, const AnnealConfig& cfg, std::uint32_t k,
                              Rng& rng, OptStepDiag* diag = nullptr) {
  const Vec2 cg = cost.grad(x, cfg.lambda);
  Vec2 score{0.0, 0.0};
  double t_last = 0.0;
  if (cfg.flow_term) {
    const std::uint32_t n = cfg.score_samples > 0 ? cfg.score_samples : 1;
    const double t_lo = t_min_at(cfg, k);
    for (std::uint32_t i = 0; i < n; ++i) {
      const double t = rng.uniform(t_lo, cfg.t_max);
      const Vec2 xt = add_noise(sched, x, t, rng);
      const Vec2 v = flow.velocity(xt, t);
      score += score_from_velocity(sched, xt, v, t);
      t_last = t;
    }
    score *= 1.0 / static_cast<double>(n);
  }
  const Vec2 g = cg - score;
  if (!is_finite(g)) fail("optimizer diverged");
  if (diag) *diag = {t_last, g, cg, score};
  return x - cfg.eta * g;
}

struct OptTraceRow {
  std::uint32_t k = 0;
  double t = 0.0;
  Vec2 x;
  double cost = 0.0;
  double neg_log_p = std::numeric_limits<double>::quiet_NaN();
  double g_norm = 0.0;
};

struct OptTrace {
  std::vector<OptTraceRow> rows;  // length n_iters + 1; final row has t = g_norm = 0
};

// Full annealed run. neg_log_p_at may be null; when given it fills the
// plausibility column (a grid-interpolated -log density in the 2D setting).
template <typename NegLogP>
OptTrace optimize_point_impl(const Vec2& x0, const CostFn& cost, const FlowField& flow,
                             const Schedule& sched, const AnnealConfig& cfg, Rng rng,
                             NegLogP&& neg_log_p_at) {
  OptTrace tr;
  tr.rows.reserve(cfg.n_iters + 1);
  Vec2 x = x0;
  for (std::uint32_t k = 0; k < cfg.n_iters; ++k) {
    OptStepDiag d;
    const Vec2 x_next = density_grad_step(x, cost, flow, sched, cfg, k, rng, &d);
    tr.rows.push_back({k, d.t, x, cost.value(x, cfg.lambda), neg_log_p_at(x), norm(d.g)});
    x = x_next;
  }
  tr.rows.push_back({cfg.n_iters, 0.0, x, cost.value(x, cfg.lambda), neg_log_p_at(x), 0.0});
  return tr;
}

inline OptTrace optimize_point(const Vec2& x0, const CostFn& cost, const FlowField& flow,
                               const Schedule& sched, const AnnealConfig& cfg, Rng rng) {
  return optimize_point_impl(x0, cost, flow, sched, cfg, rng, [](const Vec2&) {
    return std::numeric_limits<double>::quiet_NaN();
  });
}

// Baseline: x <- x - eta grad J, no density term, no randomness.
inline OptTrace optimize_cost_only(const Vec2& x0, const CostFn& cost, const AnnealConfig& cfg) {
  OptTrace tr;
  tr.rows.reserve(cfg.n_iters + 1);
  Vec2 x = x0;
  for (std::uint32_t k = 0; k < cfg.n_iters; ++k) {
    const Vec2 g = cost.grad(x, cfg.lambda);
    if (!is_finite(g)) fail("optimizer diverged");
    tr.rows.push_back({k, 0.0, x, cost.value(x, cfg.lambda),
                       std::numeric_limits<double>::quiet_NaN(), norm(g)});
    x = x - cfg.eta * g;
    if (!is_finite(x)) fail("optimizer diverged");
  }
  tr.rows.push_back({cfg.n_iters, 0.0, x, cost.value(x, cfg.lambda),
                     std::numeric_limits<double>::quiet_NaN(), 0.0});
  return tr;
}

inline void write_opt_traces_csv(const std::vector<OptTrace>& traces, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("cannot open for writing: " + path);
  os << "start,iter,t,x,y,cost,neg_log_p,g_norm\n";
  os.precision(17);
  for (std::size_t i = 0; i < traces.size(); ++i)
    for (const auto& r : traces[i].rows)
      os << i << ',' << r.k << ',' << r.t << ',' << r.x.x << ',' << r.x.y << ',' << r.cost << ','
         << r.neg_log_p << ',' << r.g_norm << '\n';
}

}  // namespace tiltflow
