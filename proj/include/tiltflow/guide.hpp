#pragma once

// Training-free guidance estimators over a trained velocity field, plus the
// guided Euler sampler shared by all of them. Every estimator is assembled
// as prefactor * raw so traces can audit the factorization; the prefactor is
// applied exactly once per step.
//
// dps     g = -s_t * B_t^T grad J(mu),             Dirac proposal at mu
// lgd_mc  g = -s_t * B_t^T sum_i w_i grad J(x1_i), Gaussian proposal, softmax w
// sim_mc  g =  b_t * tilted-mean shift,            fixed isotropic proposal
// sa_mc   g =  b_t * tilted-mean shift,            secant-adapted proposal
//
// B_t^T c = (-a c + (dv/dx)^T c)/b chains cost gradients back through the
// one-step posterior mean; the proposal map is treated as x-independent.

#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/flow.hpp"
#include "tiltflow/rng.hpp"
#include "tiltflow/schedule.hpp"
#include "tiltflow/secant.hpp"
#include "tiltflow/tilted.hpp"

namespace tiltflow {

enum class GuidanceMethod { none, dps, lgd_mc, sim_mc, sa_mc };

inline const char* method_name(GuidanceMethod m) {
  switch (m) {
    case GuidanceMethod::none: return "none";
    case GuidanceMethod::dps: return "dps";
    case GuidanceMethod::lgd_mc: return "lgd_mc";
    case GuidanceMethod::sim_mc: return "sim_mc";
    case GuidanceMethod::sa_mc: return "sa_mc";
  }
  return "?";
}

inline GuidanceMethod method_from_name(const std::string& s) {
  if (s == "none") return GuidanceMethod::none;
  if (s == "dps") return GuidanceMethod::dps;
  if (s == "lgd_mc") return GuidanceMethod::lgd_mc;
  if (s == "sim_mc") return GuidanceMethod::sim_mc;
  if (s == "sa_mc") return GuidanceMethod::sa_mc;
  fail("unknown guidance method: " + s);
  return GuidanceMethod::none;
}

struct GuidanceSpec {
  GuidanceMethod method = GuidanceMethod::none;
  std::uint32_t mc_size = 32;    // S for the MC estimators
  bool antithetic = false;
  double sigma_override = -1.0;  // >= 0 pins the proposal std (tests); else sigma_h(t)
  SecantConfig secant;           // sa_mc parameters
};

struct GuideStepDiag {
  Vec2 raw;                // estimator before the prefactor
  double prefactor = 0.0;  // g = prefactor * raw
  double ess = 0.0;        // effective sample size of the tilted weights
  double phi = 1.0;        // sa_mc damping factor
  int jitter_tries = 0;
  bool fallback = false;
};

// B_t^T applied to a cotangent: (-a c + (dv/dx)^T c)/b.
inline Vec2 bt_transpose(const FlowField& flow, const Schedule& sched, const Vec2& x_t, double t,
                         const Vec2& c) {
  const Coeffs cf = coeffs(sched, t);
  return (1.0 / cf.b) * (-cf.a * c + flow.velocity_vjp(x_t, t, c));
}

inline Vec2 g_dps(const FlowField& flow, const CostFn& cost, const Schedule& sched,
                  const Vec2& x_t, double t, double lambda, GuideStepDiag* diag = nullptr) {
  const Coeffs cf = coeffs(sched, t);
  const Vec2 v = flow.velocity(x_t, t);
  const Vec2 mu = posterior_mean(sched, x_t, v, t);
  const Vec2 raw = bt_transpose(flow, sched, x_t, t, cost.grad(mu, lambda));
  const Vec2 g = -cf.s * raw;
  if (!is_finite(g)) fail("non-finite guidance");
  if (diag) *diag = {raw, -cf.s, 1.0, 1.0, 0, false};
  return g;
}

inline Vec2 g_lgd_mc(const FlowField& flow, const CostFn& cost, const Schedule& sched,
                     const Vec2& x_t, double t, double lambda, const GuidanceSpec& spec, Rng& rng,
                     GuideStepDiag* diag = nullptr) {
  const std::uint32_t S = spec.mc_size;
  if (S == 0) fail("mc size must be positive");
  if (spec.antithetic && S % 2 != 0) fail("antithetic sampling needs an even sample count");
  const Coeffs cf = coeffs(sched, t);
  const Vec2 v = flow.velocity(x_t, t);
  const Vec2 mu = posterior_mean(sched, x_t, v, t);
  const double sig = spec.sigma_override >= 0.0 ? spec.sigma_override : sigma_h(t);

  std::vector<Vec2> pts(S);
  std::vector<double> logw(S);
  Vec2 prev_eps{0.0, 0.0};
  double lmax = -std::numeric_limits<double>::infinity();
  for (std::uint32_t i = 0; i < S; ++i) {
    Vec2 eps;
    if (spec.antithetic && (i & 1u))
      eps = -prev_eps;
    else
      eps = rng.normal2();
    prev_eps = eps;
    pts[i] = mu + sig * eps;
    logw[i] = -cost.value(pts[i], lambda);
    if (logw[i] > lmax) lmax = logw[i];
  }
  if (!std::isfinite(lmax)) fail("cost overflow");
  double wsum = 0.0, w2sum = 0.0;
  Vec2 acc{0.0, 0.0};
  for (std::uint32_t i = 0; i < S; ++i) {
    const double w = std::exp(logw[i] - lmax);
    wsum += w;
    w2sum += w * w;
    acc += w * cost.grad(pts[i], lambda);
  }
  if (!(wsum > 0.0)) fail("cost overflow");
  const Vec2 raw = bt_transpose(flow, sched, x_t, t, (1.0 / wsum) * acc);
  const Vec2 g = -cf.s * raw;
  if (!is_finite(g)) fail("non-finite guidance");
  if (diag) *diag = {raw, -cf.s, wsum * wsum / w2sum, 1.0, 0, false};
  return g;
}

inline Vec2 g_sim_mc(const FlowField& flow, const CostFn& cost, const Schedule& sched,
                     const Vec2& x_t, double t, double lambda, const GuidanceSpec& spec, Rng& rng,
                     GuideStepDiag* diag = nullptr) {
  const Coeffs cf = coeffs(sched, t);
  const Vec2 v = flow.velocity(x_t, t);
  const Vec2 mu = posterior_mean(sched, x_t, v, t);
  const double sig = spec.sigma_override >= 0.0 ? spec.sigma_override : sigma_h(t);
  const auto noise_map = [sig](const Vec2& eps) { return sig * eps; };
  const auto cost_at = [&cost, lambda](const Vec2& p) { return cost.value(p, lambda); };
  const TiltedMeanResult tm =
      tilted_mean(mu, noise_map, cost_at, spec.mc_size, rng, spec.antithetic);
  const Vec2 g = cf.b * tm.shift;
  if (!is_finite(g)) fail("non-finite guidance");
  if (diag) *diag = {tm.shift, cf.b, tm.ess, 1.0, 0, false};
  return g;
}

struct GuideTraceRow {
  std::uint32_t step = 0;
  double t = 0.0;
  Vec2 x;
  Vec2 v;
  Vec2 g;
  Vec2 raw;
  double prefactor = 0.0;
  double ess = 0.0;
  double phi = 1.0;
  int jitter_tries = 0;
  bool fallback = false;
};

struct GuidedResult {
  std::vector<Vec2> points;
  std::vector<std::vector<GuideTraceRow>> traces;  // first trace_count trajectories
};

namespace detail {

// One guided trajectory on the uniform Euler grid. method none is handled by
// the caller (it delegates to the unguided sampler for bitwise parity).
inline Vec2 guided_trajectory(const FlowField& flow, const CostFn& cost, const Schedule& sched,
                              const GuidanceSpec& spec, double lambda, const OdeConfig& cfg,
                              Rng& rng, std::vector<GuideTraceRow>* rows) {
  const double h = (cfg.t_end - cfg.t_start) / static_cast<double>(cfg.n_steps);
  Vec2 x = rng.normal2();

  if (spec.method == GuidanceMethod::sa_mc) {
    std::vector<double> grid(cfg.n_steps + 1);
    for (std::uint32_t k = 0; k <= cfg.n_steps; ++k)
      grid[k] = cfg.t_start + h * static_cast<double>(k);
    SaMcState st = SaMcState::init(spec.secant, sched, std::move(grid), x);
    while (!st.done()) {
      SaMcDiag d;
      const Vec2 x_prev = st.x;
      sa_mc_step(st, flow, cost, lambda, spec.mc_size, rng, spec.antithetic,
                 rows ? &d : nullptr);
      if (rows)
        rows->push_back({d.step, d.t, x_prev, flow.velocity(x_prev, d.t), d.g, d.raw_shift,
                         d.prefactor, d.ess, d.phi, d.jitter_tries, d.fallback});
    }
    x = st.x;
  } else {
    for (std::uint32_t k = 0; k < cfg.n_steps; ++k) {
      const double t = cfg.t_start + h * static_cast<double>(k);
      const Vec2 v = flow.velocity(x, t);
      GuideStepDiag d;
      Vec2 g{0.0, 0.0};
      switch (spec.method) {
        case GuidanceMethod::dps: g = g_dps(flow, cost, sched, x, t, lambda, &d); break;
        case GuidanceMethod::lgd_mc:
          g = g_lgd_mc(flow, cost, sched, x, t, lambda, spec, rng, &d);
          break;
        case GuidanceMethod::sim_mc:
          g = g_sim_mc(flow, cost, sched, x, t, lambda, spec, rng, &d);
          break;
        default: fail("unexpected guidance method");
      }
      if (rows)
        rows->push_back(
            {k, t, x, v, g, d.raw, d.prefactor, d.ess, d.phi, d.jitter_tries, d.fallback});
      x = x + h * (v + g);
      if (!is_finite(x)) fail("trajectory diverged at step " + std::to_string(k));
    }
  }

  if (cfg.terminal_clamp) {
    const Vec2 v_end = flow.velocity(x, cfg.t_end);
    x = posterior_mean(sched, x, v_end, cfg.t_end);
    if (rows)
      rows->push_back({cfg.n_steps, cfg.t_end, x, v_end, Vec2{0.0, 0.0}, Vec2{0.0, 0.0}, 0.0, 0.0,
                       1.0, 0, false});
  }
  return x;
}

}  // namespace detail

// Terminal points for n trajectories under the chosen guidance. Per-trajectory
// substreams make the result independent of scheduling; n_threads splits
// whole trajectories across workers and never shares estimator state.
inline GuidedResult guided_sample(const FlowField& flow, const CostFn& cost,
                                  const Schedule& sched, const GuidanceSpec& spec, double lambda,
                                  std::size_t n, const OdeConfig& cfg, const Rng& rng,
                                  unsigned n_threads = 1) {
  GuidedResult out;
  out.points.resize(n);
  const std::size_t n_traced = std::min<std::size_t>(cfg.trace_count, n);
  out.traces.assign(n_traced, {});

  const auto run_one = [&](std::size_t i) {
    Rng ri = rng.stream("traj", i);
    std::vector<GuideTraceRow>* rows = i < n_traced ? &out.traces[i] : nullptr;
    if (spec.method == GuidanceMethod::none) {
      SamplerTrace tr;
      out.points[i] = ode_trajectory(flow, cfg, ri, rows ? &tr : nullptr);
      if (rows)
        for (const auto& r : tr.rows)
          rows->push_back({r.step, r.t, r.x, r.v, r.g, Vec2{0.0, 0.0}, 0.0, 0.0, 1.0, 0, false});
    } else {
      out.points[i] = detail::guided_trajectory(flow, cost, sched, spec, lambda, cfg, ri, rows);
    }
  };

  if (n_threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + n_threads - 1) / n_threads;
    for (unsigned w = 0; w < n_threads; ++w) {
      const std::size_t lo = static_cast<std::size_t>(w) * chunk;
      const std::size_t hi = std::min(n, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([lo, hi, &run_one] {
        for (std::size_t i = lo; i < hi; ++i) run_one(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

inline void write_points_csv(const std::vector<Vec2>& pts, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("cannot open for writing: " + path);
  os << "x,y\n";
  os.precision(17);
  for (const auto& p : pts) os << p.x << ',' << p.y << '\n';
}

inline void write_guide_traces_csv(const std::vector<std::vector<GuideTraceRow>>& traces,
                                   const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("cannot open for writing: " + path);
  os << "traj,step,t,x,y,v_norm,g_norm,raw_x,raw_y,prefactor,ess,phi,jitter_tries,fallback\n";
  os.precision(17);
  for (std::size_t i = 0; i < traces.size(); ++i)
    for (const auto& r : traces[i])
      os << i << ',' << r.step << ',' << r.t << ',' << r.x.x << ',' << r.x.y << ',' << norm(r.v)
         << ',' << norm(r.g) << ',' << r.raw.x << ',' << r.raw.y << ',' << r.prefactor << ','
         << r.ess << ',' << r.phi << ',' << r.jitter_tries << ',' << r.fallback << '\n';
}

}  // namespace tiltflow
