#pragma once

// Conditional flow-matching training of the 2D velocity field and unguided
// ODE sampling. The pairing is the affine one: x_t = t x1 + (1-t) x0 with
// x0 standard normal, regression target x1 - x0.

#include <cstdint>
#include <string>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/grid.hpp"
#include "tiltflow/net.hpp"
#include "tiltflow/rng.hpp"
#include "tiltflow/schedule.hpp"

namespace tiltflow {

class VelocityModel : public FlowField {
 public:
  Mlp net;
  ScalarEmbedding temb;
  Schedule sched;

  VelocityModel() = default;
  VelocityModel(std::vector<std::uint32_t> hidden, const ScalarEmbedding& emb, Rng& rng)
      : temb(emb) {
    net.widths.push_back(2 + static_cast<std::uint32_t>(temb.dim()));
    for (auto h : hidden) net.widths.push_back(h);
    net.widths.push_back(2);
    init_params(net, rng, /*zero_final=*/true);
  }

  void pack_input(const Vec2& x, double t, std::vector<double>& in) const {
    in.resize(2 + temb.dim());
    in[0] = x.x;
    in[1] = x.y;
    temb.embed(t, in.data() + 2);
  }

  Vec2 velocity(const Vec2& x, double t) const override {
    thread_local MlpCache cache;
    thread_local std::vector<double> in;
    pack_input(x, t, in);
    const auto& out = forward_cached(net, in, cache);
    return {out[0], out[1]};
  }

  // (dv/dx)^T cot with t held fixed: input gradient truncated to the x slots.
  Vec2 velocity_vjp(const Vec2& x, double t, const Vec2& cot) const override {
    thread_local MlpCache cache;
    thread_local std::vector<double> in, gin;
    pack_input(x, t, in);
    forward_cached(net, in, cache);
    backprop(net, cache, {cot.x, cot.y}, nullptr, &gin);
    return {gin[0], gin[1]};
  }
};

struct CfmSample {
  double t;
  Vec2 x0, x1, xt, pred;
};

// Mean squared residual over the batch and its exact parameter gradient.
// Consumes, per sample: one normal pair then one uniform.
inline double cfm_loss_batch(const VelocityModel& model, const std::vector<Vec2>& batch, Rng& rng,
                             std::vector<double>* grads,
                             std::vector<CfmSample>* records = nullptr) {
  if (batch.empty()) fail("empty batch");
  if (grads) grads->assign(model.net.params.size(), 0.0);
  if (records) records->clear();
  MlpCache cache;
  std::vector<double> in;
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const Vec2& x1 : batch) {
    const Vec2 x0 = rng.normal2();
    const double t = rng.uniform();
    const Vec2 xt = t * x1 + (1.0 - t) * x0;
    model.pack_input(xt, t, in);
    const auto& out = forward_cached(model.net, in, cache);
    const Vec2 target = x1 - x0;
    const Vec2 r{out[0] - target.x, out[1] - target.y};
    loss += norm2(r) * inv_n;
    if (grads) backprop(model.net, cache, {2.0 * r.x * inv_n, 2.0 * r.y * inv_n}, grads, nullptr);
    if (records) records->push_back({t, x0, x1, xt, Vec2{out[0], out[1]}});
  }
  if (!std::isfinite(loss)) fail("non-finite flow-matching loss");
  return loss;
}

struct FlowTrainConfig {
  std::uint32_t steps = 4000;
  std::uint32_t batch = 256;
  double lr = 1e-3;
};

// Per-step loss history; deterministic given the rng value passed in.
inline std::vector<double> train_flow(VelocityModel& model, const GridPmf& p,
                                      const FlowTrainConfig& cfg, Rng rng) {
  TrainState st;
  st.lr = cfg.lr;
  Rng data_rng = rng.stream("flow-data");
  Rng pair_rng = rng.stream("flow-pair");
  std::vector<double> history;
  history.reserve(cfg.steps);
  std::vector<double> grads;
  for (std::uint32_t step = 0; step < cfg.steps; ++step) {
    const std::vector<Vec2> batch = sample(p, cfg.batch, data_rng);
    const double loss = cfm_loss_batch(model, batch, pair_rng, &grads);
    train_step(model.net, st, grads);
    history.push_back(loss);
  }
  return history;
}

struct OdeConfig {
  std::uint32_t n_steps = 100;
  enum class Integrator { euler, midpoint } integrator = Integrator::euler;
  double t_start = 0.0;
  double t_end = 0.98;  // the step to t = 1 is replaced by the posterior-mean clamp
  bool terminal_clamp = true;
  std::uint32_t trace_count = 0;  // record traces for this many leading trajectories
};

struct TraceRow {
  std::uint32_t step;
  double t;
  Vec2 x;
  Vec2 v;
  Vec2 g;  // guidance drift; zero for unguided sampling
};

struct SamplerTrace {
  std::vector<TraceRow> rows;
};

inline void write_traces_csv(const std::vector<SamplerTrace>& traces, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("cannot open for writing: " + path);
  os << "traj,step,t,x,y,v_norm,g_norm\n";
  os.precision(17);
  for (std::size_t i = 0; i < traces.size(); ++i)
    for (const auto& r : traces[i].rows)
      os << i << ',' << r.step << ',' << r.t << ',' << r.x.x << ',' << r.x.y << ','
         << norm(r.v) << ',' << norm(r.g) << '\n';
}

// One unguided trajectory from the given per-trajectory stream.
inline Vec2 ode_trajectory(const FlowField& flow, const OdeConfig& cfg, Rng& rng,
                           SamplerTrace* trace) {
  Vec2 x = rng.normal2();
  const double dt = (cfg.t_end - cfg.t_start) / cfg.n_steps;
  for (std::uint32_t k = 0; k < cfg.n_steps; ++k) {
    const double t = cfg.t_start + k * dt;
    const Vec2 v = flow.velocity(x, t);
    if (trace) trace->rows.push_back({k, t, x, v, Vec2{}});
    if (cfg.integrator == OdeConfig::Integrator::euler) {
      x += dt * v;
    } else {
      const Vec2 xm = x + (0.5 * dt) * v;
      x += dt * flow.velocity(xm, t + 0.5 * dt);
    }
    if (!is_finite(x)) fail("trajectory diverged");
  }
  if (cfg.terminal_clamp) {
    const Vec2 v = flow.velocity(x, cfg.t_end);
    if (trace) trace->rows.push_back({cfg.n_steps, cfg.t_end, x, v, Vec2{}});
    x += (1.0 - cfg.t_end) * v;
    if (!is_finite(x)) fail("trajectory diverged");
  }
  return x;
}

// Terminal points for n trajectories; per-trajectory substreams keep results
// independent of evaluation order.
inline std::vector<Vec2> sample_ode(const FlowField& flow, std::size_t n, const OdeConfig& cfg,
                                    const Rng& rng, std::vector<SamplerTrace>* traces = nullptr) {
  std::vector<Vec2> out(n);
  std::size_t n_traced = traces ? std::min<std::size_t>(cfg.trace_count, n) : 0;
  if (traces) traces->assign(n_traced, SamplerTrace{});
  for (std::size_t i = 0; i < n; ++i) {
    Rng ri = rng.stream("traj", i);
    SamplerTrace* tr = i < n_traced ? &(*traces)[i] : nullptr;
    out[i] = ode_trajectory(flow, cfg, ri, tr);
  }
  return out;
}

}  // namespace tiltflow
