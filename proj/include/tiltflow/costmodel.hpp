#pragma once

// Lambda-conditioned cost predictors: the MSE regression baseline and the
// softmax-weighted symmetric-KL minibatch loss. The SKL loss on a batch B is
//   L = (1/|B|) sum_x (Jt(x,l) - l J(x)) (w_B^(J,l)(x) - w_B^(Jt)(x)),
// with w_B^(J,l) = |B| softmax(-l J) and w_B^(Jt) = |B| softmax(-Jt(.,l)).
// Its gradient differentiates through both factors, including the predictor
// softmax; a stop-gradient switch treats the weights as constants instead.

#include <cstdint>
#include <string>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/grid.hpp"
#include "tiltflow/net.hpp"
#include "tiltflow/rng.hpp"

namespace tiltflow {

class CostPredictor : public CostFn {
 public:
  Mlp net;
  ScalarEmbedding lemb;  // embeds ln(lambda)
  double lambda_min = 0.1, lambda_max = 100.0;

  CostPredictor() = default;
  CostPredictor(std::vector<std::uint32_t> hidden, const ScalarEmbedding& emb, Rng& rng)
      : lemb(emb) {
    net.widths.push_back(2 + static_cast<std::uint32_t>(lemb.dim()));
    for (auto h : hidden) net.widths.push_back(h);
    net.widths.push_back(1);
    init_params(net, rng);
  }

  void pack_input(const Vec2& x, double lambda, std::vector<double>& in) const {
    in.resize(2 + lemb.dim());
    in[0] = x.x;
    in[1] = x.y;
    lemb.embed(std::log(lambda), in.data() + 2);
  }

  // Predicts the full exponent, i.e. the lambda-scaled cost.
  double value(const Vec2& x, double lambda) const override {
    thread_local MlpCache cache;
    thread_local std::vector<double> in;
    pack_input(x, lambda, in);
    return forward_cached(net, in, cache)[0];
  }

  Vec2 grad(const Vec2& x, double lambda) const override {
    thread_local MlpCache cache;
    thread_local std::vector<double> in, gin;
    pack_input(x, lambda, in);
    forward_cached(net, in, cache);
    backprop(net, cache, {1.0}, nullptr, &gin);
    return {gin[0], gin[1]};
  }
};

namespace detail {

// n * softmax(values) with max-subtraction.
inline std::vector<double> batch_weights(const std::vector<double>& neg_cost) {
  const std::size_t n = neg_cost.size();
  double m = neg_cost[0];
  for (double v : neg_cost) m = std::max(m, v);
  std::vector<double> w(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(neg_cost[i] - m);
    z += w[i];
  }
  for (double& v : w) v *= static_cast<double>(n) / z;
  return w;
}

}  // namespace detail

// Batch SKL loss and exact parameter gradient. true_cost holds J(x) without
// the lambda factor. With stop_gradient the predictor softmax is frozen.
inline double skl_loss_batch(const CostPredictor& model, const std::vector<Vec2>& batch,
                             const std::vector<double>& true_cost, double lambda,
                             std::vector<double>* grads, bool stop_gradient = false) {
  const std::size_t n = batch.size();
  if (n < 2) fail("degenerate batch");
  if (true_cost.size() != n) fail("batch size mismatch");

  std::vector<double> f(n), neg_f(n), neg_lj(n);
  std::vector<MlpCache> caches(grads ? n : 1);
  std::vector<double> in;
  for (std::size_t i = 0; i < n; ++i) {
    MlpCache& c = caches[grads ? i : 0];
    model.pack_input(batch[i], lambda, in);
    f[i] = forward_cached(model.net, in, c)[0];
    neg_f[i] = -f[i];
    neg_lj[i] = -lambda * true_cost[i];
  }
  const std::vector<double> w_true = detail::batch_weights(neg_lj);
  const std::vector<double> w_model = detail::batch_weights(neg_f);

  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0, mean_dw = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = f[i] - lambda * true_cost[i];
    loss += d * (w_true[i] - w_model[i]) * inv_n;
    mean_dw += d * w_model[i] * inv_n;
  }
  if (!std::isfinite(loss)) fail("non-finite cost loss");

  if (grads) {
    grads->assign(model.net.params.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = f[i] - lambda * true_cost[i];
      double cot = (w_true[i] - w_model[i]) * inv_n;
      if (!stop_gradient) cot += w_model[i] * (d - mean_dw) * inv_n;
      backprop(model.net, caches[i], {cot}, grads, nullptr);
    }
  }
  return loss;
}

inline double mse_loss_batch(const CostPredictor& model, const std::vector<Vec2>& batch,
                             const std::vector<double>& true_cost, double lambda,
                             std::vector<double>* grads) {
  const std::size_t n = batch.size();
  if (n < 1) fail("empty batch");
  if (true_cost.size() != n) fail("batch size mismatch");
  if (grads) grads->assign(model.net.params.size(), 0.0);
  MlpCache cache;
  std::vector<double> in;
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    model.pack_input(batch[i], lambda, in);
    const double fi = forward_cached(model.net, in, cache)[0];
    const double r = fi - lambda * true_cost[i];
    loss += r * r * inv_n;
    if (grads) backprop(model.net, cache, {2.0 * r * inv_n}, grads, nullptr);
  }
  return loss;
}

// q_theta ∝ p * exp(-J_theta(x, lambda)) at cell centers, max-subtracted.
inline GridPmf model_tilted_pmf(const CostPredictor& model, const GridPmf& p, double lambda) {
  GridPmf q(p.b, p.nx, p.ny);
  std::vector<double> e(p.cells(), 0.0);
  double m = -1e300;
  for (std::uint32_t ix = 0; ix < p.nx; ++ix) {
    for (std::uint32_t iy = 0; iy < p.ny; ++iy) {
      const std::size_t i = p.idx(ix, iy);
      if (p.mass[i] > 0.0) {
        e[i] = -model.value({p.cx(ix), p.cy(iy)}, lambda);
        m = std::max(m, e[i]);
      }
    }
  }
  double z = 0.0;
  for (std::size_t i = 0; i < p.cells(); ++i) {
    q.mass[i] = p.mass[i] > 0.0 ? p.mass[i] * std::exp(e[i] - m) : 0.0;
    z += q.mass[i];
  }
  if (!(z > 0.0)) fail("tilted mass vanished");
  for (double& v : q.mass) v /= z;
  return q;
}

enum class CostLoss { skl, mse };

struct CostTrainConfig {
  std::uint32_t steps = 3000;
  std::uint32_t batch = 128;
  double lr = 1e-3;
  CostLoss loss = CostLoss::skl;
  bool stop_gradient = false;
  std::uint32_t eval_interval = 250;
  std::vector<double> eval_lambdas = {1.0, 10.0};
  std::uint32_t eval_nx = 125, eval_ny = 125;
};

struct CostMetricRow {
  std::uint32_t step;
  double lambda_eval;
  double kl_qr_qm;  // KL(q_real || q_model)
  double kl_qm_qr;
  double skl;
};

struct CostTrainResult {
  std::vector<double> loss_history;
  std::vector<CostMetricRow> metrics;
  std::uint32_t best_step = 0;
  double best_skl = 0.0;
  std::vector<double> last_params;  // final-step parameters; the model keeps the best ones
};

inline void write_cost_metrics_csv(const std::vector<CostMetricRow>& rows,
                                   const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("cannot open for writing: " + path);
  os << "step,lambda_eval,kl_q_qhat,kl_qhat_q,skl\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.step << ',' << r.lambda_eval << ',' << r.kl_qr_qm << ',' << r.kl_qm_qr << ','
       << r.skl << '\n';
}

// Trains on p-samples with log-uniform lambda per batch; tracks grid SKL to
// the true tilt on the evaluation grid and returns the min-SKL checkpoint.
inline CostTrainResult train_cost(CostPredictor& model, const GridPmf& p, const GridField& cost,
                                  const CostTrainConfig& cfg, Rng rng) {
  TrainState st;
  st.lr = cfg.lr;
  Rng data_rng = rng.stream("cost-data");
  Rng lam_rng = rng.stream("cost-lambda");

  // Evaluation world: bilinear ground truth restricted to the eval grid.
  const GridField cost_eval = resample_field(cost, cfg.eval_nx, cfg.eval_ny);
  GridPmf p_eval(p.b, cfg.eval_nx, cfg.eval_ny);
  for (std::uint32_t ix = 0; ix < p_eval.nx; ++ix)
    for (std::uint32_t iy = 0; iy < p_eval.ny; ++iy) {
      const Vec2 c{p_eval.cx(ix), p_eval.cy(iy)};
      p_eval.at(ix, iy) = std::max(interp_density(p, c), 1e-300);
    }
  double zp = 0.0;
  for (double v : p_eval.mass) zp += v;
  for (double& v : p_eval.mass) v /= zp;
  std::vector<GridPmf> q_real;
  for (double le : cfg.eval_lambdas) q_real.push_back(tilt(p_eval, cost_eval, le));

  CostTrainResult res;
  res.best_skl = 1e300;
  std::vector<double> best_params = model.net.params;
  std::vector<double> grads, true_j;

  const auto evaluate = [&](std::uint32_t step) {
    double mean_skl = 0.0;
    for (std::size_t li = 0; li < cfg.eval_lambdas.size(); ++li) {
      const GridPmf qm = model_tilted_pmf(model, p_eval, cfg.eval_lambdas[li]);
      CostMetricRow row;
      row.step = step;
      row.lambda_eval = cfg.eval_lambdas[li];
      row.kl_qr_qm = kl(q_real[li], qm);
      row.kl_qm_qr = kl(qm, q_real[li]);
      row.skl = 0.5 * (row.kl_qr_qm + row.kl_qm_qr);
      res.metrics.push_back(row);
      mean_skl += row.skl / static_cast<double>(cfg.eval_lambdas.size());
    }
    if (mean_skl < res.best_skl) {
      res.best_skl = mean_skl;
      res.best_step = step;
      best_params = model.net.params;
    }
  };

  for (std::uint32_t step = 0; step < cfg.steps; ++step) {
    const std::vector<Vec2> batch = sample(p, cfg.batch, data_rng);
    true_j.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) true_j[i] = interp(cost, batch[i]);
    const double lambda =
        std::exp(lam_rng.uniform(std::log(model.lambda_min), std::log(model.lambda_max)));
    const double loss =
        cfg.loss == CostLoss::skl
            ? skl_loss_batch(model, batch, true_j, lambda, &grads, cfg.stop_gradient)
            : mse_loss_batch(model, batch, true_j, lambda, &grads);
    train_step(model.net, st, grads);
    res.loss_history.push_back(loss);
    if ((step + 1) % cfg.eval_interval == 0) evaluate(step + 1);
  }
  if (res.metrics.empty()) evaluate(cfg.steps);
  res.last_params = model.net.params;
  model.net.params = best_params;
  return res;
}

}  // namespace tiltflow
