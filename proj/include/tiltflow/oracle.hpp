#pragma once

// Independent ground truth used only by tests and the check command: a
// closed-form Gaussian world for the schedule/guidance identities,
// finite-difference Jacobians, dense replays of the compact secant recursion,
// eigendecomposition square roots, tensor-product Gauss-Hermite quadrature
// for exact tilted expectations, and the covariance-gap bound checker.
// Everything here is dense and O(d^2) or worse on purpose; production paths
// never call into it.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/grid.hpp"
#include "tiltflow/rng.hpp"
#include "tiltflow/schedule.hpp"
#include "tiltflow/secant.hpp"

namespace tiltflow {

using Eigen::Matrix2d;
using Eigen::Vector2d;

inline Vector2d to_eigen(const Vec2& v) { return Vector2d(v.x, v.y); }
inline Vec2 from_eigen(const Vector2d& v) { return {v[0], v[1]}; }

// --- analytic Gaussian world ---------------------------------------------------

// Data law p = N(mean, S). Everything downstream of the rectified-linear path
// is then available in closed form.
struct GaussianWorld {
  Vec2 mean{0.0, 0.0};
  Matrix2d S = Matrix2d::Identity();
};

inline Matrix2d marginal_cov(const GaussianWorld& w, double t) {
  return t * t * w.S + (1.0 - t) * (1.0 - t) * Matrix2d::Identity();
}

struct PosteriorMoments {
  Vec2 mean;
  Matrix2d cov;
};

// Conditional of the endpoint given x_t = t x1 + (1-t) eps.
inline PosteriorMoments analytic_posterior(const GaussianWorld& w, const Vec2& x_t, double t) {
  const Matrix2d M = marginal_cov(w, t);
  const Matrix2d Minv = M.inverse();
  const Vector2d m = to_eigen(w.mean) + t * w.S * Minv * (to_eigen(x_t) - t * to_eigen(w.mean));
  const Matrix2d cov = (1.0 - t) * (1.0 - t) * w.S * Minv;
  return {from_eigen(m), cov};
}

// dE[x1 | x_t]/dx_t, symmetric because S and the marginal covariance commute.
inline Matrix2d posterior_jacobian(const GaussianWorld& w, double t) {
  return t * w.S * marginal_cov(w, t).inverse();
}

inline Vec2 analytic_velocity(const GaussianWorld& w, const Vec2& x, double t) {
  const PosteriorMoments pm = analytic_posterior(w, x, t);
  return (1.0 / (1.0 - t)) * (pm.mean - x);
}

inline Vec2 analytic_score(const GaussianWorld& w, const Vec2& x, double t) {
  const Matrix2d M = marginal_cov(w, t);
  return from_eigen(-(M.inverse() * (to_eigen(x) - t * to_eigen(w.mean))).eval());
}

// FlowField view of the closed-form world; drives samplers and guidance
// estimators without any training.
class AnalyticGaussianFlow : public FlowField {
 public:
  explicit AnalyticGaussianFlow(GaussianWorld w) : w_(w) {}

  Vec2 velocity(const Vec2& x, double t) const override { return analytic_velocity(w_, x, t); }

  Vec2 velocity_vjp(const Vec2& x, double t, const Vec2& cot) const override {
    (void)x;
    const Matrix2d A =
        (posterior_jacobian(w_, t) - Matrix2d::Identity()) * (1.0 / (1.0 - t));
    return from_eigen((A.transpose() * to_eigen(cot)).eval());
  }

  const GaussianWorld& world() const { return w_; }

 private:
  GaussianWorld w_;
};

// Quadratic exponent 0.5 lambda (x-c)^T H (x-c); the workhorse cost for every
// conjugacy and bound check.
class QuadraticCost : public CostFn {
 public:
  QuadraticCost(const Matrix2d& H, const Vec2& c) : H_(H), c_(c) {}

  double value(const Vec2& x, double lambda) const override {
    const Vector2d d = to_eigen(x - c_);
    return 0.5 * lambda * d.dot(H_ * d);
  }

  Vec2 grad(const Vec2& x, double lambda) const override {
    return from_eigen((lambda * H_ * to_eigen(x - c_)).eval());
  }

  const Matrix2d& H() const { return H_; }
  const Vec2& center() const { return c_; }

 private:
  Matrix2d H_;
  Vec2 c_;
};

// --- finite differences --------------------------------------------------------

inline Matrix2d fd_jacobian(const std::function<Vec2(const Vec2&)>& f, const Vec2& x, double h) {
  Matrix2d J;
  const Vec2 ex{h, 0.0}, ey{0.0, h};
  const Vec2 dx = (1.0 / (2.0 * h)) * (f(x + ex) - f(x - ex));
  const Vec2 dy = (1.0 / (2.0 * h)) * (f(x + ey) - f(x - ey));
  J << dx.x, dy.x, dx.y, dy.y;
  return J;
}

inline Vec2 fd_grad(const std::function<double(const Vec2&)>& f, const Vec2& x, double h) {
  const Vec2 ex{h, 0.0}, ey{0.0, h};
  return {(f(x + ex) - f(x - ex)) / (2.0 * h), (f(x + ey) - f(x - ey)) / (2.0 * h)};
}

// --- dense secant references ----------------------------------------------------

// Literal rank-two recursion B+ = u (V^T B V + rho y y^T) + w I with
// V = I - rho s y^T; verification-only counterpart of update_B.
inline MatrixXd dense_B_recursion(const MemoryQueue& queue, double gamma0, Eigen::Index dim) {
  MatrixXd B = gamma0 * MatrixXd::Identity(dim, dim);
  for (const SecantPair& pr : queue.pairs) {
    const double sy = pr.y_hat.dot(pr.s);
    if (!(sy > 0.0)) fail("curvature violated");
    const double rho = 1.0 / sy;
    const MatrixXd V = MatrixXd::Identity(dim, dim) - rho * pr.s * pr.y_hat.transpose();
    B = pr.u * (V.transpose() * B * V + rho * pr.y_hat * pr.y_hat.transpose()) +
        pr.w * MatrixXd::Identity(dim, dim);
  }
  return B;
}

// Symmetric PSD square root by eigendecomposition.
inline MatrixXd dense_sqrt(const MatrixXd& B) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(B);
  if (es.info() != Eigen::Success) fail("eigendecomposition failed");
  VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -1e-10) fail("negative eigenvalue in square-root oracle");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// --- Gauss-Hermite quadrature ---------------------------------------------------

struct GaussHermite {
  std::vector<double> nodes;    // roots of H_n, weight e^{-x^2}
  std::vector<double> weights;  // sum w_i = sqrt(pi)
};

// Golub-Welsch: nodes are eigenvalues of the symmetric tridiagonal Jacobi
// matrix with off-diagonals sqrt(i/2); weights come from the first components
// of the eigenvectors.
inline GaussHermite gauss_hermite(int n) {
  MatrixXd J = MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double b = std::sqrt(static_cast<double>(i) / 2.0);
    J(i, i - 1) = J(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(J);
  if (es.info() != Eigen::Success) fail("eigendecomposition failed");
  GaussHermite gh;
  gh.nodes.resize(n);
  gh.weights.resize(n);
  const double sqrt_pi = std::sqrt(std::acos(-1.0));
  for (int i = 0; i < n; ++i) {
    gh.nodes[i] = es.eigenvalues()[i];
    const double v0 = es.eigenvectors()(0, i);
    gh.weights[i] = sqrt_pi * v0 * v0;
  }
  return gh;
}

struct TiltedMoments {
  Vec2 shift;        // E_tilted[z], z = x1 - mu
  double z2 = 0.0;   // E_tilted[|z|^2]
  double log_z = 0.0;  // log E[e^{-J}] under the untilted proposal
};

// Exact tilted moments of N(mu, Sigma) reweighted by exp(-cost_at(x)), via a
// tensor-product rule; cost_at must already fold in lambda.
inline TiltedMoments quadrature_tilted_moments(const std::function<double(const Vec2&)>& cost_at,
                                               const Vec2& mu, const Matrix2d& Sigma,
                                               int order = 40) {
  Eigen::LLT<Matrix2d> llt(Sigma);
  if (llt.info() != Eigen::Success) fail("covariance not SPD");
  const Matrix2d A = llt.matrixL();
  const GaussHermite gh = gauss_hermite(order);
  const double sqrt2 = std::sqrt(2.0);
  const double pi = std::acos(-1.0);

  const int n = order;
  std::vector<double> logw(static_cast<std::size_t>(n) * n);
  std::vector<Vec2> zs(logw.size());
  std::vector<double> base(logw.size());
  double lmax = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * n + j;
      const Vector2d e(sqrt2 * gh.nodes[i], sqrt2 * gh.nodes[j]);
      const Vec2 z = from_eigen((A * e).eval());
      zs[k] = z;
      base[k] = gh.weights[i] * gh.weights[j] / pi;
      logw[k] = -cost_at(mu + z);
      if (logw[k] > lmax) lmax = logw[k];
    }
  if (!std::isfinite(lmax)) fail("cost overflow");
  double zsum = 0.0, z2 = 0.0;
  Vec2 acc{0.0, 0.0};
  for (std::size_t k = 0; k < logw.size(); ++k) {
    const double w = base[k] * std::exp(logw[k] - lmax);
    zsum += w;
    acc += w * zs[k];
    z2 += w * norm2(zs[k]);
  }
  if (!(zsum > 0.0)) fail("cost overflow");
  return {(1.0 / zsum) * acc, z2 / zsum, std::log(zsum) + lmax};
}

struct QuadGuidance {
  Vec2 g_lgd;  // (b sig2/alpha) Bt^T Sigma^{-1} shift
  Vec2 g_sim;  // b * shift
  TiltedMoments moments;
};

// Population forms of the two fixed-proposal guidance terms under proposal
// N(mu, Sigma); Bt and sig2_over_alpha supply the chain-rule factors that the
// estimators inherit from the posterior mean.
inline QuadGuidance quadrature_guidance(const std::function<double(const Vec2&)>& cost_at,
                                        const Vec2& mu, const Matrix2d& Sigma, double b_t,
                                        double sig2_over_alpha, const Matrix2d& Bt,
                                        int order = 40) {
  QuadGuidance out;
  out.moments = quadrature_tilted_moments(cost_at, mu, Sigma, order);
  const Vector2d shift = to_eigen(out.moments.shift);
  out.g_lgd = from_eigen(
      (b_t * sig2_over_alpha * Bt.transpose() * Sigma.inverse() * shift).eval());
  out.g_sim = from_eigen((b_t * shift).eval());
  return out;
}

// Conjugate reference: N(mu, Sigma) tilted by exp(-0.5 (x-c)^T P0 (x-c)) is
// Gaussian with precision Sigma^{-1} + P0.
inline PosteriorMoments tilted_gaussian_closed_form(const Vec2& mu, const Matrix2d& Sigma,
                                                    const Matrix2d& P0, const Vec2& c) {
  const Matrix2d P = Sigma.inverse() + P0;
  const Matrix2d cov = P.inverse();
  const Vector2d m = cov * (Sigma.inverse() * to_eigen(mu) + P0 * to_eigen(c));
  return {from_eigen(m), cov};
}

// Self-normalized MC counterpart with a delta-method standard error per
// component; used to budget the MC-vs-quadrature comparisons.
struct McTiltedStats {
  Vec2 shift;
  Vec2 se;
  double ess = 0.0;
};

inline McTiltedStats mc_tilted_stats(const std::function<double(const Vec2&)>& cost_at,
                                     const Vec2& mu, const Matrix2d& Sigma, std::size_t n,
                                     Rng& rng) {
  Eigen::LLT<Matrix2d> llt(Sigma);
  if (llt.info() != Eigen::Success) fail("covariance not SPD");
  const Matrix2d A = llt.matrixL();
  std::vector<Vec2> zs(n);
  std::vector<double> logw(n);
  double lmax = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 eps = rng.normal2();
    zs[i] = from_eigen((A * to_eigen(eps)).eval());
    logw[i] = -cost_at(mu + zs[i]);
    if (logw[i] > lmax) lmax = logw[i];
  }
  if (!std::isfinite(lmax)) fail("cost overflow");
  double wsum = 0.0, w2sum = 0.0;
  Vec2 acc{0.0, 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    const double w = std::exp(logw[i] - lmax);
    wsum += w;
    w2sum += w * w;
    acc += w * zs[i];
  }
  if (!(wsum > 0.0)) fail("cost overflow");
  McTiltedStats st;
  st.shift = (1.0 / wsum) * acc;
  st.ess = wsum * wsum / w2sum;
  Vec2 var{0.0, 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    const double w = std::exp(logw[i] - lmax) / wsum;
    const Vec2 d = zs[i] - st.shift;
    var += Vec2{w * w * d.x * d.x, w * w * d.y * d.y};
  }
  st.se = {std::sqrt(var.x), std::sqrt(var.y)};
  return st;
}

// --- population loss functionals ------------------------------------------------

struct PopulationFunctionals {
  double skl = 0.0;   // E_p[lambda (Jm - Jt) (w_true - w_model)]
  double mse = 0.0;   // E_p[(lambda (Jm - Jt))^2]
  double expw = 0.0;  // E_p[(w_model - w_true)^2]
  double var = 0.0;   // Var_p[Jm - Jt]
};

// Grid-exact loss functionals between a true and a model cost under p. Each
// weight field is e^{-lambda J} normalized to unit mean under p, restricted
// to the supported cells.
inline PopulationFunctionals population_functionals(const GridPmf& p,
                                                    const std::vector<double>& j_true,
                                                    const std::vector<double>& j_model,
                                                    double lambda) {
  if (j_true.size() != p.cells() || j_model.size() != p.cells())
    fail("geometry mismatch between pmf and cost field");
  const auto weights = [&](const std::vector<double>& f) {
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
    if (!(z > 0.0)) fail("tilted mass vanished");
    for (double& v : w) v /= z;
    return w;
  };
  const std::vector<double> wt = weights(j_true);
  const std::vector<double> wm = weights(j_model);
  PopulationFunctionals s;
  double mean_d = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < p.cells(); ++i) {
    if (p.mass[i] <= 0.0) continue;
    const double d = lambda * (j_model[i] - j_true[i]);
    s.skl += p.mass[i] * d * (wt[i] - wm[i]);
    s.mse += p.mass[i] * d * d;
    s.expw += p.mass[i] * (wm[i] - wt[i]) * (wm[i] - wt[i]);
    mean_d += p.mass[i] * (j_model[i] - j_true[i]);
    m2 += p.mass[i] * (j_model[i] - j_true[i]) * (j_model[i] - j_true[i]);
  }
  s.var = m2 - mean_d * mean_d;
  return s;
}

// --- covariance-gap bound -------------------------------------------------------

struct BoundReport {
  double lhs = 0.0;    // |g_lgd - g_sim|^2
  double bound = 0.0;  // b^2 |Sigma^{-1}|_2^2 E_tilted|z|^2 e_t
  double e_t = 0.0;
  bool pass = false;   // lhs <= bound (1 + 1e-6)
  double t = 0.0;
  Vec2 x_t;
};

inline double spectral_norm(const Matrix2d& M) {
  return M.jacobiSvd().singularValues()[0];
}

// Both guidance terms by quadrature with a shared proposal, the mismatch
// e_t = |Sigma - (sig^2/alpha) Bt|_2^2 from the analytic posterior-mean
// Jacobian, and the resulting inequality.
inline BoundReport check_theorem2(const GaussianWorld& w, const CostFn& cost, double lambda,
                                  const Schedule& sched, const Vec2& x_t, double t,
                                  const Matrix2d& Sigma_proposal, int order = 40) {
  const Coeffs cf = coeffs(sched, t);
  const double s2a = cf.sigma * cf.sigma / cf.alpha;
  const Matrix2d Bt = posterior_jacobian(w, t);
  const Vec2 mu = analytic_posterior(w, x_t, t).mean;
  const auto cost_at = [&cost, lambda](const Vec2& p) { return cost.value(p, lambda); };
  const QuadGuidance qg =
      quadrature_guidance(cost_at, mu, Sigma_proposal, cf.b, s2a, Bt, order);

  BoundReport r;
  r.t = t;
  r.x_t = x_t;
  r.lhs = norm2(qg.g_lgd - qg.g_sim);
  const Matrix2d delta = Sigma_proposal - s2a * Bt;
  r.e_t = spectral_norm(delta) * spectral_norm(delta);
  const double sinv = spectral_norm(Sigma_proposal.inverse());
  r.bound = cf.b * cf.b * sinv * sinv * qg.moments.z2 * r.e_t;
  r.pass = r.lhs <= r.bound * (1.0 + 1e-6);
  return r;
}

inline std::string bound_report_json(const BoundReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "{\"lhs\":" << r.lhs << ",\"bound\":" << r.bound << ",\"e_t\":" << r.e_t
     << ",\"pass\":" << (r.pass ? "true" : "false") << ",\"t\":" << r.t << ",\"x\":" << r.x_t.x
     << ",\"y\":" << r.x_t.y << "}";
  return os.str();
}

inline void write_bound_reports_jsonl(const std::vector<BoundReport>& rs,
                                      const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("cannot open for writing: " + path);
  for (const auto& r : rs) os << bound_report_json(r) << '\n';
}

}  // namespace tiltflow
