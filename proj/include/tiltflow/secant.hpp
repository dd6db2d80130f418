#pragma once

// Secant covariance machinery for the trajectory-adapted sampler: damped
// pairs, a fixed-capacity memory queue, the compact proxy B = gamma I + U
// Gamma U^T rebuilt by replay, and its semi-numerical square root. The
// compact recursion reproduces the dense rank-two update
//   B+ = u (V^T B V + rho y y^T) + w I,  V = I - rho s y^T,  rho = 1/(y^T s),
// without ever forming a d x d matrix; the square root reduces to a Cholesky
// factorization of the r x r core after a thin QR of U.

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/flow.hpp"
#include "tiltflow/rng.hpp"
#include "tiltflow/schedule.hpp"
#include "tiltflow/tilted.hpp"

namespace tiltflow {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct SecantPair {
  VectorXd s;      // x_{k+1} - x_k
  VectorXd y_hat;  // damped curvature target
  double u = 1.0;  // b(t_k)/b(t_{k+1})
  double w = 0.0;  // (a(t_k) - a(t_{k+1}))/b(t_{k+1})
};

struct MemoryQueue {
  std::size_t capacity = 8;
  std::deque<SecantPair> pairs;  // oldest -> newest
};

// FIFO push; returns true when an old pair was evicted.
inline bool push_pair(MemoryQueue& q, SecantPair pr) {
  q.pairs.push_back(std::move(pr));
  if (q.pairs.size() > q.capacity) {
    q.pairs.pop_front();
    return true;
  }
  return false;
}

struct CompactB {
  double gamma = 1.0;
  Eigen::Index dim = 0;
  MatrixXd U;      // dim x m, interleaved (s, y_hat) columns, m = 2 * pairs
  MatrixXd Gamma;  // m x m symmetric

  static CompactB identity(Eigen::Index d, double gamma) {
    CompactB B;
    B.gamma = gamma;
    B.dim = d;
    B.U.resize(d, 0);
    B.Gamma.resize(0, 0);
    return B;
  }
};

inline VectorXd apply_B(const CompactB& B, const VectorXd& x) {
  if (B.U.cols() == 0) return B.gamma * x;
  return B.gamma * x + B.U * (B.Gamma * (B.U.transpose() * x));
}

inline MatrixXd dense_of(const CompactB& B) {
  MatrixXd D = B.gamma * MatrixXd::Identity(B.dim, B.dim);
  if (B.U.cols() > 0) D += B.U * B.Gamma * B.U.transpose();
  return D;
}

struct DampResult {
  VectorXd y_hat;
  double phi = 1.0;
  double s_dot_y_hat = 0.0;  // band numerator after damping
  double s_dot_Bs = 0.0;     // band reference
};

// Pulls the pair's curvature into the band
//   (1 - sigma2) s^T B s <= s^T y_hat <= (1 + sigma3) s^T B s
// by blending y with B s:
//   tau = s^T y / s^T B s;
//   phi = sigma2/(1 - tau) if tau < 1 - sigma2,
//         sigma3/(tau - 1) if tau > 1 + sigma3, else 1.
inline DampResult damp(const VectorXd& y, const VectorXd& s, const CompactB& B, double sigma2,
                       double sigma3) {
  const VectorXd Bs = apply_B(B, s);
  const double sBs = s.dot(Bs);
  if (!(sBs > 0.0)) fail("B lost positive definiteness");
  const double tau = s.dot(y) / sBs;
  double phi = 1.0;
  if (tau < 1.0 - sigma2)
    phi = sigma2 / (1.0 - tau);
  else if (tau > 1.0 + sigma3)
    phi = sigma3 / (tau - 1.0);
  VectorXd y_hat = phi * y + (1.0 - phi) * Bs;
  const double sy = s.dot(y_hat);
  return {std::move(y_hat), phi, sy, sBs};
}

// Replay the queue from gamma_init I. Per pair, extend the core:
//   base case        Gamma = [[0, -gamma rho], [-gamma rho, rho + rho^2 gamma s^T s]]
//   general case     q = U^T s, p = Gamma q, tau = q^T p,
//                    new s column zero against the old block, new y column
//                    (-rho p, -gamma rho), corner rho (1 + rho (tau + gamma s^T s)),
// then rescale Gamma <- u Gamma, gamma <- u gamma + w.
// When max_secant_resid is given, the relative residual ||B~ s - y_hat|| /
// ||y_hat|| of each pre-rescale extension is folded into it (max); the
// construction makes it zero up to roundoff.
inline CompactB update_B(const MemoryQueue& queue, double gamma_init, Eigen::Index dim,
                         double* max_secant_resid = nullptr) {
  if (!(gamma_init > 0.0)) fail("gamma must be positive");
  CompactB B = CompactB::identity(dim, gamma_init);
  for (const SecantPair& pr : queue.pairs) {
    const double sy = pr.y_hat.dot(pr.s);
    if (!(sy > 0.0)) fail("curvature violated");
    const double rho = 1.0 / sy;
    const double ss = pr.s.squaredNorm();
    const Eigen::Index r = B.U.cols();
    MatrixXd U2(dim, r + 2);
    MatrixXd G2 = MatrixXd::Zero(r + 2, r + 2);
    if (r == 0) {
      U2.col(0) = pr.s;
      U2.col(1) = pr.y_hat;
      G2(0, 1) = G2(1, 0) = -B.gamma * rho;
      G2(1, 1) = rho + rho * rho * B.gamma * ss;
    } else {
      const VectorXd q = B.U.transpose() * pr.s;
      const VectorXd p = B.Gamma * q;
      const double tau = q.dot(p);
      U2.leftCols(r) = B.U;
      U2.col(r) = pr.s;
      U2.col(r + 1) = pr.y_hat;
      G2.topLeftCorner(r, r) = B.Gamma;
      G2.block(0, r + 1, r, 1) = -rho * p;
      G2.block(r + 1, 0, 1, r) = (-rho * p).transpose();
      G2(r, r + 1) = G2(r + 1, r) = -B.gamma * rho;
      G2(r + 1, r + 1) = rho * (1.0 + rho * (tau + B.gamma * ss));
    }
    if (max_secant_resid) {
      const VectorXd Bts = B.gamma * pr.s + U2 * (G2 * (U2.transpose() * pr.s));
      const double denom = std::max(pr.y_hat.norm(), 1e-300);
      *max_secant_resid = std::max(*max_secant_resid, (Bts - pr.y_hat).norm() / denom);
    }
    B.U = std::move(U2);
    B.Gamma = pr.u * G2;
    B.gamma = pr.u * B.gamma + pr.w;
  }
  return B;
}

struct SqrtFactor {
  double sqrt_gamma = 1.0;
  MatrixXd Q;     // d x rho, orthonormal columns; empty for the isotropic case
  MatrixXd core;  // rho x rho, equals L_C - sqrt_gamma I
  bool fallback = false;
  int jitter_tries = 0;     // failed Cholesky attempts before success
  double jitter_used = 0.0; // diagonal shift that finally succeeded
};

// apply_L(x) = sqrt(gamma) x + Q (L_C - sqrt(gamma) I) Q^T x, so that
// L L^T = gamma I + Q (C - gamma I) Q^T = B.
inline VectorXd apply_L(const SqrtFactor& F, const VectorXd& x) {
  if (F.Q.cols() == 0) return F.sqrt_gamma * x;
  return F.sqrt_gamma * x + F.Q * (F.core * (F.Q.transpose() * x));
}

inline VectorXd apply_Lt(const SqrtFactor& F, const VectorXd& x) {
  if (F.Q.cols() == 0) return F.sqrt_gamma * x;
  return F.sqrt_gamma * x + F.Q * (F.core.transpose() * (F.Q.transpose() * x));
}

// Thin QR of U, Cholesky of the symmetrized core C = gamma I + R Gamma R^T
// with escalating diagonal jitter; on total failure fall back to the
// isotropic factor rather than aborting a sampling run.
inline SqrtFactor semi_numerical_sqrt(const CompactB& B) {
  if (!(B.gamma > 0.0)) fail("gamma must be positive");
  SqrtFactor F;
  F.sqrt_gamma = std::sqrt(B.gamma);
  const Eigen::Index r = B.U.cols();
  if (r == 0) return F;
  const Eigen::Index d = B.U.rows();
  const Eigen::Index rho = std::min(d, r);

  Eigen::HouseholderQR<MatrixXd> qr(B.U);
  MatrixXd Q = qr.householderQ() * MatrixXd::Identity(d, rho);
  MatrixXd R = MatrixXd(qr.matrixQR().topRows(rho).triangularView<Eigen::Upper>());

  MatrixXd C = B.gamma * MatrixXd::Identity(rho, rho) + R * B.Gamma * R.transpose();
  C = 0.5 * (C + C.transpose()).eval();

  const double scale = std::max(1.0, C.trace() / static_cast<double>(rho));
  double jitter = 0.0;
  while (true) {
    Eigen::LLT<MatrixXd> llt(jitter == 0.0
                                 ? C
                                 : MatrixXd(C + jitter * MatrixXd::Identity(rho, rho)));
    if (llt.info() == Eigen::Success) {
      F.Q = std::move(Q);
      F.core = MatrixXd(llt.matrixL()) - F.sqrt_gamma * MatrixXd::Identity(rho, rho);
      F.jitter_used = jitter;
      return F;
    }
    ++F.jitter_tries;
    if (jitter == 0.0) {
      jitter = 1e-10 * scale;
    } else {
      jitter *= 10.0;
      if (jitter > 1e-4 * scale) break;
    }
  }
  F.fallback = true;  // isotropic sqrt(gamma) I
  return F;
}

// --- full sampler step --------------------------------------------------------

struct SecantConfig {
  std::size_t capacity = 8;
  double sigma2 = 0.2;
  double sigma3 = 1.0;
  double gamma0 = 1.0;
  double s_tol_scale = 1e-12;  // skip pairs with ||s|| <= s_tol_scale (1 + ||x||)
};

struct SaMcDiag {
  std::uint32_t step = 0;
  double t = 0.0;
  double phi = 1.0;        // damping factor of the pair formed this step (1 if none)
  double gamma = 1.0;      // gamma of the compact form used this step
  std::uint32_t m = 0;     // queue length after the push
  double ess = 0.0;
  int jitter_tries = 0;
  bool fallback = false;
  bool pair_skipped = false;
  bool evicted = false;  // push dropped a pair; damping reference predates the rebuild
  Vec2 g;                // applied guidance drift
  Vec2 raw_shift;        // unscaled tilted-mean shift
  double prefactor = 0.0;   // b_t, so g = prefactor * raw_shift
  double s_dot_y_hat = 0.0;  // band check: must sit in [(1-sigma2), (1+sigma3)] * s_dot_Bs
  double s_dot_Bs = 0.0;
  double secant_resid = 0.0;  // max relative residual of the replay this step
};

inline std::size_t footprint_doubles(const MemoryQueue& q) {
  std::size_t n = 0;
  for (const auto& pr : q.pairs)
    n += static_cast<std::size_t>(pr.s.size() + pr.y_hat.size()) + 2;
  return n;
}

inline std::size_t footprint_doubles(const CompactB& B) {
  return 1 + static_cast<std::size_t>(B.U.size() + B.Gamma.size());
}

inline std::size_t footprint_doubles(const SqrtFactor& F) {
  return 2 + static_cast<std::size_t>(F.Q.size() + F.core.size());
}

struct SaMcState {
  SecantConfig cfg;
  Schedule sched;
  std::vector<double> t_grid;  // knots t_0 < ... < t_K
  std::size_t k = 0;
  Vec2 x;
  bool has_prev = false;
  Vec2 prev_x, prev_v;
  double prev_t = 0.0;
  MemoryQueue queue;
  CompactB B = CompactB::identity(2, 1.0);
  double gamma_hat = 1.0;

  static SaMcState init(const SecantConfig& cfg, const Schedule& sched,
                        std::vector<double> t_grid, const Vec2& x0) {
    SaMcState st;
    st.cfg = cfg;
    st.sched = sched;
    st.t_grid = std::move(t_grid);
    st.x = x0;
    st.queue.capacity = cfg.capacity;
    st.B = CompactB::identity(2, cfg.gamma0);
    st.gamma_hat = cfg.gamma0;
    return st;
  }

  bool done() const { return k + 1 >= t_grid.size(); }
};

// One full sampler iteration: velocity query, secant pair formation against
// the previous compact form, damping, Jacobi rescale, queue push, rebuild,
// one-step prediction, square root, tilted mean, drift assembly, Euler step.
inline Vec2 sa_mc_step(SaMcState& st, const FlowField& flow, const CostFn& cost, double lambda,
                       std::size_t n_samples, Rng& rng, bool antithetic = false,
                       SaMcDiag* diag = nullptr) {
  if (st.done()) fail("time grid exhausted");
  const double t_k = st.t_grid[st.k];
  const double t_next = st.t_grid[st.k + 1];
  const Vec2 v_k = flow.velocity(st.x, t_k);

  SaMcDiag d;
  d.step = static_cast<std::uint32_t>(st.k);
  d.t = t_k;

  if (st.has_prev) {
    VectorXd s(2), r(2);
    s << st.x.x - st.prev_x.x, st.x.y - st.prev_x.y;
    r << v_k.x - st.prev_v.x, v_k.y - st.prev_v.y;
    const double s_tol = st.cfg.s_tol_scale * (1.0 + norm(st.x));
    if (s.norm() <= s_tol) {
      d.pair_skipped = true;
    } else {
      const Coeffs cp = coeffs(st.sched, st.prev_t);
      const VectorXd y = (-cp.a / cp.b) * s + r / cp.b;
      const DampResult dr = damp(y, s, st.B, st.cfg.sigma2, st.cfg.sigma3);
      d.phi = dr.phi;
      d.s_dot_y_hat = dr.s_dot_y_hat;
      d.s_dot_Bs = dr.s_dot_Bs;
      st.gamma_hat = dr.y_hat.dot(s) / s.squaredNorm();
      const StepCoeffs uw = step_coeffs(st.sched, st.prev_t, t_k);
      d.evicted = push_pair(st.queue, {s, dr.y_hat, uw.u, uw.w});
      st.B = update_B(st.queue, st.gamma_hat, 2, diag ? &d.secant_resid : nullptr);
    }
  }
  d.gamma = st.B.gamma;
  d.m = static_cast<std::uint32_t>(st.queue.pairs.size());

  const Vec2 x1 = posterior_mean(st.sched, st.x, v_k, t_k);
  const SqrtFactor F = semi_numerical_sqrt(st.B);
  d.jitter_tries = F.jitter_tries;
  d.fallback = F.fallback;

  // Proposal covariance sigma_h^2 B: the secant matrix fixes the shape, the
  // conditional std fixes the size so the cloud shrinks with sigma_t^2/alpha_t
  // like the matched Gaussian covariance does.
  const double sig = sigma_h(t_k);
  const auto noise_map = [&F, sig](const Vec2& eps) {
    VectorXd e(2);
    e << eps.x, eps.y;
    const VectorXd xi = apply_L(F, e);
    return Vec2{sig * xi[0], sig * xi[1]};
  };
  const auto cost_at = [&cost, lambda](const Vec2& p) { return cost.value(p, lambda); };
  const TiltedMeanResult tm = tilted_mean(x1, noise_map, cost_at, n_samples, rng, antithetic);
  d.ess = tm.ess;
  d.raw_shift = tm.shift;
  d.prefactor = coeffs(st.sched, t_k).b;
  const Vec2 g = d.prefactor * tm.shift;
  d.g = g;

  const Vec2 drift = v_k + g;
  const Vec2 x_next = st.x + (t_next - t_k) * drift;
  if (!is_finite(x_next)) fail("trajectory diverged");

  st.prev_x = st.x;
  st.prev_v = v_k;
  st.prev_t = t_k;
  st.has_prev = true;
  st.x = x_next;
  st.k += 1;
  if (diag) *diag = d;
  return x_next;
}

inline void write_secant_diags_csv(const std::vector<SaMcDiag>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("cannot open for writing: " + path);
  os << "step,t,phi,gamma,m,ess,jitter_tries,fallback,pair_skipped,evicted,"
        "g_x,g_y,raw_x,raw_y,prefactor\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.step << ',' << r.t << ',' << r.phi << ',' << r.gamma << ',' << r.m << ',' << r.ess
       << ',' << r.jitter_tries << ',' << r.fallback << ',' << r.pair_skipped << ',' << r.evicted
       << ',' << r.g.x << ',' << r.g.y << ',' << r.raw_shift.x << ',' << r.raw_shift.y << ','
       << r.prefactor << '\n';
}

}  // namespace tiltflow
