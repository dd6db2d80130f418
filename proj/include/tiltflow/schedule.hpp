#pragma once

// Affine flow path alpha_t = t, sigma_t = 1 - t and the derived coefficients
//   a_t = sigma_dot/sigma, b_t = (alpha_dot*sigma - sigma_dot*alpha)/sigma,
//   s_t = b_t sigma_t^2 / alpha_t,
// all of which are singular at an endpoint and therefore evaluated at the
// eps_t-clamped time. alpha, sigma and their rates stay exact at the raw t.

#include <algorithm>
#include <cmath>

#include "tiltflow/common.hpp"

namespace tiltflow {

struct Schedule {
  double eps_t = 1e-3;
};

struct Coeffs {
  double t;
  double alpha, sigma, alpha_dot, sigma_dot;
  double a, b, s;
};

struct StepCoeffs {
  double u;  // b(t_k) / b(t_next)
  double w;  // (a(t_k) - a(t_next)) / b(t_next)
};

inline double clamp_t(const Schedule& sc, double t) {
  return std::clamp(t, sc.eps_t, 1.0 - sc.eps_t);
}

inline Coeffs coeffs(const Schedule& sc, double t) {
  const double tc = clamp_t(sc, t);
  Coeffs c;
  c.t = t;
  c.alpha = t;
  c.sigma = 1.0 - t;
  c.alpha_dot = 1.0;
  c.sigma_dot = -1.0;
  c.a = -1.0 / (1.0 - tc);
  c.b = 1.0 / (1.0 - tc);
  c.s = (1.0 - tc) / tc;
  return c;
}

inline StepCoeffs step_coeffs(const Schedule& sc, double t_k, double t_next) {
  const Coeffs ck = coeffs(sc, t_k);
  const Coeffs cn = coeffs(sc, t_next);
  return {ck.b / cn.b, (ck.a - cn.a) / cn.b};
}

// E[x_1 | x_t] recovered from the velocity: mu = -(a/b) x_t + v/b.
inline Vec2 posterior_mean(const Schedule& sc, const Vec2& x_t, const Vec2& v, double t) {
  const Coeffs c = coeffs(sc, t);
  return x_t * (-c.a / c.b) + v * (1.0 / c.b);
}

// Marginal score recovered from the velocity:
//   grad log p_t(x) = (v - (alpha_dot/alpha) x) / s_t,
// the sign being fixed by the analytic Gaussian check (v = 0 at t = 1/2 for a
// standard normal target must give score -2x). The 1/alpha factor is clamped
// like s.
inline Vec2 score_from_velocity(const Schedule& sc, const Vec2& x_t, const Vec2& v, double t) {
  const double tc = clamp_t(sc, t);
  const Coeffs c = coeffs(sc, t);
  return (v - x_t * (1.0 / tc)) * (1.0 / c.s);
}

// Heuristic conditional std sigma_t/sqrt(alpha_t), regularized at both
// endpoints; vanishes as t -> 1 and stays finite at t = 0. Shared by the
// isotropic proposals and the secant proposal scale.
inline double sigma_h(double t, double eps = 1e-3) {
  return (1.0 - t + eps) / std::sqrt(t + eps);
}

}  // namespace tiltflow
