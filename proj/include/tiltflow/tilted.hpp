#pragma once

// Self-normalized tilted-mean estimator shared by the Monte Carlo guidance
// estimators: draw xi_i from a caller-supplied noise map, weight the one-step
// predictions by exp(-cost), return the weighted mean of the offsets. The
// returned shift is UNSCALED; the caller applies the b_t prefactor exactly
// once when assembling the drift.

#include <cstdint>
#include <functional>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/rng.hpp"

namespace tiltflow {

struct TiltedMeanResult {
  Vec2 shift;        // sum w_i xi_i / sum w_i
  double ess = 0.0;  // (sum w)^2 / sum w^2
  double max_logw = 0.0;
};

// noise_map turns a standard normal draw into an offset xi (e.g. L eps or
// sigma(t) eps). cost_at returns the full lambda-scaled exponent at x1 + xi.
// With antithetic on, draws come in (eps, -eps) pairs; S must then be even.
inline TiltedMeanResult tilted_mean(const Vec2& x1_pred,
                                    const std::function<Vec2(const Vec2&)>& noise_map,
                                    const std::function<double(const Vec2&)>& cost_at,
                                    std::size_t n_samples, Rng& rng, bool antithetic = false) {
  if (n_samples == 0) fail("tilted mean needs at least one sample");
  if (antithetic && (n_samples % 2) != 0) fail("antithetic sampling needs an even sample count");
  std::vector<Vec2> xi(n_samples);
  std::vector<double> logw(n_samples);
  Vec2 prev_eps{0.0, 0.0};
  for (std::size_t i = 0; i < n_samples; ++i) {
    Vec2 eps;
    if (antithetic && (i % 2) == 1) {
      eps = -prev_eps;
    } else {
      eps = rng.normal2();
      prev_eps = eps;
    }
    xi[i] = noise_map(eps);
    logw[i] = -cost_at(x1_pred + xi[i]);
  }
  double m = -1e300;
  for (double lw : logw)
    if (std::isfinite(lw)) m = std::max(m, lw);
  if (m == -1e300) fail("cost overflow");
  double wsum = 0.0, w2sum = 0.0;
  Vec2 acc{0.0, 0.0};
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double w = std::isfinite(logw[i]) ? std::exp(logw[i] - m) : 0.0;
    wsum += w;
    w2sum += w * w;
    acc += w * xi[i];
  }
  if (!(wsum > 0.0)) fail("cost overflow");
  TiltedMeanResult r;
  r.shift = acc * (1.0 / wsum);
  r.ess = wsum * wsum / w2sum;
  r.max_logw = m;
  return r;
}

}  // namespace tiltflow
