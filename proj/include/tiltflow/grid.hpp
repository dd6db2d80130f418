#pragma once

// Discretized 2D world on a bounded box: scalar fields and probability masses
// on a regular grid, cell-center convention. Fields interpolate bilinearly
// with border padding; pmfs sample by multinomial draw plus uniform jitter
// inside the chosen cell.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <vector>

#include "tiltflow/common.hpp"
#include "tiltflow/rng.hpp"

namespace tiltflow {

struct Bounds {
  double x_min = -3.5, x_max = 3.5;
  double y_min = -3.5, y_max = 3.5;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  bool operator==(const Bounds& o) const {
    return x_min == o.x_min && x_max == o.x_max && y_min == o.y_min && y_max == o.y_max;
  }
};

namespace detail {

struct GridGeom {
  Bounds b;
  std::uint32_t nx = 2, ny = 2;

  double dx() const { return b.width() / nx; }
  double dy() const { return b.height() / ny; }
  double cx(std::uint32_t ix) const { return b.x_min + (ix + 0.5) * dx(); }
  double cy(std::uint32_t iy) const { return b.y_min + (iy + 0.5) * dy(); }
  std::size_t idx(std::uint32_t ix, std::uint32_t iy) const {
    return static_cast<std::size_t>(ix) * ny + iy;
  }
  std::size_t cells() const { return static_cast<std::size_t>(nx) * ny; }
  bool same_geometry(const GridGeom& o) const {
    return b == o.b && nx == o.nx && ny == o.ny;
  }
};

}  // namespace detail

struct GridField : detail::GridGeom {
  std::vector<double> values;  // nx*ny, index ix*ny + iy

  GridField() = default;
  GridField(const Bounds& bb, std::uint32_t nxx, std::uint32_t nyy)
      : detail::GridGeom{bb, nxx, nyy}, values(cells(), 0.0) {}

  double& at(std::uint32_t ix, std::uint32_t iy) { return values[idx(ix, iy)]; }
  double at(std::uint32_t ix, std::uint32_t iy) const { return values[idx(ix, iy)]; }
};

struct GridPmf : detail::GridGeom {
  std::vector<double> mass;  // nonnegative, sums to 1

  GridPmf() = default;
  GridPmf(const Bounds& bb, std::uint32_t nxx, std::uint32_t nyy)
      : detail::GridGeom{bb, nxx, nyy}, mass(cells(), 0.0) {}

  double& at(std::uint32_t ix, std::uint32_t iy) { return mass[idx(ix, iy)]; }
  double at(std::uint32_t ix, std::uint32_t iy) const { return mass[idx(ix, iy)]; }
};

struct MixtureComponent {
  Vec2 mean;
  double cov_xx = 1.0, cov_xy = 0.0, cov_yy = 1.0;
  double weight = 1.0;
};

struct WorldSpec {
  enum class DensityKind { grf_potential, gaussian_mixture };
  enum class CostKind { grf, rbf_sum };

  std::uint64_t seed = 1;
  DensityKind density_kind = DensityKind::grf_potential;
  CostKind cost_kind = CostKind::rbf_sum;
  Bounds bounds;
  std::uint32_t nx = 256, ny = 256;
  double length_scale = 0.8;   // GRF kernel width, world units
  double field_std = 1.0;      // std of standardized fields
  double density_scale = 1.5;  // exponent scale turning a potential into a density
  std::uint32_t n_rbf = 6;
  double rbf_width_min = 0.3, rbf_width_max = 1.2;
  std::vector<MixtureComponent> mixture;
};

namespace detail {

// Standardize in place: mean 0, population std = target_std over all nodes.
inline void standardize(std::vector<double>& v, double target_std) {
  const double n = static_cast<double>(v.size());
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= n;
  const double scale = target_std / std::sqrt(std::max(var, 1e-300));
  for (double& x : v) x = (x - mean) * scale;
}

}  // namespace detail

// Seeded white noise convolved with a truncated Gaussian kernel (separable,
// kernel renormalized near borders so constants pass through), standardized.
inline GridField make_grf(const WorldSpec& spec, std::string_view tag = "grf") {
  GridField f(spec.bounds, spec.nx, spec.ny);
  Rng rng = Rng(spec.seed).stream(tag);
  for (std::uint32_t ix = 0; ix < f.nx; ++ix)
    for (std::uint32_t iy = 0; iy < f.ny; ++iy) f.at(ix, iy) = rng.normal();

  const double dx = f.dx(), dy = f.dy();
  const int rx = std::max(1, static_cast<int>(std::ceil(3.0 * spec.length_scale / dx)));
  const int ry = std::max(1, static_cast<int>(std::ceil(3.0 * spec.length_scale / dy)));
  std::vector<double> kx(2 * rx + 1), ky(2 * ry + 1);
  for (int k = -rx; k <= rx; ++k)
    kx[k + rx] = std::exp(-0.5 * (k * dx) * (k * dx) / (spec.length_scale * spec.length_scale));
  for (int k = -ry; k <= ry; ++k)
    ky[k + ry] = std::exp(-0.5 * (k * dy) * (k * dy) / (spec.length_scale * spec.length_scale));

  std::vector<double> tmp(f.cells(), 0.0);
  for (std::uint32_t ix = 0; ix < f.nx; ++ix) {  // along y
    for (std::uint32_t iy = 0; iy < f.ny; ++iy) {
      double acc = 0.0, wsum = 0.0;
      for (int k = -ry; k <= ry; ++k) {
        const int j = static_cast<int>(iy) + k;
        if (j < 0 || j >= static_cast<int>(f.ny)) continue;
        acc += ky[k + ry] * f.at(ix, static_cast<std::uint32_t>(j));
        wsum += ky[k + ry];
      }
      tmp[f.idx(ix, iy)] = acc / wsum;
    }
  }
  for (std::uint32_t iy = 0; iy < f.ny; ++iy) {  // along x
    for (std::uint32_t ix = 0; ix < f.nx; ++ix) {
      double acc = 0.0, wsum = 0.0;
      for (int k = -rx; k <= rx; ++k) {
        const int j = static_cast<int>(ix) + k;
        if (j < 0 || j >= static_cast<int>(f.nx)) continue;
        acc += kx[k + rx] * tmp[f.idx(static_cast<std::uint32_t>(j), iy)];
        wsum += kx[k + rx];
      }
      f.at(ix, iy) = acc / wsum;
    }
  }
  detail::standardize(f.values, spec.field_std);
  return f;
}

struct RbfBump {
  Vec2 center;
  double width = 1.0;
  double sign = 1.0;
};

// Sum of signed Gaussian bumps with seeded centers, widths and signs,
// standardized like the GRF. Standardization is a positive affine map, so
// extrema locations survive it; bumps_out reports the drawn parameters.
inline GridField make_rbf_cost(const WorldSpec& spec, std::vector<RbfBump>* bumps_out = nullptr) {
  GridField f(spec.bounds, spec.nx, spec.ny);
  Rng rng = Rng(spec.seed).stream("rbf");
  std::vector<RbfBump> bumps(spec.n_rbf);
  for (auto& b : bumps) {
    b.center.x = rng.uniform(spec.bounds.x_min, spec.bounds.x_max);
    b.center.y = rng.uniform(spec.bounds.y_min, spec.bounds.y_max);
    b.width = rng.uniform(spec.rbf_width_min, spec.rbf_width_max);
    b.sign = (rng.next_u64() >> 63) ? 1.0 : -1.0;
  }
  for (std::uint32_t ix = 0; ix < f.nx; ++ix) {
    for (std::uint32_t iy = 0; iy < f.ny; ++iy) {
      const Vec2 p{f.cx(ix), f.cy(iy)};
      double v = 0.0;
      for (const auto& b : bumps)
        v += b.sign * std::exp(-0.5 * norm2(p - b.center) / (b.width * b.width));
      f.at(ix, iy) = v;
    }
  }
  detail::standardize(f.values, spec.field_std);
  if (bumps_out) *bumps_out = std::move(bumps);
  return f;
}

// mass proportional to exp(scale * potential), max-subtracted, normalized.
inline GridPmf density_from_potential(const GridField& potential, double scale) {
  GridPmf p(potential.b, potential.nx, potential.ny);
  double m = -1e300;
  for (double v : potential.values) m = std::max(m, scale * v);
  double z = 0.0;
  for (std::size_t i = 0; i < p.cells(); ++i) {
    p.mass[i] = std::exp(scale * potential.values[i] - m);
    z += p.mass[i];
  }
  for (double& v : p.mass) v /= z;
  return p;
}

inline GridPmf mixture_pmf(const WorldSpec& spec) {
  GridPmf p(spec.bounds, spec.nx, spec.ny);
  struct Comp {
    Vec2 mean;
    double ixx, ixy, iyy, lognorm, weight;
  };
  std::vector<Comp> comps;
  for (const auto& mc : spec.mixture) {
    const double det = mc.cov_xx * mc.cov_yy - mc.cov_xy * mc.cov_xy;
    if (!(mc.cov_xx > 0.0) || !(det > 0.0)) fail("covariance not SPD");
    Comp c;
    c.mean = mc.mean;
    c.ixx = mc.cov_yy / det;
    c.ixy = -mc.cov_xy / det;
    c.iyy = mc.cov_xx / det;
    c.lognorm = -std::log(6.283185307179586 * std::sqrt(det));
    c.weight = mc.weight;
    comps.push_back(c);
  }
  double z = 0.0;
  for (std::uint32_t ix = 0; ix < p.nx; ++ix) {
    for (std::uint32_t iy = 0; iy < p.ny; ++iy) {
      const Vec2 x{p.cx(ix), p.cy(iy)};
      double dens = 0.0;
      for (const auto& c : comps) {
        const Vec2 d = x - c.mean;
        const double q = d.x * (c.ixx * d.x + c.ixy * d.y) + d.y * (c.ixy * d.x + c.iyy * d.y);
        dens += c.weight * std::exp(c.lognorm - 0.5 * q);
      }
      p.at(ix, iy) = dens;
      z += dens;
    }
  }
  if (!(z > 0.0)) fail("mixture mass vanished on the grid");
  for (double& v : p.mass) v /= z;
  return p;
}

// q(cell) ∝ p(cell) exp(-lambda cost(cell)), max-subtracted over supported cells.
inline GridPmf tilt(const GridPmf& p, const GridField& cost, double lambda) {
  if (!p.same_geometry(cost)) fail("geometry mismatch between pmf and cost field");
  GridPmf q(p.b, p.nx, p.ny);
  double m = -1e300;
  for (std::size_t i = 0; i < p.cells(); ++i)
    if (p.mass[i] > 0.0) m = std::max(m, -lambda * cost.values[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < p.cells(); ++i) {
    q.mass[i] = p.mass[i] > 0.0 ? p.mass[i] * std::exp(-lambda * cost.values[i] - m) : 0.0;
    z += q.mass[i];
  }
  if (!(z > 0.0)) fail("tilted mass vanished");
  for (double& v : q.mass) v /= z;
  return q;
}

// Multinomial cell draw, uniform jitter inside the cell, clamp to the box.
// Consumes exactly three uniforms per point.
inline std::vector<Vec2> sample(const GridPmf& p, std::size_t n, Rng& rng) {
  std::vector<double> cum(p.cells());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.cells(); ++i) {
    acc += p.mass[i];
    cum[i] = acc;
  }
  std::vector<Vec2> pts(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = rng.uniform() * acc;
    const auto it = std::upper_bound(cum.begin(), cum.end(), u);
    std::size_t i = static_cast<std::size_t>(it - cum.begin());
    if (i >= p.cells()) i = p.cells() - 1;
    const auto ix = static_cast<std::uint32_t>(i / p.ny);
    const auto iy = static_cast<std::uint32_t>(i % p.ny);
    Vec2 x{p.b.x_min + (ix + rng.uniform()) * p.dx(), p.b.y_min + (iy + rng.uniform()) * p.dy()};
    x.x = std::clamp(x.x, p.b.x_min, p.b.x_max);
    x.y = std::clamp(x.y, p.b.y_min, p.b.y_max);
    pts[k] = x;
  }
  return pts;
}

namespace detail {

struct BilinearLocator {
  std::uint32_t i0, j0;
  double fx, fy;
  bool inside_x, inside_y;  // false when the query clamped to the border
};

inline BilinearLocator locate(const GridGeom& g, const Vec2& x) {
  BilinearLocator L;
  double gx = (x.x - g.b.x_min) / g.dx() - 0.5;
  double gy = (x.y - g.b.y_min) / g.dy() - 0.5;
  L.inside_x = gx >= 0.0 && gx <= g.nx - 1.0;
  L.inside_y = gy >= 0.0 && gy <= g.ny - 1.0;
  gx = std::clamp(gx, 0.0, static_cast<double>(g.nx - 1));
  gy = std::clamp(gy, 0.0, static_cast<double>(g.ny - 1));
  L.i0 = std::min(static_cast<std::uint32_t>(gx), g.nx - 2);
  L.j0 = std::min(static_cast<std::uint32_t>(gy), g.ny - 2);
  L.fx = gx - L.i0;
  L.fy = gy - L.j0;
  return L;
}

}  // namespace detail

inline double interp(const GridField& f, const Vec2& x) {
  const auto L = detail::locate(f, x);
  const double v00 = f.at(L.i0, L.j0), v10 = f.at(L.i0 + 1, L.j0);
  const double v01 = f.at(L.i0, L.j0 + 1), v11 = f.at(L.i0 + 1, L.j0 + 1);
  return (1 - L.fx) * (1 - L.fy) * v00 + L.fx * (1 - L.fy) * v10 + (1 - L.fx) * L.fy * v01 +
         L.fx * L.fy * v11;
}

// Gradient of the bilinear patch; zero in a clamped direction (border padding
// makes the field constant there).
inline Vec2 interp_grad(const GridField& f, const Vec2& x) {
  const auto L = detail::locate(f, x);
  const double v00 = f.at(L.i0, L.j0), v10 = f.at(L.i0 + 1, L.j0);
  const double v01 = f.at(L.i0, L.j0 + 1), v11 = f.at(L.i0 + 1, L.j0 + 1);
  Vec2 g;
  g.x = L.inside_x ? ((v10 - v00) * (1 - L.fy) + (v11 - v01) * L.fy) / f.dx() : 0.0;
  g.y = L.inside_y ? ((v01 - v00) * (1 - L.fx) + (v11 - v10) * L.fx) / f.dy() : 0.0;
  return g;
}

// Bilinear density (cell mass over cell area) of a pmf at a point.
inline double interp_density(const GridPmf& p, const Vec2& x) {
  const auto L = detail::locate(p, x);
  const double v00 = p.at(L.i0, L.j0), v10 = p.at(L.i0 + 1, L.j0);
  const double v01 = p.at(L.i0, L.j0 + 1), v11 = p.at(L.i0 + 1, L.j0 + 1);
  const double m = (1 - L.fx) * (1 - L.fy) * v00 + L.fx * (1 - L.fy) * v10 +
                   (1 - L.fx) * L.fy * v01 + L.fx * L.fy * v11;
  return m / (p.dx() * p.dy());
}

inline double kl(const GridPmf& a, const GridPmf& b) {
  if (!a.same_geometry(b)) fail("geometry mismatch between pmfs");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.cells(); ++i) {
    if (a.mass[i] > 0.0) {
      if (!(b.mass[i] > 0.0)) fail("absolute continuity violated");
      acc += a.mass[i] * std::log(a.mass[i] / b.mass[i]);
    }
  }
  return acc;
}

inline double skl(const GridPmf& a, const GridPmf& b) { return 0.5 * (kl(a, b) + kl(b, a)); }

inline GridPmf histogram(const std::vector<Vec2>& points, const Bounds& b, std::uint32_t nx,
                         std::uint32_t ny) {
  if (points.empty()) fail("histogram needs at least one point");
  GridPmf h(b, nx, ny);
  for (const Vec2& p : points) {
    const auto ix = static_cast<std::uint32_t>(
        std::clamp(static_cast<int>(std::floor((p.x - b.x_min) / h.dx())), 0, static_cast<int>(nx) - 1));
    const auto iy = static_cast<std::uint32_t>(
        std::clamp(static_cast<int>(std::floor((p.y - b.y_min) / h.dy())), 0, static_cast<int>(ny) - 1));
    h.at(ix, iy) += 1.0;
  }
  for (double& v : h.mass) v /= static_cast<double>(points.size());
  return h;
}

// Evaluate the bilinear interpolant of src at the cell centers of a new grid.
// The continuous ground truth of a world is its interpolant, so evaluation
// grids are derived this way from the construction grid.
inline GridField resample_field(const GridField& src, std::uint32_t nx, std::uint32_t ny) {
  GridField f(src.b, nx, ny);
  for (std::uint32_t ix = 0; ix < nx; ++ix)
    for (std::uint32_t iy = 0; iy < ny; ++iy)
      f.at(ix, iy) = interp(src, {f.cx(ix), f.cy(iy)});
  return f;
}

// log(density) field of a pmf, floored so empty cells stay finite; used as the
// plausibility proxy -log p(x) via interpolation.
inline GridField log_density_field(const GridPmf& p, double floor_mass = 1e-300) {
  GridField f(p.b, p.nx, p.ny);
  const double cell_area = p.dx() * p.dy();
  for (std::size_t i = 0; i < p.cells(); ++i)
    f.values[i] = std::log(std::max(p.mass[i], floor_mass) / cell_area);
  return f;
}

// Fixed landscape scaled by lambda, backed by bilinear interpolation.
class GridCost : public CostFn {
 public:
  explicit GridCost(GridField field) : field_(std::move(field)) {}
  double value(const Vec2& x, double lambda) const override { return lambda * interp(field_, x); }
  Vec2 grad(const Vec2& x, double lambda) const override {
    return interp_grad(field_, x) * lambda;
  }
  const GridField& field() const { return field_; }

 private:
  GridField field_;
};

// --- serialization -----------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

inline void save_grid(const std::string& path, const GridGeom& g, const std::vector<double>& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open for writing: " + path);
  os.write("TF2D", 4);
  put_u32(os, 1);
  put_f64(os, g.b.x_min);
  put_f64(os, g.b.x_max);
  put_f64(os, g.b.y_min);
  put_f64(os, g.b.y_max);
  put_u32(os, g.nx);
  put_u32(os, g.ny);
  for (double x : v) put_f64(os, x);
  if (!os) fail("write failed: " + path);
}

inline void load_grid(const std::string& path, GridGeom& g, std::vector<double>& v) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::string(magic, 4) != "TF2D") fail("bad magic in " + path);
  if (get_u32(is) != 1) fail("unsupported version in " + path);
  g.b.x_min = get_f64(is);
  g.b.x_max = get_f64(is);
  g.b.y_min = get_f64(is);
  g.b.y_max = get_f64(is);
  g.nx = get_u32(is);
  g.ny = get_u32(is);
  v.resize(static_cast<std::size_t>(g.nx) * g.ny);
  for (double& x : v) x = get_f64(is);
  if (!is) fail("truncated file: " + path);
}

}  // namespace detail

inline void save_field(const GridField& f, const std::string& path) {
  detail::save_grid(path, f, f.values);
}

inline GridField load_field(const std::string& path) {
  GridField f;
  detail::load_grid(path, f, f.values);
  return f;
}

inline void save_pmf(const GridPmf& p, const std::string& path) {
  detail::save_grid(path, p, p.mass);
}

inline GridPmf load_pmf(const std::string& path) {
  GridPmf p;
  detail::load_grid(path, p, p.mass);
  return p;
}

// 8-bit grayscale preview, min-max scaled, y flipped so +y is up.
inline void write_pgm(const std::string& path, const detail::GridGeom& g,
                      const std::vector<double>& v) {
  double lo = 1e300, hi = -1e300;
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot open for writing: " + path);
  os << "P5\n" << g.nx << " " << g.ny << "\n255\n";
  for (std::uint32_t row = 0; row < g.ny; ++row) {
    const std::uint32_t iy = g.ny - 1 - row;
    for (std::uint32_t ix = 0; ix < g.nx; ++ix) {
      const double t = (v[g.idx(ix, iy)] - lo) / span;
      os.put(static_cast<char>(static_cast<int>(255.0 * t + 0.5)));
    }
  }
}

inline void write_pgm(const GridField& f, const std::string& path) { write_pgm(path, f, f.values); }
inline void write_pgm(const GridPmf& p, const std::string& path) { write_pgm(path, p, p.mass); }

}  // namespace tiltflow
