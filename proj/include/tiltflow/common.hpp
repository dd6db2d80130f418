#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace tiltflow {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2() = default;
  Vec2(double xx, double yy) : x(xx), y(yy) {}

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double c) const { return {x * c, y * c}; }
  Vec2 operator-() const { return {-x, -y}; }
  Vec2& operator+=(const Vec2& o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(const Vec2& o) { x -= o.x; y -= o.y; return *this; }
  Vec2& operator*=(double c) { x *= c; y *= c; return *this; }
};

inline Vec2 operator*(double c, const Vec2& v) { return v * c; }
inline double dot(const Vec2& a, const Vec2& b) { return a.x * b.x + a.y * b.y; }
inline double norm2(const Vec2& v) { return dot(v, v); }
inline double norm(const Vec2& v) { return std::sqrt(norm2(v)); }
inline bool is_finite(const Vec2& v) { return std::isfinite(v.x) && std::isfinite(v.y); }

// Time-dependent velocity field over the 2D state space. velocity_vjp returns
// (dv/dx)^T cot at fixed t; implementations must keep it consistent with
// velocity so posterior-mean Jacobians chain correctly.
class FlowField {
 public:
  virtual ~FlowField() = default;
  virtual Vec2 velocity(const Vec2& x, double t) const = 0;
  virtual Vec2 velocity_vjp(const Vec2& x, double t, const Vec2& cot) const = 0;
};

// Scaled objective for tilting and guidance. value(x, lambda) is the full
// exponent entering exp(-value), i.e. lambda*J(x) for a fixed landscape J or
// a lambda-conditioned surrogate evaluated directly.
class CostFn {
 public:
  virtual ~CostFn() = default;
  virtual double value(const Vec2& x, double lambda) const = 0;
  virtual Vec2 grad(const Vec2& x, double lambda) const = 0;
};

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace tiltflow
