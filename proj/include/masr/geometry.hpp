#pragma once

#include "masr/common.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <utility>

// Poincaré ball primitives with curvature magnitude c (metric curvature -c).
// Everything here is a pure function on immutable values in 64-bit floats;
// artanh near 1 is too ill-conditioned for anything less.

namespace masr::geo {

using Vec = Eigen::VectorXd;

// Keeps every point at least this far (in sqrt(c)-scaled norm) off the
// ball boundary, so artanh arguments stay <= 1 - kBoundaryEps.
inline constexpr double kBoundaryEps = 1e-5;

struct Curvature {
    double c = 1.0;

    explicit Curvature(double value = 1.0) : c(value) {
        check_arg(std::isfinite(c) && c > 0.0, "curvature must be finite and > 0");
    }
    double sqrt_c() const { return std::sqrt(c); }
};

// A point strictly inside the open ball of radius 1/sqrt(c).
struct PoincarePoint {
    Vec coords;

    int dim() const { return static_cast<int>(coords.size()); }
    double norm() const { return coords.norm(); }
};

inline PoincarePoint origin(int dim) { return {Vec::Zero(dim)}; }

// Conformal factor lambda_x^c = 2 / (1 - c*||x||^2).
inline double conformal_factor(const PoincarePoint &x, Curvature c) {
    return 2.0 / (1.0 - c.c * x.coords.squaredNorm());
}

inline PoincarePoint project_to_ball(const PoincarePoint &p, Curvature c,
                                     double boundary_eps = kBoundaryEps) {
    check_arg(boundary_eps > 0.0 && boundary_eps <= 1e-2,
              "boundary_eps must lie in (0, 1e-2]");
    const double max_norm = (1.0 - boundary_eps) / c.sqrt_c();
    const double n = p.norm();
    if (n <= max_norm) return p;
    return {p.coords * (max_norm / n)};
}

// exp map at the origin: v -> tanh(sqrt(c)*||v||) * v / (sqrt(c)*||v||).
// Projected afterwards: tanh saturates to 1.0 in doubles for large inputs,
// which would otherwise land exactly on the boundary.
inline PoincarePoint exp_map_origin(const Vec &v, Curvature c) {
    check_arg(v.allFinite(), "exp_map_origin: tangent vector must be finite");
    const double n = v.norm();
    if (n == 0.0) return {Vec::Zero(v.size())};
    const double sc = c.sqrt_c();
    return project_to_ball({v * (std::tanh(sc * n) / (sc * n))}, c);
}

// Möbius addition x (+)_c y. Degenerate denominators are retried once after
// projecting the operands, as distance gradients blow up there anyway.
inline PoincarePoint mobius_add(const PoincarePoint &x, const PoincarePoint &y,
                                Curvature c) {
    auto combine = [&](const Vec &a, const Vec &b) -> std::pair<bool, Vec> {
        const double xy = a.dot(b);
        const double x2 = a.squaredNorm();
        const double y2 = b.squaredNorm();
        const double den = 1.0 + 2.0 * c.c * xy + c.c * c.c * x2 * y2;
        if (std::abs(den) < 1e-15) return {false, Vec()};
        Vec num = (1.0 + 2.0 * c.c * xy + c.c * y2) * a + (1.0 - c.c * x2) * b;
        return {true, num / den};
    };
    auto [ok, out] = combine(x.coords, y.coords);
    if (!ok) {
        const PoincarePoint xp = project_to_ball(x, c);
        const PoincarePoint yp = project_to_ball(y, c);
        std::tie(ok, out) = combine(xp.coords, yp.coords);
        if (!ok) throw NumericalError("mobius_add: degenerate denominator");
    }
    return project_to_ball({std::move(out)}, c);
}

// d(x, y) = (2/sqrt(c)) * artanh(sqrt(c) * ||(-x) (+)_c y||).
inline double poincare_distance(const PoincarePoint &x, const PoincarePoint &y,
                                Curvature c) {
    if (x.coords == y.coords) return 0.0;
    const PoincarePoint neg_x{-x.coords};
    const PoincarePoint m = mobius_add(neg_x, y, c);
    const double arg = c.sqrt_c() * m.norm();
    if (arg >= 1.0) throw NumericalError("poincare distance: artanh argument >= 1");
    return 2.0 / c.sqrt_c() * std::atanh(arg);
}

// Euclidean-to-Riemannian gradient conversion: scale by (1/lambda_x^c)^2.
inline Vec riemannian_rescale(const Vec &grad, const PoincarePoint &x, Curvature c) {
    const double inv_lambda = (1.0 - c.c * x.coords.squaredNorm()) / 2.0;
    return grad * (inv_lambda * inv_lambda);
}

// Exponential map at x, realized as x (+)_c exp_0((lambda_x/2) * step),
// then projected. step = 0 returns x; x = origin reduces to exp_map_origin.
inline PoincarePoint retract(const PoincarePoint &x, const Vec &step, Curvature c) {
    if (step.squaredNorm() == 0.0) return project_to_ball(x, c);
    const Vec scaled = step * (conformal_factor(x, c) / 2.0);
    return project_to_ball(mobius_add(x, exp_map_origin(scaled, c), c), c);
}

// Analytic gradient of d(x, y) w.r.t. both arguments, from the equivalent
// arcosh form d = arcosh(1 + 2c*||x-y||^2 / ((1-c||x||^2)(1-c||y||^2))) / sqrt(c).
inline std::pair<Vec, Vec> distance_grad(const PoincarePoint &x,
                                         const PoincarePoint &y, Curvature c) {
    const double cc = c.c;
    const Vec diff = x.coords - y.coords;
    const double nn = diff.squaredNorm();
    const double a = 1.0 - cc * x.coords.squaredNorm();
    const double b = 1.0 - cc * y.coords.squaredNorm();
    if (nn < 1e-30) {
        // distance is non-smooth at x == y; use the zero subgradient
        return {Vec::Zero(x.dim()), Vec::Zero(y.dim())};
    }
    const double u = 1.0 + 2.0 * cc * nn / (a * b);
    const double root = std::sqrt(u * u - 1.0);
    if (!(root > 0.0) || !std::isfinite(root))
        throw NumericalError("distance_grad: degenerate arcosh argument");
    const double dd_du = 1.0 / (c.sqrt_c() * root);
    const Vec du_dx = (4.0 * cc / (a * b)) * diff + (4.0 * cc * cc * nn / (a * a * b)) * x.coords;
    const Vec du_dy = (-4.0 * cc / (a * b)) * diff + (4.0 * cc * cc * nn / (a * b * b)) * y.coords;
    return {dd_du * du_dx, dd_du * du_dy};
}

} // namespace masr::geo
