#include "masr/geometry.hpp"
#include "masr/rng.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace masr;
using geo::Curvature;
using geo::PoincarePoint;
using geo::Vec;

namespace {

PoincarePoint random_point(rngutil::Rng &rng, int dim, Curvature c, double max_norm_frac = 0.95) {
    // drawing a tangent and exp-mapping guarantees a strictly interior point
    Vec v = rng.normal_vec(dim) * rng.uniform(0.0, 1.5);
    PoincarePoint p = geo::exp_map_origin(v, c);
    const double cap = max_norm_frac / c.sqrt_c();
    if (p.norm() > cap) p.coords *= cap / p.norm();
    return p;
}

void require_inside(const PoincarePoint &p, Curvature c) {
    REQUIRE(c.sqrt_c() * p.norm() < 1.0);
}

} // namespace

TEST_CASE("exp_map_origin fixes the origin and matches the closed form") {
    Curvature c(1.0);
    Vec zero = Vec::Zero(3);
    REQUIRE(geo::exp_map_origin(zero, c).norm() == 0.0);

    Vec v = Vec::Zero(4);
    v(0) = 0.5;
    PoincarePoint p = geo::exp_map_origin(v, c);
    REQUIRE_THAT(p.coords(0), Catch::Matchers::WithinAbs(0.46211715726000974, 1e-15));
    REQUIRE(p.coords.tail(3).norm() == 0.0);
}

TEST_CASE("exp_map_origin stays inside the ball for any magnitude") {
    rngutil::Rng rng(11);
    for (double cval : {0.5, 1.0, 1.5}) {
        Curvature c(cval);
        for (int i = 0; i < 50; ++i) {
            Vec v = rng.normal_vec(6) * std::pow(10.0, rng.uniform(-3.0, 3.0));
            PoincarePoint p = geo::exp_map_origin(v, c);
            REQUIRE(p.norm() < 1.0 / c.sqrt_c());
        }
    }
}

TEST_CASE("exp_map_origin rejects non-finite input") {
    Vec v = Vec::Zero(2);
    v(1) = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_AS(geo::exp_map_origin(v, Curvature(1.0)), std::invalid_argument);
}

TEST_CASE("exp_map_origin norm is monotone in the tangent norm") {
    rngutil::Rng rng(12);
    Curvature c(1.0);
    Vec dir = rng.normal_vec(5);
    dir /= dir.norm();
    double prev = -1.0;
    for (double t = 0.05; t < 4.0; t += 0.13) {
        double n = geo::exp_map_origin(dir * t, c).norm();
        REQUIRE(n > prev);
        prev = n;
    }
}

TEST_CASE("project_to_ball leaves interior points untouched and rescales boundary ones") {
    Curvature c(1.0);
    Vec v = Vec::Zero(3);
    v(0) = 0.5;
    PoincarePoint inside{v};
    REQUIRE(geo::project_to_ball(inside, c).coords == inside.coords);

    Vec w = Vec::Zero(3);
    w(1) = 0.9999999;
    PoincarePoint near_edge{w};
    PoincarePoint proj = geo::project_to_ball(near_edge, c);
    REQUIRE_THAT(proj.norm(), Catch::Matchers::WithinAbs(0.99999, 1e-12));

    PoincarePoint o = geo::origin(3);
    REQUIRE(geo::project_to_ball(o, c).norm() == 0.0);

    REQUIRE_THROWS_AS(geo::project_to_ball(inside, c, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(geo::project_to_ball(inside, c, 0.5), std::invalid_argument);
}

TEST_CASE("mobius_add identity, inverse, and 1-D closed form") {
    Curvature c(1.0);
    rngutil::Rng rng(13);

    for (int i = 0; i < 20; ++i) {
        PoincarePoint y = random_point(rng, 4, c);
        PoincarePoint sum = geo::mobius_add(geo::origin(4), y, c);
        REQUIRE((sum.coords - y.coords).norm() < 1e-12);

        PoincarePoint neg{-y.coords};
        REQUIRE(geo::mobius_add(neg, y, c).norm() < 1e-9);
    }

    Vec a = Vec::Zero(2), b = Vec::Zero(2);
    a(0) = 0.3;
    b(0) = 0.4;
    PoincarePoint s = geo::mobius_add({a}, {b}, c);
    REQUIRE_THAT(s.coords(0), Catch::Matchers::WithinAbs(0.625, 1e-15));
    REQUIRE(s.coords(1) == 0.0);
}

TEST_CASE("mobius_add output respects the norm bound") {
    rngutil::Rng rng(14);
    for (double cval : {0.5, 1.0, 1.5}) {
        Curvature c(cval);
        for (int i = 0; i < 100; ++i) {
            PoincarePoint x = random_point(rng, 5, c, 0.999999);
            PoincarePoint y = random_point(rng, 5, c, 0.999999);
            PoincarePoint s = geo::mobius_add(x, y, c);
            REQUIRE(c.sqrt_c() * s.norm() <= 1.0 - geo::kBoundaryEps + 1e-15);
        }
    }
}

TEST_CASE("poincare_distance matches the origin closed form") {
    Curvature c(1.0);
    Vec v = Vec::Zero(5);
    v(0) = 0.5;
    double d = geo::poincare_distance(geo::origin(5), {v}, c);
    REQUIRE_THAT(d, Catch::Matchers::WithinAbs(std::log(3.0), 1e-14));
    // ln 3 = 2*artanh(0.5)
    REQUIRE_THAT(d, Catch::Matchers::WithinAbs(1.0986122886681098, 1e-14));
}

TEST_CASE("distance from origin to exp_map_origin(v) is 2*||v||") {
    rngutil::Rng rng(15);
    for (double cval : {0.5, 1.0, 1.5}) {
        Curvature c(cval);
        for (int i = 0; i < 30; ++i) {
            Vec v = rng.normal_vec(4);
            v *= rng.uniform(0.01, 2.0) / v.norm();
            double d = geo::poincare_distance(geo::origin(4), geo::exp_map_origin(v, c), c);
            REQUIRE_THAT(d, Catch::Matchers::WithinRel(2.0 * v.norm(), 1e-9));
        }
    }
}

TEST_CASE("distance axioms hold on 1000 random triples") {
    rngutil::Rng rng(16);
    Curvature c(1.0);
    for (int i = 0; i < 1000; ++i) {
        int dim = rng.uniform_int(1, 8);
        PoincarePoint x = random_point(rng, dim, c);
        PoincarePoint y = random_point(rng, dim, c);
        PoincarePoint z = random_point(rng, dim, c);
        require_inside(x, c);
        require_inside(y, c);
        require_inside(z, c);

        double dxy = geo::poincare_distance(x, y, c);
        double dyx = geo::poincare_distance(y, x, c);
        double dxz = geo::poincare_distance(x, z, c);
        double dyz = geo::poincare_distance(y, z, c);

        REQUIRE(dxy >= 0.0);
        REQUIRE(geo::poincare_distance(x, x, c) == 0.0);
        if (dxy < 1e-9) REQUIRE((x.coords - y.coords).norm() < 1e-6);
        REQUIRE(std::abs(dxy - dyx) <= 1e-9);
        REQUIRE(dxz <= dxy + dyz + 1e-7);
    }
}

TEST_CASE("poincare_distance approaches twice the Euclidean distance as c -> 0") {
    rngutil::Rng rng(17);
    Curvature c(1e-6);
    for (int i = 0; i < 200; ++i) {
        Vec a = rng.normal_vec(6);
        Vec b = rng.normal_vec(6);
        a *= rng.uniform(0.0, 0.1) / std::max(a.norm(), 1e-12);
        b *= rng.uniform(0.01, 0.1) / std::max(b.norm(), 1e-12);
        double eu = 2.0 * (a - b).norm();
        if (eu < 1e-6) continue;
        double d = geo::poincare_distance({a}, {b}, c);
        REQUIRE(std::abs(d - eu) / eu <= 1e-3);
    }
}

TEST_CASE("riemannian_rescale applies the squared inverse conformal factor") {
    Curvature c(1.0);
    Vec g = Vec::Ones(3);

    Vec at_origin = geo::riemannian_rescale(g, geo::origin(3), c);
    REQUIRE((at_origin - g * 0.25).norm() < 1e-15);

    Vec x = Vec::Zero(3);
    x(0) = std::sqrt(0.5);
    Vec scaled = geo::riemannian_rescale(g, {x}, c);
    REQUIRE_THAT(scaled(0), Catch::Matchers::WithinAbs(0.0625, 1e-12));

    Vec near = Vec::Zero(3);
    near(0) = 0.99999;
    REQUIRE(geo::riemannian_rescale(g, {near}, c).norm() < 1e-7);
}

TEST_CASE("retract fixes zero steps and reduces to exp at the origin") {
    Curvature c(1.0);
    rngutil::Rng rng(18);
    PoincarePoint x = random_point(rng, 4, c);
    REQUIRE(geo::retract(x, Vec::Zero(4), c).coords == x.coords);

    Vec step = rng.normal_vec(4) * 0.3;
    PoincarePoint from_origin = geo::retract(geo::origin(4), step, c);
    PoincarePoint expected = geo::exp_map_origin(step, c);
    REQUIRE((from_origin.coords - expected.coords).norm() < 1e-14);
}

TEST_CASE("repeated retractions along a fixed direction stay inside the ball") {
    Curvature c(1.5);
    rngutil::Rng rng(19);
    Vec step = rng.normal_vec(3) * 0.05;
    PoincarePoint p = geo::origin(3);
    for (int i = 0; i < 500; ++i) {
        p = geo::retract(p, step, c);
        REQUIRE(c.sqrt_c() * p.norm() <= 1.0 - geo::kBoundaryEps + 1e-15);
    }
}

TEST_CASE("retract agrees with the distance it should cover") {
    // the exponential map at x moves geodesic distance lambda_x * ||step||... checked
    // through the conformal metric: d(x, retract(x, step)) == 2 * ||(lambda_x/2) step||
    // rescaled back, i.e. lambda_x * ||step||.
    rngutil::Rng rng(20);
    for (double cval : {0.5, 1.0, 1.5}) {
        Curvature c(cval);
        for (int i = 0; i < 40; ++i) {
            PoincarePoint x = random_point(rng, 4, c, 0.8);
            Vec step = rng.normal_vec(4) * 0.05;
            PoincarePoint moved = geo::retract(x, step, c);
            double d = geo::poincare_distance(x, moved, c);
            REQUIRE_THAT(d, Catch::Matchers::WithinRel(geo::conformal_factor(x, c) * step.norm(), 1e-6));
        }
    }
}

TEST_CASE("distance_grad matches central finite differences") {
    rngutil::Rng rng(21);
    const double h = 1e-5;
    int checked = 0;
    for (double cval : {0.5, 1.0, 1.5}) {
        Curvature c(cval);
        for (int i = 0; i < 34; ++i) {
            int dim = rng.uniform_int(2, 6);
            PoincarePoint x = random_point(rng, dim, c, 0.8);
            PoincarePoint y = random_point(rng, dim, c, 0.8);
            if (geo::poincare_distance(x, y, c) < 1e-2) continue;
            auto [gx, gy] = geo::distance_grad(x, y, c);

            Vec fx(dim), fy(dim);
            for (int k = 0; k < dim; ++k) {
                PoincarePoint xp = x, xm = x;
                xp.coords(k) += h;
                xm.coords(k) -= h;
                fx(k) = (geo::poincare_distance(xp, y, c) - geo::poincare_distance(xm, y, c)) / (2 * h);
                PoincarePoint yp = y, ym = y;
                yp.coords(k) += h;
                ym.coords(k) -= h;
                fy(k) = (geo::poincare_distance(x, yp, c) - geo::poincare_distance(x, ym, c)) / (2 * h);
            }
            REQUIRE((gx - fx).norm() / fx.norm() <= 1e-4);
            REQUIRE((gy - fy).norm() / fy.norm() <= 1e-4);
            ++checked;
        }
    }
    REQUIRE(checked >= 100);
}

TEST_CASE("distance_grad returns the zero subgradient at coincident points") {
    Curvature c(1.0);
    Vec v = Vec::Constant(3, 0.2);
    auto [gx, gy] = geo::distance_grad({v}, {v}, c);
    REQUIRE(gx.norm() == 0.0);
    REQUIRE(gy.norm() == 0.0);
}

TEST_CASE("curvature validates its range") {
    REQUIRE_THROWS_AS(Curvature(0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(Curvature(-1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(Curvature(std::numeric_limits<double>::quiet_NaN()), std::invalid_argument);
}
