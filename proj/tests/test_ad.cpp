#include "masr/ad.hpp"
#include "masr/rng.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <functional>
#include <vector>

using namespace masr;
using ad::Mat;
using ad::Tape;

namespace {

using Builder = std::function<int(Tape &, const std::vector<int> &)>;

double eval_loss(const std::vector<Mat> &params, const Builder &build) {
    Tape t;
    std::vector<int> ids;
    ids.reserve(params.size());
    for (const Mat &p : params) ids.push_back(t.leaf(p));
    return t.val(build(t, ids))(0, 0);
}

// central differences on every entry of every parameter
void check_grads(std::vector<Mat> params, const Builder &build, double tol = 2e-5,
                 double h = 1e-6) {
    Tape t;
    std::vector<int> ids;
    for (const Mat &p : params) ids.push_back(t.leaf(p));
    t.backward(build(t, ids));

    for (size_t pi = 0; pi < params.size(); ++pi) {
        Mat analytic = t.has_grad(ids[pi]) ? t.grad(ids[pi])
                                           : Mat::Zero(params[pi].rows(), params[pi].cols());
        for (Eigen::Index r = 0; r < params[pi].rows(); ++r) {
            for (Eigen::Index c = 0; c < params[pi].cols(); ++c) {
                auto perturbed = params;
                perturbed[pi](r, c) += h;
                const double up = eval_loss(perturbed, build);
                perturbed[pi](r, c) -= 2 * h;
                const double dn = eval_loss(perturbed, build);
                const double fd = (up - dn) / (2 * h);
                const double scale = std::max({std::abs(fd), std::abs(analytic(r, c)), 1.0});
                INFO("param " << pi << " entry (" << r << "," << c << ") analytic "
                              << analytic(r, c) << " fd " << fd);
                REQUIRE(std::abs(analytic(r, c) - fd) / scale < tol);
            }
        }
    }
}

Mat rand_mat(rngutil::Rng &rng, int r, int c, double s = 1.0) {
    return rng.normal_mat(r, c) * s;
}

} // namespace

TEST_CASE("matmul, bias, relu chain matches finite differences") {
    rngutil::Rng rng(100);
    Mat X = rand_mat(rng, 3, 4), W = rand_mat(rng, 4, 5), b = rand_mat(rng, 1, 5);
    Mat R = rand_mat(rng, 3, 5);
    check_grads({X, W, b}, [R](Tape &t, const std::vector<int> &p) {
        int h = t.relu(t.add_row(t.matmul(p[0], p[1]), p[2]));
        return t.sum_all(t.mul_elem_const(h, R));
    });
}

TEST_CASE("matmul_bt matches finite differences") {
    rngutil::Rng rng(101);
    Mat A = rand_mat(rng, 3, 4), B = rand_mat(rng, 5, 4), R = rand_mat(rng, 3, 5);
    check_grads({A, B}, [R](Tape &t, const std::vector<int> &p) {
        return t.sum_all(t.mul_elem_const(t.matmul_bt(p[0], p[1]), R));
    });
}

TEST_CASE("add, scale, and node reuse match finite differences") {
    rngutil::Rng rng(102);
    Mat X = rand_mat(rng, 2, 3), R = rand_mat(rng, 2, 3);
    check_grads({X}, [R](Tape &t, const std::vector<int> &p) {
        int doubled = t.add(p[0], t.scale(p[0], 2.0)); // same leaf on two paths
        return t.sum_all(t.mul_elem_const(doubled, R));
    });
}

TEST_CASE("softmax_rows matches finite differences") {
    rngutil::Rng rng(103);
    Mat X = rand_mat(rng, 4, 6), R = rand_mat(rng, 4, 6);
    check_grads({X}, [R](Tape &t, const std::vector<int> &p) {
        return t.sum_all(t.mul_elem_const(t.softmax_rows(p[0]), R));
    });
}

TEST_CASE("layer_norm_rows matches finite differences") {
    rngutil::Rng rng(104);
    Mat X = rand_mat(rng, 3, 8), gamma = rand_mat(rng, 1, 8, 0.5), beta = rand_mat(rng, 1, 8);
    gamma.array() += 1.0;
    Mat R = rand_mat(rng, 3, 8);
    check_grads({X, gamma, beta}, [R](Tape &t, const std::vector<int> &p) {
        return t.sum_all(t.mul_elem_const(t.layer_norm_rows(p[0], p[1], p[2]), R));
    });
}

TEST_CASE("rotate_pairs matches finite differences and preserves norms") {
    rngutil::Rng rng(105);
    Mat X = rand_mat(rng, 4, 8);
    Mat angles = rand_mat(rng, 4, 4, 2.0);
    Mat R = rand_mat(rng, 4, 8);
    check_grads({X}, [angles, R](Tape &t, const std::vector<int> &p) {
        return t.sum_all(t.mul_elem_const(t.rotate_pairs(p[0], angles), R));
    });

    Tape t;
    int y = t.rotate_pairs(t.leaf(X), angles);
    for (int r = 0; r < 4; ++r)
        REQUIRE_THAT(t.val(y).row(r).norm(), Catch::Matchers::WithinRel(X.row(r).norm(), 1e-12));
}

TEST_CASE("gather_rows scatter-adds gradients for repeated ids") {
    rngutil::Rng rng(106);
    Mat E = rand_mat(rng, 5, 3);
    std::vector<int> ids{0, 2, 2, 4, 0};
    Mat R = rand_mat(rng, 5, 3);
    check_grads({E}, [ids, R](Tape &t, const std::vector<int> &p) {
        return t.sum_all(t.mul_elem_const(t.gather_rows(p[0], ids), R));
    });
}

TEST_CASE("concat_cols matches finite differences") {
    rngutil::Rng rng(107);
    Mat A = rand_mat(rng, 3, 2), B = rand_mat(rng, 3, 4), R = rand_mat(rng, 3, 6);
    check_grads({A, B}, [R](Tape &t, const std::vector<int> &p) {
        return t.sum_all(t.mul_elem_const(t.concat_cols({p[0], p[1]}), R));
    });
}

TEST_CASE("weighted_layer_sum routes gradient through the softmax weights") {
    rngutil::Rng rng(108);
    Mat alpha = rand_mat(rng, 3, 1);
    std::vector<Mat> layers{rand_mat(rng, 4, 5), rand_mat(rng, 4, 5), rand_mat(rng, 4, 5)};
    Mat R = rand_mat(rng, 4, 5);
    check_grads({alpha}, [layers, R](Tape &t, const std::vector<int> &p) {
        return t.sum_all(t.mul_elem_const(t.weighted_layer_sum(p[0], layers), R));
    });
}

TEST_CASE("cross_entropy_rows matches finite differences and skips ignored rows") {
    rngutil::Rng rng(109);
    Mat logits = rand_mat(rng, 5, 7);
    std::vector<int> targets{3, -1, 0, 6, 2};
    check_grads({logits}, [targets](Tape &t, const std::vector<int> &p) {
        return t.cross_entropy_rows(p[0], targets);
    });
}

TEST_CASE("margin_class_nll matches finite differences") {
    rngutil::Rng rng(110);
    Mat d = rand_mat(rng, 6, 16).cwiseAbs();
    std::vector<int> targets{0, 3, 15, 7, 1, 9};
    check_grads({d}, [targets](Tape &t, const std::vector<int> &p) {
        return t.margin_class_nll(p[0], targets, 0.3);
    });
}

TEST_CASE("clip_rows_norm matches finite differences on both branches") {
    rngutil::Rng rng(111);
    Mat X(4, 5);
    X.row(0) = rng.normal_vec(5).transpose() * 0.1; // untouched
    X.row(1) = rng.normal_vec(5).transpose() * 3.0; // clipped
    X.row(2) = rng.normal_vec(5).transpose() * 0.3;
    X.row(3) = rng.normal_vec(5).transpose() * 5.0;
    Mat R = rand_mat(rng, 4, 5);
    check_grads({X}, [R](Tape &t, const std::vector<int> &p) {
        return t.sum_all(t.mul_elem_const(t.clip_rows_norm(p[0], 1.0), R));
    });

    Tape t;
    int y = t.clip_rows_norm(t.leaf(X), 1.0);
    REQUIRE(t.val(y).row(0).norm() < 1.0);
    REQUIRE_THAT(t.val(y).row(1).norm(), Catch::Matchers::WithinAbs(1.0, 1e-7));
}

TEST_CASE("exp_map_rows matches finite differences") {
    rngutil::Rng rng(112);
    for (double c : {0.5, 1.0, 1.5}) {
        Mat V = rand_mat(rng, 4, 6, 0.5);
        V.row(2) *= 3.0; // larger norm row
        Mat R = rand_mat(rng, 4, 6);
        check_grads({V}, [c, R](Tape &t, const std::vector<int> &p) {
            return t.sum_all(t.mul_elem_const(t.exp_map_rows(p[0], geo::Curvature(c)), R));
        });
    }
}

TEST_CASE("exp_map_rows refuses saturating rows") {
    Mat V = Mat::Zero(1, 3);
    V(0, 0) = 50.0;
    Tape t;
    REQUIRE_THROWS_AS(t.exp_map_rows(t.leaf(V), geo::Curvature(1.0)), NumericalError);
}

TEST_CASE("poincare_distances matches finite differences for points and prototypes") {
    rngutil::Rng rng(113);
    for (double c : {0.5, 1.0}) {
        geo::Curvature curv(c);
        Mat V = rand_mat(rng, 3, 4, 0.2);
        Mat P = rand_mat(rng, 5, 4, 0.25);
        Mat R = rand_mat(rng, 3, 5);
        check_grads(
            {V, P},
            [curv, R](Tape &t, const std::vector<int> &p) {
                return t.sum_all(t.mul_elem_const(t.poincare_distances(p[0], p[1], curv), R));
            },
            5e-5);
    }
}

TEST_CASE("full attention block matches finite differences") {
    rngutil::Rng rng(114);
    const int T = 3, D = 4;
    Mat X = rand_mat(rng, T, D, 0.7);
    Mat Wq = rand_mat(rng, D, D, 0.5), Wk = rand_mat(rng, D, D, 0.5), Wv = rand_mat(rng, D, D, 0.5);
    Mat aq = rand_mat(rng, T, D / 2), ak = rand_mat(rng, T, D / 2);
    Mat gamma = Mat::Ones(1, D), beta = Mat::Zero(1, D);
    Mat R = rand_mat(rng, T, D);
    check_grads(
        {X, Wq, Wk, Wv, gamma, beta},
        [&](Tape &t, const std::vector<int> &p) {
            int q = t.rotate_pairs(t.matmul(p[0], p[1]), aq);
            int k = t.rotate_pairs(t.matmul(p[0], p[2]), ak);
            int v = t.matmul(p[0], p[3]);
            int att = t.softmax_rows(t.scale(t.matmul_bt(q, k), 1.0 / std::sqrt(double(D))));
            int z = t.add(p[0], t.matmul(att, v));
            int y = t.layer_norm_rows(z, p[4], p[5]);
            return t.sum_all(t.mul_elem_const(y, R));
        },
        5e-5);
}

TEST_CASE("backward rejects non-scalar and non-finite losses") {
    Tape t;
    int x = t.leaf(Mat::Ones(2, 2));
    REQUIRE_THROWS_AS(t.backward(x), std::invalid_argument);

    Tape t2;
    Mat bad(1, 1);
    bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    int l = t2.leaf(bad);
    REQUIRE_THROWS_AS(t2.backward(l), NumericalError);
}

TEST_CASE("constants receive no gradient storage") {
    Tape t;
    int c = t.constant(Mat::Ones(2, 2));
    int x = t.leaf(Mat::Ones(2, 2));
    int loss = t.sum_all(t.add(x, c));
    t.backward(loss);
    REQUIRE(t.has_grad(x));
    REQUIRE((t.grad(x).array() == 1.0).all());
}
