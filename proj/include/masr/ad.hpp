#pragma once

#include "masr/common.hpp"
#include "masr/geometry.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <utility>
#include <vector>

// Reverse-mode autodiff on a per-step tape of Eigen matrices. Models build the
// graph define-by-run each forward pass; backward() fills gradients for every
// node that (transitively) depends on a leaf. The op set is exactly what the
// speaker-activity head and the toy encoder/decoder need, including the
// hyperbolic ops whose backward passes reuse the geometry module's analytic
// gradients.

namespace masr::ad {

using Mat = Eigen::MatrixXd;

enum class Op {
    Leaf,
    Const,
    MatMul,        // A * B
    MatMulBT,      // A * B^T
    Add,           // same-shape sum
    AddRow,        // X + broadcast row vector (1 x H)
    Scale,         // s * X
    Relu,
    SoftmaxRows,
    LayerNormRows, // inputs: X, gamma (1xH), beta (1xH)
    RotatePairs,   // rotary transform with fixed per-row angles
    GatherRows,    // embedding lookup by row ids
    ConcatCols,
    WeightedLayerSum, // softmax(alpha)-weighted sum of fixed layer matrices
    CrossEntropyRows, // mean token NLL over rows, -1 targets ignored
    MarginClassNll,   // distance-vector classifier loss
    ClipRowsNorm,
    ExpMapRows,
    PoincareDistances, // rows of X against rows of P
    MulElemConst,
    SumAll,
};

struct Node {
    Op op;
    std::vector<int> in;
    Mat val;
    bool needs_grad = false;
    double scalar = 0.0;  // Scale factor / clip radius / margin
    double scalar2 = 0.0; // clip eps
    std::vector<int> ids; // gather indices or class targets
    Mat aux;              // angles, element factors, cached probs, xhat
    Mat aux2;             // cached per-row inverse std
    std::vector<Mat> layers;
    geo::Curvature curv{1.0};
};

class Tape {
  public:
    int leaf(Mat value) { return push(Op::Leaf, {}, std::move(value), true); }
    int constant(Mat value) { return push(Op::Const, {}, std::move(value), false); }

    int matmul(int a, int b) {
        check_arg(val(a).cols() == val(b).rows(), "matmul: inner dims differ");
        return push(Op::MatMul, {a, b}, val(a) * val(b));
    }
    int matmul_bt(int a, int b) {
        check_arg(val(a).cols() == val(b).cols(), "matmul_bt: col dims differ");
        return push(Op::MatMulBT, {a, b}, val(a) * val(b).transpose());
    }
    int add(int a, int b) {
        check_arg(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
                  "add: shape mismatch");
        return push(Op::Add, {a, b}, val(a) + val(b));
    }
    int add_row(int x, int row) {
        check_arg(val(row).rows() == 1 && val(row).cols() == val(x).cols(),
                  "add_row: need a 1 x cols(x) vector");
        Mat y = val(x).rowwise() + val(row).row(0);
        return push(Op::AddRow, {x, row}, std::move(y));
    }
    int scale(int x, double s) {
        int id = push(Op::Scale, {x}, val(x) * s);
        nodes_[id].scalar = s;
        return id;
    }
    int relu(int x) { return push(Op::Relu, {x}, val(x).cwiseMax(0.0)); }

    int softmax_rows(int x) {
        Mat p = val(x);
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            Eigen::RowVectorXd row = p.row(r);
            row.array() -= row.maxCoeff();
            row = row.array().exp();
            p.row(r) = row / row.sum();
        }
        return push(Op::SoftmaxRows, {x}, std::move(p));
    }

    int layer_norm_rows(int x, int gamma, int beta, double eps = 1e-5) {
        const Mat &X = val(x);
        const Eigen::Index H = X.cols();
        check_arg(val(gamma).rows() == 1 && val(gamma).cols() == H &&
                      val(beta).rows() == 1 && val(beta).cols() == H,
                  "layer_norm_rows: gamma/beta must be 1 x H");
        Mat xhat(X.rows(), H);
        Mat istd(X.rows(), 1);
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const double mu = X.row(r).mean();
            const double var = (X.row(r).array() - mu).square().mean();
            istd(r, 0) = 1.0 / std::sqrt(var + eps);
            xhat.row(r) = (X.row(r).array() - mu) * istd(r, 0);
        }
        Mat y = (xhat.array().rowwise() * val(gamma).row(0).array()).rowwise() +
                val(beta).row(0).array();
        int id = push(Op::LayerNormRows, {x, gamma, beta}, std::move(y));
        nodes_[id].aux = std::move(xhat);
        nodes_[id].aux2 = std::move(istd);
        return id;
    }

    int rotate_pairs(int x, Mat angles) {
        const Mat &X = val(x);
        check_arg(X.cols() % 2 == 0, "rotate_pairs: odd dimension");
        check_arg(angles.rows() == X.rows() && angles.cols() * 2 == X.cols(),
                  "rotate_pairs: angles must be rows x D/2");
        int id = push(Op::RotatePairs, {x}, rotate(X, angles, 1.0));
        nodes_[id].aux = std::move(angles);
        return id;
    }

    int gather_rows(int table, std::vector<int> ids) {
        const Mat &E = val(table);
        Mat y(static_cast<Eigen::Index>(ids.size()), E.cols());
        for (size_t n = 0; n < ids.size(); ++n) {
            check_arg(ids[n] >= 0 && ids[n] < E.rows(), "gather_rows: id out of range");
            y.row(static_cast<Eigen::Index>(n)) = E.row(ids[n]);
        }
        int id = push(Op::GatherRows, {table}, std::move(y));
        nodes_[id].ids = std::move(ids);
        return id;
    }

    int concat_cols(const std::vector<int> &parts) {
        check_arg(!parts.empty(), "concat_cols: empty");
        Eigen::Index rows = val(parts[0]).rows(), cols = 0;
        for (int p : parts) {
            check_arg(val(p).rows() == rows, "concat_cols: row mismatch");
            cols += val(p).cols();
        }
        Mat y(rows, cols);
        Eigen::Index at = 0;
        for (int p : parts) {
            y.middleCols(at, val(p).cols()) = val(p);
            at += val(p).cols();
        }
        return push(Op::ConcatCols, parts, std::move(y));
    }

    // y = sum_l softmax(alpha)_l * layers[l]; layers are fixed inputs
    int weighted_layer_sum(int alpha, std::vector<Mat> layer_mats) {
        const Mat &A = val(alpha);
        check_arg(A.cols() == 1 && static_cast<size_t>(A.rows()) == layer_mats.size(),
                  "weighted_layer_sum: alpha must be L x 1 matching layer count");
        Eigen::VectorXd w = A.col(0);
        w.array() -= w.maxCoeff();
        w = w.array().exp();
        w /= w.sum();
        Mat y = Mat::Zero(layer_mats[0].rows(), layer_mats[0].cols());
        for (size_t l = 0; l < layer_mats.size(); ++l) {
            check_arg(layer_mats[l].rows() == y.rows() && layer_mats[l].cols() == y.cols(),
                      "weighted_layer_sum: layer shape mismatch");
            y += w(static_cast<Eigen::Index>(l)) * layer_mats[l];
        }
        int id = push(Op::WeightedLayerSum, {alpha}, std::move(y));
        nodes_[id].aux = w;
        nodes_[id].layers = std::move(layer_mats);
        return id;
    }

    int cross_entropy_rows(int logits, std::vector<int> targets) {
        const Mat &X = val(logits);
        check_arg(static_cast<Eigen::Index>(targets.size()) == X.rows(),
                  "cross_entropy_rows: one target per row");
        Mat probs(X.rows(), X.cols());
        double loss = 0.0;
        int scored = 0;
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            Eigen::RowVectorXd row = X.row(r);
            const double mx = row.maxCoeff();
            Eigen::RowVectorXd e = (row.array() - mx).exp();
            const double z = e.sum();
            probs.row(r) = e / z;
            const int t = targets[static_cast<size_t>(r)];
            if (t < 0) continue;
            check_arg(t < X.cols(), "cross_entropy_rows: target out of range");
            loss += std::log(z) - (X(r, t) - mx);
            ++scored;
        }
        check_arg(scored > 0, "cross_entropy_rows: no scored rows");
        Mat out(1, 1);
        out(0, 0) = loss / scored;
        int id = push(Op::CrossEntropyRows, {logits}, std::move(out));
        nodes_[id].ids = std::move(targets);
        nodes_[id].aux = std::move(probs);
        nodes_[id].scalar = static_cast<double>(scored);
        return id;
    }

    // loss over rows of a distance matrix: logits = -d with the true class
    // additionally penalized by margin, then mean NLL
    int margin_class_nll(int dists, std::vector<int> targets, double margin) {
        const Mat &D = val(dists);
        check_arg(static_cast<Eigen::Index>(targets.size()) == D.rows(),
                  "margin_class_nll: one target per row");
        check_arg(margin >= 0.0, "margin_class_nll: margin must be >= 0");
        Mat probs(D.rows(), D.cols());
        double loss = 0.0;
        for (Eigen::Index r = 0; r < D.rows(); ++r) {
            const int t = targets[static_cast<size_t>(r)];
            check_arg(t >= 0 && t < D.cols(), "margin_class_nll: target out of range");
            Eigen::RowVectorXd logits = -D.row(r);
            logits(t) -= margin;
            const double mx = logits.maxCoeff();
            Eigen::RowVectorXd e = (logits.array() - mx).exp();
            const double z = e.sum();
            probs.row(r) = e / z;
            loss += std::log(z) - (logits(t) - mx);
        }
        Mat out(1, 1);
        out(0, 0) = loss / static_cast<double>(D.rows());
        int id = push(Op::MarginClassNll, {dists}, std::move(out));
        nodes_[id].ids = std::move(targets);
        nodes_[id].aux = std::move(probs);
        return id;
    }

    // per-row v <- v * min(1, r / (||v|| + eps))
    int clip_rows_norm(int x, double radius, double eps = 1e-8) {
        check_arg(radius > 0.0, "clip_rows_norm: radius must be > 0");
        const Mat &X = val(x);
        Mat y = X;
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const double n = X.row(r).norm();
            const double f = std::min(1.0, radius / (n + eps));
            y.row(r) *= f;
        }
        int id = push(Op::ClipRowsNorm, {x}, std::move(y));
        nodes_[id].scalar = radius;
        nodes_[id].scalar2 = eps;
        return id;
    }

    int exp_map_rows(int x, geo::Curvature c) {
        const Mat &X = val(x);
        Mat y(X.rows(), X.cols());
        const double sc = c.sqrt_c();
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const double n = X.row(r).norm();
            if (n == 0.0) {
                y.row(r).setZero();
                continue;
            }
            const double t = std::tanh(sc * n);
            if (t >= 1.0 - geo::kBoundaryEps)
                throw NumericalError("exp_map_rows: row saturates the ball; clip first");
            y.row(r) = X.row(r) * (t / (sc * n));
        }
        int id = push(Op::ExpMapRows, {x}, std::move(y));
        nodes_[id].curv = c;
        return id;
    }

    int poincare_distances(int x, int protos, geo::Curvature c) {
        const Mat &X = val(x);
        const Mat &P = val(protos);
        check_arg(X.cols() == P.cols(), "poincare_distances: dim mismatch");
        Mat D(X.rows(), P.rows());
        for (Eigen::Index t = 0; t < X.rows(); ++t) {
            geo::PoincarePoint v{X.row(t).transpose()};
            for (Eigen::Index k = 0; k < P.rows(); ++k)
                D(t, k) = geo::poincare_distance(v, {P.row(k).transpose()}, c);
        }
        int id = push(Op::PoincareDistances, {x, protos}, std::move(D));
        nodes_[id].curv = c;
        return id;
    }

    int mul_elem_const(int x, Mat factor) {
        check_arg(factor.rows() == val(x).rows() && factor.cols() == val(x).cols(),
                  "mul_elem_const: shape mismatch");
        Mat y = val(x).cwiseProduct(factor);
        int id = push(Op::MulElemConst, {x}, std::move(y));
        nodes_[id].aux = std::move(factor);
        return id;
    }

    int sum_all(int x) {
        Mat y(1, 1);
        y(0, 0) = val(x).sum();
        return push(Op::SumAll, {x}, std::move(y));
    }

    const Mat &val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    bool has_grad(int id) const { return has_grad_[static_cast<size_t>(id)] != 0; }
    const Mat &grad(int id) const {
        check_arg(has_grad(id), "grad: node did not receive a gradient");
        return grads_[static_cast<size_t>(id)];
    }
    size_t size() const { return nodes_.size(); }

    void backward(int loss) {
        const auto &L = val(loss);
        check_arg(L.rows() == 1 && L.cols() == 1, "backward: loss must be 1 x 1");
        if (!std::isfinite(L(0, 0))) throw NumericalError("backward: non-finite loss");
        grads_.assign(nodes_.size(), Mat());
        has_grad_.assign(nodes_.size(), 0);
        accum(loss, Mat::Ones(1, 1));
        for (int id = loss; id >= 0; --id) {
            if (!has_grad_[static_cast<size_t>(id)]) continue;
            if (!nodes_[static_cast<size_t>(id)].needs_grad) continue;
            step_back(id);
        }
    }

  private:
    std::vector<Node> nodes_;
    std::vector<Mat> grads_;
    std::vector<char> has_grad_;

    int push(Op op, std::vector<int> in, Mat value, bool needs = false) {
        Node n;
        n.op = op;
        n.in = std::move(in);
        n.val = std::move(value);
        n.needs_grad = needs;
        for (int i : n.in) n.needs_grad = n.needs_grad || nodes_[static_cast<size_t>(i)].needs_grad;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void accum(int id, const Mat &g) {
        auto &slot = grads_[static_cast<size_t>(id)];
        if (!has_grad_[static_cast<size_t>(id)]) {
            slot = g;
            has_grad_[static_cast<size_t>(id)] = 1;
        } else {
            slot += g;
        }
    }

    bool wants(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    static Mat rotate(const Mat &X, const Mat &angles, double sign) {
        Mat y(X.rows(), X.cols());
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            for (Eigen::Index p = 0; p < angles.cols(); ++p) {
                const double th = sign * angles(r, p);
                const double cs = std::cos(th), sn = std::sin(th);
                const double a = X(r, 2 * p), b = X(r, 2 * p + 1);
                y(r, 2 * p) = a * cs - b * sn;
                y(r, 2 * p + 1) = a * sn + b * cs;
            }
        }
        return y;
    }

    void step_back(int id) {
        Node &n = nodes_[static_cast<size_t>(id)];
        const Mat &g = grads_[static_cast<size_t>(id)];
        switch (n.op) {
        case Op::Leaf:
        case Op::Const:
            break;
        case Op::MatMul:
            if (wants(n.in[0])) accum(n.in[0], g * val(n.in[1]).transpose());
            if (wants(n.in[1])) accum(n.in[1], val(n.in[0]).transpose() * g);
            break;
        case Op::MatMulBT:
            if (wants(n.in[0])) accum(n.in[0], g * val(n.in[1]));
            if (wants(n.in[1])) accum(n.in[1], g.transpose() * val(n.in[0]));
            break;
        case Op::Add:
            if (wants(n.in[0])) accum(n.in[0], g);
            if (wants(n.in[1])) accum(n.in[1], g);
            break;
        case Op::AddRow:
            if (wants(n.in[0])) accum(n.in[0], g);
            if (wants(n.in[1])) accum(n.in[1], g.colwise().sum());
            break;
        case Op::Scale:
            if (wants(n.in[0])) accum(n.in[0], g * n.scalar);
            break;
        case Op::Relu:
            if (wants(n.in[0]))
                accum(n.in[0], (val(n.in[0]).array() > 0.0).cast<double>().matrix().cwiseProduct(g));
            break;
        case Op::SoftmaxRows: {
            if (!wants(n.in[0])) break;
            const Mat &p = n.val;
            Mat dx(p.rows(), p.cols());
            for (Eigen::Index r = 0; r < p.rows(); ++r) {
                const double dot = g.row(r).dot(p.row(r));
                dx.row(r) = p.row(r).cwiseProduct(g.row(r).array().matrix() -
                                                  Eigen::RowVectorXd::Constant(p.cols(), dot));
            }
            accum(n.in[0], dx);
            break;
        }
        case Op::LayerNormRows: {
            const Mat &xhat = n.aux;
            const Mat &istd = n.aux2;
            const Eigen::RowVectorXd gamma = val(n.in[1]).row(0);
            if (wants(n.in[2])) accum(n.in[2], g.colwise().sum());
            if (wants(n.in[1])) accum(n.in[1], g.cwiseProduct(xhat).colwise().sum());
            if (wants(n.in[0])) {
                Mat dx(xhat.rows(), xhat.cols());
                const double H = static_cast<double>(xhat.cols());
                for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                    Eigen::RowVectorXd dxh = g.row(r).cwiseProduct(gamma);
                    const double m1 = dxh.sum() / H;
                    const double m2 = dxh.cwiseProduct(xhat.row(r)).sum() / H;
                    dx.row(r) = istd(r, 0) * (dxh.array() - m1 - xhat.row(r).array() * m2);
                }
                accum(n.in[0], dx);
            }
            break;
        }
        case Op::RotatePairs:
            if (wants(n.in[0])) accum(n.in[0], rotate(g, n.aux, -1.0));
            break;
        case Op::GatherRows: {
            if (!wants(n.in[0])) break;
            Mat dE = Mat::Zero(val(n.in[0]).rows(), val(n.in[0]).cols());
            for (size_t r = 0; r < n.ids.size(); ++r)
                dE.row(n.ids[r]) += g.row(static_cast<Eigen::Index>(r));
            accum(n.in[0], dE);
            break;
        }
        case Op::ConcatCols: {
            Eigen::Index at = 0;
            for (int p : n.in) {
                const Eigen::Index w = val(p).cols();
                if (wants(p)) accum(p, g.middleCols(at, w));
                at += w;
            }
            break;
        }
        case Op::WeightedLayerSum: {
            if (!wants(n.in[0])) break;
            const Eigen::VectorXd w = n.aux.col(0);
            const Eigen::Index L = w.size();
            Eigen::VectorXd dw(L);
            for (Eigen::Index l = 0; l < L; ++l)
                dw(l) = g.cwiseProduct(n.layers[static_cast<size_t>(l)]).sum();
            const double dot = dw.dot(w);
            Mat dalpha = (w.array() * (dw.array() - dot)).matrix();
            accum(n.in[0], dalpha);
            break;
        }
        case Op::CrossEntropyRows: {
            if (!wants(n.in[0])) break;
            const Mat &p = n.aux;
            Mat dx = Mat::Zero(p.rows(), p.cols());
            const double s = g(0, 0) / n.scalar;
            for (Eigen::Index r = 0; r < p.rows(); ++r) {
                const int t = n.ids[static_cast<size_t>(r)];
                if (t < 0) continue;
                dx.row(r) = p.row(r) * s;
                dx(r, t) -= s;
            }
            accum(n.in[0], dx);
            break;
        }
        case Op::MarginClassNll: {
            if (!wants(n.in[0])) break;
            const Mat &p = n.aux;
            const double s = g(0, 0) / static_cast<double>(p.rows());
            Mat dd = -p * s; // d(logit)/dd = -1, so dL/dd = -(p - onehot) * s
            for (Eigen::Index r = 0; r < p.rows(); ++r)
                dd(r, n.ids[static_cast<size_t>(r)]) += s;
            accum(n.in[0], dd);
            break;
        }
        case Op::ClipRowsNorm: {
            if (!wants(n.in[0])) break;
            const Mat &X = val(n.in[0]);
            const double r0 = n.scalar, eps = n.scalar2;
            Mat dx(X.rows(), X.cols());
            for (Eigen::Index r = 0; r < X.rows(); ++r) {
                const double nn = X.row(r).norm();
                if (r0 / (nn + eps) >= 1.0) {
                    dx.row(r) = g.row(r);
                } else {
                    const double f = r0 / (nn + eps);
                    const double xg = X.row(r).dot(g.row(r));
                    dx.row(r) = f * g.row(r) - (f * xg / ((nn + eps) * nn)) * X.row(r);
                }
            }
            accum(n.in[0], dx);
            break;
        }
        case Op::ExpMapRows: {
            if (!wants(n.in[0])) break;
            const Mat &V = val(n.in[0]);
            const double sc = n.curv.sqrt_c();
            Mat dv(V.rows(), V.cols());
            for (Eigen::Index r = 0; r < V.rows(); ++r) {
                const double nn = V.row(r).norm();
                if (nn < 1e-12) {
                    // y ~ v - (c/3) ||v||^2 v near zero: leading term is identity
                    dv.row(r) = g.row(r);
                    continue;
                }
                const double t = std::tanh(sc * nn);
                const double gg = t / (sc * nn);
                const double gprime = ((1.0 - t * t) - gg) / nn;
                const double vdotg = V.row(r).dot(g.row(r));
                dv.row(r) = gg * g.row(r) + (gprime / nn) * vdotg * V.row(r);
            }
            accum(n.in[0], dv);
            break;
        }
        case Op::PoincareDistances: {
            const Mat &X = val(n.in[0]);
            const Mat &P = val(n.in[1]);
            const bool wx = wants(n.in[0]), wp = wants(n.in[1]);
            Mat dX = Mat::Zero(X.rows(), X.cols());
            Mat dP = Mat::Zero(P.rows(), P.cols());
            for (Eigen::Index t = 0; t < X.rows(); ++t) {
                geo::PoincarePoint v{X.row(t).transpose()};
                for (Eigen::Index k = 0; k < P.rows(); ++k) {
                    const double w = g(t, k);
                    if (w == 0.0) continue;
                    auto [gx, gp] = geo::distance_grad(v, {P.row(k).transpose()}, n.curv);
                    if (wx) dX.row(t) += w * gx.transpose();
                    if (wp) dP.row(k) += w * gp.transpose();
                }
            }
            if (wx) accum(n.in[0], dX);
            if (wp) accum(n.in[1], dP);
            break;
        }
        case Op::MulElemConst:
            if (wants(n.in[0])) accum(n.in[0], g.cwiseProduct(n.aux));
            break;
        case Op::SumAll:
            if (wants(n.in[0]))
                accum(n.in[0], Mat::Constant(val(n.in[0]).rows(), val(n.in[0]).cols(), g(0, 0)));
            break;
        }
    }
};

} // namespace masr::ad
