#pragma once

#include "masr/common.hpp"
#include "masr/geometry.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <unordered_map>

// AdamW for Euclidean parameters and a Riemannian Adam for the ball-valued
// prototype rows. State is keyed by parameter name so optimizers survive
// across tape rebuilds.

namespace masr::optim {

using Mat = Eigen::MatrixXd;

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
  public:
    explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::string &key, Mat &value, const Mat &grad) {
        check_arg(value.rows() == grad.rows() && value.cols() == grad.cols(),
                  "AdamW::step: grad shape mismatch");
        auto &st = states_[key];
        if (st.t == 0) {
            st.m = Mat::Zero(value.rows(), value.cols());
            st.v = Mat::Zero(value.rows(), value.cols());
        }
        ++st.t;
        st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * grad;
        st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
        Mat update = (st.m / bc1).cwiseQuotient(
            ((st.v / bc2).cwiseSqrt().array() + cfg_.eps).matrix());
        value -= cfg_.lr * (update + cfg_.weight_decay * value);
        if (!value.allFinite()) throw NumericalError("AdamW::step: non-finite parameter");
    }

    const AdamConfig &config() const { return cfg_; }

  private:
    struct State {
        Mat m, v;
        long t = 0;
    };
    AdamConfig cfg_;
    std::unordered_map<std::string, State> states_;
};

// Rows of the parameter are points on the ball. Euclidean row gradients are
// rescaled to Riemannian ones, fed through elementwise Adam moments, and the
// resulting tangent step is applied by retraction; rows never leave the ball.
class RiemannianAdam {
  public:
    RiemannianAdam(AdamConfig cfg, geo::Curvature c) : cfg_(cfg), c_(c) {}

    void step(const std::string &key, Mat &value, const Mat &grad) {
        check_arg(value.rows() == grad.rows() && value.cols() == grad.cols(),
                  "RiemannianAdam::step: grad shape mismatch");
        auto &st = states_[key];
        if (st.t == 0) {
            st.m = Mat::Zero(value.rows(), value.cols());
            st.v = Mat::Zero(value.rows(), value.cols());
        }
        ++st.t;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
        for (Eigen::Index r = 0; r < value.rows(); ++r) {
            geo::PoincarePoint x{value.row(r).transpose()};
            Eigen::VectorXd rg = geo::riemannian_rescale(grad.row(r).transpose(), x, c_);
            st.m.row(r) = cfg_.beta1 * st.m.row(r) + (1.0 - cfg_.beta1) * rg.transpose();
            st.v.row(r) = cfg_.beta2 * st.v.row(r) +
                          (1.0 - cfg_.beta2) * rg.cwiseProduct(rg).transpose();
            Eigen::VectorXd mhat = st.m.row(r).transpose() / bc1;
            Eigen::VectorXd vhat = st.v.row(r).transpose() / bc2;
            Eigen::VectorXd step_vec =
                -cfg_.lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + cfg_.eps).matrix());
            geo::PoincarePoint moved = geo::retract(x, step_vec, c_);
            if (c_.sqrt_c() * moved.norm() > 1.0 - geo::kBoundaryEps + 1e-12)
                throw NumericalError("RiemannianAdam::step: row escaped the ball");
            value.row(r) = moved.coords.transpose();
        }
    }

    const AdamConfig &config() const { return cfg_; }
    geo::Curvature curvature() const { return c_; }

  private:
    struct State {
        Mat m, v;
        long t = 0;
    };
    AdamConfig cfg_;
    geo::Curvature c_;
    std::unordered_map<std::string, State> states_;
};

} // namespace masr::optim
