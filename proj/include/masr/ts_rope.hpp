#pragma once

#include "masr/activity.hpp"
#include "masr/common.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <vector>

// Time-and-speaker rotary positions. Activity is thresholded into turns, turn
// counts plus within-turn activity give each speaker a phase, and the head
// dimension is tiled in 16-wide groups whose 8 pairs interleave one time pair
// with one pair per speaker. Queries carry an extra (1 - pi) phase bias.

namespace masr::tsr {

using Mat = Eigen::MatrixXd;

enum class Region { Time, Spk1, Spk2, Spk3, Spk4 };
enum class Role { Query, Key };

struct PositionVector {
    int psi_time = 0;
    std::array<double, 4> psi_spk{};       // C + pi per speaker
    std::array<double, 4> psi_spk_query{}; // psi_spk + (1 - pi)
};

struct ActivityDerivatives {
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> a; // thresholded activity
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> r; // rising edges
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> C; // cumulative turn counts
};

struct TsRopeLayout {
    int head_dim = 0;
    int group_count = 0;
    std::vector<double> omega;       // per group, shared by its 8 pairs
    std::vector<Region> pair_region; // length D/2
};

// a(t, s) = 1 iff pi(t, s) >= tau
inline Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>
binarize_activity(const sd::ActivityMatrix &act, double tau) {
    check_arg(tau > 0.0 && tau < 1.0, "binarize_activity: tau must be in (0, 1)");
    return (act.pi.array() >= tau).cast<int>();
}

// rising edges r(t) = a(t) * (1 - a(t-1)) with a(-1) = 0; C = prefix sum of r
inline ActivityDerivatives
cumulative_turns(const Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> &a) {
    check_arg(((a.array() == 0) || (a.array() == 1)).all(), "cumulative_turns: a must be binary");
    ActivityDerivatives out;
    out.a = a;
    out.r.resizeLike(a);
    out.C.resizeLike(a);
    for (Eigen::Index s = 0; s < a.cols(); ++s) {
        int prev = 0, total = 0;
        for (Eigen::Index t = 0; t < a.rows(); ++t) {
            const int edge = a(t, s) * (1 - prev);
            total += edge;
            out.r(t, s) = edge;
            out.C(t, s) = total;
            prev = a(t, s);
        }
    }
    return out;
}

inline double speaker_position(int turn_count, double pi) {
    check_arg(turn_count >= 0, "speaker_position: turn count must be >= 0");
    check_arg(pi >= 0.0 && pi <= 1.0, "speaker_position: pi must be in [0, 1]");
    return turn_count + pi;
}

inline double query_phase_bias(double psi, double pi) {
    check_arg(pi >= 0.0 && pi <= 1.0, "query_phase_bias: pi must be in [0, 1]");
    return psi + (1.0 - pi);
}

inline TsRopeLayout build_layout(int head_dim) {
    check_arg(head_dim >= 16 && head_dim % 16 == 0,
              "build_layout: head_dim must be a positive multiple of 16");
    TsRopeLayout layout;
    layout.head_dim = head_dim;
    layout.group_count = head_dim / 16;
    layout.omega.resize(layout.group_count);
    for (int i = 0; i < layout.group_count; ++i)
        layout.omega[i] = std::pow(10000.0, -2.0 * i / head_dim);
    static constexpr Region kGroupPattern[8] = {Region::Time, Region::Spk1, Region::Time,
                                                Region::Spk2, Region::Time, Region::Spk3,
                                                Region::Time, Region::Spk4};
    layout.pair_region.reserve(static_cast<size_t>(head_dim / 2));
    for (int gp = 0; gp < layout.group_count; ++gp)
        for (Region reg : kGroupPattern) layout.pair_region.push_back(reg);
    return layout;
}

inline Eigen::VectorXd rotation_angles(const PositionVector &pos, const TsRopeLayout &layout,
                                       Role role) {
    Eigen::VectorXd angles(layout.head_dim / 2);
    for (int p = 0; p < layout.head_dim / 2; ++p) {
        const double w = layout.omega[static_cast<size_t>(p / 8)];
        const Region reg = layout.pair_region[static_cast<size_t>(p)];
        double psi;
        if (reg == Region::Time) {
            psi = static_cast<double>(pos.psi_time);
        } else {
            const int s = static_cast<int>(reg) - static_cast<int>(Region::Spk1);
            psi = role == Role::Query ? pos.psi_spk_query[static_cast<size_t>(s)]
                                      : pos.psi_spk[static_cast<size_t>(s)];
        }
        angles(p) = psi * w;
    }
    return angles;
}

// per pair i: (x_{2i}, x_{2i+1}) rotated by angle_i; norm preserving
inline Eigen::VectorXd apply_rotation(const Eigen::VectorXd &x, const Eigen::VectorXd &angles) {
    check_arg(x.size() % 2 == 0 && angles.size() * 2 == x.size(),
              "apply_rotation: need D even and D/2 angles");
    Eigen::VectorXd y(x.size());
    for (Eigen::Index p = 0; p < angles.size(); ++p) {
        const double cs = std::cos(angles(p)), sn = std::sin(angles(p));
        y(2 * p) = x(2 * p) * cs - x(2 * p + 1) * sn;
        y(2 * p + 1) = x(2 * p) * sn + x(2 * p + 1) * cs;
    }
    return y;
}

inline double ts_attention_logits(const Eigen::VectorXd &q, const Eigen::VectorXd &k,
                                  const PositionVector &pos_q, const PositionVector &pos_k,
                                  const TsRopeLayout &layout) {
    check_arg(q.size() == layout.head_dim && k.size() == layout.head_dim,
              "ts_attention_logits: vector dims must equal head_dim");
    const Eigen::VectorXd rq = apply_rotation(q, rotation_angles(pos_q, layout, Role::Query));
    const Eigen::VectorXd rk = apply_rotation(k, rotation_angles(pos_k, layout, Role::Key));
    return rq.dot(rk) / std::sqrt(static_cast<double>(layout.head_dim));
}

// Ablation switches: drop_turn_counts forces C = 0, drop_activity drops the pi
// term of the speaker position (psi = C alone), drop_query_bias removes the
// (1 - pi) query phase.
struct PositionConfig {
    double tau = 0.1;
    bool use_turn_counts = true;
    bool use_activity = true;
    bool use_query_bias = true;
};

inline std::vector<PositionVector> build_positions(const sd::ActivityMatrix &act,
                                                   const PositionConfig &cfg = {}) {
    const auto a = binarize_activity(act, cfg.tau);
    const auto deriv = cumulative_turns(a);
    std::vector<PositionVector> out(static_cast<size_t>(act.frames()));
    for (int t = 0; t < act.frames(); ++t) {
        PositionVector &pv = out[static_cast<size_t>(t)];
        pv.psi_time = t;
        for (int s = 0; s < sd::kMaxSpeakers; ++s) {
            const double pi = act.pi(t, s);
            const int C = cfg.use_turn_counts ? deriv.C(t, s) : 0;
            const double psi = cfg.use_activity ? speaker_position(C, pi)
                                                : static_cast<double>(C);
            pv.psi_spk[static_cast<size_t>(s)] = psi;
            pv.psi_spk_query[static_cast<size_t>(s)] =
                cfg.use_query_bias ? query_phase_bias(psi, pi) : psi;
        }
    }
    return out;
}

// [T x D/2] angle matrix for rotate_pairs on a whole sequence
inline Mat angle_matrix(const std::vector<PositionVector> &positions, const TsRopeLayout &layout,
                        Role role) {
    Mat angles(static_cast<Eigen::Index>(positions.size()), layout.head_dim / 2);
    for (size_t t = 0; t < positions.size(); ++t)
        angles.row(static_cast<Eigen::Index>(t)) =
            rotation_angles(positions[t], layout, role).transpose();
    return angles;
}

} // namespace masr::tsr
