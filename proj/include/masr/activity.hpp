#pragma once

#include "masr/common.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <utility>
#include <vector>

// Frame-level speaker activity and the multi-layer feature view, shared by the
// activity estimator, the positional encoding, the encoder, and the generator.

namespace masr::sd {

inline constexpr int kMaxSpeakers = 4;

// pi(t, s): probability that speaker s+1 is active in frame t.
struct ActivityMatrix {
    Eigen::MatrixXd pi; // [T x 4], entries in [0, 1]
    double frame_rate = 50.0;

    int frames() const { return static_cast<int>(pi.rows()); }
};

inline ActivityMatrix make_activity(Eigen::MatrixXd pi, double frame_rate) {
    check_arg(pi.cols() == kMaxSpeakers, "activity matrix must have 4 speaker columns");
    check_arg(frame_rate > 0.0, "frame_rate must be > 0");
    check_arg(pi.allFinite() && pi.minCoeff() >= 0.0 && pi.maxCoeff() <= 1.0,
              "activity values must be finite and in [0, 1]");
    return {std::move(pi), frame_rate};
}

// L stacked [T x F] views of the same frames
struct LayerFeatureStack {
    std::vector<Eigen::MatrixXd> features;

    int layer_count() const { return static_cast<int>(features.size()); }
    int frames() const { return static_cast<int>(features.at(0).rows()); }
    int dim() const { return static_cast<int>(features.at(0).cols()); }
};

inline LayerFeatureStack make_layer_stack(std::vector<Eigen::MatrixXd> features) {
    check_arg(!features.empty(), "layer stack needs at least one layer");
    for (const auto &f : features)
        check_arg(f.rows() == features[0].rows() && f.cols() == features[0].cols(),
                  "layer stack layers must share one shape");
    return {std::move(features)};
}

// nearest-frame resampling onto a target frame grid (frame centers compared)
inline Eigen::MatrixXd resample_activity(const ActivityMatrix &act, int target_frames,
                                         double target_rate) {
    check_arg(target_frames >= 1 && target_rate > 0.0, "resample_activity: bad target grid");
    if (act.frames() == target_frames && act.frame_rate == target_rate) return act.pi;
    Eigen::MatrixXd out(target_frames, kMaxSpeakers);
    for (int t = 0; t < target_frames; ++t) {
        const double center = (t + 0.5) / target_rate;
        int src = static_cast<int>(std::floor(center * act.frame_rate));
        src = std::min(std::max(src, 0), act.frames() - 1);
        out.row(t) = act.pi.row(src);
    }
    return out;
}

} // namespace masr::sd
