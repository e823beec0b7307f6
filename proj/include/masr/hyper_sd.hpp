#pragma once

#include "masr/activity.hpp"
#include "masr/ad.hpp"
#include "masr/common.hpp"
#include "masr/geometry.hpp"
#include "masr/optim.hpp"
#include "masr/rng.hpp"
#include "masr/synth.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

// Frame-level speaker-activity classifier: aggregate layered frame features,
// contextualize with a small self-attention encoder, project each frame into
// the Poincare ball, and read per-speaker activity off distances to 16
// power-set prototypes (one per subset of the 4 speakers).

namespace masr::sd {

using ad::Mat;
using Vec = Eigen::VectorXd;

inline constexpr int kNumClasses = 16;

// ── speaker-set classes ─────────────────────────────────────────────────────

// bitmask encoding: class index = sum over active speakers of 2^(s-1)
inline int class_label_from_speaker_set(const std::vector<int> &active) {
    int mask = 0;
    for (int s : active) {
        check_arg(s >= 1 && s <= kMaxSpeakers, "speaker id out of range 1..4");
        mask |= 1 << (s - 1);
    }
    return mask;
}

// B[s][n] = 1 iff speaker s+1 belongs to class n
inline Mat membership_matrix() {
    Mat b = Mat::Zero(kMaxSpeakers, kNumClasses);
    for (int s = 0; s < kMaxSpeakers; ++s)
        for (int n = 0; n < kNumClasses; ++n)
            if (n & (1 << s)) b(s, n) = 1.0;
    return b;
}

struct PrototypeSet {
    Mat points;     // [16 x I] ball coordinates, one prototype per class
    Mat membership; // [4 x 16]
};

inline Vec prototype_distances(const geo::PoincarePoint &v, const PrototypeSet &protos,
                               geo::Curvature c) {
    check_arg(protos.points.rows() == kNumClasses, "prototype set must have 16 classes");
    Vec d(kNumClasses);
    for (int n = 0; n < kNumClasses; ++n)
        d[n] = geo::poincare_distance(v, {protos.points.row(n).transpose()}, c);
    return d;
}

// pi_s = sum_n B[s][n] * sigmoid(-d_n), clamped to [0,1]
inline Vec marginalize_activity(const Vec &d, const PrototypeSet &protos) {
    check_arg(d.size() == kNumClasses, "marginalize_activity: need 16 distances");
    Vec pi = Vec::Zero(kMaxSpeakers);
    for (int s = 0; s < kMaxSpeakers; ++s) {
        double acc = 0.0;
        for (int n = 0; n < kNumClasses; ++n)
            if (protos.membership(s, n) != 0.0) acc += 1.0 / (1.0 + std::exp(d[n]));
        pi[s] = std::min(1.0, std::max(0.0, acc));
    }
    return pi;
}

// loss = -log softmax(logits)[true_class] with logits_n = -d_n and the true
// class penalized by an additive margin on its distance; gradient is analytic
inline std::pair<double, Vec> classifier_loss(const Vec &d, int true_class, double margin) {
    check_arg(d.size() == kNumClasses, "classifier_loss: need 16 distances");
    check_arg(true_class >= 0 && true_class < kNumClasses, "true_class in 0..15");
    check_arg(margin >= 0.0, "margin must be >= 0");
    Vec logits = -d;
    logits[true_class] -= margin;
    const double mx = logits.maxCoeff();
    const Vec ex = (logits.array() - mx).exp();
    const double z = ex.sum();
    const Vec p = ex / z;
    const double loss = -(logits[true_class] - mx - std::log(z));
    // dL/dlogits = p - onehot and dlogits/dd = -1
    Vec grad(kNumClasses);
    for (int n = 0; n < kNumClasses; ++n) grad[n] = (n == true_class ? 1.0 : 0.0) - p[n];
    return {loss, grad};
}

// ── aggregation ─────────────────────────────────────────────────────────────

struct LayerAggregator {
    Vec alpha; // unconstrained logits, length L
};

inline Vec layer_weights(const LayerAggregator &agg) {
    const double mx = agg.alpha.maxCoeff();
    const Vec ex = (agg.alpha.array() - mx).exp();
    return ex / ex.sum();
}

inline Mat weighted_layer_sum(const LayerFeatureStack &stack, const LayerAggregator &agg) {
    check_arg(agg.alpha.size() == static_cast<Eigen::Index>(stack.features.size()),
              "weighted_layer_sum: alpha length must equal layer count");
    const Vec w = layer_weights(agg);
    Mat out = Mat::Zero(stack.frames(), stack.dim());
    for (size_t l = 0; l < stack.features.size(); ++l)
        out += w[static_cast<Eigen::Index>(l)] * stack.features[l];
    return out;
}

// ── model ───────────────────────────────────────────────────────────────────

struct HyperSdConfig {
    int feature_dim = 32;
    int hidden = 64;
    int ffn_dim = 128;
    int encoder_layers = 2;
    int hyper_dim = 16;        // I, configurable up to 128
    double clip_radius = 2.0;  // tanh(2.0) keeps embeddings off the boundary
    double clip_eps = 1e-8;
    double margin = 0.3;
    double curvature = 1.0;
    double proto_init_range = 0.1;

    void validate() const {
        check_arg(feature_dim >= 1 && hidden >= 1 && ffn_dim >= 1, "dims must be positive");
        check_arg(encoder_layers >= 1, "need at least one encoder layer");
        check_arg(hyper_dim >= 1 && hyper_dim <= 128, "hyper_dim in 1..128");
        check_arg(clip_radius > 0.0, "clip_radius must be positive");
        check_arg(margin >= 0.0, "margin must be >= 0");
        geo::Curvature{curvature};
    }
};

struct HyperSd {
    HyperSdConfig cfg;
    int layer_count = 0;                // L of the feature stacks this model expects
    std::map<std::string, Mat> params;  // includes "protos" [16 x I]

    geo::Curvature curv() const { return geo::Curvature{cfg.curvature}; }

    static HyperSd init(const HyperSdConfig &cfg, int layer_count, std::uint64_t seed) {
        cfg.validate();
        check_arg(layer_count >= 1, "layer_count must be >= 1");
        HyperSd m;
        m.cfg = cfg;
        m.layer_count = layer_count;
        rngutil::Rng rng(rngutil::mix_seed(seed, 0x5dc0de));
        auto dense = [&](int rows, int cols) {
            return (rng.normal_mat(rows, cols) / std::sqrt(static_cast<double>(rows))).eval();
        };
        m.params["alpha"] = Mat::Zero(layer_count, 1);
        m.params["enc.in.W"] = dense(cfg.feature_dim, cfg.hidden);
        m.params["enc.in.b"] = Mat::Zero(1, cfg.hidden);
        for (int l = 0; l < cfg.encoder_layers; ++l) {
            const std::string p = "enc.l" + std::to_string(l) + ".";
            m.params[p + "ln1.gamma"] = Mat::Ones(1, cfg.hidden);
            m.params[p + "ln1.beta"] = Mat::Zero(1, cfg.hidden);
            m.params[p + "attn.Wq"] = dense(cfg.hidden, cfg.hidden);
            m.params[p + "attn.Wk"] = dense(cfg.hidden, cfg.hidden);
            m.params[p + "attn.Wv"] = dense(cfg.hidden, cfg.hidden);
            m.params[p + "attn.Wo"] = dense(cfg.hidden, cfg.hidden);
            m.params[p + "ln2.gamma"] = Mat::Ones(1, cfg.hidden);
            m.params[p + "ln2.beta"] = Mat::Zero(1, cfg.hidden);
            m.params[p + "ffn.W1"] = dense(cfg.hidden, cfg.ffn_dim);
            m.params[p + "ffn.b1"] = Mat::Zero(1, cfg.ffn_dim);
            m.params[p + "ffn.W2"] = dense(cfg.ffn_dim, cfg.hidden);
            m.params[p + "ffn.b2"] = Mat::Zero(1, cfg.hidden);
        }
        m.params["enc.out.gamma"] = Mat::Ones(1, cfg.hidden);
        m.params["enc.out.beta"] = Mat::Zero(1, cfg.hidden);
        m.params["head.W"] = dense(cfg.hyper_dim, cfg.hidden); // stored [I x H], applied as W*u
        m.params["head.b"] = Mat::Zero(1, cfg.hyper_dim);
        Mat tangents =
            rng.uniform_mat(kNumClasses, cfg.hyper_dim, -cfg.proto_init_range, cfg.proto_init_range);
        Mat protos(kNumClasses, cfg.hyper_dim);
        for (int n = 0; n < kNumClasses; ++n)
            protos.row(n) =
                geo::exp_map_origin(tangents.row(n).transpose(), m.curv()).coords.transpose();
        m.params["protos"] = protos;
        return m;
    }

    PrototypeSet prototype_set() const {
        return {params.at("protos"), membership_matrix()};
    }

    // register every parameter on the tape; trainable toggles gradient tracking
    std::map<std::string, int> param_nodes(ad::Tape &tape, bool trainable) const {
        std::map<std::string, int> ids;
        for (const auto &[name, value] : params)
            ids[name] = trainable ? tape.leaf(value) : tape.constant(value);
        return ids;
    }

    // frames [T x F] -> contextualized frames [T x H]
    int build_context(ad::Tape &tape, const std::map<std::string, int> &ids, int z) const {
        int x = tape.add_row(tape.matmul(z, ids.at("enc.in.W")), ids.at("enc.in.b"));
        const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        for (int l = 0; l < cfg.encoder_layers; ++l) {
            const std::string p = "enc.l" + std::to_string(l) + ".";
            const int h = tape.layer_norm_rows(x, ids.at(p + "ln1.gamma"), ids.at(p + "ln1.beta"));
            const int q = tape.matmul(h, ids.at(p + "attn.Wq"));
            const int k = tape.matmul(h, ids.at(p + "attn.Wk"));
            const int v = tape.matmul(h, ids.at(p + "attn.Wv"));
            const int attn = tape.softmax_rows(tape.scale(tape.matmul_bt(q, k), inv_sqrt_h));
            x = tape.add(x, tape.matmul(tape.matmul(attn, v), ids.at(p + "attn.Wo")));
            const int h2 = tape.layer_norm_rows(x, ids.at(p + "ln2.gamma"), ids.at(p + "ln2.beta"));
            const int f1 = tape.relu(tape.add_row(tape.matmul(h2, ids.at(p + "ffn.W1")),
                                                  ids.at(p + "ffn.b1")));
            x = tape.add(x, tape.add_row(tape.matmul(f1, ids.at(p + "ffn.W2")),
                                         ids.at(p + "ffn.b2")));
        }
        return tape.layer_norm_rows(x, ids.at("enc.out.gamma"), ids.at("enc.out.beta"));
    }

    // full pipeline down to per-frame distances [T x 16]
    int build_distances(ad::Tape &tape, const std::map<std::string, int> &ids,
                        const std::vector<Mat> &layers) const {
        check_arg(static_cast<int>(layers.size()) == layer_count,
                  "feature stack layer count does not match the model");
        const int z = tape.weighted_layer_sum(ids.at("alpha"), layers);
        const int u = build_context(tape, ids, z);
        const int v = tape.add_row(tape.matmul_bt(u, ids.at("head.W")), ids.at("head.b"));
        const int clipped = tape.clip_rows_norm(v, cfg.clip_radius, cfg.clip_eps);
        const int points = tape.exp_map_rows(clipped, curv());
        return tape.poincare_distances(points, ids.at("protos"), curv());
    }

    Mat encode_context(const Mat &z) const {
        check_arg(z.rows() >= 1, "encode_context: need at least one frame");
        check_arg(z.cols() == cfg.feature_dim, "encode_context: feature dim mismatch");
        ad::Tape tape;
        const auto ids = param_nodes(tape, false);
        return tape.val(build_context(tape, ids, tape.constant(z)));
    }

    geo::PoincarePoint clip_and_project(const Vec &u) const {
        check_arg(u.size() == cfg.hidden, "clip_and_project: hidden dim mismatch");
        Vec v = params.at("head.W") * u + params.at("head.b").row(0).transpose();
        check_arg(v.allFinite(), "clip_and_project: non-finite projection input");
        const double n = v.norm();
        v *= std::min(1.0, cfg.clip_radius / (n + cfg.clip_eps));
        if (!v.allFinite()) throw NumericalError("clip_and_project: non-finite after rescale");
        return geo::exp_map_origin(v, curv());
    }

    Mat frame_distances(const LayerFeatureStack &stack) const {
        ad::Tape tape;
        const auto ids = param_nodes(tape, false);
        return tape.val(build_distances(tape, ids, stack.features));
    }

    ActivityMatrix infer_activity(const LayerFeatureStack &stack, double frame_rate) const {
        const Mat d = frame_distances(stack);
        const PrototypeSet protos = prototype_set();
        Mat pi(d.rows(), kMaxSpeakers);
        for (Eigen::Index t = 0; t < d.rows(); ++t)
            pi.row(t) = marginalize_activity(d.row(t).transpose(), protos).transpose();
        return make_activity(pi, frame_rate);
    }
};

// ── reports ─────────────────────────────────────────────────────────────────

struct PrototypeReport {
    Mat distances; // [16 x 16], symmetric, zero diagonal
    Vec radii;     // distance of each prototype to the origin
};

inline PrototypeReport prototype_report(const PrototypeSet &protos, geo::Curvature c) {
    PrototypeReport rep;
    rep.distances = Mat::Zero(kNumClasses, kNumClasses);
    rep.radii = Vec::Zero(kNumClasses);
    const geo::PoincarePoint o = geo::origin(static_cast<int>(protos.points.cols()));
    for (int i = 0; i < kNumClasses; ++i) {
        const geo::PoincarePoint pi{protos.points.row(i).transpose()};
        rep.radii[i] = geo::poincare_distance(pi, o, c);
        for (int j = i + 1; j < kNumClasses; ++j) {
            const double d =
                geo::poincare_distance(pi, {protos.points.row(j).transpose()}, c);
            rep.distances(i, j) = d;
            rep.distances(j, i) = d;
        }
    }
    return rep;
}

inline double min_offdiagonal_distance(const Mat &distances) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < distances.rows(); ++i)
        for (Eigen::Index j = 0; j < distances.cols(); ++j)
            if (i != j) best = std::min(best, distances(i, j));
    return best;
}

// ── training ────────────────────────────────────────────────────────────────

// per-frame class labels from ground-truth activity
inline std::vector<int> frame_labels(const ActivityMatrix &act) {
    std::vector<int> labels(static_cast<size_t>(act.frames()));
    for (Eigen::Index t = 0; t < act.frames(); ++t) {
        int mask = 0;
        for (int s = 0; s < kMaxSpeakers; ++s)
            if (act.pi(t, s) >= 0.5) mask |= 1 << s;
        labels[static_cast<size_t>(t)] = mask;
    }
    return labels;
}

struct SdFitConfig {
    HyperSdConfig model;
    int max_steps = 1500;
    int crop_frames = 256; // random crop per step keeps tapes small
    double lr = 1e-3;
    double proto_lr = 5e-3;
    double weight_decay = 1e-4;
    double target_loss = 0.0; // 0 disables early stopping
    std::uint64_t seed = 1;
};

struct SdFitResult {
    HyperSd model;
    std::vector<double> loss_history;
    bool reached_target = false;
    int steps_run = 0;
};

inline SdFitResult fit_hyper_sd(const std::vector<synth::SyntheticDialogue> &data,
                                const SdFitConfig &cfg) {
    check_arg(!data.empty(), "fit_hyper_sd: empty dataset");
    check_arg(cfg.max_steps >= 0, "max_steps must be >= 0");
    check_arg(cfg.crop_frames >= 1, "crop_frames must be >= 1");
    for (const auto &d : data) {
        check_arg(d.layer_stack.frames() == d.activity_truth.frames(),
                  "fit_hyper_sd: stack and activity disagree on frame count");
        check_arg(d.layer_stack.layer_count() == data[0].layer_stack.layer_count(),
                  "fit_hyper_sd: inconsistent layer counts across dialogues");
    }

    SdFitResult out;
    out.model = HyperSd::init(cfg.model, data[0].layer_stack.layer_count(), cfg.seed);
    HyperSd &model = out.model;

    std::vector<std::vector<int>> labels;
    labels.reserve(data.size());
    for (const auto &d : data) labels.push_back(frame_labels(d.activity_truth));

    optim::AdamConfig euclid{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    optim::AdamConfig riemann{cfg.proto_lr, 0.9, 0.999, 1e-8, 0.0};
    optim::AdamW opt(euclid);
    optim::RiemannianAdam proto_opt(riemann, model.curv());
    rngutil::Rng rng(rngutil::mix_seed(cfg.seed, 0xf17));
    const double sqrt_c = model.curv().sqrt_c();

    for (int step = 0; step < cfg.max_steps; ++step) {
        const auto di = static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
        const auto &stack = data[di].layer_stack;
        const int total = static_cast<int>(stack.frames());
        const int crop = std::min(cfg.crop_frames, total);
        const int t0 = total > crop
                           ? static_cast<int>(rng.uniform_int(0, total - crop))
                           : 0;

        std::vector<Mat> layers;
        layers.reserve(stack.features.size());
        for (const Mat &f : stack.features) layers.push_back(f.middleRows(t0, crop));
        std::vector<int> targets(labels[di].begin() + t0, labels[di].begin() + t0 + crop);

        ad::Tape tape;
        const auto ids = model.param_nodes(tape, true);
        const int dists = model.build_distances(tape, ids, layers);
        const int loss = tape.margin_class_nll(dists, targets, model.cfg.margin);
        const double loss_value = tape.val(loss)(0, 0);
        if (!std::isfinite(loss_value))
            throw NumericalError("fit_hyper_sd: non-finite loss at step " + std::to_string(step));
        out.loss_history.push_back(loss_value);

        tape.backward(loss);
        for (auto &[name, value] : model.params) {
            const int id = ids.at(name);
            const Mat grad = tape.has_grad(id) ? tape.grad(id)
                                               : Mat::Zero(value.rows(), value.cols());
            if (name == "protos")
                proto_opt.step(name, value, grad);
            else
                opt.step(name, value, grad);
        }
        for (Eigen::Index n = 0; n < model.params["protos"].rows(); ++n)
            if (sqrt_c * model.params["protos"].row(n).norm() >= 1.0)
                throw NumericalError("fit_hyper_sd: prototype left the ball at step " +
                                     std::to_string(step));

        out.steps_run = step + 1;
        if (cfg.target_loss > 0.0 && loss_value <= cfg.target_loss) {
            out.reached_target = true;
            break;
        }
    }
    return out;
}

} // namespace masr::sd
