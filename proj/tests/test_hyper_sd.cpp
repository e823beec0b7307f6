#include "masr/hyper_sd.hpp"
#include "masr/rng.hpp"
#include "masr/synth.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <numeric>

using namespace masr;
using ad::Mat;
using sd::Vec;

namespace {

sd::HyperSdConfig tiny_config() {
    sd::HyperSdConfig cfg;
    cfg.feature_dim = 8;
    cfg.hidden = 16;
    cfg.ffn_dim = 32;
    cfg.encoder_layers = 1;
    cfg.hyper_dim = 8;
    return cfg;
}

synth::DialogueConfig tiny_dialogue_config() {
    synth::DialogueConfig cfg;
    cfg.num_speakers = 2;
    cfg.duration = 4.0;
    cfg.frame_rate = 25.0;
    cfg.feature_dim = 8;
    return cfg;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

// ── class encoding and membership ───────────────────────────────────────────

TEST_CASE("class_label_from_speaker_set is the bitmask encoding") {
    REQUIRE(sd::class_label_from_speaker_set({}) == 0);
    REQUIRE(sd::class_label_from_speaker_set({2}) == 2);
    REQUIRE(sd::class_label_from_speaker_set({1, 3, 4}) == 13);
    REQUIRE(sd::class_label_from_speaker_set({1, 2, 3, 4}) == 15);
    REQUIRE(sd::class_label_from_speaker_set({3, 3}) == 4);
    REQUIRE_THROWS_AS(sd::class_label_from_speaker_set({5}), std::invalid_argument);
    REQUIRE_THROWS_AS(sd::class_label_from_speaker_set({0}), std::invalid_argument);
}

TEST_CASE("membership matrix covers the power set") {
    const Mat b = sd::membership_matrix();
    REQUIRE(b.rows() == 4);
    REQUIRE(b.cols() == 16);
    for (int s = 0; s < 4; ++s) REQUIRE(b.row(s).sum() == 8.0);
    REQUIRE(b.col(0).sum() == 0.0);
    for (int i = 0; i < 16; ++i)
        for (int j = i + 1; j < 16; ++j) REQUIRE(b.col(i) != b.col(j));
    // column n encodes exactly the speakers in the bitmask of n
    for (int n = 0; n < 16; ++n)
        for (int s = 0; s < 4; ++s)
            REQUIRE(b(s, n) == ((n >> s) & 1 ? 1.0 : 0.0));
}

// ── activity marginalization ────────────────────────────────────────────────

TEST_CASE("marginalize_activity matches the power-set oracle") {
    sd::PrototypeSet protos;
    protos.points = Mat::Zero(16, 8);
    protos.membership = sd::membership_matrix();
    rngutil::Rng rng(11);
    for (int it = 0; it < 1000; ++it) {
        Vec d(16);
        for (int n = 0; n < 16; ++n) d[n] = rng.uniform(0.0, 12.0);
        const Vec pi = sd::marginalize_activity(d, protos);
        for (int s = 1; s <= 4; ++s) {
            double expect = 0.0;
            for (int n = 0; n < 16; ++n)
                if (n & (1 << (s - 1))) expect += sigmoid(-d[n]);
            expect = std::min(1.0, std::max(0.0, expect));
            REQUIRE(std::abs(pi[s - 1] - expect) <= 1e-12);
        }
    }
}

TEST_CASE("marginalize_activity limit cases") {
    sd::PrototypeSet protos;
    protos.points = Mat::Zero(16, 8);
    protos.membership = sd::membership_matrix();

    Vec far = Vec::Constant(16, 100.0);
    const Vec silent = sd::marginalize_activity(far, protos);
    for (int s = 0; s < 4; ++s) REQUIRE(silent[s] <= 1e-12);

    // class {1} at distance zero contributes sigmoid(0) = 0.5 to speaker 1
    Vec one = Vec::Constant(16, 100.0);
    one[1] = 0.0;
    const Vec pi = sd::marginalize_activity(one, protos);
    REQUIRE(pi[0] == Catch::Approx(0.5).margin(1e-12));
    for (int s = 1; s < 4; ++s) REQUIRE(pi[s] <= 1e-12);

    // eight saturated terms per speaker clamp at 1
    const Vec hot = sd::marginalize_activity(Vec::Constant(16, -50.0), protos);
    for (int s = 0; s < 4; ++s) REQUIRE(hot[s] == 1.0);
}

// ── classifier loss ─────────────────────────────────────────────────────────

TEST_CASE("classifier_loss limit values") {
    Vec d = Vec::Constant(16, 60.0);
    d[5] = 0.0;
    REQUIRE(sd::classifier_loss(d, 5, 0.0).first == Catch::Approx(0.0).margin(1e-10));
    const Vec uniform = Vec::Constant(16, 3.0);
    REQUIRE(sd::classifier_loss(uniform, 7, 0.0).first ==
            Catch::Approx(std::log(16.0)).epsilon(1e-12));
}

TEST_CASE("classifier_loss gradient matches central differences") {
    rngutil::Rng rng(21);
    for (int it = 0; it < 50; ++it) {
        Vec d(16);
        for (int n = 0; n < 16; ++n) d[n] = rng.uniform(0.0, 6.0);
        const int t = static_cast<int>(rng.uniform_int(0, 15));
        const auto [loss, grad] = sd::classifier_loss(d, t, 0.3);
        REQUIRE(std::isfinite(loss));
        for (int n = 0; n < 16; ++n) {
            const double h = 1e-6;
            Vec dp = d, dm = d;
            dp[n] += h;
            dm[n] -= h;
            const double fd =
                (sd::classifier_loss(dp, t, 0.3).first - sd::classifier_loss(dm, t, 0.3).first) /
                (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(grad[n]), 1e-8});
            REQUIRE(std::abs(grad[n] - fd) / denom <= 1e-4);
        }
    }
}

TEST_CASE("increasing the margin never decreases the loss") {
    rngutil::Rng rng(33);
    for (int it = 0; it < 200; ++it) {
        Vec d(16);
        for (int n = 0; n < 16; ++n) d[n] = rng.uniform(0.0, 8.0);
        const int t = static_cast<int>(rng.uniform_int(0, 15));
        double prev = -1.0;
        for (double margin : {0.0, 0.1, 0.3, 1.0, 3.0}) {
            const double loss = sd::classifier_loss(d, t, margin).first;
            REQUIRE(loss >= prev - 1e-12);
            prev = loss;
        }
    }
}

TEST_CASE("classifier_loss agrees with the tape op") {
    rngutil::Rng rng(43);
    Mat d = rng.uniform_mat(1, 16, 0.0, 5.0);
    const auto [loss, grad] = sd::classifier_loss(d.row(0).transpose(), 9, 0.3);
    ad::Tape tape;
    const int din = tape.leaf(d);
    const int l = tape.margin_class_nll(din, {9}, 0.3);
    REQUIRE(tape.val(l)(0, 0) == Catch::Approx(loss).epsilon(1e-12));
    tape.backward(l);
    const Mat g = tape.grad(din);
    for (int n = 0; n < 16; ++n)
        REQUIRE(g(0, n) == Catch::Approx(grad[n]).margin(1e-12));
}

// ── layer aggregation ───────────────────────────────────────────────────────

TEST_CASE("weighted_layer_sum special and random cases") {
    rngutil::Rng rng(55);
    sd::LayerFeatureStack stack;
    stack.features = {rng.normal_mat(6, 4)};
    sd::LayerAggregator agg;
    agg.alpha = Vec::Constant(1, 3.7);
    REQUIRE(sd::weighted_layer_sum(stack, agg) == stack.features[0]);

    stack.features.push_back(rng.normal_mat(6, 4));
    agg.alpha = Vec::Constant(2, -1.0);
    const Mat mean = sd::weighted_layer_sum(stack, agg);
    REQUIRE((mean - 0.5 * (stack.features[0] + stack.features[1])).cwiseAbs().maxCoeff() <=
            1e-12);

    stack.features.push_back(rng.normal_mat(6, 4));
    agg.alpha = rng.normal_vec(3);
    const Mat out = sd::weighted_layer_sum(stack, agg);
    const Vec w = sd::layer_weights(agg);
    for (int t = 0; t < 6; ++t)
        for (int f = 0; f < 4; ++f) {
            double expect = 0.0;
            for (int l = 0; l < 3; ++l) expect += w[l] * stack.features[static_cast<size_t>(l)](t, f);
            REQUIRE(out(t, f) == Catch::Approx(expect).margin(1e-9));
        }

    agg.alpha = Vec::Zero(2);
    REQUIRE_THROWS_AS(sd::weighted_layer_sum(stack, agg), std::invalid_argument);
}

// ── encoder ─────────────────────────────────────────────────────────────────

TEST_CASE("encode_context shape and sensitivity") {
    const auto model = sd::HyperSd::init(tiny_config(), 3, 7);
    rngutil::Rng rng(66);
    const Mat z = rng.normal_mat(10, 8);
    const Mat u = model.encode_context(z);
    REQUIRE(u.rows() == 10);
    REQUIRE(u.cols() == 16);
    REQUIRE(u.allFinite());

    // swapping two frames changes the output matrix
    Mat swapped = z;
    swapped.row(2).swap(swapped.row(7));
    REQUIRE((model.encode_context(swapped) - u).cwiseAbs().maxCoeff() > 1e-8);

    // perturbing a single frame moves every output row: global receptive field
    Mat poked = z;
    poked.row(4).array() += 0.5;
    const Mat u2 = model.encode_context(poked);
    for (int t = 0; t < 10; ++t)
        REQUIRE((u2.row(t) - u.row(t)).cwiseAbs().maxCoeff() > 1e-12);

    const Mat single = model.encode_context(rng.normal_mat(1, 8));
    REQUIRE(single.rows() == 1);
    REQUIRE(single.allFinite());
    REQUIRE(model.encode_context(Mat::Zero(4, 8)).allFinite());
}

// ── hyperbolic projection ───────────────────────────────────────────────────

TEST_CASE("clip_and_project norm behavior") {
    auto model = sd::HyperSd::init(tiny_config(), 3, 7);
    const auto c = model.curv();
    rngutil::Rng rng(77);

    // small input: no rescale, the point is exactly exp_0(W u + b)
    model.params["head.W"] = 0.01 * rng.normal_mat(8, 16);
    model.params["head.b"] = Mat::Zero(1, 8);
    const Vec u = rng.normal_vec(16);
    const Vec v = model.params["head.W"] * u;
    REQUIRE(v.norm() < model.cfg.clip_radius);
    const auto p = model.clip_and_project(u);
    REQUIRE((p.coords - geo::exp_map_origin(v, c).coords).norm() <= 1e-12);

    // overshoot by 2x: tangent norm lands in [r - 1e-6, r]
    model.params["head.W"] *= 2.0 * model.cfg.clip_radius / v.norm();
    const Vec v2 = model.params["head.W"] * u;
    REQUIRE(v2.norm() == Catch::Approx(2.0 * model.cfg.clip_radius));
    const auto clipped = model.clip_and_project(u);
    const double tangent_norm = std::atanh(c.sqrt_c() * clipped.norm()) / c.sqrt_c();
    REQUIRE(tangent_norm >= model.cfg.clip_radius - 1e-6);
    REQUIRE(tangent_norm <= model.cfg.clip_radius + 1e-9);

    model.params["head.W"].setZero();
    model.params["head.b"].setZero();
    REQUIRE(model.clip_and_project(u).norm() == 0.0);
}

TEST_CASE("prototype_distances hits zero at a prototype and stays in the ball") {
    const auto model = sd::HyperSd::init(tiny_config(), 3, 9);
    const sd::PrototypeSet protos = model.prototype_set();
    const auto c = model.curv();
    for (int n = 0; n < 16; ++n)
        REQUIRE(c.sqrt_c() * protos.points.row(n).norm() < 1.0);
    const geo::PoincarePoint at3{protos.points.row(3).transpose()};
    const Vec d = sd::prototype_distances(at3, protos, c);
    REQUIRE(d[3] == 0.0);
    for (int n = 0; n < 16; ++n) REQUIRE(d[n] >= 0.0);

    const geo::PoincarePoint o = geo::origin(8);
    sd::PrototypeSet zeros;
    zeros.points = Mat::Zero(16, 8);
    zeros.membership = sd::membership_matrix();
    REQUIRE(sd::prototype_distances(o, zeros, c).maxCoeff() == 0.0);
}

TEST_CASE("tape pipeline matches the plain per-frame composition") {
    const auto model = sd::HyperSd::init(tiny_config(), 3, 13);
    rngutil::Rng rng(88);
    sd::LayerFeatureStack stack;
    for (int l = 0; l < 3; ++l) stack.features.push_back(rng.normal_mat(12, 8));

    const Mat fast = model.frame_distances(stack);

    sd::LayerAggregator agg{model.params.at("alpha").col(0)};
    const Mat z = sd::weighted_layer_sum(stack, agg);
    const Mat u = model.encode_context(z);
    const sd::PrototypeSet protos = model.prototype_set();
    for (int t = 0; t < 12; ++t) {
        const auto point = model.clip_and_project(u.row(t).transpose());
        const Vec d = sd::prototype_distances(point, protos, model.curv());
        REQUIRE((fast.row(t).transpose() - d).cwiseAbs().maxCoeff() <= 1e-9);
    }
}

TEST_CASE("infer_activity returns bounded per-speaker rows") {
    const auto model = sd::HyperSd::init(tiny_config(), 3, 17);
    rngutil::Rng rng(99);
    sd::LayerFeatureStack stack;
    for (int l = 0; l < 3; ++l) stack.features.push_back(rng.normal_mat(9, 8));
    const sd::ActivityMatrix act = model.infer_activity(stack, 25.0);
    REQUIRE(act.frames() == 9);
    REQUIRE(act.pi.cols() == 4);
    REQUIRE(act.frame_rate == 25.0);
    REQUIRE((act.pi.array() >= 0.0).all());
    REQUIRE((act.pi.array() <= 1.0).all());

    sd::LayerFeatureStack one;
    for (int l = 0; l < 3; ++l) one.features.push_back(rng.normal_mat(1, 8));
    REQUIRE(model.infer_activity(one, 25.0).frames() == 1);
}

// ── prototype report ────────────────────────────────────────────────────────

TEST_CASE("prototype_report is symmetric with near-zero initial radii") {
    const auto model = sd::HyperSd::init(tiny_config(), 3, 21);
    const auto rep = sd::prototype_report(model.prototype_set(), model.curv());
    REQUIRE(rep.distances.rows() == 16);
    for (int i = 0; i < 16; ++i) {
        REQUIRE(rep.distances(i, i) == 0.0);
        // tangent init in [-0.1, 0.1]^8 keeps radii at most 2 * 0.1 * sqrt(8)
        REQUIRE(rep.radii[i] <= 2.0 * 0.1 * std::sqrt(8.0) + 1e-9);
        for (int j = 0; j < 16; ++j) REQUIRE(rep.distances(i, j) == rep.distances(j, i));
    }
    REQUIRE(std::isfinite(sd::min_offdiagonal_distance(rep.distances)));
}

// ── training ────────────────────────────────────────────────────────────────

TEST_CASE("frame_labels encodes ground-truth activity as class masks") {
    Mat pi = Mat::Zero(3, 4);
    pi(0, 0) = 1.0;
    pi(1, 0) = 1.0;
    pi(1, 2) = 1.0;
    const auto act = sd::make_activity(pi, 50.0);
    REQUIRE(sd::frame_labels(act) == std::vector<int>{1, 5, 0});
}

TEST_CASE("fit_hyper_sd rejects an empty dataset") {
    sd::SdFitConfig cfg;
    REQUIRE_THROWS_AS(sd::fit_hyper_sd({}, cfg), std::invalid_argument);
}

TEST_CASE("fit_hyper_sd reports the step of a non-finite loss") {
    auto dialogue = synth::generate_dialogue(tiny_dialogue_config(), "bad");
    dialogue.layer_stack.features[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
    sd::SdFitConfig cfg;
    cfg.model = tiny_config();
    cfg.max_steps = 3;
    try {
        sd::fit_hyper_sd({dialogue}, cfg);
        FAIL("expected NumericalError");
    } catch (const NumericalError &e) {
        REQUIRE(std::string(e.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("zero learning rates leave parameters bit-identical") {
    const auto dialogue = synth::generate_dialogue(tiny_dialogue_config(), "z");
    sd::SdFitConfig cfg;
    cfg.model = tiny_config();
    cfg.max_steps = 5;
    cfg.lr = 0.0;
    cfg.proto_lr = 0.0;
    cfg.seed = 3;
    const auto fit = sd::fit_hyper_sd({dialogue}, cfg);
    const auto fresh = sd::HyperSd::init(cfg.model, 3, cfg.seed);
    for (const auto &[name, value] : fresh.params) REQUIRE(fit.model.params.at(name) == value);
}

TEST_CASE("fit_hyper_sd is deterministic per seed and learns on a tiny set") {
    std::vector<synth::SyntheticDialogue> data;
    auto base = tiny_dialogue_config();
    for (int i = 0; i < 3; ++i) {
        auto cfg = base;
        cfg.seed = 100 + static_cast<std::uint64_t>(i);
        data.push_back(synth::generate_dialogue(cfg, "d" + std::to_string(i)));
    }
    sd::SdFitConfig cfg;
    cfg.model = tiny_config();
    cfg.max_steps = 120;
    cfg.crop_frames = 64;
    cfg.seed = 5;

    const auto a = sd::fit_hyper_sd(data, cfg);
    const auto b = sd::fit_hyper_sd(data, cfg);
    REQUIRE(a.loss_history == b.loss_history);
    REQUIRE(a.model.params.at("protos") == b.model.params.at("protos"));
    REQUIRE(a.model.params.at("enc.in.W") == b.model.params.at("enc.in.W"));

    REQUIRE(a.loss_history.size() == 120);
    const double head = std::accumulate(a.loss_history.begin(), a.loss_history.begin() + 10, 0.0);
    const double tail = std::accumulate(a.loss_history.end() - 10, a.loss_history.end(), 0.0);
    REQUIRE(tail < head);

    // prototypes stayed inside the ball and spread out
    const auto rep = sd::prototype_report(a.model.prototype_set(), a.model.curv());
    REQUIRE(rep.radii.allFinite());
    const auto rep0 =
        sd::prototype_report(sd::HyperSd::init(cfg.model, 3, cfg.seed).prototype_set(),
                             a.model.curv());
    REQUIRE(sd::min_offdiagonal_distance(rep.distances) >
            sd::min_offdiagonal_distance(rep0.distances));
}

TEST_CASE("fit_hyper_sd stops early when the loss target is reached") {
    const auto dialogue = synth::generate_dialogue(tiny_dialogue_config(), "t");
    sd::SdFitConfig cfg;
    cfg.model = tiny_config();
    cfg.max_steps = 500;
    cfg.target_loss = 2.9; // near the log(16) starting point, reached quickly
    const auto fit = sd::fit_hyper_sd({dialogue}, cfg);
    REQUIRE(fit.reached_target);
    REQUIRE(fit.steps_run < 500);
    REQUIRE(fit.loss_history.back() <= 2.9);
}
