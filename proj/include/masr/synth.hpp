#pragma once

#include "masr/activity.hpp"
#include "masr/common.hpp"
#include "masr/rng.hpp"
#include "masr/transcript.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

// Deterministic synthetic dialogues: scheduled speaker turns with a
// feedback-controlled overlap ratio, 10 ms-quantized boundaries, frame
// features built from per-speaker signatures plus word embeddings and noise,
// and a 3-layer feature view for the aggregation head. Everything is a pure
// function of the seeds.

namespace masr::synth {

using Mat = Eigen::MatrixXd;

struct DialogueConfig {
    int num_speakers = 2;
    double duration = 20.0;      // seconds
    double frame_rate = 50.0;    // 100/frame_rate must be a whole number of 10 ms ticks
    double overlap_target = 0.2; // overlapped fraction of speech time; 1.0 = shared full span
    double turn_min = 1.0;
    double turn_max = 3.0;
    double pause_min = 0.2;
    double pause_max = 0.8;
    double words_per_second = 2.0;
    int vocab_size = 64;
    int feature_dim = 32;
    double signature_scale = 1.0;
    double content_scale = 0.3;
    double noise_scale = 0.15;
    std::uint64_t seed = 1;
    std::uint64_t signature_seed = 7; // shared across a corpus: stable speaker identities
};

struct SyntheticDialogue {
    tr::StructuredTranscript transcript;
    std::vector<tr::RttmSegment> rttm;
    sd::ActivityMatrix activity_truth; // 0/1 entries
    Mat frames;
    sd::LayerFeatureStack layer_stack;
    double achieved_overlap = 0.0;
    bool overlap_feasible = true;
};

inline void validate(const DialogueConfig &cfg) {
    check_arg(cfg.num_speakers >= 1 && cfg.num_speakers <= sd::kMaxSpeakers,
              "num_speakers must be 1..4");
    check_arg(cfg.duration > 0.0, "duration must be > 0");
    check_arg(cfg.overlap_target >= 0.0 && cfg.overlap_target <= 1.0,
              "overlap_target must be in [0, 1]");
    check_arg(cfg.turn_min > 0.0 && cfg.turn_min <= cfg.turn_max, "bad turn length range");
    check_arg(cfg.pause_min >= 0.0 && cfg.pause_min <= cfg.pause_max, "bad pause range");
    check_arg(cfg.words_per_second > 0.0, "words_per_second must be > 0");
    check_arg(cfg.vocab_size >= 1, "vocab_size must be >= 1");
    check_arg(cfg.feature_dim >= 1, "feature_dim must be >= 1");
    const double tpf = 100.0 / cfg.frame_rate;
    check_arg(cfg.frame_rate > 0.0 && std::abs(tpf - std::round(tpf)) < 1e-9 &&
                  std::round(tpf) >= 1.0,
              "frame_rate must divide the 10 ms tick grid (e.g. 100, 50, 25, 20, 12.5)");
}

inline long ticks_per_frame(double frame_rate) {
    return static_cast<long>(std::llround(100.0 / frame_rate));
}

inline long to_ticks(double seconds) { return std::llround(seconds * 100.0); }

// frame t is active for a speaker iff the frame center lies inside one of the
// speaker's segments; computed on the integer 10 ms grid (doubled so odd tick
// counts keep exact centers)
inline sd::ActivityMatrix activity_from_transcript(const tr::StructuredTranscript &t, int frames,
                                                   double frame_rate) {
    Mat pi = Mat::Zero(frames, sd::kMaxSpeakers);
    const long tpf = ticks_per_frame(frame_rate);
    for (const tr::Segment &seg : t.segments) {
        const long lo2 = 2 * to_ticks(seg.t_start);
        const long hi2 = 2 * to_ticks(seg.t_end);
        for (int f = 0; f < frames; ++f) {
            const long center2 = 2 * f * tpf + tpf;
            if (center2 >= lo2 && center2 < hi2) pi(f, seg.speaker - 1) = 1.0;
        }
    }
    return sd::make_activity(std::move(pi), frame_rate);
}

namespace detail {

struct ScheduleResult {
    std::vector<tr::Segment> segments;
    double achieved = 0.0;
    bool feasible = true;
};

inline ScheduleResult schedule_turns(const DialogueConfig &cfg, rngutil::Rng &rng) {
    ScheduleResult out;
    const long total_ticks = to_ticks(cfg.duration);

    if (cfg.overlap_target == 1.0) {
        // shared-span mode: every speaker talks over the whole dialogue
        for (int s = 1; s <= cfg.num_speakers; ++s)
            out.segments.push_back({s, 0.0, {}, cfg.duration});
        out.achieved = cfg.num_speakers >= 2 ? 1.0 : 0.0;
        out.feasible = cfg.num_speakers >= 2;
        return out;
    }

    std::vector<std::uint8_t> cover(static_cast<size_t>(total_ticks), 0);
    long union_ticks = 0, overlap_ticks = 0;
    auto place = [&](long lo, long hi) {
        for (long k = lo; k < hi && k < total_ticks; ++k) {
            auto &c = cover[static_cast<size_t>(k)];
            if (c == 0) ++union_ticks;
            if (c == 1) ++overlap_ticks;
            if (c < 4) ++c;
        }
    };

    int prev_speaker = 0;
    double prev_end = 0.0;
    while (true) {
        int speaker = rng.uniform_int(1, cfg.num_speakers);
        if (cfg.num_speakers > 1)
            while (speaker == prev_speaker) speaker = rng.uniform_int(1, cfg.num_speakers);
        double len = rng.uniform(cfg.turn_min, cfg.turn_max);

        double onset;
        if (out.segments.empty()) {
            onset = rng.uniform(0.0, cfg.pause_max);
        } else {
            const double achieved =
                union_ticks > 0 ? static_cast<double>(overlap_ticks) / union_ticks : 0.0;
            // a per-turn overlapped fraction q yields ratio q/(1-q) in steady
            // state, so feed forward t/(1+t) and correct around it
            const double err = cfg.overlap_target - achieved;
            double frac = cfg.overlap_target / (1.0 + cfg.overlap_target) + 0.75 * err;
            frac = std::clamp(frac, 0.0, 0.9);
            if (cfg.num_speakers == 1) frac = 0.0; // a speaker cannot overlap themselves
            const double ov = frac * len;
            onset = ov > 0.0 ? std::max(0.0, prev_end - ov)
                             : prev_end + rng.uniform(cfg.pause_min, cfg.pause_max);
        }
        onset = std::round(onset * 100.0) / 100.0;
        double end = std::min(onset + len, cfg.duration);
        end = std::round(end * 100.0) / 100.0;
        if (end - onset < 0.5 * cfg.turn_min) break; // no room for a real turn
        if (to_ticks(onset) >= total_ticks) break;

        out.segments.push_back({speaker, onset, {}, end});
        place(to_ticks(onset), to_ticks(end));
        prev_end = std::max(prev_end, end);
        prev_speaker = speaker;
        if (to_ticks(prev_end) >= total_ticks) break;
    }
    out.achieved = union_ticks > 0 ? static_cast<double>(overlap_ticks) / union_ticks : 0.0;
    out.feasible = cfg.num_speakers >= 2 || cfg.overlap_target == 0.0;
    return out;
}

inline Eigen::VectorXd unit_signature(std::uint64_t signature_seed, std::uint64_t key, int dim) {
    rngutil::Rng r(rngutil::mix_seed(signature_seed, key));
    Eigen::VectorXd v = r.normal_vec(dim);
    return v / v.norm();
}

inline Mat moving_average_rows(const Mat &x, int w) {
    Mat y(x.rows(), x.cols());
    const int half = w / 2;
    for (int t = 0; t < x.rows(); ++t) {
        const int lo = std::max(0, t - half);
        const int hi = std::min<int>(static_cast<int>(x.rows()) - 1, t + half);
        y.row(t) = x.middleRows(lo, hi - lo + 1).colwise().mean();
    }
    return y;
}

} // namespace detail

inline Eigen::VectorXd speaker_signature(const DialogueConfig &cfg, int speaker) {
    check_arg(speaker >= 1 && speaker <= sd::kMaxSpeakers, "speaker must be 1..4");
    return detail::unit_signature(cfg.signature_seed, static_cast<std::uint64_t>(speaker),
                                  cfg.feature_dim) *
           cfg.signature_scale;
}

inline Eigen::VectorXd word_embedding(const DialogueConfig &cfg, int token) {
    check_arg(token >= 0 && token < cfg.vocab_size, "token out of vocabulary");
    return detail::unit_signature(cfg.signature_seed, 1000 + static_cast<std::uint64_t>(token),
                                  cfg.feature_dim) *
           cfg.content_scale;
}

inline SyntheticDialogue generate_dialogue(const DialogueConfig &cfg,
                                           const std::string &dialogue_id = "dlg") {
    validate(cfg);
    rngutil::Rng rng(rngutil::mix_seed(cfg.seed, 0xd1a106));

    SyntheticDialogue out;
    auto sched = detail::schedule_turns(cfg, rng);
    out.achieved_overlap = sched.achieved;
    out.overlap_feasible = sched.feasible;
    if (!sched.feasible && log_level() >= LogLevel::Info)
        std::fprintf(stderr, "[synth] overlap target %.2f infeasible with %d speaker(s)\n",
                     cfg.overlap_target, cfg.num_speakers);

    out.transcript.dialogue_id = dialogue_id;
    out.transcript.segments = std::move(sched.segments);
    for (tr::Segment &seg : out.transcript.segments) {
        const int words =
            std::max<int>(1, static_cast<int>(std::llround((seg.t_end - seg.t_start) *
                                                           cfg.words_per_second)));
        seg.words.resize(static_cast<size_t>(words));
        for (int &w : seg.words) w = rng.uniform_int(0, cfg.vocab_size - 1);
    }
    tr::sort_segments(out.transcript);
    tr::validate(out.transcript);
    out.rttm = tr::rttm_from_transcript(out.transcript);

    const int T = static_cast<int>(std::llround(cfg.duration * cfg.frame_rate));
    check_arg(T >= 1, "duration * frame_rate must give at least one frame");
    out.activity_truth = activity_from_transcript(out.transcript, T, cfg.frame_rate);

    // frame features: sum of active-speaker signatures, the current word's
    // embedding per active segment, and noise; silence frames are noise only
    out.frames = Mat::Zero(T, cfg.feature_dim);
    const long tpf = ticks_per_frame(cfg.frame_rate);
    for (const tr::Segment &seg : out.transcript.segments) {
        const Eigen::VectorXd sig = speaker_signature(cfg, seg.speaker);
        const long lo2 = 2 * to_ticks(seg.t_start);
        const long hi2 = 2 * to_ticks(seg.t_end);
        if (hi2 <= lo2) continue;
        for (int f = 0; f < T; ++f) {
            const long center2 = 2 * f * tpf + tpf;
            if (center2 < lo2 || center2 >= hi2) continue;
            const auto nwords = static_cast<long>(seg.words.size());
            long wi = ((center2 - lo2) * nwords) / (hi2 - lo2);
            wi = std::min(wi, nwords - 1);
            out.frames.row(f) += sig.transpose();
            out.frames.row(f) +=
                word_embedding(cfg, seg.words[static_cast<size_t>(wi)]).transpose();
        }
    }
    for (int f = 0; f < T; ++f)
        out.frames.row(f) += (rng.normal_vec(cfg.feature_dim) * cfg.noise_scale).transpose();

    Mat noised = out.frames;
    for (int f = 0; f < T; ++f)
        noised.row(f) += (rng.normal_vec(cfg.feature_dim) * cfg.noise_scale).transpose();
    out.layer_stack = sd::make_layer_stack(
        {out.frames, detail::moving_average_rows(out.frames, 5), std::move(noised)});
    return out;
}

inline std::vector<SyntheticDialogue> generate_corpus(DialogueConfig base, int count,
                                                      std::uint64_t corpus_seed,
                                                      const std::string &id_prefix = "dlg") {
    check_arg(count >= 1, "corpus needs at least one dialogue");
    std::vector<SyntheticDialogue> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        DialogueConfig cfg = base;
        cfg.seed = rngutil::mix_seed(corpus_seed, static_cast<std::uint64_t>(i));
        char id[64];
        std::snprintf(id, sizeof id, "%s_%04d", id_prefix.c_str(), i);
        out.push_back(generate_dialogue(cfg, id));
    }
    return out;
}

} // namespace masr::synth
