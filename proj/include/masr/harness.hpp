#pragma once

#include "masr/common.hpp"
#include "masr/hyper_sd.hpp"
#include "masr/metrics.hpp"
#include "masr/model.hpp"
#include "masr/synth.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

// Experiment drivers shared by the CLI and the acceptance gate: corpus
// splits, held-out speaker-activity scoring, curvature sweeps, transcription
// evaluation against the metric suite, and the positional-mode ablation grid.

namespace masr::harness {

using ad::Mat;
using nlohmann::json;

// ── corpus ──────────────────────────────────────────────────────────────────

struct CorpusSpec {
    synth::DialogueConfig dialogue;
    int train_count = 50;
    int test_count = 10;
    std::uint64_t seed = 101;
};

struct Corpus {
    std::vector<synth::SyntheticDialogue> train, test;
};

inline Corpus make_corpus(const CorpusSpec &spec) {
    check_arg(spec.train_count >= 1 && spec.test_count >= 0, "bad corpus split sizes");
    Corpus c;
    c.train = synth::generate_corpus(spec.dialogue, spec.train_count,
                                     rngutil::mix_seed(spec.seed, 0x17a17), "train");
    if (spec.test_count > 0)
        c.test = synth::generate_corpus(spec.dialogue, spec.test_count,
                                        rngutil::mix_seed(spec.seed, 0x7e57), "test");
    return c;
}

inline json dialogue_config_to_json(const synth::DialogueConfig &c) {
    return {{"num_speakers", c.num_speakers},
            {"duration", c.duration},
            {"frame_rate", c.frame_rate},
            {"overlap_target", c.overlap_target},
            {"turn_min", c.turn_min},
            {"turn_max", c.turn_max},
            {"pause_min", c.pause_min},
            {"pause_max", c.pause_max},
            {"words_per_second", c.words_per_second},
            {"vocab_size", c.vocab_size},
            {"feature_dim", c.feature_dim},
            {"signature_scale", c.signature_scale},
            {"content_scale", c.content_scale},
            {"noise_scale", c.noise_scale},
            {"signature_seed", c.signature_seed}};
}

inline synth::DialogueConfig dialogue_config_from_json(const json &j) {
    synth::DialogueConfig c;
    c.num_speakers = j.at("num_speakers").get<int>();
    c.duration = j.at("duration").get<double>();
    c.frame_rate = j.at("frame_rate").get<double>();
    c.overlap_target = j.at("overlap_target").get<double>();
    c.turn_min = j.at("turn_min").get<double>();
    c.turn_max = j.at("turn_max").get<double>();
    c.pause_min = j.at("pause_min").get<double>();
    c.pause_max = j.at("pause_max").get<double>();
    c.words_per_second = j.at("words_per_second").get<double>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.signature_scale = j.at("signature_scale").get<double>();
    c.content_scale = j.at("content_scale").get<double>();
    c.noise_scale = j.at("noise_scale").get<double>();
    c.signature_seed = j.at("signature_seed").get<std::uint64_t>();
    synth::validate(c);
    return c;
}

inline json corpus_spec_to_json(const CorpusSpec &s) {
    return {{"dialogue", dialogue_config_to_json(s.dialogue)},
            {"train_count", s.train_count},
            {"test_count", s.test_count},
            {"seed", s.seed}};
}

inline CorpusSpec corpus_spec_from_json(const json &j) {
    CorpusSpec s;
    s.dialogue = dialogue_config_from_json(j.at("dialogue"));
    s.train_count = j.at("train_count").get<int>();
    s.test_count = j.at("test_count").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

inline json split_stats(const std::vector<synth::SyntheticDialogue> &split) {
    json stats{{"count", split.size()}};
    double duration = 0.0, overlap = 0.0;
    std::map<int, int> speaker_counts;
    std::array<double, sd::kMaxSpeakers> active_frames{};
    double total_active = 0.0;
    for (const auto &d : split) {
        duration += d.activity_truth.frames() / d.activity_truth.frame_rate;
        overlap += d.achieved_overlap;
        std::array<bool, sd::kMaxSpeakers> seen{};
        for (const auto &seg : d.transcript.segments)
            seen[static_cast<size_t>(seg.speaker - 1)] = true;
        int distinct = 0;
        for (bool b : seen) distinct += b ? 1 : 0;
        speaker_counts[distinct] += 1;
        for (int s = 0; s < sd::kMaxSpeakers; ++s) {
            const double f = d.activity_truth.pi.col(s).sum();
            active_frames[static_cast<size_t>(s)] += f;
            total_active += f;
        }
    }
    stats["total_duration"] = duration;
    stats["mean_achieved_overlap"] = split.empty() ? 0.0 : overlap / split.size();
    json hist = json::object();
    for (const auto &[k, v] : speaker_counts) hist[std::to_string(k)] = v;
    stats["speaker_count_distribution"] = hist;
    json prop = json::array();
    for (double f : active_frames) prop.push_back(total_active > 0.0 ? f / total_active : 0.0);
    stats["speaker_speech_proportion"] = prop;
    return stats;
}

inline json corpus_manifest(const CorpusSpec &spec, const Corpus &corpus) {
    return {{"format_version", 1},
            {"kind", "corpus"},
            {"spec", corpus_spec_to_json(spec)},
            {"stats", {{"train", split_stats(corpus.train)}, {"test", split_stats(corpus.test)}}}};
}

// dialogues regenerate deterministically from the spec stored in the manifest
inline std::pair<CorpusSpec, Corpus> load_corpus_manifest(const json &manifest) {
    check_arg(manifest.at("format_version").get<int>() == 1,
              "corpus manifest: unsupported format_version");
    check_arg(manifest.at("kind").get<std::string>() == "corpus",
              "corpus manifest: wrong kind");
    const CorpusSpec spec = corpus_spec_from_json(manifest.at("spec"));
    Corpus corpus = make_corpus(spec);
    return {spec, std::move(corpus)};
}

// ── scoring helpers ─────────────────────────────────────────────────────────

// rank-sum ROC AUC with average ranks over ties; -1 when one class is absent
inline double roc_auc(std::vector<std::pair<double, int>> scored) {
    long pos = 0, neg = 0;
    for (const auto &[score, label] : scored) (label ? pos : neg) += 1;
    if (pos == 0 || neg == 0) return -1.0;
    std::sort(scored.begin(), scored.end(),
              [](const auto &a, const auto &b) { return a.first < b.first; });
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < scored.size()) {
        size_t j = i;
        while (j < scored.size() && scored[j].first == scored[i].first) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t k = i; k < j; ++k)
            if (scored[k].second) rank_sum_pos += avg_rank;
        i = j;
    }
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);
}

// contiguous >= 0.5 runs of one speaker's activity as annotation segments
inline std::vector<tr::RttmSegment> segments_from_activity(const sd::ActivityMatrix &act,
                                                           const std::string &file_id) {
    std::vector<tr::RttmSegment> out;
    for (int s = 0; s < sd::kMaxSpeakers; ++s) {
        int start = -1;
        for (int t = 0; t <= act.frames(); ++t) {
            const bool on = t < act.frames() && act.pi(t, s) >= 0.5;
            if (on && start < 0) start = t;
            if (!on && start >= 0) {
                out.push_back({file_id, start / act.frame_rate,
                               (t - start) / act.frame_rate, tr::speaker_label(s + 1)});
                start = -1;
            }
        }
    }
    return out;
}

// ── speaker-activity experiments ────────────────────────────────────────────

struct SdEval {
    double class_accuracy = 0.0; // nearest-prototype power-set class
    double activity_auc = -1.0;  // pooled over frame x speaker scores
    std::array<double, sd::kMaxSpeakers> per_speaker_auc{-1.0, -1.0, -1.0, -1.0};
    double der_collar0 = 0.0;  // aggregated over the evaluated dialogues
    double der_collar025 = 0.0;
    long frames = 0;
};

inline json sd_eval_json(const SdEval &e) {
    return {{"class_accuracy", e.class_accuracy},
            {"activity_auc", e.activity_auc},
            {"per_speaker_auc", e.per_speaker_auc},
            {"der_collar0", e.der_collar0},
            {"der_collar025", e.der_collar025},
            {"frames", e.frames}};
}

inline SdEval evaluate_sd(const sd::HyperSd &m,
                          const std::vector<synth::SyntheticDialogue> &data) {
    check_arg(!data.empty(), "evaluate_sd: empty dataset");
    SdEval out;
    long correct = 0;
    std::vector<std::pair<double, int>> pooled;
    std::array<std::vector<std::pair<double, int>>, sd::kMaxSpeakers> per_speaker;
    std::array<double, 2> err{0.0, 0.0}, speech{0.0, 0.0};
    const std::array<double, 2> collars{0.0, 0.25};

    for (const auto &d : data) {
        const Mat dist = m.frame_distances(d.layer_stack);
        const std::vector<int> truth = sd::frame_labels(d.activity_truth);
        // diarization hypothesis from the hard class decision; thresholding
        // the marginalized activity would cap out near 0.5 on confident
        // frames (the true class alone contributes at most sigma(0))
        Mat decided = Mat::Zero(dist.rows(), sd::kMaxSpeakers);
        for (Eigen::Index t = 0; t < dist.rows(); ++t) {
            Eigen::Index pred = 0;
            dist.row(t).minCoeff(&pred);
            correct += pred == truth[static_cast<size_t>(t)] ? 1 : 0;
            for (int s = 0; s < sd::kMaxSpeakers; ++s)
                decided(t, s) = (static_cast<int>(pred) >> s) & 1 ? 1.0 : 0.0;
        }
        out.frames += dist.rows();

        const sd::ActivityMatrix pi =
            m.infer_activity(d.layer_stack, d.activity_truth.frame_rate);
        for (int t = 0; t < pi.frames(); ++t)
            for (int s = 0; s < sd::kMaxSpeakers; ++s) {
                const int label = d.activity_truth.pi(t, s) >= 0.5 ? 1 : 0;
                pooled.emplace_back(pi.pi(t, s), label);
                per_speaker[static_cast<size_t>(s)].emplace_back(pi.pi(t, s), label);
            }

        const auto hyp = segments_from_activity(
            sd::make_activity(decided, d.activity_truth.frame_rate),
            d.transcript.dialogue_id);
        for (size_t c = 0; c < collars.size(); ++c) {
            const metrics::DerBreakdown der = metrics::der(d.rttm, hyp, collars[c]);
            if (!der.infinite) err[c] += der.missed + der.false_alarm + der.confusion;
            speech[c] += der.scored_speech;
        }
    }

    out.class_accuracy = static_cast<double>(correct) / static_cast<double>(out.frames);
    out.activity_auc = roc_auc(pooled);
    for (int s = 0; s < sd::kMaxSpeakers; ++s)
        out.per_speaker_auc[static_cast<size_t>(s)] =
            roc_auc(per_speaker[static_cast<size_t>(s)]);
    out.der_collar0 = speech[0] > 0.0 ? err[0] / speech[0] : 0.0;
    out.der_collar025 = speech[1] > 0.0 ? err[1] / speech[1] : 0.0;
    return out;
}

struct SdExperimentResult {
    sd::SdFitResult fit;
    SdEval eval;
    double proto_min_dist_init = 0.0;
    double proto_min_dist_final = 0.0;
    json report;
};

inline SdExperimentResult run_sd_experiment(const Corpus &corpus,
                                            const sd::SdFitConfig &fit_cfg) {
    check_arg(!corpus.train.empty() && !corpus.test.empty(),
              "run_sd_experiment: need train and test dialogues");
    SdExperimentResult out;
    const int layers = corpus.train[0].layer_stack.layer_count();
    const sd::HyperSd start = sd::HyperSd::init(fit_cfg.model, layers, fit_cfg.seed);
    out.proto_min_dist_init = sd::min_offdiagonal_distance(
        sd::prototype_report(start.prototype_set(), start.curv()).distances);

    out.fit = sd::fit_hyper_sd(corpus.train, fit_cfg);
    out.eval = evaluate_sd(out.fit.model, corpus.test);
    out.proto_min_dist_final = sd::min_offdiagonal_distance(
        sd::prototype_report(out.fit.model.prototype_set(), out.fit.model.curv()).distances);

    out.report = {{"curvature", fit_cfg.model.curvature},
                  {"steps_run", out.fit.steps_run},
                  {"final_loss", out.fit.loss_history.empty() ? 0.0
                                                              : out.fit.loss_history.back()},
                  {"eval", sd_eval_json(out.eval)},
                  {"proto_min_dist_init", out.proto_min_dist_init},
                  {"proto_min_dist_final", out.proto_min_dist_final}};
    return out;
}

// criterion-style sweep: same corpus and budgets, curvature varies; at most
// three worker threads
inline json curvature_sweep(const Corpus &corpus, const sd::SdFitConfig &base,
                            const std::vector<double> &curvatures = {0.5, 1.0, 1.5}) {
    check_arg(!curvatures.empty(), "curvature_sweep: need at least one curvature");
    std::vector<SdExperimentResult> results(curvatures.size());
    std::vector<std::exception_ptr> failures(curvatures.size());
    std::vector<std::thread> workers;
    const size_t max_threads = 3;

    for (size_t begin = 0; begin < curvatures.size(); begin += max_threads) {
        const size_t end = std::min(begin + max_threads, curvatures.size());
        for (size_t i = begin; i < end; ++i)
            workers.emplace_back([&, i] {
                try {
                    sd::SdFitConfig cfg = base;
                    cfg.model.curvature = curvatures[i];
                    results[i] = run_sd_experiment(corpus, cfg);
                } catch (...) {
                    failures[i] = std::current_exception();
                }
            });
        for (auto &w : workers) w.join();
        workers.clear();
    }
    for (const auto &f : failures)
        if (f) std::rethrow_exception(f);

    double base_der0 = 0.0, base_der025 = 0.0;
    bool have_base = false;
    for (size_t i = 0; i < curvatures.size(); ++i)
        if (curvatures[i] == 1.0) {
            base_der0 = results[i].eval.der_collar0;
            base_der025 = results[i].eval.der_collar025;
            have_base = true;
        }

    json rows = json::array();
    for (size_t i = 0; i < curvatures.size(); ++i) {
        json row = results[i].report;
        if (have_base) {
            row["delta_der_collar0"] = results[i].eval.der_collar0 - base_der0;
            row["delta_der_collar025"] = results[i].eval.der_collar025 - base_der025;
        }
        rows.push_back(std::move(row));
    }
    return {{"baseline_curvature", 1.0}, {"has_baseline", have_base}, {"rows", rows}};
}

// ── transcription experiments ───────────────────────────────────────────────

struct AsrEval {
    json corpus_report;
    double cp_wer = 0.0;
    double tcp_wer = 0.0;
    double token_accuracy = 0.0;
    int decode_warnings = 0;
};

inline AsrEval evaluate_asr(const model::AsrModel &m,
                            const std::vector<synth::SyntheticDialogue> &data,
                            const metrics::EvalConfig &ecfg = {}) {
    check_arg(!data.empty(), "evaluate_asr: empty dataset");
    AsrEval out;
    std::vector<tr::StructuredTranscript> refs, hyps;
    std::vector<model::AsrExample> examples;
    const model::TokenVocabulary vocab = m.cfg.vocab();
    for (const auto &d : data) {
        auto gen = m.generate(d.frames, d.activity_truth, m.cfg.max_target_len);
        gen.transcript.dialogue_id = d.transcript.dialogue_id;
        out.decode_warnings += gen.warnings;
        refs.push_back(d.transcript);
        hyps.push_back(std::move(gen.transcript));
        examples.push_back(model::make_example(d, vocab));
    }
    out.token_accuracy = model::token_accuracy(m, examples);
    const metrics::CorpusReport rep = metrics::evaluate_corpus(refs, hyps, ecfg);
    out.corpus_report = rep.json;
    out.cp_wer = rep.json.at("aggregate").at("cp_wer").at("rate").get<double>();
    out.tcp_wer = rep.json.at("aggregate").at("tcp_wer").at("rate").get<double>();
    return out;
}

struct AsrExperimentResult {
    model::AsrFitResult fit;
    AsrEval eval;
    json report;
};

inline AsrExperimentResult run_asr_experiment(const Corpus &corpus,
                                              const model::AsrFitConfig &fit_cfg,
                                              const metrics::EvalConfig &ecfg = {}) {
    check_arg(!corpus.train.empty() && !corpus.test.empty(),
              "run_asr_experiment: need train and test dialogues");
    AsrExperimentResult out;
    out.fit = model::train_asr(corpus.train, fit_cfg);
    out.eval = evaluate_asr(out.fit.model, corpus.test, ecfg);
    out.report = {{"mode", model::pos_mode_name(fit_cfg.model.mode)},
                  {"stage1_steps", out.fit.stage1_steps_run},
                  {"stage2_steps", out.fit.stage2_steps_run},
                  {"final_loss",
                   out.fit.loss_history.empty() ? 0.0 : out.fit.loss_history.back()},
                  {"cp_wer", out.eval.cp_wer},
                  {"tcp_wer", out.eval.tcp_wer},
                  {"token_accuracy", out.eval.token_accuracy},
                  {"decode_warnings", out.eval.decode_warnings}};
    return out;
}

// identical data and budgets, positional mode varies
inline json mode_comparison(const Corpus &corpus, const model::AsrFitConfig &base,
                            const std::vector<model::PosMode> &modes) {
    json rows = json::array();
    for (model::PosMode mode : modes) {
        model::AsrFitConfig cfg = base;
        cfg.model.mode = mode;
        rows.push_back(run_asr_experiment(corpus, cfg).report);
    }
    return {{"rows", rows}};
}

// ablation grid over the position-input switches
struct AblationVariant {
    std::string name;
    model::PosMode mode = model::PosMode::TsRope;
    bool use_turn_counts = true;
    bool use_activity = true;
    bool use_query_bias = true;
};

inline std::vector<AblationVariant> ablation_variants() {
    return {{"full", model::PosMode::TsRope, true, true, true},
            {"no_query_bias", model::PosMode::TsRope, true, true, false},
            {"no_turn_counts", model::PosMode::TsRope, false, true, true},
            {"no_activity", model::PosMode::TsRope, true, false, true},
            {"time_only", model::PosMode::TimeOnlyRope, true, true, true},
            {"absolute", model::PosMode::Absolute, true, true, true}};
}

inline json ablation_grid(const Corpus &corpus, const model::AsrFitConfig &base) {
    json rows = json::array();
    for (const AblationVariant &v : ablation_variants()) {
        model::AsrFitConfig cfg = base;
        cfg.model.mode = v.mode;
        cfg.model.rope.use_turn_counts = v.use_turn_counts;
        cfg.model.rope.use_activity = v.use_activity;
        cfg.model.rope.use_query_bias = v.use_query_bias;
        json row = run_asr_experiment(corpus, cfg).report;
        row["variant"] = v.name;
        row["use_turn_counts"] = v.use_turn_counts;
        row["use_activity"] = v.use_activity;
        row["use_query_bias"] = v.use_query_bias;
        rows.push_back(std::move(row));
    }
    return {{"rows", rows}};
}

} // namespace masr::harness
