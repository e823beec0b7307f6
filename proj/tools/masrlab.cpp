// masrlab: command-line driver for the synthetic multi-speaker transcription
// laboratory. Subcommands: synth | train-sd | train-asr | eval | inspect-rope
// | proto-report. Every subcommand reads an optional JSON config plus flag
// overrides of the same dotted names, writes a resolved_config.json snapshot
// next to its outputs, and is fully deterministic under a fixed seed.
//
// Exit codes: 0 success, 2 invalid arguments or inputs, 3 numerical failure,
// 4 oracle mismatch.

#include "masr/checkpoint.hpp"
#include "masr/harness.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

using namespace masr;
using nlohmann::json;

namespace {

// ── logging ─────────────────────────────────────────────────────────────────

int log_level() {
    static const int level = [] {
        const char *env = std::getenv("MASRLAB_LOG");
        if (!env) return 1;
        const std::string v(env);
        if (v == "0" || v == "quiet") return 0;
        if (v == "2" || v == "debug") return 2;
        return 1;
    }();
    return level;
}

void log_info(const std::string &msg) {
    if (log_level() >= 1) std::cerr << "[masrlab] " << msg << "\n";
}

void log_debug(const std::string &msg) {
    if (log_level() >= 2) std::cerr << "[masrlab:debug] " << msg << "\n";
}

// ── config binding ──────────────────────────────────────────────────────────

// Defaults are a nested JSON object. A --config file is merged over them
// (unknown keys rejected), then every leaf is overridable by a flag of the
// same dotted name.
struct ConfigBinder {
    json resolved;
    std::string config_path;
    std::map<std::string, std::string> raw;
    std::map<std::string, CLI::Option *> opts;
    std::vector<std::pair<std::string, json>> flag_sets;
    std::set<std::string> flag_keys; // keys claimed by bare flags; bind() skips them

    explicit ConfigBinder(json defaults) : resolved(std::move(defaults)) {}

    static json::json_pointer pointer(const std::string &dotted) {
        std::string p = "/" + dotted;
        std::replace(p.begin(), p.end(), '.', '/');
        return json::json_pointer(p);
    }

    static void collect_keys(const json &node, const std::string &prefix,
                             std::vector<std::string> &keys) {
        if (node.is_object()) {
            for (const auto &[k, v] : node.items())
                collect_keys(v, prefix.empty() ? k : prefix + "." + k, keys);
        } else {
            keys.push_back(prefix);
        }
    }

    std::string describe(const std::string &key) const {
        const json &def = resolved.at(pointer(key));
        const char *type = def.is_boolean()        ? "bool"
                           : def.is_number_float() ? "float"
                           : def.is_number()       ? "int"
                           : def.is_array()        ? "json array"
                                                   : "string";
        return std::string(type) + ", default " + def.dump();
    }

    void bind(CLI::App &app,
              const std::map<std::string, std::vector<std::string>> &aliases = {}) {
        app.add_option("--config", config_path,
                       "JSON config file; flags of the same dotted name override its keys");
        std::vector<std::string> keys;
        collect_keys(resolved, "", keys);
        for (const std::string &key : keys) raw[key];
        for (const std::string &key : keys) {
            if (flag_keys.count(key)) continue;
            std::string names = "--" + key;
            const auto alias = aliases.find(key);
            if (alias != aliases.end())
                for (const std::string &extra : alias->second) names += ",--" + extra;
            opts[key] = app.add_option(names, raw[key], describe(key));
        }
    }

    // bare flag that sets one key; call before bind()
    void add_flag(CLI::App &app, const std::string &flag, const std::string &key, json value,
                  const std::string &help) {
        flag_keys.insert(key);
        app.add_flag_callback(
            flag, [this, key, value] { flag_sets.emplace_back(key, value); }, help);
    }

    static json coerce(const json &def, const json &v, const std::string &path) {
        if (def.is_boolean()) {
            if (v.is_boolean()) return v;
        } else if (def.is_number_float()) {
            if (v.is_number()) return json(v.get<double>());
        } else if (def.is_number()) {
            if (v.is_number_integer() || v.is_number_unsigned()) return v;
        } else if (def.is_string()) {
            if (v.is_string()) return v;
        } else if (def.is_array()) {
            if (v.is_array()) return v;
        }
        throw std::invalid_argument("config key " + path + " has the wrong type: " + v.dump());
    }

    static void merge_file(json &dst, const json &src, const std::string &path) {
        if (!src.is_object())
            throw std::invalid_argument("config file must contain a JSON object");
        for (const auto &[k, v] : src.items()) {
            const std::string p = path.empty() ? k : path + "." + k;
            if (!dst.contains(k)) throw std::invalid_argument("unknown config key: " + p);
            if (dst[k].is_object()) {
                if (!v.is_object())
                    throw std::invalid_argument("config key " + p + " must be an object");
                merge_file(dst[k], v, p);
            } else {
                dst[k] = coerce(dst[k], v, p);
            }
        }
    }

    static json parse_typed(const json &def, const std::string &text, const std::string &key) {
        const auto fail = [&] {
            throw std::invalid_argument("bad value for --" + key + ": '" + text + "'");
        };
        if (def.is_boolean()) {
            std::string t = text;
            std::transform(t.begin(), t.end(), t.begin(),
                           [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
            if (t == "true" || t == "1" || t == "yes" || t == "on") return json(true);
            if (t == "false" || t == "0" || t == "no" || t == "off") return json(false);
            fail();
        }
        try {
            if (def.is_number_float()) {
                size_t pos = 0;
                const double v = std::stod(text, &pos);
                if (pos != text.size()) fail();
                return json(v);
            }
            if (def.is_number_unsigned()) {
                size_t pos = 0;
                const unsigned long long v = std::stoull(text, &pos);
                if (pos != text.size()) fail();
                return json(static_cast<std::uint64_t>(v));
            }
            if (def.is_number_integer()) {
                size_t pos = 0;
                const long long v = std::stoll(text, &pos);
                if (pos != text.size()) fail();
                return json(static_cast<std::int64_t>(v));
            }
            if (def.is_array()) {
                const json v = json::parse(text);
                if (!v.is_array()) fail();
                return v;
            }
        } catch (const std::invalid_argument &) {
            fail();
        } catch (const std::out_of_range &) {
            fail();
        } catch (const json::parse_error &) {
            fail();
        }
        return json(text);
    }

    json finalize() {
        if (!config_path.empty()) merge_file(resolved, ckpt::read_json_file(config_path), "");
        for (const auto &[key, opt] : opts)
            if (opt->count() > 0) {
                json &slot = resolved.at(pointer(key));
                slot = parse_typed(slot, raw.at(key), key);
            }
        for (const auto &[key, value] : flag_sets) resolved.at(pointer(key)) = value;
        return resolved;
    }
};

// ── shared plumbing ─────────────────────────────────────────────────────────

std::string out_path(const json &cfg, const std::string &name) {
    return (std::filesystem::path(cfg.at("out_dir").get<std::string>()) / name).string();
}

harness::Corpus load_corpus(const json &cfg) {
    const std::string dir = cfg.at("corpus").get<std::string>();
    if (dir.empty())
        throw std::invalid_argument("a corpus directory is required (--corpus <dir>)");
    const std::string manifest_path =
        (std::filesystem::path(dir) / "manifest.json").string();
    if (!std::filesystem::exists(manifest_path))
        throw std::invalid_argument("missing corpus manifest: " + manifest_path);
    auto [spec, corpus] = harness::load_corpus_manifest(ckpt::read_json_file(manifest_path));
    log_info("loaded corpus " + dir + ": " + std::to_string(corpus.train.size()) + " train / " +
             std::to_string(corpus.test.size()) + " test dialogues");
    return std::move(corpus);
}

// stage1_steps < 0 drops the stage column
void write_loss_csv(const std::string &path, const std::vector<double> &history,
                    int stage1_steps) {
    std::ofstream out(path);
    if (!out.good()) throw std::invalid_argument("cannot open for writing: " + path);
    out << (stage1_steps < 0 ? "step,loss\n" : "step,stage,loss\n");
    char line[64];
    for (size_t i = 0; i < history.size(); ++i) {
        if (stage1_steps < 0)
            std::snprintf(line, sizeof line, "%zu,%.17g\n", i, history[i]);
        else
            std::snprintf(line, sizeof line, "%zu,%d,%.17g\n", i,
                          static_cast<int>(i) < stage1_steps ? 1 : 2, history[i]);
        out << line;
    }
}

// patch 0-valued "inherit from corpus" fields before validation
void resolve_model_sentinels(json &cfg, const harness::Corpus &corpus) {
    const auto &d0 = corpus.train.at(0);
    json &model = cfg.at("model");
    if (model.contains("feature_dim") && model.at("feature_dim").get<int>() == 0)
        model["feature_dim"] = static_cast<int>(d0.frames.cols());
    if (model.contains("content_vocab") && model.at("content_vocab").get<int>() == 0) {
        int vocab = 0;
        for (const auto *split : {&corpus.train, &corpus.test})
            for (const auto &d : *split)
                for (const auto &seg : d.transcript.segments)
                    for (int w : seg.words) vocab = std::max(vocab, w + 1);
        model["content_vocab"] = std::max(vocab, 1);
    }
    if (model.contains("max_time") && model.at("max_time").get<double>() == 0.0) {
        double max_time = 0.0;
        for (const auto *split : {&corpus.train, &corpus.test})
            for (const auto &d : *split)
                for (const auto &seg : d.transcript.segments)
                    max_time = std::max(max_time, seg.t_end);
        model["max_time"] = max_time + 0.1;
    }
    if (model.contains("max_target_len") && model.at("max_target_len").get<int>() == 0) {
        model["max_target_len"] = 8; // grown below once the vocabulary is known
        const model::AsrConfig probe = ckpt::asr_config_from_json(model);
        const model::TokenVocabulary vocab = probe.vocab();
        size_t longest = 0;
        for (const auto *split : {&corpus.train, &corpus.test})
            for (const auto &d : *split)
                longest = std::max(longest,
                                   model::serialize_transcript(d.transcript, vocab).size());
        model["max_target_len"] = static_cast<int>(longest) + 8;
    }
}

metrics::EvalConfig eval_config_from_json(const json &j) {
    metrics::EvalConfig cfg;
    cfg.tcp_collar = j.at("tcp_collar").get<double>();
    cfg.der_collars = j.at("der_collars").get<std::vector<double>>();
    cfg.approx = j.at("approx").get<bool>();
    cfg.oracle_check = j.at("oracle").get<bool>();
    return cfg;
}

void print_wer_row(const char *name, const json &w) {
    std::printf("  %-10s rate %7.4f  sub %5ld ins %5ld del %5ld ref %6ld\n", name,
                w.at("rate").get<double>(), w.at("substitutions").get<long>(),
                w.at("insertions").get<long>(), w.at("deletions").get<long>(),
                w.at("ref_words").get<long>());
}

// ── synth ───────────────────────────────────────────────────────────────────

json synth_defaults() {
    return {{"out_dir", "synth_out"},
            {"seed", std::uint64_t{101}},
            {"train_count", 50},
            {"test_count", 10},
            {"dialogue", harness::dialogue_config_to_json(synth::DialogueConfig{})}};
}

int run_synth(const json &cfg) {
    harness::CorpusSpec spec;
    spec.dialogue = harness::dialogue_config_from_json(cfg.at("dialogue"));
    spec.train_count = cfg.at("train_count").get<int>();
    spec.test_count = cfg.at("test_count").get<int>();
    spec.seed = cfg.at("seed").get<std::uint64_t>();

    const harness::Corpus corpus = harness::make_corpus(spec);
    const json manifest = harness::corpus_manifest(spec, corpus);
    ckpt::write_json_file(out_path(cfg, "manifest.json"), manifest);

    std::vector<tr::StructuredTranscript> transcripts;
    std::vector<tr::RttmSegment> rttm;
    for (const auto *split : {&corpus.train, &corpus.test})
        for (const auto &d : *split) {
            transcripts.push_back(d.transcript);
            rttm.insert(rttm.end(), d.rttm.begin(), d.rttm.end());
        }
    tr::write_transcript_jsonl(transcripts, out_path(cfg, "transcripts.jsonl"));
    tr::write_rttm(rttm, out_path(cfg, "ref.rttm"));

    std::printf("corpus written to %s\n", cfg.at("out_dir").get<std::string>().c_str());
    std::printf("%-6s %9s %10s %9s %-12s %s\n", "split", "dialogues", "duration", "overlap",
                "spk-count", "speaker proportion");
    for (const char *split : {"train", "test"}) {
        const json &st = manifest.at("stats").at(split);
        std::string hist;
        for (const auto &[k, v] : st.at("speaker_count_distribution").items())
            hist += k + ":" + v.dump() + " ";
        std::string prop;
        for (const auto &p : st.at("speaker_speech_proportion")) {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%.3f ", p.get<double>());
            prop += buf;
        }
        std::printf("%-6s %9d %9.1fs %9.3f %-12s %s\n", split, st.at("count").get<int>(),
                    st.at("total_duration").get<double>(),
                    st.at("mean_achieved_overlap").get<double>(), hist.c_str(), prop.c_str());
    }
    return 0;
}

// ── train-sd ────────────────────────────────────────────────────────────────

json train_sd_defaults() {
    sd::HyperSdConfig model;
    json model_json = ckpt::config_to_json(model);
    model_json["feature_dim"] = 0; // 0 = take from the corpus
    return {{"out_dir", "train_sd_out"},
            {"corpus", ""},
            {"seed", std::uint64_t{1}},
            {"model", model_json},
            {"fit",
             {{"max_steps", 1500},
              {"crop_frames", 256},
              {"lr", 1e-3},
              {"proto_lr", 5e-3},
              {"weight_decay", 1e-4},
              {"target_loss", 0.0}}},
            {"sweep", json::array()}};
}

int run_train_sd(json cfg) {
    const harness::Corpus corpus = load_corpus(cfg);
    resolve_model_sentinels(cfg, corpus);

    sd::SdFitConfig fit;
    fit.model = ckpt::hyper_sd_config_from_json(cfg.at("model"));
    fit.max_steps = cfg.at("fit").at("max_steps").get<int>();
    fit.crop_frames = cfg.at("fit").at("crop_frames").get<int>();
    fit.lr = cfg.at("fit").at("lr").get<double>();
    fit.proto_lr = cfg.at("fit").at("proto_lr").get<double>();
    fit.weight_decay = cfg.at("fit").at("weight_decay").get<double>();
    fit.target_loss = cfg.at("fit").at("target_loss").get<double>();
    fit.seed = cfg.at("seed").get<std::uint64_t>();

    const auto sweep = cfg.at("sweep").get<std::vector<double>>();
    if (!sweep.empty()) {
        log_info("running curvature sweep over " + std::to_string(sweep.size()) + " values");
        const json report = harness::curvature_sweep(corpus, fit, sweep);
        ckpt::write_json_file(out_path(cfg, "sweep.json"), report);
        std::printf("%10s %12s %12s %14s\n", "curvature", "der(0)", "der(0.25)", "dder(0.25)");
        for (const json &row : report.at("rows")) {
            const json &eval = row.at("eval");
            char delta[32] = "n/a";
            if (row.contains("delta_der_collar025"))
                std::snprintf(delta, sizeof delta, "%+.4f",
                              row.at("delta_der_collar025").get<double>());
            std::printf("%10.2f %12.4f %12.4f %14s\n", row.at("curvature").get<double>(),
                        eval.at("der_collar0").get<double>(),
                        eval.at("der_collar025").get<double>(), delta);
        }
        return 0;
    }

    log_info("training speaker-activity model for " + std::to_string(fit.max_steps) + " steps");
    const harness::SdExperimentResult r = harness::run_sd_experiment(corpus, fit);
    ckpt::write_json_file(out_path(cfg, "sd_checkpoint.json"), ckpt::save_hyper_sd(r.fit.model));
    ckpt::write_json_file(out_path(cfg, "metrics.json"), r.report);
    write_loss_csv(out_path(cfg, "loss.csv"), r.fit.loss_history, -1);

    std::printf("held-out: class accuracy %.4f, activity AUC %.4f, DER(0) %.4f, DER(0.25) %.4f\n",
                r.eval.class_accuracy, r.eval.activity_auc, r.eval.der_collar0,
                r.eval.der_collar025);
    std::printf("prototype min pairwise distance: %.4f -> %.4f\n", r.proto_min_dist_init,
                r.proto_min_dist_final);
    return 0;
}

// ── train-asr ───────────────────────────────────────────────────────────────

json train_asr_defaults() {
    model::AsrConfig model;
    json model_json = ckpt::config_to_json(model);
    model_json["feature_dim"] = 0;     // 0 = take from the corpus
    model_json["content_vocab"] = 0;   // 0 = smallest cover of the corpus words
    model_json["max_time"] = 0.0;      // 0 = corpus maximum end time
    model_json["max_target_len"] = 0;  // 0 = longest corpus target plus headroom
    return {{"out_dir", "train_asr_out"},
            {"corpus", ""},
            {"sd_checkpoint", ""},
            {"seed", std::uint64_t{1}},
            {"model", model_json},
            {"fit",
             {{"stage1_steps", 200},
              {"stage2_steps", 800},
              {"stage2_only", false},
              {"lr", 1e-3},
              {"weight_decay", 1e-4},
              {"startup_grad_check", true},
              {"grad_check_tol", 1e-3}}},
            {"eval",
             {{"tcp_collar", 0.5},
              {"der_collars", {0.0, 0.25}},
              {"approx", false},
              {"oracle", false}}}};
}

int run_train_asr(json cfg) {
    harness::Corpus corpus = load_corpus(cfg);
    resolve_model_sentinels(cfg, corpus);

    const std::string sd_path = cfg.at("sd_checkpoint").get<std::string>();
    if (!sd_path.empty()) {
        const sd::HyperSd sd_model = ckpt::load_hyper_sd(ckpt::read_json_file(sd_path));
        log_info("replacing ground-truth activity with inference from " + sd_path);
        for (auto *split : {&corpus.train, &corpus.test})
            for (auto &d : *split)
                d.activity_truth =
                    sd_model.infer_activity(d.layer_stack, d.activity_truth.frame_rate);
    }

    model::AsrFitConfig fit;
    fit.model = ckpt::asr_config_from_json(cfg.at("model"));
    fit.stage1_steps = cfg.at("fit").at("stage1_steps").get<int>();
    fit.stage2_steps = cfg.at("fit").at("stage2_steps").get<int>();
    fit.stage2_only = cfg.at("fit").at("stage2_only").get<bool>();
    fit.lr = cfg.at("fit").at("lr").get<double>();
    fit.weight_decay = cfg.at("fit").at("weight_decay").get<double>();
    fit.seed = cfg.at("seed").get<std::uint64_t>();
    fit.startup_grad_check = cfg.at("fit").at("startup_grad_check").get<bool>();
    fit.grad_check_tol = cfg.at("fit").at("grad_check_tol").get<double>();

    log_info("training transcription model, mode " +
             std::string(model::pos_mode_name(fit.model.mode)));
    const harness::AsrExperimentResult r =
        harness::run_asr_experiment(corpus, fit, eval_config_from_json(cfg.at("eval")));

    ckpt::write_json_file(out_path(cfg, "asr_checkpoint.json"), ckpt::save_asr(r.fit.model));
    write_loss_csv(out_path(cfg, "loss.csv"), r.fit.loss_history, r.fit.stage1_steps_run);
    json eval_out = r.report;
    eval_out["corpus_report"] = r.eval.corpus_report;
    ckpt::write_json_file(out_path(cfg, "eval.json"), eval_out);

    std::printf("mode %s: cp_wer %.4f tcp_wer %.4f token accuracy %.4f (%d decode warnings)\n",
                model::pos_mode_name(fit.model.mode), r.eval.cp_wer, r.eval.tcp_wer,
                r.eval.token_accuracy, r.eval.decode_warnings);
    return 0;
}

// ── eval ────────────────────────────────────────────────────────────────────

json eval_defaults() {
    return {{"out_dir", "eval_out"},
            {"ref", ""},
            {"hyp", ""},
            {"tcp_collar", 0.5},
            {"der_collars", {0.0, 0.25}},
            {"approx", false},
            {"oracle", false}};
}

int run_eval(const json &cfg) {
    const std::string ref_path = cfg.at("ref").get<std::string>();
    const std::string hyp_path = cfg.at("hyp").get<std::string>();
    if (ref_path.empty() || hyp_path.empty())
        throw std::invalid_argument("both --ref and --hyp transcript JSONL files are required");
    const auto refs = tr::read_transcript_jsonl(ref_path);
    const auto hyps = tr::read_transcript_jsonl(hyp_path);
    log_info("evaluating " + std::to_string(hyps.size()) + " hypothesis transcripts against " +
             std::to_string(refs.size()) + " references");

    metrics::EvalConfig ecfg;
    ecfg.tcp_collar = cfg.at("tcp_collar").get<double>();
    ecfg.der_collars = cfg.at("der_collars").get<std::vector<double>>();
    ecfg.approx = cfg.at("approx").get<bool>();
    ecfg.oracle_check = cfg.at("oracle").get<bool>();

    const metrics::CorpusReport report = metrics::evaluate_corpus(refs, hyps, ecfg);
    json out = report.json;
    out["oracle_mismatches"] = report.oracle_mismatches;
    ckpt::write_json_file(out_path(cfg, "report.json"), out);

    const json &agg = report.json.at("aggregate");
    std::printf("aggregate over %zu files:\n", report.json.at("files").size());
    for (const char *name : {"cp_wer", "tcp_wer", "orc_wer", "tcorc_wer"})
        print_wer_row(name, agg.at(name));
    for (const json &d : agg.at("der"))
        std::printf("  der(collar=%.2f) %7.4f\n", d.at("collar").get<double>(),
                    d.at("der").get<double>());
    for (const json &id : report.json.at("unmatched_ref"))
        std::printf("  unmatched reference id: %s\n", id.get<std::string>().c_str());
    for (const json &id : report.json.at("unmatched_hyp"))
        std::printf("  unmatched hypothesis id: %s\n", id.get<std::string>().c_str());

    if (ecfg.oracle_check) {
        std::printf("oracle mismatches: %d\n", report.oracle_mismatches);
        if (report.oracle_mismatches > 0) return 4;
    }
    return 0;
}

// ── inspect-rope ────────────────────────────────────────────────────────────

json inspect_rope_defaults() {
    return {{"out_dir", "inspect_out"},
            {"corpus", ""},
            {"dialogue_id", ""},
            {"activity", ""},
            {"tau", 0.1},
            {"use_turn_counts", true},
            {"use_activity", true},
            {"use_query_bias", true}};
}

sd::ActivityMatrix activity_from_file(const std::string &path) {
    const json j = ckpt::read_json_file(path);
    const double rate = j.at("frame_rate").get<double>();
    const auto &rows = j.at("pi");
    check_arg(rows.is_array() && !rows.empty(), "activity file: pi must be a nonempty array");
    ad::Mat pi(static_cast<Eigen::Index>(rows.size()), sd::kMaxSpeakers);
    for (size_t t = 0; t < rows.size(); ++t) {
        check_arg(rows[t].is_array() && rows[t].size() == sd::kMaxSpeakers,
                  "activity file: each pi row needs one value per speaker slot");
        for (int s = 0; s < sd::kMaxSpeakers; ++s)
            pi(static_cast<Eigen::Index>(t), s) = rows[t][static_cast<size_t>(s)].get<double>();
    }
    return sd::make_activity(pi, rate);
}

int run_inspect_rope(const json &cfg) {
    sd::ActivityMatrix act;
    const std::string activity_path = cfg.at("activity").get<std::string>();
    if (!activity_path.empty()) {
        act = activity_from_file(activity_path);
    } else {
        const harness::Corpus corpus = load_corpus(cfg);
        const std::string want = cfg.at("dialogue_id").get<std::string>();
        const synth::SyntheticDialogue *found = nullptr;
        for (const auto *split : {&corpus.train, &corpus.test})
            for (const auto &d : *split)
                if (!found && (want.empty() || d.transcript.dialogue_id == want)) found = &d;
        if (!found)
            throw std::invalid_argument("dialogue id not found in corpus: " + want);
        act = found->activity_truth;
        log_info("tracing dialogue " + found->transcript.dialogue_id);
    }

    tsr::PositionConfig pcfg;
    pcfg.tau = cfg.at("tau").get<double>();
    pcfg.use_turn_counts = cfg.at("use_turn_counts").get<bool>();
    pcfg.use_activity = cfg.at("use_activity").get<bool>();
    pcfg.use_query_bias = cfg.at("use_query_bias").get<bool>();

    const auto a = tsr::binarize_activity(act, pcfg.tau);
    const auto deriv = tsr::cumulative_turns(a);
    const auto positions = tsr::build_positions(act, pcfg);

    const std::string path = out_path(cfg, "rope_trace.csv");
    std::ofstream out(path);
    if (!out.good()) throw std::invalid_argument("cannot open for writing: " + path);
    out << "t,s,pi,a,r,C,psi_spk,psi_spk_query\n";
    char line[160];
    for (int t = 0; t < act.frames(); ++t)
        for (int s = 0; s < sd::kMaxSpeakers; ++s) {
            const auto &pv = positions[static_cast<size_t>(t)];
            std::snprintf(line, sizeof line, "%d,%d,%.10g,%d,%d,%d,%.10g,%.10g\n", t, s + 1,
                          act.pi(t, s), deriv.a(t, s), deriv.r(t, s), deriv.C(t, s),
                          pv.psi_spk[static_cast<size_t>(s)],
                          pv.psi_spk_query[static_cast<size_t>(s)]);
            out << line;
        }
    std::printf("wrote %s (%d frames x %d speakers)\n", path.c_str(), act.frames(),
                sd::kMaxSpeakers);
    return 0;
}

// ── proto-report ────────────────────────────────────────────────────────────

json proto_report_defaults() {
    return {{"out_dir", "proto_out"}, {"checkpoint", ""}};
}

int run_proto_report(const json &cfg) {
    const std::string path = cfg.at("checkpoint").get<std::string>();
    if (path.empty())
        throw std::invalid_argument("a speaker-activity checkpoint is required (--checkpoint)");
    const sd::HyperSd m = ckpt::load_hyper_sd(ckpt::read_json_file(path));
    const sd::PrototypeReport rep = sd::prototype_report(m.prototype_set(), m.curv());

    json radii = json::array(), distances = json::array();
    for (int i = 0; i < sd::kNumClasses; ++i) {
        radii.push_back(rep.radii[i]);
        json row = json::array();
        for (int j = 0; j < sd::kNumClasses; ++j) row.push_back(rep.distances(i, j));
        distances.push_back(std::move(row));
    }
    const json out{{"format_version", 1},
                   {"curvature", m.cfg.curvature},
                   {"num_classes", sd::kNumClasses},
                   {"radii", radii},
                   {"distances", distances},
                   {"min_offdiagonal_distance", sd::min_offdiagonal_distance(rep.distances)}};
    ckpt::write_json_file(out_path(cfg, "proto_report.json"), out);
    std::printf("prototype report: min pairwise distance %.4f, max radius %.4f\n",
                out.at("min_offdiagonal_distance").get<double>(), rep.radii.maxCoeff());
    return 0;
}

} // namespace

// ── main ────────────────────────────────────────────────────────────────────

int main(int argc, char **argv) {
    CLI::App app{"masrlab: a desk-scale laboratory for multi-speaker transcription mechanics"};
    app.require_subcommand(1);

    // binders sit behind unique_ptr so the addresses captured by option and
    // flag callbacks survive vector growth
    struct Sub {
        CLI::App *cmd;
        std::unique_ptr<ConfigBinder> binder;
        std::function<int(json)> run;
    };
    std::vector<Sub> subs;
    const auto add = [&](const char *name, const char *help, json defaults,
                         std::function<int(json)> run) {
        CLI::App *c = app.add_subcommand(name, help);
        auto binder = std::make_unique<ConfigBinder>(std::move(defaults));
        ConfigBinder *b = binder.get();
        subs.push_back(Sub{c, std::move(binder), std::move(run)});
        return std::make_pair(c, b);
    };

    {
        auto [c, b] = add("synth", "generate a synthetic dialogue corpus", synth_defaults(),
                          [](json cfg) { return run_synth(cfg); });
        b->bind(*c, {{"dialogue.overlap_target", {"overlap"}},
                     {"dialogue.num_speakers", {"speakers"}},
                     {"out_dir", {"out"}}});
    }
    {
        auto [c, b] = add("train-sd", "train the speaker-activity classifier",
                          train_sd_defaults(), [](json cfg) { return run_train_sd(std::move(cfg)); });
        b->bind(*c, {{"fit.max_steps", {"steps", "epochs"}},
                     {"model.curvature", {"curvature"}},
                     {"out_dir", {"out"}}});
    }
    {
        auto [c, b] = add("train-asr", "train the structured transcription model",
                          train_asr_defaults(),
                          [](json cfg) { return run_train_asr(std::move(cfg)); });
        b->add_flag(*c, "--stage2-only", "fit.stage2_only", json(true),
                    "skip the single-speaker stage");
        b->bind(*c, {{"fit.stage2_steps", {"steps"}},
                     {"model.mode", {"mode"}},
                     {"out_dir", {"out"}}});
    }
    {
        auto [c, b] = add("eval", "score hypothesis transcripts against references",
                          eval_defaults(), [](json cfg) { return run_eval(cfg); });
        b->add_flag(*c, "--oracle", "oracle", json(true),
                    "cross-check assignment solvers against brute force");
        b->add_flag(*c, "--approx", "approx", json(true),
                    "allow stream counts above the exact cap");
        b->bind(*c, {{"tcp_collar", {"collar"}}, {"out_dir", {"out"}}});
    }
    {
        auto [c, b] = add("inspect-rope", "dump per-frame rotary position trace",
                          inspect_rope_defaults(), [](json cfg) { return run_inspect_rope(cfg); });
        b->bind(*c, {{"dialogue_id", {"dialogue"}}, {"out_dir", {"out"}}});
    }
    {
        auto [c, b] = add("proto-report", "dump the prototype distance report",
                          proto_report_defaults(), [](json cfg) { return run_proto_report(cfg); });
        b->bind(*c, {{"out_dir", {"out"}}});
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return 2;
    }

    for (Sub &s : subs) {
        if (!s.cmd->parsed()) continue;
        try {
            const json cfg = s.binder->finalize();
            std::filesystem::create_directories(cfg.at("out_dir").get<std::string>());
            ckpt::write_json_file(out_path(cfg, "resolved_config.json"), cfg);
            log_debug("resolved config: " + cfg.dump());
            return s.run(cfg);
        } catch (const NumericalError &e) {
            std::cerr << "numerical failure: " << e.what() << "\n";
            return 3;
        } catch (const std::invalid_argument &e) {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        } catch (const json::exception &e) {
            std::cerr << "config error: " << e.what() << "\n";
            return 2;
        } catch (const std::exception &e) {
            std::cerr << "unexpected failure: " << e.what() << "\n";
            return 1;
        }
    }
    return 2;
}
