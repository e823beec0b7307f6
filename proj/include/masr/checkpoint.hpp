#pragma once

#include "masr/common.hpp"
#include "masr/hyper_sd.hpp"
#include "masr/model.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <string>
#include <utility>

// JSON checkpoints. One document per model:
//   {format_version, kind, config, ..., params: {name: {shape: [r, c], data: [...]}}}
// Doubles are written with shortest round-trip formatting, so save followed by
// load reproduces every parameter bit for bit.

namespace masr::ckpt {

using json = nlohmann::json;
using ad::Mat;

inline constexpr int kFormatVersion = 1;

// ── matrices ────────────────────────────────────────────────────────────────

inline json mat_to_json(const Mat &m) {
    check_arg(m.allFinite(), "checkpoint: refusing to save non-finite values");
    json data = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    return {{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
}

inline Mat mat_from_json(const json &j) {
    const auto &shape = j.at("shape");
    check_arg(shape.is_array() && shape.size() == 2, "checkpoint: shape must be [rows, cols]");
    const auto rows = shape[0].get<Eigen::Index>();
    const auto cols = shape[1].get<Eigen::Index>();
    const auto &data = j.at("data");
    check_arg(rows >= 0 && cols >= 0 &&
                  data.size() == static_cast<size_t>(rows) * static_cast<size_t>(cols),
              "checkpoint: data length does not match shape");
    Mat m(rows, cols);
    size_t k = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
    return m;
}

inline json params_to_json(const std::map<std::string, Mat> &params) {
    json out = json::object();
    for (const auto &[name, value] : params) out[name] = mat_to_json(value);
    return out;
}

inline std::map<std::string, Mat> params_from_json(const json &j) {
    std::map<std::string, Mat> out;
    for (const auto &[name, value] : j.items()) out[name] = mat_from_json(value);
    return out;
}

// loaded params must carry exactly the names and shapes the config implies
inline void adopt_params(std::map<std::string, Mat> &dst, std::map<std::string, Mat> loaded,
                         const char *kind) {
    const std::string prefix = std::string("checkpoint(") + kind + "): ";
    for (auto &[name, value] : dst) {
        const auto it = loaded.find(name);
        if (it == loaded.end())
            throw std::invalid_argument(prefix + "missing parameter " + name);
        if (it->second.rows() != value.rows() || it->second.cols() != value.cols())
            throw std::invalid_argument(prefix + "shape mismatch for " + name);
        value = std::move(it->second);
        loaded.erase(it);
    }
    if (!loaded.empty())
        throw std::invalid_argument(prefix + "unexpected parameter " + loaded.begin()->first);
}

inline void check_header(const json &j, const char *kind) {
    check_arg(j.at("format_version").get<int>() == kFormatVersion,
              "checkpoint: unsupported format_version");
    if (j.at("kind").get<std::string>() != kind)
        throw std::invalid_argument(std::string("checkpoint: expected kind '") + kind +
                                    "', found '" + j.at("kind").get<std::string>() + "'");
}

// ── speaker-activity model ──────────────────────────────────────────────────

inline json config_to_json(const sd::HyperSdConfig &cfg) {
    return {{"feature_dim", cfg.feature_dim},
            {"hidden", cfg.hidden},
            {"ffn_dim", cfg.ffn_dim},
            {"encoder_layers", cfg.encoder_layers},
            {"hyper_dim", cfg.hyper_dim},
            {"clip_radius", cfg.clip_radius},
            {"clip_eps", cfg.clip_eps},
            {"margin", cfg.margin},
            {"curvature", cfg.curvature},
            {"proto_init_range", cfg.proto_init_range}};
}

inline sd::HyperSdConfig hyper_sd_config_from_json(const json &j) {
    sd::HyperSdConfig cfg;
    cfg.feature_dim = j.at("feature_dim").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.encoder_layers = j.at("encoder_layers").get<int>();
    cfg.hyper_dim = j.at("hyper_dim").get<int>();
    cfg.clip_radius = j.at("clip_radius").get<double>();
    cfg.clip_eps = j.at("clip_eps").get<double>();
    cfg.margin = j.at("margin").get<double>();
    cfg.curvature = j.at("curvature").get<double>();
    cfg.proto_init_range = j.at("proto_init_range").get<double>();
    cfg.validate();
    return cfg;
}

inline json save_hyper_sd(const sd::HyperSd &m) {
    return {{"format_version", kFormatVersion},
            {"kind", "hyper_sd"},
            {"config", config_to_json(m.cfg)},
            {"layer_count", m.layer_count},
            {"params", params_to_json(m.params)}};
}

inline sd::HyperSd load_hyper_sd(const json &j) {
    check_header(j, "hyper_sd");
    const sd::HyperSdConfig cfg = hyper_sd_config_from_json(j.at("config"));
    const int layers = j.at("layer_count").get<int>();
    check_arg(layers >= 1, "checkpoint: layer_count must be >= 1");
    sd::HyperSd m = sd::HyperSd::init(cfg, layers, 0);
    adopt_params(m.params, params_from_json(j.at("params")), "hyper_sd");
    return m;
}

// ── structured transcription model ──────────────────────────────────────────

inline json config_to_json(const model::AsrConfig &cfg) {
    return {{"enc_layers", cfg.enc_layers},
            {"dec_layers", cfg.dec_layers},
            {"heads", cfg.heads},
            {"head_dim", cfg.head_dim},
            {"ffn_dim", cfg.ffn_dim},
            {"feature_dim", cfg.feature_dim},
            {"content_vocab", cfg.content_vocab},
            {"time_step", cfg.time_step},
            {"max_time", cfg.max_time},
            {"max_target_len", cfg.max_target_len},
            {"mode", model::pos_mode_name(cfg.mode)},
            {"rope",
             {{"tau", cfg.rope.tau},
              {"use_turn_counts", cfg.rope.use_turn_counts},
              {"use_activity", cfg.rope.use_activity},
              {"use_query_bias", cfg.rope.use_query_bias}}}};
}

inline model::AsrConfig asr_config_from_json(const json &j) {
    model::AsrConfig cfg;
    cfg.enc_layers = j.at("enc_layers").get<int>();
    cfg.dec_layers = j.at("dec_layers").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.head_dim = j.at("head_dim").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.feature_dim = j.at("feature_dim").get<int>();
    cfg.content_vocab = j.at("content_vocab").get<int>();
    cfg.time_step = j.at("time_step").get<double>();
    cfg.max_time = j.at("max_time").get<double>();
    cfg.max_target_len = j.at("max_target_len").get<int>();
    cfg.mode = model::pos_mode_from_name(j.at("mode").get<std::string>());
    const json &r = j.at("rope");
    cfg.rope.tau = r.at("tau").get<double>();
    cfg.rope.use_turn_counts = r.at("use_turn_counts").get<bool>();
    cfg.rope.use_activity = r.at("use_activity").get<bool>();
    cfg.rope.use_query_bias = r.at("use_query_bias").get<bool>();
    cfg.validate();
    return cfg;
}

inline json save_asr(const model::AsrModel &m) {
    return {{"format_version", kFormatVersion},
            {"kind", "asr"},
            {"config", config_to_json(m.cfg)},
            {"params", params_to_json(m.params)}};
}

inline model::AsrModel load_asr(const json &j) {
    check_header(j, "asr");
    const model::AsrConfig cfg = asr_config_from_json(j.at("config"));
    model::AsrModel m = model::AsrModel::init(cfg, 0);
    adopt_params(m.params, params_from_json(j.at("params")), "asr");
    return m;
}

// ── files ───────────────────────────────────────────────────────────────────

inline void write_json_file(const std::string &path, const json &j) {
    std::ofstream out(path);
    if (!out.good()) throw std::invalid_argument("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out.good()) throw std::invalid_argument("write failed: " + path);
}

inline json read_json_file(const std::string &path) {
    std::ifstream in(path);
    if (!in.good()) throw std::invalid_argument("cannot open: " + path);
    return json::parse(in);
}

} // namespace masr::ckpt
