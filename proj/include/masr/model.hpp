#pragma once

#include "masr/activity.hpp"
#include "masr/ad.hpp"
#include "masr/common.hpp"
#include "masr/optim.hpp"
#include "masr/rng.hpp"
#include "masr/synth.hpp"
#include "masr/transcript.hpp"
#include "masr/ts_rope.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

// Speaker-time aware encoder plus autoregressive structured decoder. The
// encoder rotates every attention head by time-and-speaker phases; the decoder
// emits <spk><t_start>words<t_end> runs closed by <EOS>, and a total parser
// turns arbitrary token sequences back into transcripts.

namespace masr::model {

using ad::Mat;

// ── vocabulary ──────────────────────────────────────────────────────────────

struct TokenVocabulary {
    int content = 64;        // content token ids live in [0, content)
    double time_step = 0.1;  // quantization bin in seconds
    double max_time = 30.0;

    int time_tag_count() const {
        return static_cast<int>(std::llround(max_time / time_step)) + 1;
    }
    int speaker_base() const { return content; }
    int time_base() const { return content + sd::kMaxSpeakers; }
    int sot() const { return time_base() + time_tag_count(); }
    int eos() const { return sot() + 1; }
    int size() const { return eos() + 1; }

    bool is_content(int id) const { return id >= 0 && id < content; }
    bool is_speaker(int id) const { return id >= speaker_base() && id < time_base(); }
    bool is_time(int id) const { return id >= time_base() && id < sot(); }

    int speaker_token(int s) const {
        check_arg(s >= 1 && s <= sd::kMaxSpeakers, "speaker id out of range 1..4");
        return speaker_base() + s - 1;
    }
    int speaker_of(int id) const {
        check_arg(is_speaker(id), "not a speaker tag");
        return id - speaker_base() + 1;
    }
    int time_token(double t) const {
        check_arg(std::isfinite(t), "time must be finite");
        const long bin = std::llround(t / time_step);
        check_arg(bin >= 0 && bin < time_tag_count(), "time out of vocabulary range");
        return time_base() + static_cast<int>(bin);
    }
    double time_of(int id) const {
        check_arg(is_time(id), "not a time tag");
        return static_cast<double>(id - time_base()) * time_step;
    }
};

// ── serialization ───────────────────────────────────────────────────────────

inline std::vector<int> serialize_transcript(const tr::StructuredTranscript &t,
                                             const TokenVocabulary &vocab) {
    tr::validate(t);
    std::vector<int> out;
    for (const tr::Segment &s : t.segments) {
        out.push_back(vocab.speaker_token(s.speaker));
        out.push_back(vocab.time_token(s.t_start));
        for (int w : s.words) {
            check_arg(vocab.is_content(w), "word id outside content vocabulary");
            out.push_back(w);
        }
        out.push_back(vocab.time_token(s.t_end));
    }
    out.push_back(vocab.eos());
    return out;
}

struct ParsedTokens {
    tr::StructuredTranscript transcript;
    int warnings = 0;
};

// Total best-effort inverse of serialize_transcript. A segment survives only
// as <spk><time>words<time>; anything else is skipped or dropped with one
// warning per discarded span.
inline ParsedTokens parse_structured_tokens(const std::vector<int> &tokens,
                                            const TokenVocabulary &vocab) {
    ParsedTokens out;
    size_t i = 0;
    bool in_skip_run = false;
    while (i < tokens.size()) {
        const int tk = tokens[i];
        if (tk == vocab.eos()) break;
        // a segment attempt needs <spk> immediately followed by <time>
        if (vocab.is_speaker(tk) && i + 1 < tokens.size() && vocab.is_time(tokens[i + 1])) {
            tr::Segment seg;
            seg.speaker = vocab.speaker_of(tk);
            seg.t_start = vocab.time_of(tokens[i + 1]);
            size_t j = i + 2;
            bool closed = false;
            while (j < tokens.size()) {
                const int wj = tokens[j];
                if (vocab.is_time(wj)) {
                    seg.t_end = vocab.time_of(wj);
                    closed = true;
                    ++j;
                    break;
                }
                if (!vocab.is_content(wj)) break; // speaker tag, SOT, or EOS ends the attempt
                seg.words.push_back(wj);
                ++j;
            }
            in_skip_run = false;
            if (!closed) {
                ++out.warnings; // dropped incomplete segment
                i = j;
                continue;
            }
            if (seg.t_end < seg.t_start) {
                seg.t_end = seg.t_start;
                ++out.warnings;
            }
            out.transcript.segments.push_back(std::move(seg));
            i = j;
            continue;
        }
        if (!in_skip_run) ++out.warnings; // one warning per contiguous skipped run
        in_skip_run = true;
        ++i;
    }
    tr::sort_segments(out.transcript);
    return out;
}

// ── configuration ───────────────────────────────────────────────────────────

enum class PosMode { TsRope, TimeOnlyRope, Absolute };

inline const char *pos_mode_name(PosMode m) {
    switch (m) {
    case PosMode::TsRope: return "ts_rope";
    case PosMode::TimeOnlyRope: return "time_only_rope";
    case PosMode::Absolute: return "absolute";
    }
    return "ts_rope";
}

inline PosMode pos_mode_from_name(const std::string &name) {
    if (name == "ts_rope") return PosMode::TsRope;
    if (name == "time_only_rope") return PosMode::TimeOnlyRope;
    if (name == "absolute") return PosMode::Absolute;
    throw std::invalid_argument("unknown positional mode: " + name);
}

struct AsrConfig {
    int enc_layers = 2;
    int dec_layers = 2;
    int heads = 2;
    int head_dim = 32; // per head; multiples of 16 for the rotary modes
    int ffn_dim = 128;
    int feature_dim = 32;
    int content_vocab = 64;
    double time_step = 0.1;
    double max_time = 30.0;
    int max_target_len = 160;
    PosMode mode = PosMode::TsRope;
    tsr::PositionConfig rope; // tau and the ablation switches

    int model_dim() const { return heads * head_dim; }
    TokenVocabulary vocab() const { return {content_vocab, time_step, max_time}; }

    void validate() const {
        check_arg(enc_layers >= 1 && dec_layers >= 1, "need at least one layer per stack");
        check_arg(heads >= 1 && ffn_dim >= 1 && feature_dim >= 1, "dims must be positive");
        check_arg(content_vocab >= 1, "content vocabulary must be nonempty");
        check_arg(max_target_len >= 2, "max_target_len must be >= 2");
        check_arg(time_step > 0.0 && max_time > 0.0, "time grid must be positive");
        if (mode == PosMode::Absolute)
            check_arg(head_dim >= 2 && head_dim % 2 == 0, "head_dim must be even");
        else
            check_arg(head_dim >= 16 && head_dim % 16 == 0,
                      "head_dim must be a positive multiple of 16 for rotary modes");
    }
};

// classic additive sinusoidal table
inline Mat sinusoidal_positions(int frames, int dim) {
    check_arg(frames >= 1 && dim >= 2 && dim % 2 == 0, "need frames >= 1 and even dim");
    Mat pe(frames, dim);
    for (int t = 0; t < frames; ++t)
        for (int i = 0; i < dim / 2; ++i) {
            const double w = std::pow(10000.0, -2.0 * i / dim);
            pe(t, 2 * i) = std::sin(t * w);
            pe(t, 2 * i + 1) = std::cos(t * w);
        }
    return pe;
}

// time-only ablation: wipe the speaker pairs, keep the time pairs
inline Mat zero_speaker_angles(Mat angles, const tsr::TsRopeLayout &layout) {
    for (Eigen::Index p = 0; p < angles.cols(); ++p)
        if (layout.pair_region[static_cast<size_t>(p)] != tsr::Region::Time)
            angles.col(p).setZero();
    return angles;
}

// ── model ───────────────────────────────────────────────────────────────────

struct AsrModel {
    AsrConfig cfg;
    std::map<std::string, Mat> params;

    static AsrModel init(const AsrConfig &cfg, std::uint64_t seed) {
        cfg.validate();
        AsrModel m;
        m.cfg = cfg;
        const int M = cfg.model_dim();
        const int V = cfg.vocab().size();
        rngutil::Rng rng(rngutil::mix_seed(seed, 0xa5a));
        auto dense = [&](int rows, int cols) {
            return (rng.normal_mat(rows, cols) / std::sqrt(static_cast<double>(rows))).eval();
        };
        auto attention_block = [&](const std::string &p) {
            for (int h = 0; h < cfg.heads; ++h) {
                const std::string hp = p + "h" + std::to_string(h) + ".";
                m.params[hp + "Wq"] = dense(M, cfg.head_dim);
                m.params[hp + "Wk"] = dense(M, cfg.head_dim);
                m.params[hp + "Wv"] = dense(M, cfg.head_dim);
            }
            m.params[p + "Wo"] = dense(M, M);
        };
        auto norm_block = [&](const std::string &p) {
            m.params[p + "gamma"] = Mat::Ones(1, M);
            m.params[p + "beta"] = Mat::Zero(1, M);
        };
        auto ffn_block = [&](const std::string &p) {
            m.params[p + "W1"] = dense(M, cfg.ffn_dim);
            m.params[p + "b1"] = Mat::Zero(1, cfg.ffn_dim);
            m.params[p + "W2"] = dense(cfg.ffn_dim, M);
            m.params[p + "b2"] = Mat::Zero(1, M);
        };

        m.params["in.W"] = dense(cfg.feature_dim, M);
        m.params["in.b"] = Mat::Zero(1, M);
        for (int l = 0; l < cfg.enc_layers; ++l) {
            const std::string p = "enc.l" + std::to_string(l) + ".";
            norm_block(p + "ln1.");
            attention_block(p + "attn.");
            norm_block(p + "ln2.");
            ffn_block(p + "ffn.");
        }
        norm_block("enc.out.");

        m.params["dec.embed"] = dense(V, M);
        m.params["dec.pos"] = 0.1 * dense(cfg.max_target_len, M);
        for (int l = 0; l < cfg.dec_layers; ++l) {
            const std::string p = "dec.l" + std::to_string(l) + ".";
            norm_block(p + "ln1.");
            attention_block(p + "self.");
            norm_block(p + "ln2.");
            attention_block(p + "cross.");
            norm_block(p + "ln3.");
            ffn_block(p + "ffn.");
        }
        norm_block("dec.out.");
        m.params["out.W"] = dense(M, V);
        m.params["out.b"] = Mat::Zero(1, V);
        return m;
    }

    std::map<std::string, int> param_nodes(ad::Tape &tape, bool trainable) const {
        std::map<std::string, int> ids;
        for (const auto &[name, value] : params)
            ids[name] = trainable ? tape.leaf(value) : tape.constant(value);
        return ids;
    }

    // multi-head attention block shared by all three uses; rotary angle
    // matrices are optional, and kv defaults to self-attention on q_input
    int attention(ad::Tape &tape, const std::map<std::string, int> &ids, const std::string &p,
                  int q_input, int kv_input, const Mat *angles_q, const Mat *angles_k,
                  const Mat *mask, std::vector<int> *attn_probe) const {
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
        std::vector<int> head_out;
        for (int h = 0; h < cfg.heads; ++h) {
            const std::string hp = p + "h" + std::to_string(h) + ".";
            int q = tape.matmul(q_input, ids.at(hp + "Wq"));
            int k = tape.matmul(kv_input, ids.at(hp + "Wk"));
            const int v = tape.matmul(kv_input, ids.at(hp + "Wv"));
            if (angles_q) q = tape.rotate_pairs(q, *angles_q);
            if (angles_k) k = tape.rotate_pairs(k, *angles_k);
            int logits = tape.scale(tape.matmul_bt(q, k), inv_sqrt_d);
            if (mask) logits = tape.add(logits, tape.constant(*mask));
            const int attn = tape.softmax_rows(logits);
            if (attn_probe) attn_probe->push_back(attn);
            head_out.push_back(tape.matmul(attn, v));
        }
        const int cat = cfg.heads == 1 ? head_out[0] : tape.concat_cols(head_out);
        return tape.matmul(cat, ids.at(p + "Wo"));
    }

    int ffn(ad::Tape &tape, const std::map<std::string, int> &ids, const std::string &p,
            int x) const {
        const int a = tape.relu(tape.add_row(tape.matmul(x, ids.at(p + "W1")), ids.at(p + "b1")));
        return tape.add_row(tape.matmul(a, ids.at(p + "W2")), ids.at(p + "b2"));
    }

    int layer_norm(ad::Tape &tape, const std::map<std::string, int> &ids, const std::string &p,
                   int x) const {
        return tape.layer_norm_rows(x, ids.at(p + "gamma"), ids.at(p + "beta"));
    }

    int build_encoder(ad::Tape &tape, const std::map<std::string, int> &ids, const Mat &frames,
                      const sd::ActivityMatrix &activity,
                      std::vector<int> *attn_probe = nullptr) const {
        const int T = static_cast<int>(frames.rows());
        check_arg(T >= 1, "encoder needs at least one frame");
        check_arg(static_cast<int>(frames.cols()) == cfg.feature_dim,
                  "frame feature dim does not match the model");

        sd::ActivityMatrix act = activity;
        if (act.frames() != T) {
            const double rate =
                act.frame_rate * static_cast<double>(T) / static_cast<double>(act.frames());
            act = sd::make_activity(sd::resample_activity(act, T, rate), rate);
        }

        Mat angles_q, angles_k;
        bool use_rope = cfg.mode != PosMode::Absolute;
        if (use_rope) {
            const tsr::TsRopeLayout layout = tsr::build_layout(cfg.head_dim);
            const auto positions = tsr::build_positions(act, cfg.rope);
            angles_q = tsr::angle_matrix(positions, layout, tsr::Role::Query);
            angles_k = tsr::angle_matrix(positions, layout, tsr::Role::Key);
            if (cfg.mode == PosMode::TimeOnlyRope) {
                angles_q = zero_speaker_angles(std::move(angles_q), layout);
                angles_k = zero_speaker_angles(std::move(angles_k), layout);
            }
        }

        // every mode gets the additive input positions; the rotary modes add
        // attention-level rotations on top, the absolute mode stops here
        int x = tape.add_row(tape.matmul(tape.constant(frames), ids.at("in.W")), ids.at("in.b"));
        x = tape.add(x, tape.constant(sinusoidal_positions(T, cfg.model_dim())));
        for (int l = 0; l < cfg.enc_layers; ++l) {
            const std::string p = "enc.l" + std::to_string(l) + ".";
            const int h = layer_norm(tape, ids, p + "ln1.", x);
            x = tape.add(x, attention(tape, ids, p + "attn.", h, h,
                                      use_rope ? &angles_q : nullptr,
                                      use_rope ? &angles_k : nullptr, nullptr, attn_probe));
            const int h2 = layer_norm(tape, ids, p + "ln2.", x);
            x = tape.add(x, ffn(tape, ids, p + "ffn.", h2));
        }
        return layer_norm(tape, ids, "enc.out.", x);
    }

    int build_decoder_logits(ad::Tape &tape, const std::map<std::string, int> &ids, int encoded,
                             const std::vector<int> &inputs,
                             std::vector<int> *attn_probe = nullptr) const {
        const int S = static_cast<int>(inputs.size());
        check_arg(S >= 1, "decoder needs at least one input token");
        check_arg(S <= cfg.max_target_len, "decoder input longer than max_target_len");
        const int V = cfg.vocab().size();
        for (int tkn : inputs) check_arg(tkn >= 0 && tkn < V, "token id outside vocabulary");

        std::vector<int> steps(static_cast<size_t>(S));
        std::iota(steps.begin(), steps.end(), 0);
        int x = tape.add(tape.gather_rows(ids.at("dec.embed"), inputs),
                         tape.gather_rows(ids.at("dec.pos"), steps));

        Mat mask = Mat::Zero(S, S);
        for (int i = 0; i < S; ++i)
            for (int j = i + 1; j < S; ++j) mask(i, j) = -1e30;

        for (int l = 0; l < cfg.dec_layers; ++l) {
            const std::string p = "dec.l" + std::to_string(l) + ".";
            const int h = layer_norm(tape, ids, p + "ln1.", x);
            x = tape.add(x, attention(tape, ids, p + "self.", h, h, nullptr, nullptr, &mask,
                                      attn_probe));
            const int h2 = layer_norm(tape, ids, p + "ln2.", x);
            x = tape.add(x, attention(tape, ids, p + "cross.", h2, encoded, nullptr, nullptr,
                                      nullptr, attn_probe));
            const int h3 = layer_norm(tape, ids, p + "ln3.", x);
            x = tape.add(x, ffn(tape, ids, p + "ffn.", h3));
        }
        x = layer_norm(tape, ids, "dec.out.", x);
        return tape.add_row(tape.matmul(x, ids.at("out.W")), ids.at("out.b"));
    }

    // teacher-forced next-token loss for one dialogue
    int build_loss(ad::Tape &tape, const std::map<std::string, int> &ids, const Mat &frames,
                   const sd::ActivityMatrix &activity, const std::vector<int> &target) const {
        check_arg(!target.empty(), "empty target sequence");
        check_arg(static_cast<int>(target.size()) <= cfg.max_target_len,
                  "target longer than max_target_len");
        std::vector<int> inputs;
        inputs.reserve(target.size());
        inputs.push_back(cfg.vocab().sot());
        inputs.insert(inputs.end(), target.begin(), target.end() - 1);
        const int enc = build_encoder(tape, ids, frames, activity);
        const int logits = build_decoder_logits(tape, ids, enc, inputs);
        return tape.cross_entropy_rows(logits, target);
    }

    Mat encode(const Mat &frames, const sd::ActivityMatrix &activity,
               std::vector<Mat> *attention_out = nullptr) const {
        ad::Tape tape;
        const auto ids = param_nodes(tape, false);
        std::vector<int> probe;
        const int enc =
            build_encoder(tape, ids, frames, activity, attention_out ? &probe : nullptr);
        if (attention_out)
            for (int id : probe) attention_out->push_back(tape.val(id));
        return tape.val(enc);
    }

    struct Generated {
        tr::StructuredTranscript transcript;
        std::vector<int> tokens;
        int warnings = 0;
    };

    Generated generate(const Mat &frames, const sd::ActivityMatrix &activity,
                       int max_tokens) const {
        check_arg(max_tokens >= 0, "max_tokens must be >= 0");
        const TokenVocabulary vocab = cfg.vocab();
        Generated out;
        const Mat encoded = encode(frames, activity);
        std::vector<int> inputs{vocab.sot()};
        while (static_cast<int>(out.tokens.size()) < max_tokens) {
            ad::Tape tape;
            const auto ids = param_nodes(tape, false);
            const int enc = tape.constant(encoded);
            const int logits = build_decoder_logits(tape, ids, enc, inputs);
            const Mat &row = tape.val(logits);
            int best = 0;
            for (int v = 1; v < vocab.size(); ++v)
                if (row(row.rows() - 1, v) > row(row.rows() - 1, best)) best = v;
            out.tokens.push_back(best);
            if (best == vocab.eos()) break;
            if (static_cast<int>(inputs.size()) == cfg.max_target_len) break;
            inputs.push_back(best);
        }
        ParsedTokens parsed = parse_structured_tokens(out.tokens, vocab);
        out.transcript = std::move(parsed.transcript);
        out.warnings = parsed.warnings;
        return out;
    }
};

inline Mat encoder_forward(const AsrModel &model, const Mat &frames,
                           const sd::ActivityMatrix &activity) {
    return model.encode(frames, activity);
}

// ── training ────────────────────────────────────────────────────────────────

// finite-difference audit of the full loss path on a miniature instance
inline double asr_gradient_check(PosMode mode, std::uint64_t seed) {
    AsrConfig cfg;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.heads = 1;
    cfg.head_dim = 16;
    cfg.ffn_dim = 16;
    cfg.feature_dim = 4;
    cfg.content_vocab = 8;
    cfg.max_time = 1.0;
    cfg.max_target_len = 16;
    cfg.mode = mode;

    AsrModel m = AsrModel::init(cfg, seed);
    rngutil::Rng rng(rngutil::mix_seed(seed, 0x9c));
    const int T = 4;
    const Mat frames = rng.normal_mat(T, cfg.feature_dim);
    Mat pi = Mat::Zero(T, sd::kMaxSpeakers);
    for (int t = 0; t < T; ++t)
        for (int s = 0; s < sd::kMaxSpeakers; ++s)
            pi(t, s) = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.3, 1.0);
    const sd::ActivityMatrix act = sd::make_activity(pi, 50.0);

    tr::StructuredTranscript target;
    target.dialogue_id = "g";
    target.segments.push_back({1, 0.0, {1, 2}, 0.4});
    target.segments.push_back({2, 0.3, {5}, 0.8});
    const std::vector<int> tokens = serialize_transcript(target, cfg.vocab());

    const auto loss_at = [&]() {
        ad::Tape tape;
        const auto ids = m.param_nodes(tape, false);
        return tape.val(m.build_loss(tape, ids, frames, act, tokens))(0, 0);
    };

    ad::Tape tape;
    const auto ids = m.param_nodes(tape, true);
    const int loss = m.build_loss(tape, ids, frames, act, tokens);
    tape.backward(loss);

    double worst = 0.0;
    for (auto &[name, value] : m.params) {
        const int id = ids.at(name);
        if (!tape.has_grad(id)) continue;
        const Mat grad = tape.grad(id);
        for (int probe = 0; probe < 2; ++probe) {
            const auto r = static_cast<Eigen::Index>(
                rng.uniform_int(0, static_cast<std::int64_t>(value.rows()) - 1));
            const auto c = static_cast<Eigen::Index>(
                rng.uniform_int(0, static_cast<std::int64_t>(value.cols()) - 1));
            const double h = 1e-5;
            const double saved = value(r, c);
            value(r, c) = saved + h;
            const double up = loss_at();
            value(r, c) = saved - h;
            const double down = loss_at();
            value(r, c) = saved;
            const double fd = (up - down) / (2.0 * h);
            const double ad_g = grad(r, c);
            const double rel =
                std::abs(ad_g - fd) / std::max({std::abs(ad_g), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

struct AsrExample {
    Mat frames;
    sd::ActivityMatrix activity;
    std::vector<int> target;
    int distinct_speakers = 0;
};

inline AsrExample make_example(const synth::SyntheticDialogue &d, const TokenVocabulary &vocab) {
    AsrExample ex{d.frames, d.activity_truth, serialize_transcript(d.transcript, vocab), 0};
    std::array<bool, 4> seen{};
    for (const auto &s : d.transcript.segments) seen[static_cast<size_t>(s.speaker - 1)] = true;
    for (bool b : seen) ex.distinct_speakers += b ? 1 : 0;
    return ex;
}

struct AsrFitConfig {
    AsrConfig model;
    int stage1_steps = 200; // single-speaker dialogues only
    int stage2_steps = 800; // full mixture
    bool stage2_only = false;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::uint64_t seed = 1;
    bool startup_grad_check = true;
    double grad_check_tol = 1e-3;
};

struct AsrFitResult {
    AsrModel model;
    std::vector<double> loss_history;
    double grad_check_rel = 0.0;
    int stage1_steps_run = 0;
    int stage2_steps_run = 0;
};

inline double token_accuracy(const AsrModel &model, const std::vector<AsrExample> &examples) {
    long correct = 0, total = 0;
    for (const AsrExample &ex : examples) {
        ad::Tape tape;
        const auto ids = model.param_nodes(tape, false);
        std::vector<int> inputs{model.cfg.vocab().sot()};
        inputs.insert(inputs.end(), ex.target.begin(), ex.target.end() - 1);
        const int enc = model.build_encoder(tape, ids, ex.frames, ex.activity);
        const Mat logits = tape.val(model.build_decoder_logits(tape, ids, enc, inputs));
        for (Eigen::Index t = 0; t < logits.rows(); ++t) {
            Eigen::Index best = 0;
            logits.row(t).maxCoeff(&best);
            correct += best == ex.target[static_cast<size_t>(t)] ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

inline AsrFitResult train_asr(const std::vector<synth::SyntheticDialogue> &data,
                              const AsrFitConfig &cfg) {
    check_arg(!data.empty(), "train_asr: empty dataset");
    cfg.model.validate();

    AsrFitResult out;
    out.model = AsrModel::init(cfg.model, cfg.seed);
    if (cfg.startup_grad_check) {
        out.grad_check_rel = asr_gradient_check(cfg.model.mode, cfg.seed);
        if (out.grad_check_rel > cfg.grad_check_tol)
            throw NumericalError("train_asr: startup gradient check failed, rel error " +
                                 std::to_string(out.grad_check_rel));
    }

    const TokenVocabulary vocab = cfg.model.vocab();
    std::vector<AsrExample> examples;
    examples.reserve(data.size());
    for (const auto &d : data) examples.push_back(make_example(d, vocab));

    std::vector<size_t> single;
    for (size_t i = 0; i < examples.size(); ++i)
        if (examples[i].distinct_speakers <= 1) single.push_back(i);

    optim::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    optim::AdamW opt(adam);
    rngutil::Rng rng(rngutil::mix_seed(cfg.seed, 0x7a0));

    const auto run_stage = [&](const std::vector<size_t> &pool, int steps, int &counter,
                               const char *stage) {
        if (pool.empty() || steps <= 0) return;
        for (int step = 0; step < steps; ++step) {
            const size_t pick = pool[static_cast<size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
            const AsrExample &ex = examples[pick];
            ad::Tape tape;
            const auto ids = out.model.param_nodes(tape, true);
            const int loss = out.model.build_loss(tape, ids, ex.frames, ex.activity, ex.target);
            const double loss_value = tape.val(loss)(0, 0);
            if (!std::isfinite(loss_value))
                throw NumericalError(std::string("train_asr: non-finite loss in ") + stage +
                                     " at step " + std::to_string(step));
            out.loss_history.push_back(loss_value);
            tape.backward(loss);
            for (auto &[name, value] : out.model.params) {
                const int id = ids.at(name);
                const Mat grad = tape.has_grad(id)
                                     ? tape.grad(id)
                                     : Mat::Zero(value.rows(), value.cols());
                opt.step(name, value, grad);
            }
            ++counter;
        }
    };

    std::vector<size_t> all(examples.size());
    std::iota(all.begin(), all.end(), 0);
    if (!cfg.stage2_only)
        run_stage(single, cfg.stage1_steps, out.stage1_steps_run, "stage 1");
    run_stage(all, cfg.stage2_steps, out.stage2_steps_run, "stage 2");
    return out;
}

} // namespace masr::model
