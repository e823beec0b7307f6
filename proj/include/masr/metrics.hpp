#pragma once

#include "masr/common.hpp"
#include "masr/transcript.hpp"

#include <Eigen/Dense>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

// Multi-speaker evaluation: word error rates with speaker attribution (optimal
// stream permutation), speaker-independent variants (optimal utterance
// assignment), their time-constrained forms, and frame-based DER with collar.
// Small instances stay exactly solvable so brute-force oracles can audit every
// solver.

namespace masr::metrics {

using Tokens = std::vector<int>;

struct TimedWord {
    int token = 0;
    double start = 0.0;
    double end = 0.0;
};
using TimedTokens = std::vector<TimedWord>;

struct WerBreakdown {
    long substitutions = 0;
    long insertions = 0;
    long deletions = 0;
    long ref_words = 0;
    double rate = 0.0;
    bool empty_reference = false;

    long errors() const { return substitutions + insertions + deletions; }
};

inline WerBreakdown finish_breakdown(long sub, long ins, long del, long ref_words) {
    WerBreakdown b;
    b.substitutions = sub;
    b.insertions = ins;
    b.deletions = del;
    b.ref_words = ref_words;
    b.empty_reference = ref_words == 0;
    b.rate = static_cast<double>(b.errors()) / static_cast<double>(std::max<long>(1, ref_words));
    return b;
}

// ── edit distance ───────────────────────────────────────────────────────────

inline int token_of(int t) { return t; }
inline int token_of(const TimedWord &w) { return w.token; }

// Levenshtein with unit costs; Allow(i, j) gates match/substitute pairs.
// Backtrace tie-break: substitution, then insertion, then deletion.
template <class Word, class Allow>
WerBreakdown edit_counts(const std::vector<Word> &ref, const std::vector<Word> &hyp,
                         Allow &&allow) {
    const size_t R = ref.size(), H = hyp.size();
    const int big = static_cast<int>(R + H + 1);
    std::vector<std::vector<int>> dp(R + 1, std::vector<int>(H + 1, 0));
    for (size_t i = 0; i <= R; ++i) dp[i][0] = static_cast<int>(i);
    for (size_t j = 0; j <= H; ++j) dp[0][j] = static_cast<int>(j);
    for (size_t i = 1; i <= R; ++i) {
        for (size_t j = 1; j <= H; ++j) {
            const int diag = allow(i - 1, j - 1)
                                 ? dp[i - 1][j - 1] +
                                       (token_of(ref[i - 1]) == token_of(hyp[j - 1]) ? 0 : 1)
                                 : big;
            dp[i][j] = std::min({diag, dp[i][j - 1] + 1, dp[i - 1][j] + 1});
        }
    }
    long sub = 0, ins = 0, del = 0;
    size_t i = R, j = H;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && allow(i - 1, j - 1)) {
            const int step = token_of(ref[i - 1]) == token_of(hyp[j - 1]) ? 0 : 1;
            if (dp[i][j] == dp[i - 1][j - 1] + step) {
                sub += step;
                --i;
                --j;
                continue;
            }
        }
        if (j > 0 && dp[i][j] == dp[i][j - 1] + 1) {
            ++ins;
            --j;
            continue;
        }
        ++del;
        --i;
    }
    return finish_breakdown(sub, ins, del, static_cast<long>(R));
}

inline WerBreakdown word_error(const Tokens &ref, const Tokens &hyp) {
    return edit_counts(ref, hyp, [](size_t, size_t) { return true; });
}

// words may align only when their collar-expanded intervals overlap
inline WerBreakdown timed_word_error(const TimedTokens &ref, const TimedTokens &hyp,
                                     double collar) {
    check_arg(collar >= 0.0, "collar must be >= 0");
    for (const TimedWord &w : ref)
        check_arg(std::isfinite(w.start) && std::isfinite(w.end) && w.end >= w.start,
                  "timed_word_error: ref word with missing or reversed timing");
    for (const TimedWord &w : hyp)
        check_arg(std::isfinite(w.start) && std::isfinite(w.end) && w.end >= w.start,
                  "timed_word_error: hyp word with missing or reversed timing");
    auto allow = [&](size_t i, size_t j) {
        const TimedWord &r = ref[i];
        const TimedWord &h = hyp[j];
        return r.start - collar <= h.end + collar && h.start - collar <= r.end + collar;
    };
    return edit_counts(ref, hyp, allow);
}

inline long edit_cost(const Tokens &ref, const Tokens &hyp) {
    return word_error(ref, hyp).errors();
}

// evenly divide a segment's span across its words
inline TimedTokens timed_words_from_segment(const tr::Segment &seg) {
    TimedTokens out;
    const auto n = static_cast<double>(seg.words.size());
    const double len = seg.t_end - seg.t_start;
    for (size_t w = 0; w < seg.words.size(); ++w) {
        const double lo = seg.t_start + len * (static_cast<double>(w) / n);
        const double hi = seg.t_start + len * (static_cast<double>(w + 1) / n);
        out.push_back({seg.words[w], lo, hi});
    }
    return out;
}

// ── assignment solver ───────────────────────────────────────────────────────

// exact min-cost perfect matching on a square cost matrix (potentials method);
// returns total cost and row -> column assignment
inline std::pair<double, std::vector<int>> min_cost_assignment(const Eigen::MatrixXd &cost) {
    check_arg(cost.rows() == cost.cols() && cost.rows() >= 1,
              "min_cost_assignment: square nonempty matrix required");
    const int n = static_cast<int>(cost.rows());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int i0 = p[static_cast<size_t>(j0)];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] -
                                   v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(static_cast<size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)] > 0) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += cost(i, row_to_col[static_cast<size_t>(i)]);
    return {total, row_to_col};
}

// ── concatenated minimum-permutation WER ────────────────────────────────────

inline constexpr int kCpExactCap = 8;

struct CpResult {
    WerBreakdown wer;
    std::vector<int> ref_to_hyp; // padded-stream mapping, ref index -> hyp index
};

namespace detail {

template <class Stream>
CpResult cp_like(const std::vector<Stream> &ref, const std::vector<Stream> &hyp, bool approx,
                 const std::function<WerBreakdown(const Stream &, const Stream &)> &score) {
    const size_t K = std::max<size_t>({ref.size(), hyp.size(), 1});
    if (K > kCpExactCap && !approx)
        throw UnsupportedSizeError(
            "stream count above the exact cap of 8; pass approx to allow it");
    std::vector<Stream> r = ref, h = hyp;
    r.resize(K);
    h.resize(K);
    Eigen::MatrixXd cost(K, K);
    std::vector<std::vector<WerBreakdown>> cells(K, std::vector<WerBreakdown>(K));
    for (size_t i = 0; i < K; ++i)
        for (size_t j = 0; j < K; ++j) {
            cells[i][j] = score(r[i], h[j]);
            cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                static_cast<double>(cells[i][j].errors());
        }
    auto [total, mapping] = min_cost_assignment(cost);
    (void)total;
    long sub = 0, ins = 0, del = 0, refw = 0;
    for (size_t i = 0; i < K; ++i) {
        const WerBreakdown &b = cells[i][static_cast<size_t>(mapping[i])];
        sub += b.substitutions;
        ins += b.insertions;
        del += b.deletions;
        refw += b.ref_words;
    }
    return {finish_breakdown(sub, ins, del, refw), mapping};
}

} // namespace detail

inline CpResult cp_wer(const std::vector<Tokens> &ref, const std::vector<Tokens> &hyp,
                       bool approx = false) {
    return detail::cp_like<Tokens>(ref, hyp, approx,
                                   [](const Tokens &r, const Tokens &h) { return word_error(r, h); });
}

inline CpResult tcp_wer(const std::vector<TimedTokens> &ref, const std::vector<TimedTokens> &hyp,
                        double collar, bool approx = false) {
    return detail::cp_like<TimedTokens>(
        ref, hyp, approx,
        [collar](const TimedTokens &r, const TimedTokens &h) {
            return timed_word_error(r, h, collar);
        });
}

// ── optimal reference combination WER ───────────────────────────────────────

inline constexpr int kOrcUttCap = 12;
inline constexpr int kOrcStreamCap = 4;

struct OrcResult {
    WerBreakdown wer;
    std::vector<int> utt_to_stream;
};

namespace detail {

// assign reference utterances (kept in temporal order) to hypothesis streams;
// exact search over submask splits with memoized per-(stream, mask) costs
template <class Stream>
OrcResult orc_like(const std::vector<Stream> &utts, const std::vector<Stream> &streams_in,
                   const std::function<WerBreakdown(const Stream &, const Stream &)> &score) {
    if (utts.size() > kOrcUttCap)
        throw UnsupportedSizeError("utterance count above the exact cap of 12");
    if (streams_in.size() > kOrcStreamCap)
        throw UnsupportedSizeError("stream count above the exact cap of 4");
    std::vector<Stream> streams = streams_in;
    if (streams.empty()) streams.emplace_back();
    const int U = static_cast<int>(utts.size());
    const int K = static_cast<int>(streams.size());
    const size_t masks = size_t{1} << U;

    auto concat_mask = [&](size_t mask) {
        Stream out;
        for (int u = 0; u < U; ++u)
            if (mask & (size_t{1} << u))
                out.insert(out.end(), utts[static_cast<size_t>(u)].begin(),
                           utts[static_cast<size_t>(u)].end());
        return out;
    };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> stream_cost(static_cast<size_t>(K),
                                                 std::vector<double>(masks, -1.0));
    auto cost_of = [&](int k, size_t mask) {
        double &slot = stream_cost[static_cast<size_t>(k)][mask];
        if (slot < 0.0)
            slot = static_cast<double>(
                score(concat_mask(mask), streams[static_cast<size_t>(k)]).errors());
        return slot;
    };

    // f[k][mask]: best cost covering `mask` with streams 0..k
    std::vector<std::vector<double>> f(static_cast<size_t>(K), std::vector<double>(masks, inf));
    std::vector<std::vector<size_t>> pick(static_cast<size_t>(K), std::vector<size_t>(masks, 0));
    for (size_t m = 0; m < masks; ++m) f[0][m] = cost_of(0, m), pick[0][m] = m;
    for (int k = 1; k < K; ++k) {
        for (size_t m = 0; m < masks; ++m) {
            size_t sub = m;
            while (true) { // iterate submasks of m, including 0 and m
                const double c = f[static_cast<size_t>(k - 1)][m ^ sub] + cost_of(k, sub);
                if (c < f[static_cast<size_t>(k)][m]) {
                    f[static_cast<size_t>(k)][m] = c;
                    pick[static_cast<size_t>(k)][m] = sub;
                }
                if (sub == 0) break;
                sub = (sub - 1) & m;
            }
        }
    }

    OrcResult out;
    out.utt_to_stream.assign(static_cast<size_t>(U), 0);
    size_t rest = masks - 1;
    std::vector<size_t> chosen(static_cast<size_t>(K), 0);
    for (int k = K - 1; k >= 0; --k) {
        const size_t sub = pick[static_cast<size_t>(k)][rest];
        chosen[static_cast<size_t>(k)] = sub;
        for (int u = 0; u < U; ++u)
            if (sub & (size_t{1} << u)) out.utt_to_stream[static_cast<size_t>(u)] = k;
        rest ^= sub;
    }

    long s = 0, i = 0, d = 0, refw = 0;
    for (int k = 0; k < K; ++k) {
        const WerBreakdown b =
            score(concat_mask(chosen[static_cast<size_t>(k)]), streams[static_cast<size_t>(k)]);
        s += b.substitutions;
        i += b.insertions;
        d += b.deletions;
        refw += b.ref_words;
    }
    out.wer = finish_breakdown(s, i, d, refw);
    return out;
}

} // namespace detail

inline OrcResult orc_wer(const std::vector<Tokens> &utterances,
                         const std::vector<Tokens> &streams) {
    return detail::orc_like<Tokens>(
        utterances, streams, [](const Tokens &r, const Tokens &h) { return word_error(r, h); });
}

inline OrcResult tcorc_wer(const std::vector<TimedTokens> &utterances,
                           const std::vector<TimedTokens> &streams, double collar) {
    return detail::orc_like<TimedTokens>(
        utterances, streams,
        [collar](const TimedTokens &r, const TimedTokens &h) {
            return timed_word_error(r, h, collar);
        });
}

// ── diarization error rate ──────────────────────────────────────────────────

struct DerBreakdown {
    double missed = 0.0;
    double false_alarm = 0.0;
    double confusion = 0.0;
    double scored_speech = 0.0; // total reference speaker time over scored frames
    double scored_span = 0.0;   // wall-clock time of scored frames
    double der = 0.0;
    bool empty_reference = false;
    bool infinite = false;
    std::vector<std::pair<std::string, std::string>> mapping; // ref label -> hyp label
};

inline DerBreakdown der(const std::vector<tr::RttmSegment> &ref,
                        const std::vector<tr::RttmSegment> &hyp, double collar) {
    check_arg(collar >= 0.0, "der: collar must be >= 0");
    const std::string file_id =
        ref.empty() ? (hyp.empty() ? "" : hyp[0].file_id) : ref[0].file_id;
    for (const auto &s : ref)
        check_arg(s.file_id == file_id, "der: segments must share one file id");
    for (const auto &s : hyp)
        check_arg(s.file_id == file_id, "der: segments must share one file id");

    constexpr double frame = 0.01;
    double span = 0.0;
    for (const auto &s : ref) span = std::max(span, s.onset + s.duration);
    for (const auto &s : hyp) span = std::max(span, s.onset + s.duration);
    const long frames = static_cast<long>(std::ceil(span / frame - 1e-9));

    auto label_index = [](std::vector<std::string> &labels, const std::string &name) {
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == name) return static_cast<int>(i);
        labels.push_back(name);
        return static_cast<int>(labels.size()) - 1;
    };
    std::vector<std::string> ref_labels, hyp_labels;
    std::vector<std::pair<int, std::pair<double, double>>> ref_iv, hyp_iv;
    for (const auto &s : ref)
        ref_iv.push_back({label_index(ref_labels, s.speaker), {s.onset, s.onset + s.duration}});
    for (const auto &s : hyp)
        hyp_iv.push_back({label_index(hyp_labels, s.speaker), {s.onset, s.onset + s.duration}});

    std::vector<double> boundaries;
    for (const auto &s : ref) {
        boundaries.push_back(s.onset);
        boundaries.push_back(s.onset + s.duration);
    }

    const size_t R = ref_labels.size(), H = hyp_labels.size();
    std::vector<std::vector<char>> ref_on(R), hyp_on(H);
    std::vector<char> scored(static_cast<size_t>(frames), 1);
    for (auto &v : ref_on) v.assign(static_cast<size_t>(frames), 0);
    for (auto &v : hyp_on) v.assign(static_cast<size_t>(frames), 0);

    for (long f = 0; f < frames; ++f) {
        const double center = (static_cast<double>(f) + 0.5) * frame;
        for (const auto &[idx, iv] : ref_iv)
            if (center >= iv.first && center < iv.second)
                ref_on[static_cast<size_t>(idx)][static_cast<size_t>(f)] = 1;
        for (const auto &[idx, iv] : hyp_iv)
            if (center >= iv.first && center < iv.second)
                hyp_on[static_cast<size_t>(idx)][static_cast<size_t>(f)] = 1;
        for (double b : boundaries)
            if (std::abs(center - b) < collar) {
                scored[static_cast<size_t>(f)] = 0;
                break;
            }
    }

    // optimal speaker mapping: maximize scored co-occurrence time
    const size_t K = std::max<size_t>({R, H, 1});
    Eigen::MatrixXd overlap = Eigen::MatrixXd::Zero(K, K);
    for (size_t r = 0; r < R; ++r)
        for (size_t h = 0; h < H; ++h) {
            long n = 0;
            for (long f = 0; f < frames; ++f)
                n += scored[static_cast<size_t>(f)] && ref_on[r][static_cast<size_t>(f)] &&
                     hyp_on[h][static_cast<size_t>(f)];
            overlap(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(h)) =
                -static_cast<double>(n);
        }
    auto [neg, mapping] = min_cost_assignment(overlap);
    (void)neg;
    std::vector<std::pair<std::string, std::string>> named_mapping;
    for (size_t r = 0; r < R; ++r)
        if (mapping[r] >= 0 && static_cast<size_t>(mapping[r]) < H)
            named_mapping.push_back({ref_labels[r], hyp_labels[static_cast<size_t>(mapping[r])]});

    long miss_f = 0, fa_f = 0, conf_f = 0, speech_f = 0, span_f = 0;
    for (long f = 0; f < frames; ++f) {
        if (!scored[static_cast<size_t>(f)]) continue;
        ++span_f;
        long nref = 0, nhyp = 0, ncorrect = 0;
        for (size_t r = 0; r < R; ++r) nref += ref_on[r][static_cast<size_t>(f)];
        for (size_t h = 0; h < H; ++h) nhyp += hyp_on[h][static_cast<size_t>(f)];
        for (size_t r = 0; r < R; ++r) {
            if (!ref_on[r][static_cast<size_t>(f)]) continue;
            const int h = mapping[r];
            if (h >= 0 && static_cast<size_t>(h) < H && hyp_on[static_cast<size_t>(h)][static_cast<size_t>(f)])
                ++ncorrect;
        }
        speech_f += nref;
        miss_f += std::max<long>(0, nref - nhyp);
        fa_f += std::max<long>(0, nhyp - nref);
        conf_f += std::min(nref, nhyp) - ncorrect;
    }

    DerBreakdown out;
    out.mapping = std::move(named_mapping);
    out.missed = static_cast<double>(miss_f) * frame;
    out.false_alarm = static_cast<double>(fa_f) * frame;
    out.confusion = static_cast<double>(conf_f) * frame;
    out.scored_speech = static_cast<double>(speech_f) * frame;
    out.scored_span = static_cast<double>(span_f) * frame;
    if (speech_f == 0) {
        out.empty_reference = true;
        if (fa_f == 0) {
            out.der = 0.0;
        } else {
            out.der = std::numeric_limits<double>::infinity();
            out.infinite = true;
        }
        return out;
    }
    out.der = static_cast<double>(miss_f + fa_f + conf_f) / static_cast<double>(speech_f);
    return out;
}

// ── corpus evaluation ───────────────────────────────────────────────────────

inline std::vector<Tokens> speaker_token_streams(const tr::StructuredTranscript &t) {
    std::array<Tokens, 4> by_spk;
    for (const tr::Segment &s : t.segments)
        by_spk[static_cast<size_t>(s.speaker - 1)].insert(
            by_spk[static_cast<size_t>(s.speaker - 1)].end(), s.words.begin(), s.words.end());
    std::vector<Tokens> out;
    for (auto &st : by_spk)
        if (!st.empty()) out.push_back(std::move(st));
    return out;
}

inline std::vector<TimedTokens> speaker_timed_streams(const tr::StructuredTranscript &t) {
    std::array<TimedTokens, 4> by_spk;
    for (const tr::Segment &s : t.segments) {
        TimedTokens w = timed_words_from_segment(s);
        by_spk[static_cast<size_t>(s.speaker - 1)].insert(
            by_spk[static_cast<size_t>(s.speaker - 1)].end(), w.begin(), w.end());
    }
    std::vector<TimedTokens> out;
    for (auto &st : by_spk)
        if (!st.empty()) out.push_back(std::move(st));
    return out;
}

inline std::vector<Tokens> utterance_tokens(const tr::StructuredTranscript &t) {
    std::vector<Tokens> out;
    for (const tr::Segment &s : t.segments) out.push_back(s.words);
    return out;
}

inline std::vector<TimedTokens> utterance_timed_tokens(const tr::StructuredTranscript &t) {
    std::vector<TimedTokens> out;
    for (const tr::Segment &s : t.segments) out.push_back(timed_words_from_segment(s));
    return out;
}

struct EvalConfig {
    double tcp_collar = 0.5;
    std::vector<double> der_collars = {0.0, 0.25};
    bool approx = false;
    bool oracle_check = false; // audit the solvers with brute force on small instances
};

namespace detail {

inline nlohmann::json wer_json(const WerBreakdown &b) {
    return {{"rate", b.rate},          {"substitutions", b.substitutions},
            {"insertions", b.insertions}, {"deletions", b.deletions},
            {"ref_words", b.ref_words},   {"empty_reference", b.empty_reference}};
}

inline nlohmann::json der_json(const DerBreakdown &d, double collar) {
    nlohmann::json j{{"collar", collar},
                     {"der", d.infinite ? -1.0 : d.der},
                     {"missed", d.missed},
                     {"false_alarm", d.false_alarm},
                     {"confusion", d.confusion},
                     {"scored_speech", d.scored_speech},
                     {"scored_span", d.scored_span},
                     {"infinite", d.infinite},
                     {"empty_reference", d.empty_reference}};
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto &[r, h] : d.mapping) pairs.push_back({{"ref", r}, {"hyp", h}});
    j["mapping"] = pairs;
    return j;
}

// factorial brute force over stream permutations
inline long cp_brute_force_cost(std::vector<Tokens> ref, std::vector<Tokens> hyp) {
    const size_t K = std::max<size_t>({ref.size(), hyp.size(), 1});
    ref.resize(K);
    hyp.resize(K);
    std::vector<int> perm(K);
    for (size_t i = 0; i < K; ++i) perm[i] = static_cast<int>(i);
    long best = std::numeric_limits<long>::max();
    do {
        long c = 0;
        for (size_t i = 0; i < K; ++i) c += edit_cost(ref[i], hyp[static_cast<size_t>(perm[i])]);
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

// exhaustive utterance-to-stream assignment
inline long orc_brute_force_cost(const std::vector<Tokens> &utts, std::vector<Tokens> streams) {
    if (streams.empty()) streams.emplace_back();
    const size_t U = utts.size(), K = streams.size();
    long best = std::numeric_limits<long>::max();
    std::vector<size_t> assign(U, 0);
    while (true) {
        std::vector<Tokens> concat(K);
        for (size_t u = 0; u < U; ++u)
            concat[assign[u]].insert(concat[assign[u]].end(), utts[u].begin(), utts[u].end());
        long c = 0;
        for (size_t k = 0; k < K; ++k) c += edit_cost(concat[k], streams[k]);
        best = std::min(best, c);
        size_t u = 0;
        while (u < U && ++assign[u] == K) assign[u++] = 0;
        if (u == U) break;
    }
    return best;
}

} // namespace detail

struct CorpusReport {
    nlohmann::json json;
    int oracle_mismatches = 0;
};

inline CorpusReport evaluate_corpus(const std::vector<tr::StructuredTranscript> &refs,
                                    const std::vector<tr::StructuredTranscript> &hyps,
                                    const EvalConfig &cfg = {}) {
    auto find = [](const std::vector<tr::StructuredTranscript> &ts, const std::string &id)
        -> const tr::StructuredTranscript * {
        for (const auto &t : ts)
            if (t.dialogue_id == id) return &t;
        return nullptr;
    };

    nlohmann::json files = nlohmann::json::array();
    nlohmann::json unmatched_ref = nlohmann::json::array(),
                   unmatched_hyp = nlohmann::json::array();
    long sub[4] = {0, 0, 0, 0}, ins[4] = {0, 0, 0, 0}, del[4] = {0, 0, 0, 0},
         refw[4] = {0, 0, 0, 0};
    std::vector<double> der_err(cfg.der_collars.size(), 0.0),
        der_speech(cfg.der_collars.size(), 0.0);
    int mismatches = 0;

    for (const auto &hyp : hyps)
        if (!find(refs, hyp.dialogue_id)) unmatched_hyp.push_back(hyp.dialogue_id);

    for (const auto &ref : refs) {
        const tr::StructuredTranscript *hyp = find(hyps, ref.dialogue_id);
        if (!hyp) {
            unmatched_ref.push_back(ref.dialogue_id);
            continue;
        }
        nlohmann::json file{{"id", ref.dialogue_id}};
        nlohmann::json errors = nlohmann::json::array();

        const auto run = [&](int slot, const char *name, auto &&fn) {
            try {
                const auto [b, mapping] = fn();
                sub[slot] += b.substitutions;
                ins[slot] += b.insertions;
                del[slot] += b.deletions;
                refw[slot] += b.ref_words;
                file[name] = detail::wer_json(b);
                file[name]["mapping"] = mapping;
            } catch (const UnsupportedSizeError &e) {
                errors.push_back(std::string(name) + ": " + e.what());
            }
        };
        run(0, "cp_wer", [&] {
            const CpResult r =
                cp_wer(speaker_token_streams(ref), speaker_token_streams(*hyp), cfg.approx);
            return std::make_pair(r.wer, r.ref_to_hyp);
        });
        run(1, "tcp_wer", [&] {
            const CpResult r = tcp_wer(speaker_timed_streams(ref), speaker_timed_streams(*hyp),
                                       cfg.tcp_collar, cfg.approx);
            return std::make_pair(r.wer, r.ref_to_hyp);
        });
        run(2, "orc_wer", [&] {
            const OrcResult r = orc_wer(utterance_tokens(ref), speaker_token_streams(*hyp));
            return std::make_pair(r.wer, r.utt_to_stream);
        });
        run(3, "tcorc_wer", [&] {
            const OrcResult r = tcorc_wer(utterance_timed_tokens(ref),
                                          speaker_timed_streams(*hyp), cfg.tcp_collar);
            return std::make_pair(r.wer, r.utt_to_stream);
        });

        if (cfg.oracle_check) {
            const auto rs = speaker_token_streams(ref), hs = speaker_token_streams(*hyp);
            if (std::max(rs.size(), hs.size()) <= 5) {
                const long brute = detail::cp_brute_force_cost(rs, hs);
                if (brute != cp_wer(rs, hs, cfg.approx).wer.errors()) ++mismatches;
            }
            const auto utts = utterance_tokens(ref);
            if (utts.size() <= 6 && hs.size() <= 3) {
                const long brute = detail::orc_brute_force_cost(utts, hs);
                if (brute != orc_wer(utts, hs).wer.errors()) ++mismatches;
            }
        }

        nlohmann::json ders = nlohmann::json::array();
        for (size_t c = 0; c < cfg.der_collars.size(); ++c) {
            const DerBreakdown d = der(tr::rttm_from_transcript(ref),
                                       tr::rttm_from_transcript(*hyp), cfg.der_collars[c]);
            if (!d.infinite) der_err[c] += d.missed + d.false_alarm + d.confusion;
            der_speech[c] += d.scored_speech;
            ders.push_back(detail::der_json(d, cfg.der_collars[c]));
        }
        file["der"] = ders;
        file["errors"] = errors;
        files.push_back(std::move(file));
    }

    nlohmann::json aggregate;
    const char *names[4] = {"cp_wer", "tcp_wer", "orc_wer", "tcorc_wer"};
    for (int m = 0; m < 4; ++m)
        aggregate[names[m]] =
            detail::wer_json(finish_breakdown(sub[m], ins[m], del[m], refw[m]));
    nlohmann::json agg_der = nlohmann::json::array();
    for (size_t c = 0; c < cfg.der_collars.size(); ++c)
        agg_der.push_back({{"collar", cfg.der_collars[c]},
                           {"der", der_speech[c] > 0.0 ? der_err[c] / der_speech[c] : 0.0},
                           {"scored_speech", der_speech[c]}});
    aggregate["der"] = agg_der;

    CorpusReport report;
    report.oracle_mismatches = mismatches;
    report.json = {{"files", files},
                   {"aggregate", aggregate},
                   {"unmatched_ref", unmatched_ref},
                   {"unmatched_hyp", unmatched_hyp},
                   {"oracle_mismatches", mismatches}};
    return report;
}

} // namespace masr::metrics
