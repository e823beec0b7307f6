#pragma once

#include "masr/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

// Structured transcripts (who said which tokens when) plus the two on-disk
// formats: RTTM segment lists and one-dialogue-per-line JSONL.

namespace masr::tr {

struct Segment {
    int speaker = 1; // 1..4
    double t_start = 0.0;
    std::vector<int> words; // content-token ids
    double t_end = 0.0;
};

struct StructuredTranscript {
    std::string dialogue_id;
    std::vector<Segment> segments;
};

struct RttmSegment {
    std::string file_id;
    double onset = 0.0;
    double duration = 0.0;
    std::string speaker;
};

inline void validate(const StructuredTranscript &t) {
    for (size_t i = 0; i < t.segments.size(); ++i) {
        const Segment &s = t.segments[i];
        check_arg(s.speaker >= 1 && s.speaker <= 4, "segment speaker must be in 1..4");
        check_arg(s.t_start <= s.t_end, "segment must have t_start <= t_end");
        check_arg(s.t_start >= 0.0, "segment times must be nonnegative");
        if (i > 0) {
            const Segment &p = t.segments[i - 1];
            check_arg(p.t_start < s.t_start ||
                          (p.t_start == s.t_start && p.speaker <= s.speaker),
                      "segments must be sorted by start time, ties by speaker");
        }
    }
}

// chronological order, ties broken by lower speaker id
inline void sort_segments(StructuredTranscript &t) {
    std::stable_sort(t.segments.begin(), t.segments.end(), [](const Segment &a, const Segment &b) {
        if (a.t_start != b.t_start) return a.t_start < b.t_start;
        return a.speaker < b.speaker;
    });
}

inline std::string speaker_label(int speaker) { return "spk" + std::to_string(speaker); }

inline std::vector<RttmSegment> rttm_from_transcript(const StructuredTranscript &t) {
    std::vector<RttmSegment> out;
    out.reserve(t.segments.size());
    for (const Segment &s : t.segments)
        out.push_back({t.dialogue_id, s.t_start, s.t_end - s.t_start, speaker_label(s.speaker)});
    return out;
}

// ── RTTM ────────────────────────────────────────────────────────────────────

inline void write_rttm(const std::vector<RttmSegment> &segments, std::ostream &os) {
    char line[256];
    for (const RttmSegment &s : segments) {
        check_arg(s.onset >= 0.0 && s.duration >= 0.0, "rttm segments need onset, duration >= 0");
        std::snprintf(line, sizeof line, "SPEAKER %s 1 %.3f %.3f <NA> <NA> %s <NA> <NA>\n",
                      s.file_id.c_str(), s.onset, s.duration, s.speaker.c_str());
        os << line;
    }
}

inline void write_rttm(const std::vector<RttmSegment> &segments, const std::string &path) {
    std::ofstream os(path);
    check_arg(os.good(), "write_rttm: cannot open output path");
    write_rttm(segments, os);
}

inline std::vector<RttmSegment> read_rttm(std::istream &is) {
    std::vector<RttmSegment> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::istringstream ss(line);
        std::vector<std::string> fields;
        std::string tok;
        while (ss >> tok) fields.push_back(tok);
        if (fields.empty()) continue;
        if (fields[0][0] == ';' || fields[0][0] == '#') continue; // comment line
        if (fields.size() != 10 || fields[0] != "SPEAKER")
            throw ParseError("rttm line must have 10 fields starting with SPEAKER", lineno);
        try {
            RttmSegment seg;
            seg.file_id = fields[1];
            seg.onset = std::stod(fields[3]);
            seg.duration = std::stod(fields[4]);
            seg.speaker = fields[7];
            if (seg.onset < 0.0 || seg.duration < 0.0)
                throw ParseError("rttm onset/duration must be nonnegative", lineno);
            out.push_back(std::move(seg));
        } catch (const std::invalid_argument &) {
            throw ParseError("rttm onset/duration not numeric", lineno);
        } catch (const std::out_of_range &) {
            throw ParseError("rttm numeric field out of range", lineno);
        }
    }
    return out;
}

inline std::vector<RttmSegment> read_rttm(const std::string &path) {
    std::ifstream is(path);
    check_arg(is.good(), "read_rttm: cannot open input path");
    return read_rttm(is);
}

// ── transcript JSONL ────────────────────────────────────────────────────────

inline nlohmann::json transcript_to_json(const StructuredTranscript &t) {
    nlohmann::json segs = nlohmann::json::array();
    for (const Segment &s : t.segments)
        segs.push_back({{"speaker", s.speaker},
                        {"start", s.t_start},
                        {"end", s.t_end},
                        {"words", s.words}});
    return {{"dialogue_id", t.dialogue_id}, {"segments", segs}};
}

inline StructuredTranscript transcript_from_json(const nlohmann::json &j, int lineno = 0) {
    try {
        StructuredTranscript t;
        t.dialogue_id = j.at("dialogue_id").get<std::string>();
        for (const auto &s : j.at("segments")) {
            Segment seg;
            seg.speaker = s.at("speaker").get<int>();
            seg.t_start = s.at("start").get<double>();
            seg.t_end = s.at("end").get<double>();
            seg.words = s.at("words").get<std::vector<int>>();
            t.segments.push_back(std::move(seg));
        }
        return t;
    } catch (const nlohmann::json::exception &e) {
        throw ParseError(std::string("transcript json: ") + e.what(), lineno);
    }
}

inline void write_transcript_jsonl(const std::vector<StructuredTranscript> &ts, std::ostream &os) {
    for (const StructuredTranscript &t : ts) os << transcript_to_json(t).dump() << "\n";
}

inline void write_transcript_jsonl(const std::vector<StructuredTranscript> &ts,
                                   const std::string &path) {
    std::ofstream os(path);
    check_arg(os.good(), "write_transcript_jsonl: cannot open output path");
    write_transcript_jsonl(ts, os);
}

inline std::vector<StructuredTranscript> read_transcript_jsonl(std::istream &is) {
    std::vector<StructuredTranscript> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError("transcript jsonl: invalid json", lineno);
        out.push_back(transcript_from_json(j, lineno));
    }
    return out;
}

inline std::vector<StructuredTranscript> read_transcript_jsonl(const std::string &path) {
    std::ifstream is(path);
    check_arg(is.good(), "read_transcript_jsonl: cannot open input path");
    return read_transcript_jsonl(is);
}

} // namespace masr::tr
