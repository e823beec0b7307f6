#include "masr/rng.hpp"
#include "masr/synth.hpp"
#include "masr/ts_rope.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace masr;

namespace {

tr::StructuredTranscript random_transcript(rngutil::Rng &rng, const std::string &id) {
    tr::StructuredTranscript t;
    t.dialogue_id = id;
    const int n = rng.uniform_int(0, 6);
    for (int i = 0; i < n; ++i) {
        tr::Segment s;
        s.speaker = rng.uniform_int(1, 4);
        s.t_start = std::round(rng.uniform(0.0, 18.0) * 100.0) / 100.0;
        s.t_end = s.t_start + std::round(rng.uniform(0.5, 3.0) * 100.0) / 100.0;
        const int words = rng.uniform_int(1, 6);
        for (int w = 0; w < words; ++w) s.words.push_back(rng.uniform_int(0, 63));
        t.segments.push_back(std::move(s));
    }
    tr::sort_segments(t);
    return t;
}

} // namespace

TEST_CASE("same seed gives bit-identical dialogues") {
    synth::DialogueConfig cfg;
    cfg.seed = 42;
    auto a = synth::generate_dialogue(cfg, "d");
    auto b = synth::generate_dialogue(cfg, "d");
    REQUIRE(a.frames == b.frames);
    REQUIRE(a.activity_truth.pi == b.activity_truth.pi);
    REQUIRE(a.achieved_overlap == b.achieved_overlap);
    REQUIRE(a.transcript.segments.size() == b.transcript.segments.size());
    for (size_t i = 0; i < a.transcript.segments.size(); ++i) {
        REQUIRE(a.transcript.segments[i].t_start == b.transcript.segments[i].t_start);
        REQUIRE(a.transcript.segments[i].words == b.transcript.segments[i].words);
    }
    for (int l = 0; l < 3; ++l)
        REQUIRE(a.layer_stack.features[static_cast<size_t>(l)] ==
                b.layer_stack.features[static_cast<size_t>(l)]);

    cfg.seed = 43;
    auto c = synth::generate_dialogue(cfg, "d");
    REQUIRE(a.frames != c.frames);
}

TEST_CASE("activity reconstructed from the transcript matches the stored truth") {
    rngutil::Rng seeds(300);
    for (int trial = 0; trial < 10; ++trial) {
        synth::DialogueConfig cfg;
        cfg.num_speakers = 1 + trial % 4;
        cfg.seed = seeds.uniform_int(1, 1 << 30);
        auto d = synth::generate_dialogue(cfg, "d");
        auto rebuilt = synth::activity_from_transcript(d.transcript, d.activity_truth.frames(),
                                                       cfg.frame_rate);
        REQUIRE(rebuilt.pi == d.activity_truth.pi);
    }
}

TEST_CASE("activity is zero outside all segments and one inside") {
    tr::StructuredTranscript t;
    t.dialogue_id = "hand";
    t.segments.push_back({2, 0.5, {1}, 1.0});
    auto act = synth::activity_from_transcript(t, 100, 50.0); // 20 ms frames
    for (int f = 0; f < 100; ++f) {
        const double center = (f + 0.5) / 50.0;
        const bool inside = center >= 0.5 && center < 1.0;
        REQUIRE(act.pi(f, 1) == (inside ? 1.0 : 0.0));
        REQUIRE(act.pi(f, 0) == 0.0);
    }
}

TEST_CASE("achieved overlap lands within 0.1 of the target") {
    rngutil::Rng seeds(301);
    for (double target : {0.0, 0.2, 0.3, 0.5}) {
        for (int rep = 0; rep < 4; ++rep) {
            synth::DialogueConfig cfg;
            cfg.num_speakers = 2 + rep % 3;
            cfg.overlap_target = target;
            cfg.duration = 20.0;
            cfg.seed = seeds.uniform_int(1, 1 << 30);
            auto d = synth::generate_dialogue(cfg, "d");
            REQUIRE(d.overlap_feasible);
            INFO("target " << target << " achieved " << d.achieved_overlap);
            REQUIRE(std::abs(d.achieved_overlap - target) <= 0.1);
        }
    }
}

TEST_CASE("one speaker cannot overlap; the dialogue reports infeasibility") {
    synth::DialogueConfig cfg;
    cfg.num_speakers = 1;
    cfg.overlap_target = 0.3;
    cfg.seed = 5;
    auto d = synth::generate_dialogue(cfg, "d");
    REQUIRE_FALSE(d.overlap_feasible);
    REQUIRE(d.achieved_overlap == 0.0);
    for (int f = 0; f < d.activity_truth.frames(); ++f)
        REQUIRE(d.activity_truth.pi.row(f).sum() <= 1.0);
}

TEST_CASE("full-overlap mode gives every speaker one full-span turn") {
    synth::DialogueConfig cfg;
    cfg.num_speakers = 2;
    cfg.overlap_target = 1.0;
    cfg.duration = 5.0;
    cfg.seed = 9;
    auto d = synth::generate_dialogue(cfg, "d");
    REQUIRE(d.transcript.segments.size() == 2);
    REQUIRE(d.achieved_overlap == 1.0);
    for (const auto &seg : d.transcript.segments) {
        REQUIRE(seg.t_start == 0.0);
        REQUIRE(seg.t_end == 5.0);
    }
    auto turns = tsr::cumulative_turns(tsr::binarize_activity(d.activity_truth, 0.5));
    for (int s = 0; s < 2; ++s) REQUIRE(turns.C(d.activity_truth.frames() - 1, s) == 1);
}

TEST_CASE("default 20 s two-speaker dialogues give each speaker several turns") {
    rngutil::Rng seeds(302);
    for (int rep = 0; rep < 5; ++rep) {
        synth::DialogueConfig cfg;
        cfg.seed = seeds.uniform_int(1, 1 << 30);
        auto d = synth::generate_dialogue(cfg, "d");
        int per_speaker[4] = {0, 0, 0, 0};
        for (const auto &seg : d.transcript.segments) ++per_speaker[seg.speaker - 1];
        REQUIRE(per_speaker[0] >= 3);
        REQUIRE(per_speaker[1] >= 3);
    }
}

TEST_CASE("segment boundaries sit on the 10 ms grid and words are nonempty") {
    synth::DialogueConfig cfg;
    cfg.seed = 77;
    auto d = synth::generate_dialogue(cfg, "d");
    REQUIRE(!d.transcript.segments.empty());
    for (const auto &seg : d.transcript.segments) {
        REQUIRE(std::abs(seg.t_start * 100.0 - std::round(seg.t_start * 100.0)) < 1e-9);
        REQUIRE(std::abs(seg.t_end * 100.0 - std::round(seg.t_end * 100.0)) < 1e-9);
        REQUIRE(!seg.words.empty());
        for (int w : seg.words) REQUIRE((w >= 0 && w < cfg.vocab_size));
    }
}

TEST_CASE("speaker signatures are linearly independent") {
    for (int dim : {8, 32}) {
        synth::DialogueConfig cfg;
        cfg.feature_dim = dim;
        Eigen::MatrixXd sigs(4, dim);
        for (int s = 1; s <= 4; ++s)
            sigs.row(s - 1) = synth::speaker_signature(cfg, s).transpose();
        Eigen::FullPivLU<Eigen::MatrixXd> lu(sigs);
        REQUIRE(lu.rank() == 4);
    }
}

TEST_CASE("layer stack has three same-shape views with a smoothed middle layer") {
    synth::DialogueConfig cfg;
    cfg.seed = 11;
    auto d = synth::generate_dialogue(cfg, "d");
    REQUIRE(d.layer_stack.layer_count() == 3);
    REQUIRE(d.layer_stack.frames() == d.frames.rows());
    REQUIRE(d.layer_stack.features[0] == d.frames);
    REQUIRE(d.layer_stack.features[1] != d.frames);
    REQUIRE(d.layer_stack.features[2] != d.frames);

    // smoothing shrinks frame-to-frame jumps
    double raw = 0.0, smooth = 0.0;
    for (int t = 1; t < d.frames.rows(); ++t) {
        raw += (d.frames.row(t) - d.frames.row(t - 1)).norm();
        smooth += (d.layer_stack.features[1].row(t) - d.layer_stack.features[1].row(t - 1)).norm();
    }
    REQUIRE(smooth < raw);
}

TEST_CASE("corpus generation is deterministic with distinct per-dialogue content") {
    synth::DialogueConfig base;
    auto a = synth::generate_corpus(base, 3, 99, "train");
    auto b = synth::generate_corpus(base, 3, 99, "train");
    REQUIRE(a.size() == 3);
    for (int i = 0; i < 3; ++i) {
        REQUIRE(a[static_cast<size_t>(i)].frames == b[static_cast<size_t>(i)].frames);
        REQUIRE(a[static_cast<size_t>(i)].transcript.dialogue_id ==
                b[static_cast<size_t>(i)].transcript.dialogue_id);
    }
    REQUIRE(a[0].transcript.dialogue_id == "train_0000");
    REQUIRE(a[0].frames != a[1].frames);
}

// ── RTTM ────────────────────────────────────────────────────────────────────

TEST_CASE("rttm writes the exact line format and round-trips") {
    std::vector<tr::RttmSegment> segs{{"f", 0.0, 2.5, "spk1"}, {"f", 2.25, 1.75, "spk2"}};
    std::ostringstream os;
    tr::write_rttm(segs, os);
    REQUIRE(os.str() == "SPEAKER f 1 0.000 2.500 <NA> <NA> spk1 <NA> <NA>\n"
                        "SPEAKER f 1 2.250 1.750 <NA> <NA> spk2 <NA> <NA>\n");

    std::istringstream is(os.str());
    auto back = tr::read_rttm(is);
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].file_id == "f");
    REQUIRE(back[0].onset == 0.0);
    REQUIRE(back[0].duration == 2.5);
    REQUIRE(back[0].speaker == "spk1");
    REQUIRE(back[1].onset == 2.25);
}

TEST_CASE("rttm parser tolerates whitespace and comments, rejects malformed lines") {
    std::istringstream ok("; a comment\n"
                          "# another\n"
                          "\n"
                          "SPEAKER   f  1   0.500\t2.000 <NA> <NA> spk3 <NA> <NA>\n");
    auto segs = tr::read_rttm(ok);
    REQUIRE(segs.size() == 1);
    REQUIRE(segs[0].onset == 0.5);
    REQUIRE(segs[0].speaker == "spk3");

    std::istringstream missing("SPEAKER f 1 0.5 2.0 <NA> <NA> spk1 <NA>\n");
    REQUIRE_THROWS_AS(tr::read_rttm(missing), ParseError);

    std::istringstream bad_num("SPEAKER f 1 zero 2.0 <NA> <NA> spk1 <NA> <NA>\n");
    try {
        tr::read_rttm(bad_num);
        FAIL("expected ParseError");
    } catch (const ParseError &e) {
        REQUIRE(e.line == 1);
    }

    std::istringstream empty("");
    REQUIRE(tr::read_rttm(empty).empty());
}

TEST_CASE("generated rttm agrees with the transcript") {
    synth::DialogueConfig cfg;
    cfg.seed = 13;
    auto d = synth::generate_dialogue(cfg, "dlg7");
    REQUIRE(d.rttm.size() == d.transcript.segments.size());
    for (size_t i = 0; i < d.rttm.size(); ++i) {
        REQUIRE(d.rttm[i].file_id == "dlg7");
        REQUIRE(d.rttm[i].onset == d.transcript.segments[i].t_start);
        REQUIRE_THAT(d.rttm[i].duration,
                     Catch::Matchers::WithinAbs(
                         d.transcript.segments[i].t_end - d.transcript.segments[i].t_start, 1e-12));
        REQUIRE(d.rttm[i].speaker == tr::speaker_label(d.transcript.segments[i].speaker));
    }
}

// ── transcript JSONL ────────────────────────────────────────────────────────

TEST_CASE("transcript jsonl round-trips 100 random transcripts") {
    rngutil::Rng rng(303);
    std::vector<tr::StructuredTranscript> ts;
    for (int i = 0; i < 100; ++i) ts.push_back(random_transcript(rng, "d" + std::to_string(i)));

    std::ostringstream os;
    tr::write_transcript_jsonl(ts, os);
    std::istringstream is(os.str());
    auto back = tr::read_transcript_jsonl(is);
    REQUIRE(back.size() == ts.size());
    for (size_t i = 0; i < ts.size(); ++i) {
        REQUIRE(back[i].dialogue_id == ts[i].dialogue_id);
        REQUIRE(back[i].segments.size() == ts[i].segments.size());
        for (size_t s = 0; s < ts[i].segments.size(); ++s) {
            REQUIRE(back[i].segments[s].speaker == ts[i].segments[s].speaker);
            REQUIRE(back[i].segments[s].t_start == ts[i].segments[s].t_start);
            REQUIRE(back[i].segments[s].t_end == ts[i].segments[s].t_end);
            REQUIRE(back[i].segments[s].words == ts[i].segments[s].words);
        }
    }
}

TEST_CASE("transcript jsonl ignores unknown keys and reports bad lines") {
    std::istringstream extra(
        R"({"dialogue_id":"x","segments":[{"speaker":1,"start":0.0,"end":1.0,"words":[3],"lang":"en"}],"version":2})"
        "\n");
    auto ts = tr::read_transcript_jsonl(extra);
    REQUIRE(ts.size() == 1);
    REQUIRE(ts[0].segments[0].words == std::vector<int>{3});

    std::istringstream bad("{\"dialogue_id\":\"x\",\"segments\":[]}\nnot json\n");
    try {
        tr::read_transcript_jsonl(bad);
        FAIL("expected ParseError");
    } catch (const ParseError &e) {
        REQUIRE(e.line == 2);
    }

    std::istringstream wrong_shape(R"({"dialogue_id":"x","segments":[{"speaker":1}]})"
                                   "\n");
    REQUIRE_THROWS_AS(tr::read_transcript_jsonl(wrong_shape), ParseError);
}

TEST_CASE("empty transcript serializes and parses") {
    tr::StructuredTranscript t;
    t.dialogue_id = "empty";
    std::ostringstream os;
    tr::write_transcript_jsonl({t}, os);
    std::istringstream is(os.str());
    auto back = tr::read_transcript_jsonl(is);
    REQUIRE(back.size() == 1);
    REQUIRE(back[0].segments.empty());
}
