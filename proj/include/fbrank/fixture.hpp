#pragma once

// Synthetic end-to-end fixture: two-channel transcripts with lexicon feedback
// after long same-channel silences, function labels, FBF1 features in which
// context and feedback share a latent code (function prototype plus an
// instance-specific part), an optional media index, and a pipeline config
// wired to all of it.

#include <cstdint>
#include <string>

namespace fbrank::fixture {

struct FixtureOptions {
    int conversations = 40;
    int blocks = 15;            // talk turns per conversation, one feedback each
    std::uint32_t layers = 3;
    std::uint32_t frames = 4;
    std::uint32_t audio_dim = 16;
    std::uint32_t text_dim = 12;
    bool text = true;           // also write text features (a few transcripts are "missing")
    bool media = false;         // media index + one shared silent clip
    double labelled_fraction = 0.9;
    std::uint64_t seed = 0;
};

struct FixtureSummary {
    std::string config_path;  // pipeline.json
    std::size_t tokens = 0;
    std::size_t instances = 0;
    std::size_t labelled = 0;
};

// Writes into `dir` (created if needed):
//   transcripts.jsonl, lexicon.txt, labels.jsonl,
//   features/index.json + features/all/*.fbf, [media/index.json, media/silence.wav],
//   pipeline.json (output_dir "out").
FixtureSummary write_fixture(const std::string& dir, const FixtureOptions& options);

}  // namespace fbrank::fixture
