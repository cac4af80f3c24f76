#pragma once

// Feedback-instance extraction from time-aligned two-channel transcripts.
//
// A channel is silent over an interval iff no word token of that channel
// overlaps it. Candidates are the longest lexicon prefix of an inter-pausal
// unit (a run of same-channel words separated by gaps below the joining gap).

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace fbrank::corpus {

enum class Channel { A, B };

enum class FunctionLabel { C, A, S, U, D, Y, N, Ds, MS, SS };
inline constexpr std::size_t kNumFunctions = 10;
inline constexpr std::array<FunctionLabel, kNumFunctions> kAllFunctions = {
    FunctionLabel::C, FunctionLabel::A, FunctionLabel::S,  FunctionLabel::U,  FunctionLabel::D,
    FunctionLabel::Y, FunctionLabel::N, FunctionLabel::Ds, FunctionLabel::MS, FunctionLabel::SS};

enum class LabelSource { manual, automatic, lexicon };

std::string_view to_string(Channel ch);
std::string_view to_string(FunctionLabel label);
std::string_view to_string(LabelSource source);
Channel parse_channel(std::string_view text);
FunctionLabel parse_function(std::string_view text);
LabelSource parse_label_source(std::string_view text);

struct WordToken {
    std::string conversation_id;
    Channel channel = Channel::A;
    double start_s = 0.0;
    double end_s = 0.0;
    std::string text;
    std::string speaker_id;                 // defaults to "<conv>:<ch>"
    std::optional<bool> crosstalk_free;     // corpus annotation, when available
};

struct FeedbackInstance {
    std::string id;
    std::string conversation_id;
    Channel channel = Channel::A;
    std::string speaker_id;
    std::string interlocutor_id;
    double start_s = 0.0;
    double end_s = 0.0;
    std::vector<std::string> tokens;
    std::optional<FunctionLabel> function_label;
    LabelSource label_source = LabelSource::lexicon;

    [[nodiscard]] double duration() const { return end_s - start_s; }
};

struct ContextWindow {
    std::string instance_id;
    double ctx_start_s = 0.0;
    double ctx_end_s = 0.0;
    std::string transcript_text;
    bool short_context = false;
};

inline constexpr double kContextSeconds = 4.0;

struct ExtractionConfig {
    double min_duration_s = 0.2;
    double pre_silence_s = 4.0;
    double post_silence_s = 1.0;  // 0 disables the trailing-silence rule
    double join_gap_s = 0.2;      // max gap between words of one multi-word candidate
};

// Lowercase hyphen-joined token sequences, e.g. "uh-huh", "oh-really".
class Lexicon {
public:
    Lexicon() = default;
    explicit Lexicon(std::vector<std::string> entries);

    static Lexicon from_file(const std::string& path);
    static Lexicon defaults();

    [[nodiscard]] bool contains(std::string_view key) const { return entries_.count(std::string(key)) > 0; }
    [[nodiscard]] bool empty() const { return entries_.empty(); }
    [[nodiscard]] std::size_t max_words() const { return max_words_; }
    [[nodiscard]] const std::set<std::string>& entries() const { return entries_; }
    // Content hash of the sorted entry set.
    [[nodiscard]] std::string version() const;

private:
    std::set<std::string> entries_;
    std::size_t max_words_ = 0;
};

// Lowercases and strips punctuation other than hyphens and apostrophes.
std::string normalize_word(std::string_view text);

struct ExtractionResult {
    std::vector<FeedbackInstance> instances;
    std::vector<std::string> diagnostics;  // one per rejected conversation
};

ExtractionResult extract_feedback_instances(std::vector<WordToken> tokens, const Lexicon& lexicon,
                                            const ExtractionConfig& config);

// `tokens` may hold the whole corpus; only the instance's conversation is used.
ContextWindow build_context(const FeedbackInstance& instance, const std::vector<WordToken>& tokens);

enum class Split { train, valid, test };
std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct ManifestEntry {
    FeedbackInstance instance;
    Split split = Split::train;
    std::optional<ContextWindow> context;
};

struct DatasetManifest {
    std::string corpus_name;
    std::string lexicon_version;
    std::string config_hash;
    std::optional<std::uint64_t> seed;
    std::vector<ManifestEntry> entries;

    [[nodiscard]] std::vector<const ManifestEntry*> in_split(Split split) const;
};

struct SplitRatios {
    double train = 0.8;
    double valid = 0.1;
    double test = 0.1;
};

// Whole conversations, and every conversation sharing a speaker with them,
// go to a single split.
DatasetManifest split_dataset(const std::vector<FeedbackInstance>& instances, const SplitRatios& ratios,
                              std::uint64_t seed);

// Attaches manual/automatic labels from (conv, ch, start) records.
struct LabelRecord {
    std::string conversation_id;
    Channel channel = Channel::A;
    double start_s = 0.0;
    FunctionLabel label = FunctionLabel::C;
    LabelSource source = LabelSource::manual;
};
std::size_t apply_labels(std::vector<FeedbackInstance>& instances, const std::vector<LabelRecord>& labels,
                         double tolerance_s = 0.01);

// JSON-Lines I/O.
WordToken parse_word_token(const nlohmann::json& j);
nlohmann::json to_json(const WordToken& token);
std::vector<WordToken> read_transcripts(const std::string& path);
std::vector<LabelRecord> read_labels(const std::string& path);

nlohmann::json to_json(const FeedbackInstance& instance);
FeedbackInstance instance_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ContextWindow& window);

std::string serialize_instances(const std::vector<FeedbackInstance>& instances,
                                const std::vector<ContextWindow>& contexts);
std::vector<std::pair<FeedbackInstance, std::optional<ContextWindow>>> read_instances(const std::string& path);

std::string serialize_manifest(const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

}  // namespace fbrank::corpus
