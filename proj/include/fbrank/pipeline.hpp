#pragma once

// Config-driven orchestration of the stages
//   extract -> split -> train -> export -> rank -> probe -> curate
// Every artifact is written under output_dir and stamped with the config hash
// and master seed. Stage outputs:
//   extract  instances.jsonl
//   split    manifest.jsonl
//   train    model.fbck, history.csv (+ search.json when a search space is set)
//   export   embeddings/<split>/ and embeddings/pooled/<split>/
//   rank     ranking.csv
//   probe    probe.csv, probe_pooled.csv
//   curate   trials.json, model_answers.json

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fbrank/corpus.hpp"
#include "fbrank/probe.hpp"
#include "fbrank/rank.hpp"
#include "fbrank/search.hpp"
#include "fbrank/train.hpp"

namespace fbrank::pipeline {

enum class Stage { extract, split, train, export_embeddings, rank, probe, curate };
inline constexpr std::array<Stage, 7> kAllStages = {Stage::extract, Stage::split, Stage::train,
                                                    Stage::export_embeddings, Stage::rank, Stage::probe,
                                                    Stage::curate};
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view text);
// "all" or a comma list, returned in dependency order.
std::vector<Stage> parse_stages(std::string_view text);

struct PipelineConfig {
    std::string corpus_name = "corpus";
    std::vector<std::string> transcripts;
    std::string lexicon;  // empty = built-in default list
    std::string labels;   // optional
    corpus::ExtractionConfig extraction;
    corpus::SplitRatios ratios;

    std::string feature_index;

    train::TrainConfig train;
    std::optional<nlohmann::json> search;  // search space document; overrides `train` when present

    std::vector<int> ks = {1, 10, 25, 50};
    std::size_t rank_batch_size = 100;
    std::vector<corpus::Split> rank_splits = {corpus::Split::test};

    std::vector<probe::ProbeInput> probe_inputs = {probe::ProbeInput::feedback, probe::ProbeInput::context,
                                                  probe::ProbeInput::concatenated};
    double probe_C = 1.0;
    int probe_folds = 10;
    std::vector<corpus::Split> probe_splits = {corpus::Split::test};

    int per_function = 24;
    std::vector<corpus::Split> curate_splits = {corpus::Split::test};

    std::uint64_t seed = 0;

    // Not part of the hash.
    std::string output_dir = "out";
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string static_dir;
    std::string media_index;
    std::string state_dir;
    unsigned threads = 1;

    void validate(bool check_paths = true) const;
    // Normalised document with defaults filled in; paths as resolved.
    [[nodiscard]] nlohmann::json to_json() const;
    // Relative paths are resolved against `base_dir`.
    static PipelineConfig from_json(const nlohmann::json& j, const std::string& base_dir = ".");
    static PipelineConfig load(const std::string& path);

    // Hash of the normalised document without output_dir, service settings,
    // threads and any key starting with "_".
    [[nodiscard]] std::string hash() const;
};

// "# fbrank config=<hash> seed=<seed>"
std::string stamp_line(const PipelineConfig& config);

struct StageReport {
    Stage stage;
    std::vector<std::string> artifacts;  // relative to output_dir
};

std::vector<StageReport> run_pipeline(const PipelineConfig& config, const std::vector<Stage>& stages);

// Ranking CSV: one row per evaluated split plus the random
// baseline row.
struct RankingRow {
    std::string name;
    std::size_t contexts = 0;
    std::size_t batch_size = 0;
    std::vector<double> accuracy;  // aligned with ks
};
std::string ranking_csv(const std::vector<RankingRow>& rows, const std::vector<int>& ks, const std::string& stamp);

}  // namespace fbrank::pipeline
