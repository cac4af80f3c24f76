#pragma once

// Cosine ranking of candidate feedback responses, top-k% accuracy, and the
// four-candidate trial sets used for human comparison.
//
// Ties are broken pessimistically: the ground truth is placed after every
// candidate with an equal score, so constant embeddings rank last.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fbrank/corpus.hpp"

namespace fbrank::embeddings {
struct EmbeddingTable;
}

namespace fbrank::rank {

struct RankingResult {
    std::string context_id;
    std::vector<std::string> ordered;  // descending similarity; may be empty for batch evaluation
    std::size_t ground_truth_rank = 0;  // 1-based
    std::size_t batch_size = 0;
};

// `candidates` holds one embedding per row, aligned with `candidate_ids`.
RankingResult rank_candidates(std::string_view context_id, const Eigen::VectorXd& context,
                              const std::vector<std::string>& candidate_ids, const Eigen::MatrixXd& candidates,
                              std::string_view true_id);

inline constexpr std::array<int, 4> kStandardK = {1, 10, 25, 50};

struct MetricConfig {
    int k_percent = 25;
    std::size_t batch_size = 0;
    void validate() const;
};

// max(1, floor(k_percent / 100 * batch_size))
std::size_t topk_cutoff(int k_percent, std::size_t batch_size);

// Percentage of results whose ground truth falls within the cutoff computed
// from each result's own batch size.
double topk_percent_accuracy(const std::vector<RankingResult>& results, int k_percent);

// Ranks aligned context/feedback rows within batches: rows are shuffled with
// `seed`, cut into consecutive batches of `batch_size`, and each context is
// ranked against the feedback rows of its batch. A trailing remainder forms a
// smaller batch that is ranked as a whole.
std::vector<RankingResult> rank_in_batches(const std::vector<std::string>& ids, const Eigen::MatrixXd& contexts,
                                           const Eigen::MatrixXd& feedbacks, std::size_t batch_size,
                                           std::uint64_t seed);

// Row-normalised copy; throws DataError naming the first zero-norm row.
Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& m, std::string_view what);

// ---------------------------------------------------------------------------
// Trials

enum class FunctionCondition { same_function, different_function };
enum class ModalityCondition { audio_only, audio_text };
std::string_view to_string(FunctionCondition c);
std::string_view to_string(ModalityCondition c);
FunctionCondition parse_function_condition(std::string_view text);
ModalityCondition parse_modality_condition(std::string_view text);

struct LabeledInstance {
    std::string id;
    std::string conversation_id;
    corpus::FunctionLabel label = corpus::FunctionLabel::C;
};

struct TrialSet {
    std::string trial_id;
    std::string context_id;
    std::string true_id;
    std::vector<std::string> candidates;  // exactly four, presentation order
    std::vector<corpus::FunctionLabel> candidate_labels;
    FunctionCondition condition = FunctionCondition::same_function;
    ModalityCondition modality = ModalityCondition::audio_only;
};

// Validates the candidate count and the same/different-function invariant.
void check_trial(const TrialSet& trial);

std::vector<TrialSet> curate_trials(const std::vector<LabeledInstance>& instances, int per_function,
                                    std::uint64_t seed, ModalityCondition modality = ModalityCondition::audio_only);

nlohmann::json to_json(const TrialSet& trial);
TrialSet trial_from_json(const nlohmann::json& j);
std::string serialize_trials(const std::vector<TrialSet>& trials);
std::vector<TrialSet> parse_trials(std::string_view text);

struct ModelAnswer {
    std::string trial_id;
    std::size_t choice = 0;  // index into TrialSet::candidates
    std::string chosen_id;
    std::vector<double> scores;  // cosine per candidate, presentation order
    bool correct = false;
};

// Choice is the candidate with the highest cosine similarity to the trial
// context (first one on ties). Trials with missing embeddings are skipped.
std::vector<ModelAnswer> model_trial_answers(const std::vector<TrialSet>& trials,
                                             const embeddings::EmbeddingTable& table);

nlohmann::json to_json(const ModelAnswer& answer);
ModelAnswer answer_from_json(const nlohmann::json& j);

}  // namespace fbrank::rank
