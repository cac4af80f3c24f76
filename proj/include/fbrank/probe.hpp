#pragma once

// Linear probe for conversational function labels (one-vs-rest linear SVM,
// k-fold cross-validation) and Pearson correlation between human ratings and
// model similarities.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fbrank/embeddings.hpp"

namespace fbrank::probe {

enum class ProbeInput { feedback, context, concatenated };
std::string_view to_string(ProbeInput p);
ProbeInput parse_probe_input(std::string_view text);

struct ProbeConfig {
    ProbeInput input = ProbeInput::feedback;
    double C = 1.0;
    int folds = 10;
    std::uint64_t seed = 0;
    double tolerance = 1e-6;  // relative change of the primal objective between passes
    int max_passes = 2000;

    void validate() const;
};

// One binary classifier per class; decision = X w_k + b_k.
struct LinearSvm {
    std::vector<int> classes;  // sorted class ids present in training
    Eigen::MatrixXd weights;   // d x K
    Eigen::VectorXd bias;      // K

    [[nodiscard]] Eigen::MatrixXd decision(const Eigen::MatrixXd& x) const;
    [[nodiscard]] std::vector<int> predict(const Eigen::MatrixXd& x) const;
};

// L2-regularised hinge loss, min 1/2 |w|^2 + C sum max(0, 1 - y (w.x + b)),
// solved per class by dual coordinate descent over samples in a fixed seeded
// order. The bias is learnt as the weight of a constant feature 1, so it is
// regularised like any other weight.
LinearSvm fit_linear_svm(const Eigen::MatrixXd& x, const std::vector<int>& y, double C, double tolerance = 1e-6,
                         int max_passes = 2000, std::uint64_t seed = 0);

// Fold index lists covering 0..n-1 exactly once. Stratified (round-robin per
// class) when every class has at least `folds` samples, otherwise a plain
// shuffled split with a warning.
std::vector<std::vector<std::size_t>> make_folds(const std::vector<int>& y, int folds, std::uint64_t seed,
                                                 bool* stratified = nullptr);

struct ProbeResult {
    std::vector<double> fold_accuracy;  // percent
    double mean_accuracy = 0.0;         // percent, mean over folds
    Eigen::MatrixXi confusion;          // true class x predicted class
    bool stratified = true;

    [[nodiscard]] nlohmann::json to_json() const;
};

ProbeResult cross_validate(const Eigen::MatrixXd& x, const std::vector<int>& y, int num_classes,
                           const ProbeConfig& config, unsigned threads = 1);

// Feature rows for the probe and their integer labels (function label index);
// unlabelled rows are dropped.
struct ProbeData {
    Eigen::MatrixXd x;
    std::vector<int> y;
    std::vector<std::string> ids;
};
ProbeData probe_data(const embeddings::EmbeddingTable& table, ProbeInput input);

// CSV: input, C, folds, per-fold accuracy, mean.
std::string probe_csv(const std::vector<std::pair<ProbeInput, ProbeResult>>& rows, const ProbeConfig& config);

// ---------------------------------------------------------------------------
// Correlation

struct CorrelationResult {
    double r = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;

    [[nodiscard]] nlohmann::json to_json() const;
};

// Sample Pearson r with a two-sided p value from Student's t, n - 2 df.
CorrelationResult pearson_correlation(const std::vector<double>& x, const std::vector<double>& y);

struct PairScore {
    std::string context_id;
    std::string candidate_id;
    double value = 0.0;
};

// Averages human ratings per (context, candidate) pair, joins them with model
// similarities and correlates. Pairs without a similarity are dropped.
CorrelationResult correlate_ratings(const std::vector<PairScore>& ratings, const std::vector<PairScore>& similarities);

// CSV with header context_id,candidate_id,<value column>.
std::vector<PairScore> read_pair_scores(const std::string& path);

}  // namespace fbrank::probe
