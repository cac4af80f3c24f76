#pragma once

// Symmetric InfoNCE over the N x N context/feedback cosine matrix, and the
// training loop with validation-driven early stopping.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fbrank/corpus.hpp"
#include "fbrank/embeddings.hpp"
#include "fbrank/features.hpp"
#include "fbrank/model.hpp"
#include "fbrank/optim.hpp"

namespace fbrank::train {

// Row i = context i, column j = feedback j.
struct SimilarityMatrix {
    Eigen::MatrixXd scores;
};

struct CosineCache {
    Eigen::MatrixXd ctx_unit;
    Eigen::MatrixXd fb_unit;
    Eigen::VectorXd ctx_norm;
    Eigen::VectorXd fb_norm;
};

SimilarityMatrix cosine_similarity_matrix(const Eigen::MatrixXd& ctx, const Eigen::MatrixXd& fb,
                                          CosineCache* cache = nullptr);

struct CosineGradients {
    Eigen::MatrixXd ctx;
    Eigen::MatrixXd fb;
};
CosineGradients cosine_backward(const CosineCache& cache, const Eigen::MatrixXd& grad_scores);

struct InfoNceResult {
    double loss = 0.0;
    Eigen::MatrixXd grad_scores;        // dL / d scores
    double grad_log_temperature = 0.0;  // dL / d log(tau)
};

// L = (CE over rows + CE over columns) / 2, targets on the diagonal.
InfoNceResult symmetric_info_nce(const SimilarityMatrix& sim, double temperature);

// ---------------------------------------------------------------------------
// Data

// Aligned context/feedback summaries for one split.
struct PairDataset {
    std::vector<std::string> ids;
    std::vector<std::string> conversations;
    std::vector<std::optional<corpus::FunctionLabel>> labels;
    std::vector<model::SegmentSummary> contexts;
    std::vector<model::SegmentSummary> feedbacks;

    [[nodiscard]] std::size_t size() const { return ids.size(); }
};

// Loads layer-mean summaries for every entry of `split`; instances lacking a
// requested modality are skipped with one warning per split.
PairDataset load_pairs(const corpus::DatasetManifest& manifest, corpus::Split split,
                       const features::FeatureStore& store, const std::vector<features::Modality>& modalities);

// Full chain: pooling -> heads -> cosine -> symmetric InfoNCE. When `tape` is
// given, gradients for every trainable array are accumulated into it.
double batch_loss(const model::DualEncoder& model, std::span<const model::SegmentSummary* const> contexts,
                  std::span<const model::SegmentSummary* const> feedbacks, model::DualEncoder* tape);

// Projects every pair (head outputs, or pooled inputs when `pooled` is set).
embeddings::EmbeddingTable embed(const model::DualEncoder& model, const PairDataset& data, bool pooled = false);

// ---------------------------------------------------------------------------
// Loop

struct TrainConfig {
    std::size_t batch_size = 256;
    optim::AdamConfig optimizer;
    double temperature = 0.07;
    bool learn_temperature = false;
    std::vector<int> hidden_dims;
    int output_dim = 512;
    model::Activation activation = model::Activation::gelu;
    std::vector<features::Modality> modalities = {features::Modality::audio};
    int patience = 5;
    int max_epochs = 100;
    int validation_k = 25;
    std::uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;
    double val_top25 = 0.0;  // validation top-k% at the configured k
    double temperature = 0.0;
};

struct TrainResult {
    model::DualEncoder best;
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val = 0.0;
};

// Seed of the fixed shuffle used to batch validation/test sets.
std::uint64_t evaluation_seed(std::uint64_t seed);

// Top-k% of `model` on `data`, ranked in batches of `batch_size`.
double evaluate(const model::DualEncoder& model, const PairDataset& data, std::size_t batch_size, int k_percent,
                std::uint64_t seed);

model::ModelSpec spec_for(const TrainConfig& config, const PairDataset& data);

TrainResult train_loop(const PairDataset& train, const PairDataset& valid, const TrainConfig& config);

std::string history_csv(const std::vector<EpochRecord>& history, const std::string& stamp = {});

}  // namespace fbrank::train
