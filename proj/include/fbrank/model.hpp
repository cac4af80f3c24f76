#pragma once

// Projection heads and the dual (context / feedback) encoder built on them.
//
// Rows are samples throughout: a dense layer maps X (N x in) to X W + 1 b^T
// with W stored as in x out.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fbrank/features.hpp"
#include "fbrank/util.hpp"

namespace fbrank::model {

enum class Activation { relu, gelu };
std::string_view to_string(Activation a);
Activation parse_activation(std::string_view text);

struct HeadConfig {
    int input_dim = 0;
    std::vector<int> hidden_dims;  // empty = linear head
    int output_dim = 512;
    Activation activation = Activation::gelu;

    void validate() const;
    [[nodiscard]] std::size_t parameter_count() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static HeadConfig from_json(const nlohmann::json& j);
    bool operator==(const HeadConfig&) const = default;
};

struct DenseLayer {
    Eigen::MatrixXd weight;  // in x out
    Eigen::VectorXd bias;    // out
};

class ProjectionHead {
public:
    ProjectionHead() = default;
    // Zero parameters with the configured shapes.
    explicit ProjectionHead(HeadConfig config);
    // Uniform fan-in initialisation: U(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
    ProjectionHead(HeadConfig config, Rng& rng);

    [[nodiscard]] const HeadConfig& config() const { return config_; }
    [[nodiscard]] const std::vector<DenseLayer>& layers() const { return layers_; }
    std::vector<DenseLayer>& layers() { return layers_; }

    // Incremented by every optimiser step; forward caches record it.
    [[nodiscard]] std::uint64_t version() const { return version_; }
    void bump_version() { ++version_; }

private:
    HeadConfig config_;
    std::vector<DenseLayer> layers_;
    std::uint64_t version_ = 0;
};

struct ForwardCache {
    std::uint64_t version = 0;
    const ProjectionHead* head = nullptr;
    std::vector<Eigen::MatrixXd> layer_inputs;     // input to each dense layer
    std::vector<Eigen::MatrixXd> pre_activations;  // one per hidden layer
};

// N x input_dim -> N x output_dim. Activation between layers, none after the last.
Eigen::MatrixXd head_forward(const ProjectionHead& head, const Eigen::MatrixXd& input, ForwardCache* cache = nullptr);

struct HeadGradients {
    std::vector<DenseLayer> layers;
    Eigen::MatrixXd input_grad;
};

HeadGradients head_backward(const ProjectionHead& head, const ForwardCache& cache, const Eigen::MatrixXd& upstream);

// ---------------------------------------------------------------------------
// Towers

// One side of the dual encoder: per-modality layer weights, then a head.
struct Tower {
    std::vector<features::Modality> modalities;
    std::vector<features::LayerWeights> pooling;
    ProjectionHead head;
};

// Per-segment input to a tower: one L x D layer-mean summary per modality.
struct SegmentSummary {
    std::vector<Eigen::MatrixXd> per_modality;
};

struct TowerCache {
    std::vector<const SegmentSummary*> batch;
    std::vector<Eigen::VectorXd> softmax;  // per modality
    ForwardCache head;
};

// Pooled, concatenated input rows (N x sum D) for a batch of segments.
Eigen::MatrixXd pool_batch(const Tower& tower, std::span<const SegmentSummary* const> batch,
                           std::vector<Eigen::VectorXd>* softmax_out = nullptr);

Eigen::MatrixXd tower_forward(const Tower& tower, std::span<const SegmentSummary* const> batch,
                              TowerCache* cache = nullptr);

// Accumulates parameter gradients into `grads` (same shapes as `tower`).
void tower_backward(const Tower& tower, const TowerCache& cache, const Eigen::MatrixXd& upstream, Tower& grads);

struct ModelSpec {
    std::vector<features::Modality> modalities;
    std::vector<int> layers;  // per modality
    std::vector<int> dims;    // per modality
    std::vector<int> hidden_dims;
    int output_dim = 512;
    Activation activation = Activation::gelu;

    [[nodiscard]] HeadConfig head_config() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
};

struct DualEncoder {
    ModelSpec spec;
    Tower context;
    Tower feedback;
    double log_temperature = 0.0;
    bool learn_temperature = false;

    [[nodiscard]] double temperature() const;
    [[nodiscard]] std::size_t parameter_count() const;
};

// Fresh model; towers get independent parameters from the same seed stream.
DualEncoder make_dual_encoder(const ModelSpec& spec, double temperature, bool learn_temperature, std::uint64_t seed);

// Same shapes, all zeros; serves as the gradient tape.
DualEncoder zeros_like(const DualEncoder& model);
void zero(DualEncoder& tape);

// Flat views over every trainable array in a fixed order: context pooling
// logits, context head (W, b per layer), feedback likewise, then log
// temperature when it is learnt.
std::vector<std::span<double>> parameter_views(DualEncoder& model);
std::vector<std::span<const double>> parameter_views(const DualEncoder& model);

inline constexpr double kMinTemperature = 1e-4;
inline constexpr double kMaxTemperature = 1.0;
void clamp_temperature(DualEncoder& model);

}  // namespace fbrank::model
