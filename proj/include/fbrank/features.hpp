#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fbrank/error.hpp"

namespace fbrank::features {

enum class Modality { audio, text };
std::string_view to_string(Modality m);
Modality parse_modality(std::string_view text);

// Per-layer, per-frame encoder output for one segment, stored layer-major then
// frame-major: data[(l * frames + t) * dim + d].
struct FeatureTensor {
    std::string segment_id;
    Modality modality = Modality::audio;
    std::string encoder_name;
    std::uint32_t layers = 0;
    std::uint32_t frames = 0;
    std::uint32_t dim = 0;
    std::vector<float> data;

    FeatureTensor() = default;
    FeatureTensor(std::uint32_t l, std::uint32_t t, std::uint32_t d) : layers(l), frames(t), dim(d), data(std::size_t(l) * t * d) {}

    float& at(std::uint32_t l, std::uint32_t t, std::uint32_t d) { return data[(std::size_t(l) * frames + t) * dim + d]; }
    [[nodiscard]] float at(std::uint32_t l, std::uint32_t t, std::uint32_t d) const {
        return data[(std::size_t(l) * frames + t) * dim + d];
    }
    // Throws DataError on empty dimensions, size mismatch or non-finite values.
    void validate() const;
};

// Trainable softmax weights over encoder layers; zero logits = uniform mean.
struct LayerWeights {
    Eigen::VectorXd logits;

    LayerWeights() = default;
    explicit LayerWeights(Eigen::Index layers) : logits(Eigen::VectorXd::Zero(layers)) {}
    [[nodiscard]] Eigen::VectorXd softmax() const;
};

// output[t][d] = sum_l softmax(logits)[l] * data[l][t][d]
Eigen::MatrixXd pool_layers(const FeatureTensor& tensor, const LayerWeights& weights);

// Gradient of <upstream, pool_layers(tensor, weights)> with respect to the logits.
Eigen::VectorXd pool_layers_backward(const FeatureTensor& tensor, const LayerWeights& weights,
                                     const Eigen::MatrixXd& upstream);

// Mean over the frame axis.
Eigen::VectorXd pool_time(const Eigen::MatrixXd& frames);

// Per-layer time means (L x D). Layer and time pooling are both linear, so
// pool_time(pool_layers(x, w)) == layer_means(x)^T softmax(w); training works
// on this summary instead of the full tensor.
Eigen::MatrixXd layer_means(const FeatureTensor& tensor);

struct PooledEmbedding {
    std::string segment_id;
    Eigen::VectorXd vector;
    std::vector<Modality> modalities;
};

struct MissingModalityError : DataError {
    explicit MissingModalityError(const std::string& what) : DataError("missing modality: " + what) {}
};

// audio ++ text. An embedding with no modalities stands for an absent transcript.
PooledEmbedding concat_modalities(const PooledEmbedding& audio, const PooledEmbedding& text);

// ---------------------------------------------------------------------------
// FBF1: "FBF1", u32 L, u32 T, u32 D, then L*T*D little-endian float32.

struct FbfHeader {
    std::uint32_t layers = 0;
    std::uint32_t frames = 0;
    std::uint32_t dim = 0;
};

std::string encode_fbf(const FeatureTensor& tensor);
FeatureTensor decode_fbf(std::string_view bytes);
void write_fbf(const std::string& path, const FeatureTensor& tensor);
FeatureTensor read_fbf(const std::string& path);
FbfHeader read_fbf_header(const std::string& path);

// Conventional location of a feature file relative to the index directory.
std::string feature_path(std::string_view split, std::string_view segment_id, Modality modality);

// Sidecar JSON index: segment id -> per-modality file path and encoder name.
struct IndexEntry {
    std::string path;  // relative to the index directory
    std::string encoder;
    FbfHeader header;
};

class FeatureStore {
public:
    FeatureStore() = default;
    static FeatureStore open(const std::string& index_path);

    void add(const std::string& segment_id, Modality modality, IndexEntry entry);
    void save_index(const std::string& index_path) const;

    [[nodiscard]] bool has(const std::string& segment_id, Modality modality) const;
    [[nodiscard]] FeatureTensor load(const std::string& segment_id, Modality modality) const;
    [[nodiscard]] std::size_t size() const { return entries_.size(); }
    [[nodiscard]] const std::string& root() const { return root_; }
    void set_root(std::string root) { root_ = std::move(root); }

private:
    std::string root_;
    std::map<std::string, std::map<Modality, IndexEntry>> entries_;
};

// Conventional segment ids for the two sides of a context-feedback pair.
std::string context_segment(std::string_view instance_id);
std::string feedback_segment(std::string_view instance_id);

}  // namespace fbrank::features
