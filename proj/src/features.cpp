#include "fbrank/features.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>

#include <json.hpp>

#include "fbrank/util.hpp"

namespace fbrank::features {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Modality m) { return m == Modality::audio ? "audio" : "text"; }

Modality parse_modality(std::string_view text) {
    if (text == "audio") return Modality::audio;
    if (text == "text") return Modality::text;
    throw ConfigError("unknown modality '" + std::string(text) + "'");
}

void FeatureTensor::validate() const {
    if (layers == 0 || frames == 0 || dim == 0)
        throw DataError("feature tensor " + segment_id + " has an empty dimension (" + std::to_string(layers) + "x" +
                        std::to_string(frames) + "x" + std::to_string(dim) + ")");
    if (data.size() != std::size_t(layers) * frames * dim)
        throw DataError("feature tensor " + segment_id + " payload does not match its shape");
    for (float v : data)
        if (!std::isfinite(v)) throw DataError("feature tensor " + segment_id + " contains non-finite values");
}

Eigen::VectorXd LayerWeights::softmax() const {
    if (logits.size() == 0) return {};
    const double top = logits.maxCoeff();
    Eigen::VectorXd w = (logits.array() - top).exp();
    return w / w.sum();
}

namespace {

void check_layers(const FeatureTensor& tensor, const LayerWeights& weights) {
    if (weights.logits.size() != static_cast<Eigen::Index>(tensor.layers))
        throw ShapeError("layer weights of length " + std::to_string(weights.logits.size()) + " for a tensor with " +
                         std::to_string(tensor.layers) + " layers");
}

Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> layer_view(
    const FeatureTensor& tensor, std::uint32_t l) {
    return {tensor.data.data() + std::size_t(l) * tensor.frames * tensor.dim, tensor.frames, tensor.dim};
}

}  // namespace

Eigen::MatrixXd pool_layers(const FeatureTensor& tensor, const LayerWeights& weights) {
    check_layers(tensor, weights);
    const Eigen::VectorXd w = weights.softmax();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(tensor.frames, tensor.dim);
    for (std::uint32_t l = 0; l < tensor.layers; ++l) out += w[l] * layer_view(tensor, l).cast<double>();
    return out;
}

Eigen::VectorXd pool_layers_backward(const FeatureTensor& tensor, const LayerWeights& weights,
                                     const Eigen::MatrixXd& upstream) {
    check_layers(tensor, weights);
    if (upstream.rows() != tensor.frames || upstream.cols() != tensor.dim)
        throw ShapeError("upstream gradient " + shape_string(upstream.rows(), upstream.cols()) + " for pooled " +
                         shape_string(tensor.frames, tensor.dim));
    const Eigen::VectorXd w = weights.softmax();
    Eigen::VectorXd inner(tensor.layers);
    for (std::uint32_t l = 0; l < tensor.layers; ++l)
        inner[l] = (layer_view(tensor, l).cast<double>().array() * upstream.array()).sum();
    // softmax Jacobian: dw_l/dz_k = w_l (delta_lk - w_k)
    return (w.array() * (inner.array() - w.dot(inner))).matrix();
}

Eigen::VectorXd pool_time(const Eigen::MatrixXd& frames) {
    if (frames.rows() == 0) throw DataError("cannot pool an empty segment (0 frames)");
    return frames.colwise().mean().transpose();
}

Eigen::MatrixXd layer_means(const FeatureTensor& tensor) {
    tensor.validate();
    Eigen::MatrixXd out(tensor.layers, tensor.dim);
    for (std::uint32_t l = 0; l < tensor.layers; ++l)
        out.row(l) = layer_view(tensor, l).cast<double>().colwise().mean();
    return out;
}

PooledEmbedding concat_modalities(const PooledEmbedding& audio, const PooledEmbedding& text) {
    if (audio.modalities.empty()) throw MissingModalityError("audio for segment " + audio.segment_id);
    if (text.modalities.empty()) throw MissingModalityError("text for segment " + audio.segment_id);
    if (audio.segment_id != text.segment_id)
        throw DataError("cannot concatenate segments '" + audio.segment_id + "' and '" + text.segment_id + "'");
    PooledEmbedding out;
    out.segment_id = audio.segment_id;
    out.vector.resize(audio.vector.size() + text.vector.size());
    out.vector << audio.vector, text.vector;
    out.modalities = audio.modalities;
    out.modalities.insert(out.modalities.end(), text.modalities.begin(), text.modalities.end());
    return out;
}

// ---------------------------------------------------------------------------
// FBF1

namespace {

constexpr char kMagic[4] = {'F', 'B', 'F', '1'};
constexpr std::size_t kHeaderBytes = 16;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    return v;
}

FbfHeader parse_header(std::string_view bytes) {
    if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw DataError("not an FBF1 feature file");
    return {get_u32(bytes, 4), get_u32(bytes, 8), get_u32(bytes, 12)};
}

}  // namespace

std::string encode_fbf(const FeatureTensor& tensor) {
    tensor.validate();
    std::string out(kMagic, 4);
    put_u32(out, tensor.layers);
    put_u32(out, tensor.frames);
    put_u32(out, tensor.dim);
    out.reserve(kHeaderBytes + tensor.data.size() * 4);
    for (float v : tensor.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

FeatureTensor decode_fbf(std::string_view bytes) {
    const FbfHeader h = parse_header(bytes);
    FeatureTensor t(h.layers, h.frames, h.dim);
    const std::size_t expected = kHeaderBytes + 4 * t.data.size();
    if (bytes.size() != expected)
        throw DataError("FBF1 payload is " + std::to_string(bytes.size()) + " bytes, header implies " +
                        std::to_string(expected));
    for (std::size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + 4 * i));
    t.validate();
    return t;
}

void write_fbf(const std::string& path, const FeatureTensor& tensor) { io::write_file_atomic(path, encode_fbf(tensor)); }

FeatureTensor read_fbf(const std::string& path) {
    try {
        return decode_fbf(io::read_file(path));
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

FbfHeader read_fbf_header(const std::string& path) {
    std::string bytes = io::read_file(path);
    return parse_header(bytes);
}

std::string feature_path(std::string_view split, std::string_view segment_id, Modality modality) {
    return std::string(split) + "/" + std::string(segment_id) + "." + std::string(to_string(modality)) + ".fbf";
}

std::string context_segment(std::string_view instance_id) { return std::string(instance_id) + ".ctx"; }
std::string feedback_segment(std::string_view instance_id) { return std::string(instance_id) + ".fb"; }

// ---------------------------------------------------------------------------
// Index

FeatureStore FeatureStore::open(const std::string& index_path) {
    FeatureStore store;
    store.root_ = fs::path(index_path).parent_path().string();
    json j;
    try {
        j = json::parse(io::read_file(index_path));
        if (j.value("v", 0) != 1) throw DataError(index_path + ": unsupported feature index version");
        for (const auto& [segment, mods] : j.at("segments").items()) {
            for (const auto& [mod, e] : mods.items()) {
                IndexEntry entry;
                entry.path = e.at("path").get<std::string>();
                entry.encoder = e.value("encoder", std::string());
                entry.header = {e.value("L", 0u), e.value("T", 0u), e.value("D", 0u)};
                store.entries_[segment][parse_modality(mod)] = std::move(entry);
            }
        }
    } catch (const json::exception& e) {
        throw DataError(index_path + ": malformed feature index: " + e.what());
    }
    return store;
}

void FeatureStore::add(const std::string& segment_id, Modality modality, IndexEntry entry) {
    entries_[segment_id][modality] = std::move(entry);
}

void FeatureStore::save_index(const std::string& index_path) const {
    json segments = json::object();
    for (const auto& [segment, mods] : entries_) {
        json m = json::object();
        for (const auto& [mod, e] : mods)
            m[std::string(to_string(mod))] = {
                {"path", e.path}, {"encoder", e.encoder}, {"L", e.header.layers}, {"T", e.header.frames}, {"D", e.header.dim}};
        segments[segment] = std::move(m);
    }
    io::write_file_atomic(index_path, json({{"v", 1}, {"segments", segments}}).dump(1) + "\n");
}

bool FeatureStore::has(const std::string& segment_id, Modality modality) const {
    auto it = entries_.find(segment_id);
    return it != entries_.end() && it->second.count(modality) > 0;
}

FeatureTensor FeatureStore::load(const std::string& segment_id, Modality modality) const {
    auto it = entries_.find(segment_id);
    if (it == entries_.end() || !it->second.count(modality))
        throw MissingModalityError(std::string(to_string(modality)) + " features for segment " + segment_id);
    const IndexEntry& e = it->second.at(modality);
    const fs::path p = root_.empty() ? fs::path(e.path) : fs::path(root_) / e.path;
    FeatureTensor t = read_fbf(p.string());
    t.segment_id = segment_id;
    t.modality = modality;
    t.encoder_name = e.encoder;
    return t;
}

}  // namespace fbrank::features
