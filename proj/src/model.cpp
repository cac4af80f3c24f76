#include "fbrank/model.hpp"

#include <cmath>
#include <numbers>

#include "fbrank/error.hpp"

namespace fbrank::model {

using nlohmann::json;

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

Activation parse_activation(std::string_view text) {
    if (text == "relu") return Activation::relu;
    if (text == "gelu") return Activation::gelu;
    throw ConfigError("unknown activation '" + std::string(text) + "'");
}

void HeadConfig::validate() const {
    if (input_dim < 1) throw ConfigError("head input_dim must be positive");
    if (output_dim < 1) throw ConfigError("head output_dim must be positive");
    if (hidden_dims.size() > 2) throw ConfigError("at most two hidden layers are supported");
    for (int h : hidden_dims)
        if (h < 1) throw ConfigError("hidden sizes must be positive");
}

std::size_t HeadConfig::parameter_count() const {
    std::size_t total = 0;
    int in = input_dim;
    auto add = [&](int out) {
        total += static_cast<std::size_t>(in) * static_cast<std::size_t>(out) + static_cast<std::size_t>(out);
        in = out;
    };
    for (int h : hidden_dims) add(h);
    add(output_dim);
    return total;
}

json HeadConfig::to_json() const {
    return {{"input_dim", input_dim},
            {"hidden_dims", hidden_dims},
            {"output_dim", output_dim},
            {"activation", model::to_string(activation)}};
}

HeadConfig HeadConfig::from_json(const json& j) {
    HeadConfig c;
    c.input_dim = j.value("input_dim", 0);
    c.hidden_dims = j.value("hidden_dims", std::vector<int>{});
    c.output_dim = j.value("output_dim", 512);
    c.activation = parse_activation(j.value("activation", std::string("gelu")));
    return c;
}

// ---------------------------------------------------------------------------
// Head

ProjectionHead::ProjectionHead(HeadConfig config) : config_(std::move(config)) {
    config_.validate();
    int in = config_.input_dim;
    auto add = [&](int out) {
        layers_.push_back({Eigen::MatrixXd::Zero(in, out), Eigen::VectorXd::Zero(out)});
        in = out;
    };
    for (int h : config_.hidden_dims) add(h);
    add(config_.output_dim);
}

ProjectionHead::ProjectionHead(HeadConfig config, Rng& rng) : ProjectionHead(std::move(config)) {
    for (auto& layer : layers_) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.rows()));
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = rng.uniform(-bound, bound);
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = rng.uniform(-bound, bound);
    }
}

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

Eigen::MatrixXd activate(const Eigen::MatrixXd& z, Activation a) {
    if (a == Activation::relu) return z.cwiseMax(0.0);
    return z.unaryExpr([](double x) { return gelu(x); });
}

Eigen::MatrixXd activation_grad(const Eigen::MatrixXd& z, Activation a) {
    if (a == Activation::relu) return z.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
    return z.unaryExpr([](double x) { return gelu_grad(x); });
}

}  // namespace

Eigen::MatrixXd head_forward(const ProjectionHead& head, const Eigen::MatrixXd& input, ForwardCache* cache) {
    const auto& cfg = head.config();
    if (input.cols() != cfg.input_dim)
        throw ShapeError("head expects " + std::to_string(cfg.input_dim) + " input features, got " +
                         std::to_string(input.cols()));
    if (!input.allFinite()) throw NumericError("non-finite values in head input");
    if (cache) {
        cache->version = head.version();
        cache->head = &head;
        cache->layer_inputs.clear();
        cache->pre_activations.clear();
    }
    Eigen::MatrixXd x = input;
    const auto& layers = head.layers();
    for (std::size_t k = 0; k < layers.size(); ++k) {
        if (cache) cache->layer_inputs.push_back(x);
        Eigen::MatrixXd z = x * layers[k].weight;
        z.rowwise() += layers[k].bias.transpose();
        if (k + 1 == layers.size()) return z;
        if (cache) cache->pre_activations.push_back(z);
        x = activate(z, cfg.activation);
    }
    return x;
}

HeadGradients head_backward(const ProjectionHead& head, const ForwardCache& cache, const Eigen::MatrixXd& upstream) {
    if (cache.head != &head || cache.version != head.version())
        throw StaleCacheError("forward cache does not match the current head parameters");
    const auto& layers = head.layers();
    if (cache.layer_inputs.size() != layers.size()) throw StaleCacheError("forward cache is incomplete");
    const Eigen::Index n = cache.layer_inputs.front().rows();
    if (upstream.rows() != n || upstream.cols() != head.config().output_dim)
        throw ShapeError("upstream gradient " + shape_string(upstream.rows(), upstream.cols()) + ", expected " +
                         shape_string(n, head.config().output_dim));

    HeadGradients g;
    g.layers.resize(layers.size());
    Eigen::MatrixXd delta = upstream;
    for (std::size_t k = layers.size(); k-- > 0;) {
        g.layers[k].weight = cache.layer_inputs[k].transpose() * delta;
        g.layers[k].bias = delta.colwise().sum().transpose();
        Eigen::MatrixXd back = delta * layers[k].weight.transpose();
        if (k > 0) back = back.cwiseProduct(activation_grad(cache.pre_activations[k - 1], head.config().activation));
        delta = std::move(back);
    }
    g.input_grad = std::move(delta);
    return g;
}

// ---------------------------------------------------------------------------
// Towers

Eigen::MatrixXd pool_batch(const Tower& tower, std::span<const SegmentSummary* const> batch,
                           std::vector<Eigen::VectorXd>* softmax_out) {
    const std::size_t mods = tower.modalities.size();
    std::vector<Eigen::VectorXd> w(mods);
    Eigen::Index width = 0;
    for (std::size_t m = 0; m < mods; ++m) w[m] = tower.pooling[m].softmax();
    if (!batch.empty())
        for (std::size_t m = 0; m < mods; ++m) width += batch.front()->per_modality.at(m).cols();

    Eigen::MatrixXd x(static_cast<Eigen::Index>(batch.size()), width);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& seg = *batch[i];
        if (seg.per_modality.size() != mods) throw ShapeError("segment is missing a modality summary");
        Eigen::Index col = 0;
        for (std::size_t m = 0; m < mods; ++m) {
            const Eigen::MatrixXd& s = seg.per_modality[m];
            if (s.rows() != w[m].size())
                throw ShapeError("segment has " + std::to_string(s.rows()) + " layers, pooling expects " +
                                 std::to_string(w[m].size()));
            if (col + s.cols() > width) throw ShapeError("segment feature width differs within a batch");
            x.block(static_cast<Eigen::Index>(i), col, 1, s.cols()) = (s.transpose() * w[m]).transpose();
            col += s.cols();
        }
        if (col != width) throw ShapeError("segment feature width differs within a batch");
    }
    if (softmax_out) *softmax_out = std::move(w);
    return x;
}

Eigen::MatrixXd tower_forward(const Tower& tower, std::span<const SegmentSummary* const> batch, TowerCache* cache) {
    std::vector<Eigen::VectorXd> softmax;
    const Eigen::MatrixXd x = pool_batch(tower, batch, &softmax);
    if (!cache) return head_forward(tower.head, x, nullptr);
    cache->batch.assign(batch.begin(), batch.end());
    cache->softmax = std::move(softmax);
    return head_forward(tower.head, x, &cache->head);
}

void tower_backward(const Tower& tower, const TowerCache& cache, const Eigen::MatrixXd& upstream, Tower& grads) {
    HeadGradients hg = head_backward(tower.head, cache.head, upstream);
    auto& gl = grads.head.layers();
    for (std::size_t k = 0; k < gl.size(); ++k) {
        gl[k].weight += hg.layers[k].weight;
        gl[k].bias += hg.layers[k].bias;
    }
    for (std::size_t i = 0; i < cache.batch.size(); ++i) {
        Eigen::Index col = 0;
        for (std::size_t m = 0; m < tower.modalities.size(); ++m) {
            const Eigen::MatrixXd& s = cache.batch[i]->per_modality[m];
            const Eigen::VectorXd inner = s * hg.input_grad.block(static_cast<Eigen::Index>(i), col, 1, s.cols()).transpose();
            const Eigen::VectorXd& w = cache.softmax[m];
            grads.pooling[m].logits.array() += w.array() * (inner.array() - w.dot(inner));
            col += s.cols();
        }
    }
}

// ---------------------------------------------------------------------------
// Dual encoder

HeadConfig ModelSpec::head_config() const {
    HeadConfig c;
    c.input_dim = 0;
    for (int d : dims) c.input_dim += d;
    c.hidden_dims = hidden_dims;
    c.output_dim = output_dim;
    c.activation = activation;
    return c;
}

json ModelSpec::to_json() const {
    json mods = json::array();
    for (auto m : modalities) mods.push_back(features::to_string(m));
    return {{"modalities", mods}, {"layers", layers},       {"dims", dims},
            {"hidden_dims", hidden_dims}, {"output_dim", output_dim}, {"activation", model::to_string(activation)}};
}

ModelSpec ModelSpec::from_json(const json& j) {
    ModelSpec s;
    for (const auto& m : j.at("modalities")) s.modalities.push_back(features::parse_modality(m.get<std::string>()));
    s.layers = j.at("layers").get<std::vector<int>>();
    s.dims = j.at("dims").get<std::vector<int>>();
    s.hidden_dims = j.value("hidden_dims", std::vector<int>{});
    s.output_dim = j.value("output_dim", 512);
    s.activation = parse_activation(j.value("activation", std::string("gelu")));
    return s;
}

double DualEncoder::temperature() const { return std::exp(log_temperature); }

std::size_t DualEncoder::parameter_count() const {
    std::size_t total = context.head.config().parameter_count() + feedback.head.config().parameter_count();
    for (const auto& w : context.pooling) total += static_cast<std::size_t>(w.logits.size());
    for (const auto& w : feedback.pooling) total += static_cast<std::size_t>(w.logits.size());
    return total + (learn_temperature ? 1 : 0);
}

namespace {

Tower make_tower(const ModelSpec& spec, Rng& rng) {
    Tower t;
    t.modalities = spec.modalities;
    for (int l : spec.layers) t.pooling.emplace_back(l);
    t.head = ProjectionHead(spec.head_config(), rng);
    return t;
}

Tower zero_tower(const Tower& like) {
    Tower t;
    t.modalities = like.modalities;
    for (const auto& w : like.pooling) t.pooling.emplace_back(w.logits.size());
    t.head = ProjectionHead(like.head.config());
    return t;
}

void tower_views(Tower& t, std::vector<std::span<double>>& out) {
    for (auto& w : t.pooling) out.emplace_back(w.logits.data(), static_cast<std::size_t>(w.logits.size()));
    for (auto& layer : t.head.layers()) {
        out.emplace_back(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
        out.emplace_back(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
    }
}

}  // namespace

DualEncoder make_dual_encoder(const ModelSpec& spec, double temperature, bool learn_temperature, std::uint64_t seed) {
    if (spec.modalities.empty()) throw ConfigError("model needs at least one modality");
    if (spec.layers.size() != spec.modalities.size() || spec.dims.size() != spec.modalities.size())
        throw ConfigError("model spec lists layers/dims for a different number of modalities");
    for (std::size_t m = 0; m < spec.modalities.size(); ++m)
        if (spec.layers[m] < 1 || spec.dims[m] < 1) throw ConfigError("feature layers and dims must be positive");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");

    DualEncoder model;
    model.spec = spec;
    Rng ctx_rng(mix_seed(seed, 1));
    Rng fb_rng(mix_seed(seed, 2));
    model.context = make_tower(spec, ctx_rng);
    model.feedback = make_tower(spec, fb_rng);
    model.log_temperature = std::log(temperature);
    model.learn_temperature = learn_temperature;
    clamp_temperature(model);
    return model;
}

DualEncoder zeros_like(const DualEncoder& model) {
    DualEncoder tape;
    tape.spec = model.spec;
    tape.context = zero_tower(model.context);
    tape.feedback = zero_tower(model.feedback);
    tape.log_temperature = 0.0;
    tape.learn_temperature = model.learn_temperature;
    return tape;
}

void zero(DualEncoder& tape) {
    for (auto view : parameter_views(tape)) std::fill(view.begin(), view.end(), 0.0);
    tape.log_temperature = 0.0;
}

std::vector<std::span<double>> parameter_views(DualEncoder& model) {
    std::vector<std::span<double>> out;
    tower_views(model.context, out);
    tower_views(model.feedback, out);
    if (model.learn_temperature) out.emplace_back(&model.log_temperature, 1);
    return out;
}

std::vector<std::span<const double>> parameter_views(const DualEncoder& model) {
    std::vector<std::span<const double>> out;
    for (auto v : parameter_views(const_cast<DualEncoder&>(model))) out.emplace_back(v.data(), v.size());
    return out;
}

void clamp_temperature(DualEncoder& model) {
    model.log_temperature = std::clamp(model.log_temperature, std::log(kMinTemperature), std::log(kMaxTemperature));
}

}  // namespace fbrank::model
