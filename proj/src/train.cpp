#include "fbrank/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "fbrank/error.hpp"
#include "fbrank/log.hpp"
#include "fbrank/rank.hpp"
#include "fbrank/util.hpp"

namespace fbrank::train {

using nlohmann::json;

SimilarityMatrix cosine_similarity_matrix(const Eigen::MatrixXd& ctx, const Eigen::MatrixXd& fb, CosineCache* cache) {
    if (ctx.rows() != fb.rows() || ctx.cols() != fb.cols())
        throw ShapeError("context " + shape_string(ctx.rows(), ctx.cols()) + " vs feedback " +
                         shape_string(fb.rows(), fb.cols()));
    CosineCache local;
    CosineCache& c = cache ? *cache : local;
    c.ctx_norm = ctx.rowwise().norm();
    c.fb_norm = fb.rowwise().norm();
    for (Eigen::Index i = 0; i < ctx.rows(); ++i) {
        if (!(c.ctx_norm[i] > 0.0)) throw DataError("context embedding row " + std::to_string(i) + " has zero norm");
        if (!(c.fb_norm[i] > 0.0)) throw DataError("feedback embedding row " + std::to_string(i) + " has zero norm");
    }
    c.ctx_unit = c.ctx_norm.cwiseInverse().asDiagonal() * ctx;
    c.fb_unit = c.fb_norm.cwiseInverse().asDiagonal() * fb;
    return {c.ctx_unit * c.fb_unit.transpose()};
}

CosineGradients cosine_backward(const CosineCache& cache, const Eigen::MatrixXd& grad_scores) {
    auto through_norm = [](const Eigen::MatrixXd& g_unit, const Eigen::MatrixXd& unit, const Eigen::VectorXd& norm) {
        // d(u/|u|) : g -> (g - (g . u_hat) u_hat) / |u|
        const Eigen::VectorXd radial = g_unit.cwiseProduct(unit).rowwise().sum();
        Eigen::MatrixXd g = g_unit - radial.asDiagonal() * unit;
        return Eigen::MatrixXd(norm.cwiseInverse().asDiagonal() * g);
    };
    return {through_norm(grad_scores * cache.fb_unit, cache.ctx_unit, cache.ctx_norm),
            through_norm(grad_scores.transpose() * cache.ctx_unit, cache.fb_unit, cache.fb_norm)};
}

InfoNceResult symmetric_info_nce(const SimilarityMatrix& sim, double temperature) {
    const Eigen::MatrixXd& s = sim.scores;
    if (s.rows() != s.cols()) throw ShapeError("similarity matrix must be square");
    if (!(temperature > 0.0)) throw NumericError("temperature must be positive");
    const Eigen::Index n = s.rows();
    if (n == 0) throw DataError("empty similarity matrix");
    InfoNceResult r;
    r.grad_scores = Eigen::MatrixXd::Zero(n, n);
    if (n == 1) {
        log::warn("InfoNCE over a single pair carries no contrastive signal");
        return r;
    }

    const Eigen::MatrixXd z = s / temperature;
    Eigen::MatrixXd p_rows(n, n), p_cols(n, n);
    double ce_rows = 0.0, ce_cols = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mr = z.row(i).maxCoeff();
        const Eigen::RowVectorXd er = (z.row(i).array() - mr).exp();
        const double sr = er.sum();
        p_rows.row(i) = er / sr;
        ce_rows += mr + std::log(sr) - z(i, i);

        const double mc = z.col(i).maxCoeff();
        const Eigen::VectorXd ec = (z.col(i).array() - mc).exp();
        const double sc = ec.sum();
        p_cols.col(i) = ec / sc;
        ce_cols += mc + std::log(sc) - z(i, i);
    }
    const double nd = static_cast<double>(n);
    r.loss = 0.5 * (ce_rows + ce_cols) / nd;

    Eigen::MatrixXd g_logits = 0.5 * (p_rows + p_cols) / nd;
    g_logits.diagonal().array() -= 1.0 / nd;
    r.grad_scores = g_logits / temperature;
    r.grad_log_temperature = -(g_logits.array() * z.array()).sum();
    return r;
}

// ---------------------------------------------------------------------------
// Data

PairDataset load_pairs(const corpus::DatasetManifest& manifest, corpus::Split split,
                       const features::FeatureStore& store, const std::vector<features::Modality>& modalities) {
    PairDataset data;
    std::size_t skipped = 0;
    for (const auto* entry : manifest.in_split(split)) {
        const std::string& id = entry->instance.id;
        const std::string ctx_seg = features::context_segment(id);
        const std::string fb_seg = features::feedback_segment(id);
        bool complete = true;
        for (auto m : modalities) complete = complete && store.has(ctx_seg, m) && store.has(fb_seg, m);
        if (!complete) {
            ++skipped;
            continue;
        }
        model::SegmentSummary ctx, fb;
        for (auto m : modalities) {
            ctx.per_modality.push_back(features::layer_means(store.load(ctx_seg, m)));
            fb.per_modality.push_back(features::layer_means(store.load(fb_seg, m)));
        }
        data.ids.push_back(id);
        data.conversations.push_back(entry->instance.conversation_id);
        data.labels.push_back(entry->instance.function_label);
        data.contexts.push_back(std::move(ctx));
        data.feedbacks.push_back(std::move(fb));
    }
    if (skipped > 0)
        log::warn(std::to_string(skipped) + " " + std::string(corpus::to_string(split)) +
                  " instances skipped for missing modality features");
    return data;
}

double batch_loss(const model::DualEncoder& model, std::span<const model::SegmentSummary* const> contexts,
                  std::span<const model::SegmentSummary* const> feedbacks, model::DualEncoder* tape) {
    if (contexts.size() != feedbacks.size()) throw ShapeError("context and feedback batches differ in size");
    model::TowerCache ctx_cache, fb_cache;
    const Eigen::MatrixXd ctx = model::tower_forward(model.context, contexts, tape ? &ctx_cache : nullptr);
    const Eigen::MatrixXd fb = model::tower_forward(model.feedback, feedbacks, tape ? &fb_cache : nullptr);
    CosineCache cos_cache;
    const SimilarityMatrix sim = cosine_similarity_matrix(ctx, fb, &cos_cache);
    const InfoNceResult nce = symmetric_info_nce(sim, model.temperature());
    if (!std::isfinite(nce.loss)) throw NumericError("non-finite contrastive loss");
    if (tape) {
        const CosineGradients g = cosine_backward(cos_cache, nce.grad_scores);
        model::tower_backward(model.context, ctx_cache, g.ctx, tape->context);
        model::tower_backward(model.feedback, fb_cache, g.fb, tape->feedback);
        if (model.learn_temperature) tape->log_temperature += nce.grad_log_temperature;
    }
    return nce.loss;
}

namespace {

std::vector<const model::SegmentSummary*> pointers(const std::vector<model::SegmentSummary>& items) {
    std::vector<const model::SegmentSummary*> out;
    out.reserve(items.size());
    for (const auto& s : items) out.push_back(&s);
    return out;
}

}  // namespace

embeddings::EmbeddingTable embed(const model::DualEncoder& model, const PairDataset& data, bool pooled) {
    embeddings::EmbeddingTable table;
    table.ids = data.ids;
    table.conversations = data.conversations;
    table.labels = data.labels;
    const auto ctx = pointers(data.contexts);
    const auto fb = pointers(data.feedbacks);
    if (pooled) {
        table.context = model::pool_batch(model.context, ctx);
        table.feedback = model::pool_batch(model.feedback, fb);
    } else {
        table.context = model::tower_forward(model.context, ctx);
        table.feedback = model::tower_forward(model.feedback, fb);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for a contrastive signal");
    if (!(optimizer.lr >= 0.0) || optimizer.lr > 1.0) throw ConfigError("learning rate must lie in [0, 1]");
    if (optimizer.weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(temperature >= 0.001 && temperature <= 0.5)) throw ConfigError("temperature must lie in [0.001, 0.5]");
    if (output_dim < 1) throw ConfigError("output_dim must be positive");
    if (hidden_dims.size() > 2) throw ConfigError("at most two hidden layers are supported");
    if (patience < 0) throw ConfigError("patience must be non-negative");
    if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
    if (modalities.empty()) throw ConfigError("at least one modality is required");
    if (std::set<features::Modality>(modalities.begin(), modalities.end()).size() != modalities.size())
        throw ConfigError("modalities must be distinct");
    rank::MetricConfig{validation_k, batch_size}.validate();
}

json TrainConfig::to_json() const {
    json mods = json::array();
    for (auto m : modalities) mods.push_back(features::to_string(m));
    return {{"batch_size", batch_size},
            {"lr", optimizer.lr},
            {"optimizer", optim::to_string(optimizer.kind)},
            {"weight_decay", optimizer.weight_decay},
            {"betas", {optimizer.beta1, optimizer.beta2}},
            {"eps", optimizer.eps},
            {"temperature", temperature},
            {"learn_temperature", learn_temperature},
            {"head",
             {{"hidden_dims", hidden_dims}, {"output_dim", output_dim}, {"activation", model::to_string(activation)}}},
            {"modalities", mods},
            {"patience", patience},
            {"max_epochs", max_epochs},
            {"validation_k", validation_k},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    try {
        c.batch_size = j.value("batch_size", c.batch_size);
        c.optimizer.lr = j.value("lr", c.optimizer.lr);
        c.optimizer.kind = optim::parse_optimizer(j.value("optimizer", std::string("adamw")));
        c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
        if (j.contains("betas")) {
            const auto b = j.at("betas").get<std::vector<double>>();
            if (b.size() != 2) throw ConfigError("betas must have two entries");
            c.optimizer.beta1 = b[0];
            c.optimizer.beta2 = b[1];
        }
        c.optimizer.eps = j.value("eps", c.optimizer.eps);
        c.temperature = j.value("temperature", c.temperature);
        c.learn_temperature = j.value("learn_temperature", c.learn_temperature);
        if (j.contains("head")) {
            const json& h = j.at("head");
            c.hidden_dims = h.value("hidden_dims", c.hidden_dims);
            c.output_dim = h.value("output_dim", c.output_dim);
            c.activation = model::parse_activation(h.value("activation", std::string("gelu")));
        }
        if (j.contains("modalities")) {
            c.modalities.clear();
            for (const auto& m : j.at("modalities")) c.modalities.push_back(features::parse_modality(m.get<std::string>()));
        }
        c.patience = j.value("patience", c.patience);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.validation_k = j.value("validation_k", c.validation_k);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed training config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Loop

std::uint64_t evaluation_seed(std::uint64_t seed) { return mix_seed(seed, 17); }

double evaluate(const model::DualEncoder& model, const PairDataset& data, std::size_t batch_size, int k_percent,
                std::uint64_t seed) {
    if (data.size() == 0) throw DataError("cannot evaluate on an empty split");
    const auto table = embed(model, data);
    const auto results = rank::rank_in_batches(table.ids, table.context, table.feedback, batch_size, seed);
    return rank::topk_percent_accuracy(results, k_percent);
}

model::ModelSpec spec_for(const TrainConfig& config, const PairDataset& data) {
    if (data.size() == 0) throw DataError("training split is empty");
    model::ModelSpec spec;
    spec.modalities = config.modalities;
    const auto& first = data.contexts.front();
    if (first.per_modality.size() != config.modalities.size())
        throw ShapeError("training data has " + std::to_string(first.per_modality.size()) + " modalities, config lists " +
                         std::to_string(config.modalities.size()));
    for (const auto& s : first.per_modality) {
        spec.layers.push_back(static_cast<int>(s.rows()));
        spec.dims.push_back(static_cast<int>(s.cols()));
    }
    spec.hidden_dims = config.hidden_dims;
    spec.output_dim = config.output_dim;
    spec.activation = config.activation;
    return spec;
}

TrainResult train_loop(const PairDataset& train, const PairDataset& valid, const TrainConfig& config) {
    config.validate();
    if (train.size() < 2) throw DataError("training needs at least two pairs");
    if (valid.size() == 0) throw DataError("validation split is empty");

    model::DualEncoder model = model::make_dual_encoder(spec_for(config, train), config.temperature,
                                                        config.learn_temperature, mix_seed(config.seed, 0));
    model::DualEncoder tape = model::zeros_like(model);
    optim::AdamState state;
    Rng shuffle_rng(mix_seed(config.seed, 3));

    const auto ctx_all = pointers(train.contexts);
    const auto fb_all = pointers(train.feedbacks);
    const std::size_t batch = std::min(config.batch_size, train.size());
    const std::size_t batches = train.size() / batch;

    TrainResult result;
    result.best = model;
    result.best_val = -1.0;
    int since_improvement = 0;
    std::vector<std::size_t> order(train.size());
    std::vector<const model::SegmentSummary*> ctx_batch(batch), fb_batch(batch);

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches; ++b) {
            for (std::size_t k = 0; k < batch; ++k) {
                ctx_batch[k] = ctx_all[order[b * batch + k]];
                fb_batch[k] = fb_all[order[b * batch + k]];
            }
            model::zero(tape);
            loss_sum += batch_loss(model, ctx_batch, fb_batch, &tape);
            optim::step(model, tape, state, config.optimizer);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(batches);
        rec.val_top25 = evaluate(model, valid, config.batch_size, config.validation_k, evaluation_seed(config.seed));
        rec.temperature = model.temperature();
        result.history.push_back(rec);
        log::info("epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.loss) + " val " +
                  std::to_string(rec.val_top25));

        if (rec.val_top25 > result.best_val) {
            result.best_val = rec.val_top25;
            result.best_epoch = epoch;
            result.best = model;
            since_improvement = 0;
        } else {
            ++since_improvement;
        }
        if (since_improvement >= config.patience) break;
    }
    return result;
}

std::string history_csv(const std::vector<EpochRecord>& history, const std::string& stamp) {
    std::ostringstream out;
    if (!stamp.empty()) out << "# " << stamp << '\n';
    out << "epoch,loss,val_top25,tau\n";
    char buf[128];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.6f,%.9g\n", r.epoch, r.loss, r.val_top25, r.temperature);
        out << buf;
    }
    return out.str();
}

}  // namespace fbrank::train
