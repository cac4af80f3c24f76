#include "fbrank/optim.hpp"

#include <cmath>
#include <string>

#include "fbrank/error.hpp"

namespace fbrank::optim {

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "adamw"; }

OptimizerKind parse_optimizer(std::string_view text) {
    if (text == "adam") return OptimizerKind::adam;
    if (text == "adamw") return OptimizerKind::adamw;
    throw ConfigError("unknown optimizer '" + std::string(text) + "'");
}

void adamw_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                AdamState& state, const AdamConfig& config) {
    if (params.size() != grads.size()) throw ShapeError("parameter and gradient lists differ in length");
    if (!(config.lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k].size() != grads[k].size())
            throw ShapeError("gradient " + std::to_string(k) + " has " + std::to_string(grads[k].size()) +
                             " entries for " + std::to_string(params[k].size()) + " parameters");
        for (std::size_t i = 0; i < grads[k].size(); ++i)
            if (!std::isfinite(grads[k][i]))
                throw NumericError("non-finite gradient in parameter array " + std::to_string(k) + " at index " +
                                   std::to_string(i) + "; step aborted");
    }
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.size(), 0.0);
            state.second_moment.emplace_back(p.size(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size()) throw ShapeError("optimizer state does not match parameters");

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    const bool decoupled = config.kind == OptimizerKind::adamw;

    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        if (m.size() != params[k].size()) throw ShapeError("optimizer state does not match parameters");
        for (std::size_t i = 0; i < params[k].size(); ++i) {
            double& theta = params[k][i];
            double g = grads[k][i];
            if (!decoupled) g += config.weight_decay * theta;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            if (decoupled) theta -= config.lr * config.weight_decay * theta;
            theta -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
        }
    }
}

void step(model::DualEncoder& model, const model::DualEncoder& tape, AdamState& state, const AdamConfig& config) {
    const auto params = model::parameter_views(model);
    const auto grads = model::parameter_views(tape);
    adamw_step(params, grads, state, config);
    model::clamp_temperature(model);
    model.context.head.bump_version();
    model.feedback.head.bump_version();
}

}  // namespace fbrank::optim
