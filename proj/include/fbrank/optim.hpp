#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "fbrank/model.hpp"

namespace fbrank::optim {

enum class OptimizerKind { adam, adamw };
std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);

struct AdamConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Added to the gradient for adam (L2), applied as decoupled decay for adamw.
    double weight_decay = 0.0;
};

struct AdamState {
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    std::int64_t step = 0;
};

// One bias-corrected Adam/AdamW update. Gradients are checked for finiteness
// before anything is modified; a non-finite gradient throws NumericError and
// leaves parameters and state untouched.
void adamw_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                AdamState& state, const AdamConfig& config);

// Model-level step: updates every trainable array, clamps the temperature and
// invalidates outstanding forward caches.
void step(model::DualEncoder& model, const model::DualEncoder& tape, AdamState& state, const AdamConfig& config);

}  // namespace fbrank::optim
