#pragma once

// Hyperparameter search over TrainConfig: Cartesian grid or uniform sampling,
// one independent training run per trial.
//
// A search space document looks like
//   {"strategy": "grid" | "uniform", "budget": 10, "seed": 0,
//    "base": { ...TrainConfig... },
//    "params": {"head": ["linear", "mlp"], "temperature": [0.05, 0.5],
//               "lr": {"min": 1e-4, "max": 1e-1, "log": true, "steps": 4}}}
// Lists are categorical domains. Ranges are sampled uniformly (in log space
// when "log" is set) or, for grids, expanded into "steps" evenly spaced points.
// "head" accepts "linear", "mlp" (one hidden layer of "mlp_hidden" units) or
// an explicit hidden_dims array.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fbrank/model.hpp"
#include "fbrank/train.hpp"

namespace fbrank::search {

enum class Strategy { grid, uniform };

struct Domain {
    std::string name;
    std::vector<nlohmann::json> values;  // categorical
    double min = 0.0, max = 0.0;         // range, when values is empty
    bool log_scale = false;
    bool integer = false;
    int steps = 3;  // grid points for a range

    [[nodiscard]] bool is_range() const { return values.empty(); }
};

struct SearchSpace {
    Strategy strategy = Strategy::grid;
    std::vector<Domain> domains;
    train::TrainConfig base;
    std::size_t budget = 0;  // 0 = full grid; required for uniform
    std::uint64_t seed = 0;
    int mlp_hidden = 1024;

    void validate() const;
    static SearchSpace from_json(const nlohmann::json& j);
};

// Parameter assignments, one per trial, in trial order.
std::vector<nlohmann::json> enumerate_trials(const SearchSpace& space);

// base + assignment -> validated config (seed not yet set).
train::TrainConfig apply_assignment(const SearchSpace& space, const nlohmann::json& assignment);

struct TrialOutcome {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    nlohmann::json params;
    train::TrainConfig config;
    bool ok = false;
    std::string error;
    double val_top25 = 0.0;
    int best_epoch = 0;
    int epochs = 0;
};

struct SearchResult {
    std::vector<TrialOutcome> table;  // best first; failures last
    std::optional<train::TrainResult> best;

    [[nodiscard]] nlohmann::json to_json() const;
};

// Runs every trial (up to `threads` at a time). Trial i trains with seed
// mix_seed(space.seed, i), so outcomes do not depend on scheduling.
// Throws NumericError listing every failure when no trial succeeds.
SearchResult run_search(const SearchSpace& space, const train::PairDataset& train_data,
                        const train::PairDataset& valid_data, unsigned threads = 1);

}  // namespace fbrank::search
