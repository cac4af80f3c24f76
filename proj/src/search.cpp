#include "fbrank/search.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "fbrank/error.hpp"
#include "fbrank/log.hpp"
#include "fbrank/util.hpp"

namespace fbrank::search {

using nlohmann::json;

void SearchSpace::validate() const {
    if (domains.empty()) throw ConfigError("search space has no parameters");
    for (const auto& d : domains) {
        if (d.is_range()) {
            if (!(std::isfinite(d.min) && std::isfinite(d.max)) || d.min > d.max)
                throw ConfigError("parameter '" + d.name + "' has an empty range");
            if (d.log_scale && d.min <= 0.0) throw ConfigError("log-scale range for '" + d.name + "' must be positive");
            if (strategy == Strategy::grid && d.steps < 1)
                throw ConfigError("grid steps for '" + d.name + "' must be positive");
        }
    }
    if (strategy == Strategy::uniform && budget < 1) throw ConfigError("uniform sampling needs a budget of at least 1");
    if (mlp_hidden < 1) throw ConfigError("mlp_hidden must be positive");
    base.validate();
}

SearchSpace SearchSpace::from_json(const json& j) {
    SearchSpace s;
    try {
        const std::string strategy = j.value("strategy", std::string("grid"));
        if (strategy == "grid")
            s.strategy = Strategy::grid;
        else if (strategy == "uniform" || strategy == "uniform_sample")
            s.strategy = Strategy::uniform;
        else
            throw ConfigError("unknown search strategy '" + strategy + "'");
        s.budget = j.value("budget", std::size_t{0});
        s.seed = j.value("seed", std::uint64_t{0});
        s.mlp_hidden = j.value("mlp_hidden", s.mlp_hidden);
        if (j.contains("base")) s.base = train::TrainConfig::from_json(j.at("base"));
        for (const auto& [name, spec] : j.at("params").items()) {
            Domain d;
            d.name = name;
            if (spec.is_array()) {
                if (spec.empty()) throw ConfigError("parameter '" + name + "' has an empty domain");
                for (const auto& v : spec) d.values.push_back(v);
            } else if (spec.is_object()) {
                d.min = spec.at("min").get<double>();
                d.max = spec.at("max").get<double>();
                d.log_scale = spec.value("log", false);
                d.integer = spec.value("integer", false);
                d.steps = spec.value("steps", d.steps);
            } else {
                d.values.push_back(spec);
            }
            s.domains.push_back(std::move(d));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed search space: ") + e.what());
    }
    s.validate();
    return s;
}

namespace {

json range_value(const Domain& d, double u) {
    double v = d.log_scale ? std::exp(std::log(d.min) + u * (std::log(d.max) - std::log(d.min)))
                           : d.min + u * (d.max - d.min);
    v = std::clamp(v, d.min, d.max);
    if (d.integer) return json(static_cast<std::int64_t>(std::llround(v)));
    return json(v);
}

std::vector<json> grid_values(const Domain& d) {
    if (!d.is_range()) return d.values;
    std::vector<json> out;
    for (int i = 0; i < d.steps; ++i) out.push_back(range_value(d, d.steps == 1 ? 0.0 : double(i) / (d.steps - 1)));
    return out;
}

}  // namespace

std::vector<json> enumerate_trials(const SearchSpace& space) {
    space.validate();
    std::vector<json> out;
    if (space.strategy == Strategy::grid) {
        std::vector<std::vector<json>> axes;
        std::size_t total = 1;
        for (const auto& d : space.domains) {
            axes.push_back(grid_values(d));
            total *= axes.back().size();
        }
        std::size_t count = total;
        if (space.budget > 0 && space.budget < total) {
            log::warn("grid has " + std::to_string(total) + " points; budget keeps the first " +
                      std::to_string(space.budget));
            count = space.budget;
        }
        // Last parameter varies fastest.
        for (std::size_t t = 0; t < count; ++t) {
            json a = json::object();
            std::size_t rest = t;
            for (std::size_t k = axes.size(); k-- > 0;) {
                a[space.domains[k].name] = axes[k][rest % axes[k].size()];
                rest /= axes[k].size();
            }
            out.push_back(std::move(a));
        }
    } else {
        Rng rng(mix_seed(space.seed, 0x5eac));
        for (std::size_t t = 0; t < space.budget; ++t) {
            json a = json::object();
            for (const auto& d : space.domains)
                a[d.name] = d.is_range() ? range_value(d, rng.uniform()) : d.values[rng.index(d.values.size())];
            out.push_back(std::move(a));
        }
    }
    return out;
}

train::TrainConfig apply_assignment(const SearchSpace& space, const json& assignment) {
    json j = space.base.to_json();
    for (const auto& [name, value] : assignment.items()) {
        if (name == "head") {
            if (value == "linear")
                j["head"]["hidden_dims"] = json::array();
            else if (value == "mlp")
                j["head"]["hidden_dims"] = json::array({space.mlp_hidden});
            else if (value.is_array())
                j["head"]["hidden_dims"] = value;
            else
                throw ConfigError("head must be \"linear\", \"mlp\" or a hidden_dims array");
        } else if (name == "hidden_dims" || name == "output_dim" || name == "activation") {
            j["head"][name] = value;
        } else if (name == "seed") {
            throw ConfigError("seed is assigned per trial and cannot be searched");
        } else if (j.contains(name)) {
            j[name] = value;
        } else {
            throw ConfigError("unknown hyperparameter '" + name + "'");
        }
    }
    return train::TrainConfig::from_json(j);
}

json SearchResult::to_json() const {
    json rows = json::array();
    for (const auto& t : table) {
        json r = {{"trial", t.index},    {"seed", t.seed},          {"params", t.params},
                  {"status", t.ok ? "ok" : "failed"}, {"val_top25", t.val_top25}, {"best_epoch", t.best_epoch},
                  {"epochs", t.epochs},  {"config", t.config.to_json()}};
        if (!t.ok) r["error"] = t.error;
        rows.push_back(std::move(r));
    }
    json out = {{"v", 1}, {"trials", rows}};
    if (!table.empty() && table.front().ok) out["best"] = table.front().index;
    return out;
}

SearchResult run_search(const SearchSpace& space, const train::PairDataset& train_data,
                        const train::PairDataset& valid_data, unsigned threads) {
    const std::vector<json> assignments = enumerate_trials(space);
    std::vector<TrialOutcome> outcomes(assignments.size());
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        outcomes[i].index = i;
        outcomes[i].seed = mix_seed(space.seed, i);
        outcomes[i].params = assignments[i];
        outcomes[i].config = space.base;
        outcomes[i].config.seed = outcomes[i].seed;
    }

    std::mutex best_mutex;
    std::optional<train::TrainResult> best;
    std::size_t best_index = 0;
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i = next++; i < outcomes.size(); i = next++) {
            TrialOutcome& o = outcomes[i];
            try {
                o.config = apply_assignment(space, o.params);
                o.config.seed = o.seed;
                train::TrainResult r = train::train_loop(train_data, valid_data, o.config);
                o.ok = true;
                o.val_top25 = r.best_val;
                o.best_epoch = r.best_epoch;
                o.epochs = static_cast<int>(r.history.size());
                std::lock_guard lock(best_mutex);
                if (!best || r.best_val > best->best_val || (r.best_val == best->best_val && i < best_index)) {
                    best = std::move(r);
                    best_index = i;
                }
            } catch (const Error& e) {
                o.ok = false;
                o.error = e.what();
                log::warn("trial " + std::to_string(i) + " failed: " + e.what());
            }
        }
    };

    const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(outcomes.size())));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    if (std::none_of(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.ok; })) {
        std::string msg = "all " + std::to_string(outcomes.size()) + " search trials failed:";
        for (const auto& o : outcomes) msg += "\n  trial " + std::to_string(o.index) + ": " + o.error;
        throw NumericError(msg);
    }

    std::stable_sort(outcomes.begin(), outcomes.end(), [](const TrialOutcome& a, const TrialOutcome& b) {
        if (a.ok != b.ok) return a.ok;
        if (a.val_top25 != b.val_top25) return a.val_top25 > b.val_top25;
        return a.index < b.index;
    });
    return {std::move(outcomes), std::move(best)};
}

}  // namespace fbrank::search
