#include <doctest.h>

#include <set>

#include "fbrank/checkpoint.hpp"
#include "fbrank/error.hpp"
#include "fbrank/log.hpp"
#include "fbrank/search.hpp"
#include "helpers.hpp"

using namespace fbrank;
using namespace fbrank::search;
using nlohmann::json;

namespace {

train::PairDataset pairs(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    const auto spec = testing::small_spec({}, 4, 2, 6);
    train::PairDataset d;
    for (std::size_t i = 0; i < n; ++i) {
        d.ids.push_back("p" + std::to_string(i));
        d.conversations.push_back("c");
        d.labels.push_back(std::nullopt);
        auto s = testing::random_summary(rng, spec.layers, spec.dims);
        d.feedbacks.push_back(s);
        d.contexts.push_back(std::move(s));
    }
    return d;
}

json small_base() {
    return {{"batch_size", 8}, {"head", {{"output_dim", 4}}}, {"max_epochs", 3}, {"patience", 2}};
}

}  // namespace

TEST_CASE("grid over head kind and temperature has four trials") {
    const auto space = SearchSpace::from_json(
        {{"strategy", "grid"}, {"mlp_hidden", 8}, {"base", small_base()},
         {"params", {{"head", {"linear", "mlp"}}, {"temperature", {0.05, 0.5}}}}});
    const auto trials = enumerate_trials(space);
    REQUIRE(trials.size() == 4);
    std::set<std::string> seen;
    for (const auto& t : trials) seen.insert(t.dump());
    CHECK(seen.size() == 4);
    const auto cfg = apply_assignment(space, trials.back());
    CHECK(cfg.hidden_dims == std::vector<int>{8});
    CHECK(cfg.temperature == 0.5);
}

TEST_CASE("uniform lr draws stay in range") {
    const auto space = SearchSpace::from_json({{"strategy", "uniform"},
                                               {"budget", 10},
                                               {"seed", 3},
                                               {"params", {{"lr", {{"min", 1e-4}, {"max", 1e-1}, {"log", true}}}}}});
    const auto trials = enumerate_trials(space);
    REQUIRE(trials.size() == 10);
    std::set<double> distinct;
    for (const auto& t : trials) {
        const double lr = t.at("lr").get<double>();
        CHECK(lr >= 1e-4);
        CHECK(lr <= 1e-1);
        distinct.insert(lr);
    }
    CHECK(distinct.size() == 10);
    CHECK(enumerate_trials(space) == trials);
}

TEST_CASE("grid ranges expand into steps") {
    const auto space = SearchSpace::from_json(
        {{"params", {{"batch_size", {{"min", 256}, {"max", 8192}, {"log", true}, {"integer", true}, {"steps", 6}}}}}});
    const auto trials = enumerate_trials(space);
    REQUIRE(trials.size() == 6);
    std::vector<int> sizes;
    for (const auto& t : trials) sizes.push_back(t.at("batch_size").get<int>());
    CHECK(sizes == std::vector<int>{256, 512, 1024, 2048, 4096, 8192});
}

TEST_CASE("malformed spaces are config errors") {
    CHECK_THROWS_AS(SearchSpace::from_json({{"params", json::object()}}), ConfigError);
    CHECK_THROWS_AS(SearchSpace::from_json({{"params", {{"lr", json::array()}}}}), ConfigError);
    CHECK_THROWS_AS(SearchSpace::from_json({{"strategy", "uniform"}, {"params", {{"lr", {1e-3}}}}}), ConfigError);
    CHECK_THROWS_AS(SearchSpace::from_json({{"strategy", "bayes"}, {"params", {{"lr", {1e-3}}}}}), ConfigError);
    const auto space = SearchSpace::from_json({{"params", {{"nonsense", {1}}}}});
    CHECK_THROWS_AS(apply_assignment(space, enumerate_trials(space)[0]), ConfigError);
}

TEST_CASE("search table is sorted and the best trial is its argmax") {
    const auto data = pairs(1, 16);
    const auto space = SearchSpace::from_json({{"strategy", "grid"},
                                               {"seed", 5},
                                               {"base", small_base()},
                                               {"params", {{"lr", {0.0, 1e-3, 3e-2}}, {"temperature", {0.05, 0.2}}}}});
    const auto result = run_search(space, data, data, 3);
    REQUIRE(result.table.size() == 6);
    REQUIRE(result.best.has_value());
    std::size_t argmax = 0;
    for (std::size_t i = 1; i < result.table.size(); ++i) {
        CHECK(result.table[i - 1].val_top25 >= result.table[i].val_top25);
        if (result.table[i].val_top25 > result.table[argmax].val_top25) argmax = i;
    }
    CHECK(argmax == 0);
    CHECK(result.best->best_val == result.table.front().val_top25);
    const json j = result.to_json();
    CHECK(j.at("best") == result.table.front().index);
    CHECK(j.at("v") == 1);
}

TEST_CASE("search outcomes do not depend on thread count") {
    const auto data = pairs(2, 16);
    const auto space = SearchSpace::from_json({{"strategy", "uniform"},
                                               {"budget", 4},
                                               {"seed", 9},
                                               {"base", small_base()},
                                               {"params", {{"lr", {{"min", 1e-4}, {"max", 1e-1}, {"log", true}}}}}});
    const auto serial = run_search(space, data, data, 1);
    const auto parallel = run_search(space, data, data, 4);
    CHECK(serial.to_json() == parallel.to_json());
    CHECK(model::encode_checkpoint(serial.best->best) == model::encode_checkpoint(parallel.best->best));
}

TEST_CASE("failing trials are recorded and all failing is an error") {
    const auto data = pairs(3, 8);
    log::ScopedCapture capture;
    // temperature 0.9 is out of range, so that trial fails at configuration.
    const auto space = SearchSpace::from_json(
        {{"base", small_base()}, {"params", {{"temperature", {0.1, 0.9}}}}});
    const auto result = run_search(space, data, data);
    REQUIRE(result.table.size() == 2);
    CHECK(result.table[0].ok);
    CHECK_FALSE(result.table[1].ok);
    CHECK(result.table[1].error.find("temperature") != std::string::npos);

    const auto bad = SearchSpace::from_json({{"base", small_base()}, {"params", {{"temperature", {0.8, 0.9}}}}});
    CHECK_THROWS_AS(run_search(bad, data, data), NumericError);
}
