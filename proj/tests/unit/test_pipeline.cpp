#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "fbrank/error.hpp"
#include "fbrank/fixture.hpp"
#include "fbrank/log.hpp"
#include "fbrank/pipeline.hpp"
#include "fbrank/rank.hpp"
#include "fbrank/util.hpp"

using namespace fbrank;
using namespace fbrank::pipeline;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("fbrank_pipe_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Small fixture shared by the tests below; written once per process.
const fs::path& fixture_dir() {
    static const fs::path dir = [] {
        auto d = scratch("fixture");
        fixture::FixtureOptions o;
        fixture::write_fixture(d.string(), o);
        return d;
    }();
    return dir;
}

PipelineConfig fixture_config(const std::string& out) {
    auto cfg = PipelineConfig::load((fixture_dir() / "pipeline.json").string());
    cfg.output_dir = out;
    return cfg;
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = io::read_file(e.path().string());
    return files;
}

}  // namespace

TEST_CASE("stage lists come back in dependency order") {
    CHECK(parse_stages("all").size() == 7);
    const auto s = parse_stages("probe, extract,rank");
    REQUIRE(s.size() == 3);
    CHECK(s[0] == Stage::extract);
    CHECK(s[1] == Stage::rank);
    CHECK(s[2] == Stage::probe);
    CHECK(parse_stage("export") == Stage::export_embeddings);
    CHECK_THROWS_AS(parse_stages("extract,nope"), ConfigError);
    CHECK_THROWS_AS(parse_stages(""), ConfigError);
}

TEST_CASE("config hash ignores output location and threads but not content") {
    const auto base = fixture_config("a");
    auto other = base;
    other.output_dir = "somewhere/else";
    other.threads = 7;
    other.port = 9999;
    CHECK(base.hash() == other.hash());

    other.seed = base.seed + 1;
    CHECK(base.hash() != other.hash());

    other = base;
    other.train.temperature *= 2;
    CHECK(base.hash() != other.hash());

    // same file contents under a different name hash the same
    const auto dir = scratch("hash");
    fs::copy_file(base.transcripts.front(), dir / "copy.jsonl");
    other = base;
    other.transcripts = {(dir / "copy.jsonl").string()};
    CHECK(base.hash() == other.hash());
    {
        std::ofstream f(dir / "copy.jsonl", std::ios::app);
        f << "\n";
    }
    CHECK(base.hash() != other.hash());
}

TEST_CASE("config documents reject unknown keys") {
    json j = json::parse(io::read_file((fixture_dir() / "pipeline.json").string()));
    j["_comment"] = "ignored";
    CHECK_NOTHROW(PipelineConfig::from_json(j, fixture_dir().string()));
    j["rnak"] = json::object();
    CHECK_THROWS_AS(PipelineConfig::from_json(j, fixture_dir().string()), ConfigError);
    j.erase("rnak");
    j["rank"]["batch_size"] = 1;
    CHECK_THROWS_AS(PipelineConfig::from_json(j, fixture_dir().string()), ConfigError);
}

TEST_CASE("normalised config round trips") {
    const auto cfg = fixture_config("x");
    const auto again = PipelineConfig::from_json(cfg.to_json(), ".");
    CHECK(again.hash() == cfg.hash());
}

TEST_CASE("single stage runs write only their own artifact") {
    const auto out = scratch("extract_only");
    const auto cfg = fixture_config(out.string());
    const auto reports = run_pipeline(cfg, {Stage::extract});
    REQUIRE(reports.size() == 1);
    const auto files = tree(out);
    REQUIRE(files.size() == 1);
    CHECK(files.count("instances.jsonl") == 1);
    const auto header = json::parse(io::read_lines((out / "instances.jsonl").string()).at(0));
    CHECK(header.at("config_hash") == cfg.hash());
    CHECK(header.at("seed") == cfg.seed);
}

TEST_CASE("missing upstream artifact names the stage to run") {
    const auto out = scratch("missing");
    const auto cfg = fixture_config(out.string());
    try {
        run_pipeline(cfg, {Stage::rank});
        FAIL("expected a data error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("run stage 'export' first") != std::string::npos);
        CHECK(e.exit_code() == 3);
    }
    try {
        run_pipeline(cfg, {Stage::split});
        FAIL("expected a data error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("'extract'") != std::string::npos);
    }
}

TEST_CASE("full run on the fixture, then a byte-identical rerun") {
    const auto a = scratch("full_a");
    const auto b = scratch("full_b");
    auto cfg = fixture_config(a.string());
    run_pipeline(cfg, parse_stages("all"));

    const auto ranking = io::read_lines((a / "ranking.csv").string());
    REQUIRE(ranking.size() >= 4);
    CHECK(ranking[0] == stamp_line(cfg));
    CHECK(ranking[1] == "model,contexts,batch_size,t1%,t10%,t25%,t50%");
    CHECK(ranking.back().rfind("random_baseline,", 0) == 0);
    // the shared latent code makes the fixture easy: top-1 well above 1/32
    const auto fields = split_string(ranking[3], ',');
    CHECK(std::stod(fields.at(3)) > 50.0);

    const auto trials = rank::parse_trials(io::read_file((a / "trials.json").string()));
    CHECK(trials.size() == 240);
    std::map<rank::FunctionCondition, int> by_condition;
    for (const auto& t : trials) ++by_condition[t.condition];
    CHECK(by_condition[rank::FunctionCondition::same_function] == 120);
    CHECK(by_condition[rank::FunctionCondition::different_function] == 120);

    CHECK(fs::exists(a / "model.fbck"));
    CHECK(fs::exists(a / "probe.csv"));
    CHECK(fs::exists(a / "probe_pooled.csv"));
    CHECK(fs::exists(a / "embeddings" / "test" / "index.json"));

    cfg.output_dir = b.string();
    cfg.threads = 1;
    run_pipeline(cfg, parse_stages("all"));
    const auto ta = tree(a);
    const auto tb = tree(b);
    REQUIRE(ta.size() == tb.size());
    for (const auto& [name, bytes] : ta) {
        INFO(name);
        REQUIRE(tb.count(name) == 1);
        CHECK(bytes == tb.at(name));
    }
}

TEST_CASE("a changed config warns when reusing stale artifacts") {
    const auto out = scratch("stale");
    auto cfg = fixture_config(out.string());
    run_pipeline(cfg, {Stage::extract, Stage::split});
    cfg.per_function = 2;
    log::ScopedCapture capture;
    run_pipeline(cfg, {Stage::curate});
    CHECK(capture.contains("config"));
    CHECK(fs::exists(out / "trials.json"));
    CHECK_FALSE(fs::exists(out / "model_answers.json"));
}
