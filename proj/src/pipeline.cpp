#include "fbrank/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

#include "fbrank/checkpoint.hpp"
#include "fbrank/embeddings.hpp"
#include "fbrank/error.hpp"
#include "fbrank/features.hpp"
#include "fbrank/log.hpp"
#include "fbrank/util.hpp"

namespace fbrank::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using corpus::Split;

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::extract: return "extract";
        case Stage::split: return "split";
        case Stage::train: return "train";
        case Stage::export_embeddings: return "export";
        case Stage::rank: return "rank";
        case Stage::probe: return "probe";
        case Stage::curate: return "curate";
    }
    return "extract";
}

Stage parse_stage(std::string_view text) {
    for (Stage s : kAllStages)
        if (to_string(s) == text) return s;
    throw ConfigError("unknown stage '" + std::string(text) +
                      "' (expected extract, split, train, export, rank, probe or curate)");
}

std::vector<Stage> parse_stages(std::string_view text) {
    if (trim(text) == "all") return {kAllStages.begin(), kAllStages.end()};
    std::set<Stage> wanted;
    for (const auto& part : split_string(text, ',')) {
        const std::string name = trim(part);
        if (!name.empty()) wanted.insert(parse_stage(name));
    }
    if (wanted.empty()) throw ConfigError("no stage selected");
    return {wanted.begin(), wanted.end()};  // enum order is dependency order
}

// ---------------------------------------------------------------------------
// Config

namespace {

// Per-stage streams of the master seed.
enum : std::uint64_t { kSplitStream = 1, kTrainStream = 2, kRankStream = 4, kProbeStream = 5, kCurateStream = 6 };

std::string resolve(const std::string& base, const std::string& path) {
    if (path.empty()) return path;
    const fs::path p(path);
    return (p.is_absolute() ? p : fs::path(base) / p).lexically_normal().string();
}

std::vector<Split> parse_splits(const json& j, const char* what) {
    std::vector<Split> out;
    for (const auto& s : j) out.push_back(corpus::parse_split(s.get<std::string>()));
    if (out.empty()) throw ConfigError(std::string(what) + ".splits must not be empty");
    return out;
}

json splits_json(const std::vector<Split>& splits) {
    json a = json::array();
    for (Split s : splits) a.push_back(corpus::to_string(s));
    return a;
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (!key.empty() && key[0] == '_') continue;  // comments
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

// Files stand in for their content so the hash does not depend on where the
// workspace lives.
std::string content_token(const std::string& path) {
    if (path.empty()) return "";
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) return "missing:" + fs::path(path).filename().string();
    return hex64(fnv1a(io::read_file(path)));
}

}  // namespace

void PipelineConfig::validate(bool check_paths) const {
    if (transcripts.empty()) throw ConfigError("corpus.transcripts must list at least one file");
    if (feature_index.empty()) throw ConfigError("features.index is required");
    if (extraction.min_duration_s < 0 || extraction.pre_silence_s < 0 || extraction.post_silence_s < 0 ||
        extraction.join_gap_s < 0)
        throw ConfigError("extraction constraints must be non-negative");
    const double total = ratios.train + ratios.valid + ratios.test;
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("corpus.ratios must sum to 1");
    train.validate();
    if (search) search::SearchSpace::from_json(*search).validate();
    if (ks.empty()) throw ConfigError("rank.ks must not be empty");
    for (int k : ks) rank::MetricConfig{k, rank_batch_size}.validate();
    if (rank_batch_size < 2) throw ConfigError("rank.batch_size must be at least 2");
    probe::ProbeConfig pc;
    pc.C = probe_C;
    pc.folds = probe_folds;
    pc.validate();
    if (probe_inputs.empty()) throw ConfigError("probe.inputs must not be empty");
    if (per_function < 1) throw ConfigError("curate.per_function must be positive");
    if (port < 0 || port > 65535) throw ConfigError("service.port out of range");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (check_paths) {
        std::vector<std::string> paths = transcripts;
        paths.push_back(feature_index);
        if (!lexicon.empty()) paths.push_back(lexicon);
        if (!labels.empty()) paths.push_back(labels);
        for (const auto& p : paths)
            if (!fs::exists(p)) throw ConfigError("referenced path does not exist: " + p);
    }
}

json PipelineConfig::to_json() const {
    json inputs = json::array();
    for (auto p : probe_inputs) inputs.push_back(probe::to_string(p));
    json t = train.to_json();
    t.erase("seed");
    json j = {{"v", 1},
              {"seed", seed},
              {"output_dir", output_dir},
              {"threads", threads},
              {"corpus",
               {{"name", corpus_name},
                {"transcripts", transcripts},
                {"lexicon", lexicon},
                {"labels", labels},
                {"extraction",
                 {{"min_duration_s", extraction.min_duration_s},
                  {"pre_silence_s", extraction.pre_silence_s},
                  {"post_silence_s", extraction.post_silence_s},
                  {"join_gap_s", extraction.join_gap_s}}},
                {"ratios", {ratios.train, ratios.valid, ratios.test}}}},
              {"features", {{"index", feature_index}}},
              {"train", t},
              {"rank", {{"ks", ks}, {"batch_size", rank_batch_size}, {"splits", splits_json(rank_splits)}}},
              {"probe",
               {{"inputs", inputs}, {"C", probe_C}, {"folds", probe_folds}, {"splits", splits_json(probe_splits)}}},
              {"curate", {{"per_function", per_function}, {"splits", splits_json(curate_splits)}}},
              {"service",
               {{"host", host},
                {"port", port},
                {"static_dir", static_dir},
                {"media_index", media_index},
                {"state_dir", state_dir}}}};
    if (search) j["search"] = *search;
    return j;
}

PipelineConfig PipelineConfig::from_json(const json& j, const std::string& base_dir) {
    PipelineConfig c;
    try {
        reject_unknown(j, {"v", "seed", "output_dir", "threads", "corpus", "features", "train", "search", "rank",
                           "probe", "curate", "service"},
                       "pipeline config");
        if (j.value("v", 1) != 1) throw ConfigError("unsupported pipeline config version");
        c.seed = j.value("seed", c.seed);
        c.output_dir = resolve(base_dir, j.value("output_dir", c.output_dir));
        c.threads = j.value("threads", c.threads);

        const json corpus_j = j.value("corpus", json::object());
        reject_unknown(corpus_j, {"name", "transcripts", "lexicon", "labels", "extraction", "ratios"}, "corpus");
        c.corpus_name = corpus_j.value("name", c.corpus_name);
        if (corpus_j.contains("transcripts")) {
            const json& t = corpus_j.at("transcripts");
            if (t.is_string()) c.transcripts.push_back(resolve(base_dir, t.get<std::string>()));
            else
                for (const auto& p : t) c.transcripts.push_back(resolve(base_dir, p.get<std::string>()));
        }
        c.lexicon = resolve(base_dir, corpus_j.value("lexicon", std::string()));
        c.labels = resolve(base_dir, corpus_j.value("labels", std::string()));
        if (corpus_j.contains("extraction")) {
            const json& e = corpus_j.at("extraction");
            reject_unknown(e, {"min_duration_s", "pre_silence_s", "post_silence_s", "join_gap_s"}, "corpus.extraction");
            c.extraction.min_duration_s = e.value("min_duration_s", c.extraction.min_duration_s);
            c.extraction.pre_silence_s = e.value("pre_silence_s", c.extraction.pre_silence_s);
            c.extraction.post_silence_s = e.value("post_silence_s", c.extraction.post_silence_s);
            c.extraction.join_gap_s = e.value("join_gap_s", c.extraction.join_gap_s);
        }
        if (corpus_j.contains("ratios")) {
            const auto r = corpus_j.at("ratios").get<std::vector<double>>();
            if (r.size() != 3) throw ConfigError("corpus.ratios needs three entries (train, valid, test)");
            c.ratios = {r[0], r[1], r[2]};
        }

        const json feat = j.value("features", json::object());
        reject_unknown(feat, {"index"}, "features");
        c.feature_index = resolve(base_dir, feat.value("index", std::string()));

        if (j.contains("train")) {
            if (j.at("train").contains("seed"))
                log::warn("train.seed is ignored; the training seed derives from the pipeline seed");
            c.train = train::TrainConfig::from_json(j.at("train"));
        }
        if (j.contains("search")) c.search = j.at("search");

        const json rank_j = j.value("rank", json::object());
        reject_unknown(rank_j, {"ks", "batch_size", "splits"}, "rank");
        c.ks = rank_j.value("ks", c.ks);
        c.rank_batch_size = rank_j.value("batch_size", c.rank_batch_size);
        if (rank_j.contains("splits")) c.rank_splits = parse_splits(rank_j.at("splits"), "rank");

        const json probe_j = j.value("probe", json::object());
        reject_unknown(probe_j, {"inputs", "C", "folds", "splits"}, "probe");
        if (probe_j.contains("inputs")) {
            c.probe_inputs.clear();
            for (const auto& p : probe_j.at("inputs")) c.probe_inputs.push_back(probe::parse_probe_input(p.get<std::string>()));
        }
        c.probe_C = probe_j.value("C", c.probe_C);
        c.probe_folds = probe_j.value("folds", c.probe_folds);
        if (probe_j.contains("splits")) c.probe_splits = parse_splits(probe_j.at("splits"), "probe");

        const json cur = j.value("curate", json::object());
        reject_unknown(cur, {"per_function", "splits"}, "curate");
        c.per_function = cur.value("per_function", c.per_function);
        if (cur.contains("splits")) c.curate_splits = parse_splits(cur.at("splits"), "curate");

        const json svc = j.value("service", json::object());
        reject_unknown(svc, {"host", "port", "static_dir", "media_index", "state_dir"}, "service");
        c.host = svc.value("host", c.host);
        c.port = svc.value("port", c.port);
        c.static_dir = resolve(base_dir, svc.value("static_dir", std::string()));
        c.media_index = resolve(base_dir, svc.value("media_index", std::string()));
        c.state_dir = resolve(base_dir, svc.value("state_dir", std::string()));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed pipeline config: ") + e.what());
    }
    c.validate(false);
    return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    return from_json(j, fs::absolute(path).parent_path().string());
}

std::string PipelineConfig::hash() const {
    json j = to_json();
    j.erase("output_dir");
    j.erase("threads");
    j.erase("service");
    json& c = j["corpus"];
    json tokens = json::array();
    for (const auto& t : transcripts) tokens.push_back(content_token(t));
    c["transcripts"] = tokens;
    c["lexicon"] = lexicon.empty() ? json("default") : json(content_token(lexicon));
    c["labels"] = content_token(labels);
    j["features"]["index"] = content_token(feature_index);
    return hex64(fnv1a(j.dump()));
}

std::string stamp_line(const PipelineConfig& config) {
    return "# fbrank config=" + config.hash() + " seed=" + std::to_string(config.seed);
}

std::string ranking_csv(const std::vector<RankingRow>& rows, const std::vector<int>& ks, const std::string& stamp) {
    std::ostringstream out;
    if (!stamp.empty()) out << stamp << '\n';
    out << "model,contexts,batch_size";
    for (int k : ks) out << ",t" << k << "%";
    out << '\n';
    char buf[32];
    for (const auto& r : rows) {
        out << r.name << ',' << r.contexts << ',' << r.batch_size;
        for (double a : r.accuracy) {
            std::snprintf(buf, sizeof buf, ",%.2f", a);
            out << buf;
        }
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Stages

namespace {

struct Context {
    const PipelineConfig& config;
    fs::path out;
    std::string hash;
    std::set<Stage> running;

    [[nodiscard]] json stamp() const { return {{"config_hash", hash}, {"seed", config.seed}}; }
    [[nodiscard]] std::string stamp_line() const {
        return "# fbrank config=" + hash + " seed=" + std::to_string(config.seed);
    }

    // Upstream artifact path; a missing file names the stage that makes it.
    [[nodiscard]] std::string need(const std::string& rel, Stage producer) const {
        const fs::path p = out / rel;
        if (!fs::exists(p))
            throw DataError("missing " + p.string() + "; run stage '" + std::string(to_string(producer)) + "' first");
        return p.string();
    }

    void check_stamp(const std::string& what, const std::string& found) const {
        if (!found.empty() && found != hash)
            log::warn(what + " was produced by config " + found + ", current config is " + hash);
    }

    std::string write(const std::string& rel, const std::string& bytes) const {
        const fs::path p = out / rel;
        fs::create_directories(p.parent_path());
        io::write_file_atomic(p.string(), bytes);
        return rel;
    }
};

std::uint64_t stage_seed(const PipelineConfig& c, std::uint64_t stream) { return mix_seed(c.seed, stream); }

std::vector<std::string> stage_extract(const Context& ctx) {
    const auto& c = ctx.config;
    const corpus::Lexicon lexicon = c.lexicon.empty() ? corpus::Lexicon::defaults() : corpus::Lexicon::from_file(c.lexicon);
    std::vector<corpus::WordToken> tokens;
    for (const auto& path : c.transcripts) {
        auto part = corpus::read_transcripts(path);
        tokens.insert(tokens.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    auto result = corpus::extract_feedback_instances(tokens, lexicon, c.extraction);
    for (const auto& d : result.diagnostics) log::warn(d);
    if (!c.labels.empty()) {
        const auto labels = corpus::read_labels(c.labels);
        const std::size_t hit = corpus::apply_labels(result.instances, labels);
        log::info("labelled " + std::to_string(hit) + " of " + std::to_string(result.instances.size()) + " instances");
    }
    std::vector<corpus::ContextWindow> windows;
    windows.reserve(result.instances.size());
    for (const auto& inst : result.instances) windows.push_back(corpus::build_context(inst, tokens));

    json header = ctx.stamp();
    header["v"] = 1;
    header["kind"] = "instances";
    header["corpus"] = c.corpus_name;
    header["lexicon_version"] = lexicon.version();
    header["rejected_conversations"] = result.diagnostics.size();
    log::info("extracted " + std::to_string(result.instances.size()) + " feedback instances");
    return {ctx.write("instances.jsonl", header.dump() + "\n" + corpus::serialize_instances(result.instances, windows))};
}

std::vector<std::string> stage_split(const Context& ctx) {
    const auto& c = ctx.config;
    const std::string path = ctx.need("instances.jsonl", Stage::extract);
    const auto header = json::parse(io::read_lines(path).at(0));
    ctx.check_stamp("instances.jsonl", header.value("config_hash", std::string()));
    const auto rows = corpus::read_instances(path);
    std::vector<corpus::FeedbackInstance> instances;
    std::map<std::string, corpus::ContextWindow> windows;
    for (const auto& [inst, window] : rows) {
        if (window) windows[inst.id] = *window;
        instances.push_back(inst);
    }
    auto manifest = corpus::split_dataset(instances, c.ratios, stage_seed(c, kSplitStream));
    manifest.corpus_name = c.corpus_name;
    manifest.lexicon_version = header.value("lexicon_version", std::string());
    manifest.config_hash = ctx.hash;
    manifest.seed = c.seed;
    for (auto& e : manifest.entries)
        if (auto it = windows.find(e.instance.id); it != windows.end()) e.context = it->second;
    return {ctx.write("manifest.jsonl", corpus::serialize_manifest(manifest))};
}

corpus::DatasetManifest load_manifest(const Context& ctx) {
    auto m = corpus::read_manifest(ctx.need("manifest.jsonl", Stage::split));
    ctx.check_stamp("manifest.jsonl", m.config_hash);
    return m;
}

std::vector<std::string> stage_train(const Context& ctx) {
    const auto& c = ctx.config;
    const auto manifest = load_manifest(ctx);
    const auto store = features::FeatureStore::open(c.feature_index);
    const std::uint64_t seed = stage_seed(c, kTrainStream);

    std::vector<std::string> written;
    train::TrainResult result;
    train::TrainConfig used = c.train;
    if (c.search) {
        auto space = search::SearchSpace::from_json(*c.search);
        space.seed = seed;
        const auto mods = space.base.modalities;
        const auto tr = train::load_pairs(manifest, Split::train, store, mods);
        const auto va = train::load_pairs(manifest, Split::valid, store, mods);
        auto found = search::run_search(space, tr, va, c.threads);
        json doc = found.to_json();
        doc.update(ctx.stamp());
        written.push_back(ctx.write("search.json", doc.dump(1) + "\n"));
        used = found.table.front().config;
        used.seed = found.table.front().seed;
        result = std::move(*found.best);
    } else {
        used.seed = seed;
        const auto tr = train::load_pairs(manifest, Split::train, store, used.modalities);
        const auto va = train::load_pairs(manifest, Split::valid, store, used.modalities);
        result = train::train_loop(tr, va, used);
    }
    json meta = ctx.stamp();
    meta["train"] = used.to_json();
    meta["best_epoch"] = result.best_epoch;
    meta["best_val"] = result.best_val;
    const fs::path ck = ctx.out / "model.fbck";
    fs::create_directories(ctx.out);
    model::save_checkpoint(ck.string(), result.best, meta);
    written.push_back("model.fbck");
    written.push_back(ctx.write("history.csv", train::history_csv(result.history, ctx.stamp_line().substr(2))));
    return written;
}

std::vector<std::string> stage_export(const Context& ctx) {
    const auto& c = ctx.config;
    const auto manifest = load_manifest(ctx);
    json meta;
    const auto model = model::load_checkpoint(ctx.need("model.fbck", Stage::train), &meta);
    ctx.check_stamp("model.fbck", meta.value("config_hash", std::string()));
    const auto store = features::FeatureStore::open(c.feature_index);
    std::vector<features::Modality> mods;
    for (const auto& m : meta.at("train").at("modalities")) mods.push_back(features::parse_modality(m.get<std::string>()));

    std::vector<std::string> written;
    for (Split s : {Split::train, Split::valid, Split::test}) {
        const auto data = train::load_pairs(manifest, s, store, mods);
        if (data.size() == 0) {
            log::warn("split " + std::string(corpus::to_string(s)) + " is empty; nothing exported");
            continue;
        }
        json m = ctx.stamp();
        m["split"] = corpus::to_string(s);
        for (bool pooled : {false, true}) {
            m["kind"] = pooled ? "pooled" : "model";
            const std::string rel =
                pooled ? "embeddings/pooled/" + std::string(corpus::to_string(s)) : "embeddings/" + std::string(corpus::to_string(s));
            embeddings::write_table((ctx.out / rel).string(), train::embed(model, data, pooled), m);
            written.push_back(rel);
        }
    }
    return written;
}

embeddings::EmbeddingTable load_tables(const Context& ctx, const std::vector<Split>& splits, bool pooled) {
    std::vector<embeddings::EmbeddingTable> parts;
    for (Split s : splits) {
        const std::string rel = (pooled ? "embeddings/pooled/" : "embeddings/") + std::string(corpus::to_string(s));
        json meta;
        (void)ctx.need(rel + "/index.json", Stage::export_embeddings);
        parts.push_back(embeddings::read_table((ctx.out / rel).string(), &meta));
        ctx.check_stamp(rel, meta.value("config_hash", std::string()));
    }
    return embeddings::concatenate(std::move(parts));
}

bool have_tables(const Context& ctx, const std::vector<Split>& splits) {
    for (Split s : splits)
        if (!fs::exists(ctx.out / "embeddings" / std::string(corpus::to_string(s)) / "index.json")) return false;
    return true;
}

std::vector<std::string> stage_rank(const Context& ctx) {
    const auto& c = ctx.config;
    std::vector<RankingRow> rows;
    const std::uint64_t seed = stage_seed(c, kRankStream);
    for (Split s : c.rank_splits) {
        const auto table = load_tables(ctx, {s}, false);
        const auto results = rank::rank_in_batches(table.ids, table.context, table.feedback, c.rank_batch_size, seed);
        RankingRow row;
        row.name = "model/" + std::string(corpus::to_string(s));
        row.contexts = results.size();
        row.batch_size = std::min<std::size_t>(c.rank_batch_size, table.size());
        for (int k : c.ks) row.accuracy.push_back(rank::topk_percent_accuracy(results, k));
        rows.push_back(std::move(row));
    }
    RankingRow random;
    random.name = "random_baseline";
    random.batch_size = c.rank_batch_size;
    for (int k : c.ks)
        random.accuracy.push_back(100.0 * static_cast<double>(rank::topk_cutoff(k, c.rank_batch_size)) /
                                  static_cast<double>(c.rank_batch_size));
    rows.push_back(random);
    return {ctx.write("ranking.csv", ranking_csv(rows, c.ks, ctx.stamp_line()))};
}

std::vector<std::string> stage_probe(const Context& ctx) {
    const auto& c = ctx.config;
    std::vector<std::string> written;
    for (bool pooled : {false, true}) {
        const auto table = load_tables(ctx, c.probe_splits, pooled);
        probe::ProbeConfig pc;
        pc.C = c.probe_C;
        pc.folds = c.probe_folds;
        pc.seed = stage_seed(c, kProbeStream);
        std::vector<std::pair<probe::ProbeInput, probe::ProbeResult>> rows;
        for (auto input : c.probe_inputs) {
            pc.input = input;
            const auto data = probe::probe_data(table, input);
            if (data.y.size() < static_cast<std::size_t>(c.probe_folds))
                throw DataError("only " + std::to_string(data.y.size()) + " labelled instances for " +
                                std::to_string(c.probe_folds) + "-fold probing");
            rows.emplace_back(input, probe::cross_validate(data.x, data.y, static_cast<int>(corpus::kNumFunctions), pc,
                                                           c.threads));
        }
        written.push_back(ctx.write(pooled ? "probe_pooled.csv" : "probe.csv",
                                    ctx.stamp_line() + "\n" + probe::probe_csv(rows, pc)));
    }
    return written;
}

std::vector<std::string> stage_curate(const Context& ctx) {
    const auto& c = ctx.config;
    const auto manifest = load_manifest(ctx);
    std::set<Split> wanted(c.curate_splits.begin(), c.curate_splits.end());
    std::vector<rank::LabeledInstance> labelled;
    for (const auto& e : manifest.entries)
        if (wanted.count(e.split) && e.instance.function_label)
            labelled.push_back({e.instance.id, e.instance.conversation_id, *e.instance.function_label});
    const auto trials = rank::curate_trials(labelled, c.per_function, stage_seed(c, kCurateStream));

    json doc = json::parse(rank::serialize_trials(trials));
    doc.update(ctx.stamp());
    std::vector<std::string> written = {ctx.write("trials.json", doc.dump(1) + "\n")};

    if (!have_tables(ctx, c.curate_splits)) {
        log::warn("no exported embeddings for the curated splits; model_answers.json not written");
        return written;
    }
    const auto table = load_tables(ctx, c.curate_splits, false);
    json answers = json::array();
    std::size_t correct = 0;
    const auto model_answers = rank::model_trial_answers(trials, table);
    for (const auto& a : model_answers) {
        answers.push_back(rank::to_json(a));
        correct += a.correct;
    }
    json adoc = {{"v", 1}, {"answers", answers}};
    adoc.update(ctx.stamp());
    written.push_back(ctx.write("model_answers.json", adoc.dump(1) + "\n"));
    if (!model_answers.empty())
        log::info("model picks the true candidate in " + std::to_string(correct) + " of " +
                  std::to_string(model_answers.size()) + " trials");
    return written;
}

}  // namespace

std::vector<StageReport> run_pipeline(const PipelineConfig& config, const std::vector<Stage>& stages) {
    config.validate(true);
    Context ctx{config, fs::path(config.output_dir), config.hash(), {stages.begin(), stages.end()}};
    fs::create_directories(ctx.out);
    std::vector<Stage> ordered(ctx.running.begin(), ctx.running.end());
    std::vector<StageReport> reports;
    for (Stage s : ordered) {
        log::info("stage " + std::string(to_string(s)));
        StageReport r{s, {}};
        switch (s) {
            case Stage::extract: r.artifacts = stage_extract(ctx); break;
            case Stage::split: r.artifacts = stage_split(ctx); break;
            case Stage::train: r.artifacts = stage_train(ctx); break;
            case Stage::export_embeddings: r.artifacts = stage_export(ctx); break;
            case Stage::rank: r.artifacts = stage_rank(ctx); break;
            case Stage::probe: r.artifacts = stage_probe(ctx); break;
            case Stage::curate: r.artifacts = stage_curate(ctx); break;
        }
        reports.push_back(std::move(r));
    }
    return reports;
}

}  // namespace fbrank::pipeline
