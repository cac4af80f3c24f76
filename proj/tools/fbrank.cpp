// fbrank command-line front end.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "fbrank/checkpoint.hpp"
#include "fbrank/corpus.hpp"
#include "fbrank/embeddings.hpp"
#include "fbrank/error.hpp"
#include "fbrank/evalservice.hpp"
#include "fbrank/features.hpp"
#include "fbrank/fixture.hpp"
#include "fbrank/log.hpp"
#include "fbrank/pipeline.hpp"
#include "fbrank/probe.hpp"
#include "fbrank/rank.hpp"
#include "fbrank/search.hpp"
#include "fbrank/train.hpp"
#include "fbrank/util.hpp"

namespace fs = std::filesystem;
using namespace fbrank;
using nlohmann::json;

namespace {

void emit(const std::string& path, const std::string& bytes) {
    if (path.empty() || path == "-") {
        std::cout << bytes;
        return;
    }
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    io::write_file_atomic(path, bytes);
}

std::vector<int> parse_ks(const std::string& text) {
    std::vector<int> ks;
    for (const auto& part : split_string(text, ',')) {
        try {
            ks.push_back(std::stoi(trim(part)));
        } catch (const std::exception&) {
            throw ConfigError("bad k value '" + part + "'");
        }
    }
    if (ks.empty()) throw ConfigError("no k values given");
    return ks;
}

json read_json(const std::string& path) {
    try {
        return json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

embeddings::EmbeddingTable merged_tables(const std::vector<std::string>& dirs) {
    std::vector<embeddings::EmbeddingTable> parts;
    for (const auto& d : dirs) parts.push_back(embeddings::read_table(d));
    return embeddings::concatenate(std::move(parts));
}

std::vector<rank::ModelAnswer> read_answers(const std::string& path) {
    std::vector<rank::ModelAnswer> out;
    if (path.empty()) return out;
    const json j = read_json(path);
    try {
        for (const auto& a : j.at("answers")) out.push_back(rank::answer_from_json(a));
    } catch (const json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    return out;
}

evalservice::HttpServer* g_server = nullptr;
void on_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fbrank: contrastive context/feedback embeddings for spoken-dialogue feedback"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Progress messages on stderr");

    // -- corpus --------------------------------------------------------------
    auto* corpus_cmd = app.add_subcommand("corpus", "Feedback extraction and splits");
    corpus_cmd->require_subcommand(1);

    struct {
        std::vector<std::string> transcripts;
        std::string lexicon, labels, out = "-";
        corpus::ExtractionConfig cfg;
    } ex;
    auto* extract = corpus_cmd->add_subcommand("extract", "Extract feedback instances from JSON-Lines transcripts");
    extract->add_option("--transcripts", ex.transcripts, "Transcript files")->required()->check(CLI::ExistingFile);
    extract->add_option("--lexicon", ex.lexicon, "Lexicon file (default list when omitted)")->check(CLI::ExistingFile);
    extract->add_option("--labels", ex.labels, "Function label records")->check(CLI::ExistingFile);
    extract->add_option("--pre-silence", ex.cfg.pre_silence_s, "Same-channel silence before onset (s)")->capture_default_str();
    extract->add_option("--post-silence", ex.cfg.post_silence_s, "Same-channel silence after offset (s), 0 disables")
        ->capture_default_str();
    extract->add_option("--min-dur", ex.cfg.min_duration_s, "Minimum duration (s)")->capture_default_str();
    extract->add_option("--join-gap", ex.cfg.join_gap_s, "Max gap inside a multi-word candidate (s)")->capture_default_str();
    extract->add_option("-o,--out", ex.out, "Output instances file");

    struct {
        std::string instances, ratios = "0.8,0.1,0.1", out = "-", name = "corpus";
        std::uint64_t seed = 0;
    } sp;
    auto* split = corpus_cmd->add_subcommand("split", "Speaker/conversation-disjoint train/valid/test split");
    split->add_option("--instances", sp.instances, "Instances file from 'corpus extract'")->required()->check(CLI::ExistingFile);
    split->add_option("--ratios", sp.ratios, "train,valid,test")->capture_default_str();
    split->add_option("--seed", sp.seed)->capture_default_str();
    split->add_option("--corpus-name", sp.name)->capture_default_str();
    split->add_option("-o,--out", sp.out, "Output manifest");

    // -- train ---------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "Contrastive training");
    train_cmd->require_subcommand(1);
    struct {
        std::string config, space, manifest, features, out = "train_out";
        std::uint64_t seed = 0;
        std::size_t budget = 0;
        unsigned threads = 1;
    } tr;
    auto* train_run = train_cmd->add_subcommand("run", "Train one configuration");
    train_run->add_option("--config", tr.config, "Training config JSON")->required()->check(CLI::ExistingFile);
    auto* train_search = train_cmd->add_subcommand("search", "Hyperparameter search");
    train_search->add_option("--space", tr.space, "Search space JSON")->required()->check(CLI::ExistingFile);
    train_search->add_option("--budget", tr.budget, "Number of trials (overrides the space)");
    train_search->add_option("--threads", tr.threads)->capture_default_str();
    for (auto* c : {train_run, train_search}) {
        c->add_option("--manifest", tr.manifest)->required()->check(CLI::ExistingFile);
        c->add_option("--features", tr.features, "Feature index JSON")->required()->check(CLI::ExistingFile);
        c->add_option("--seed", tr.seed)->capture_default_str();
        c->add_option("-o,--out", tr.out, "Output directory")->capture_default_str();
    }

    // -- model ---------------------------------------------------------------
    auto* model_cmd = app.add_subcommand("model", "Checkpoint utilities");
    model_cmd->require_subcommand(1);
    struct {
        std::string checkpoint, manifest, features, split = "test", out;
        bool pooled = false;
    } me;
    auto* export_cmd = model_cmd->add_subcommand("export-embeddings", "Write context/feedback embedding tables");
    export_cmd->add_option("--checkpoint", me.checkpoint)->required()->check(CLI::ExistingFile);
    export_cmd->add_option("--manifest", me.manifest)->required()->check(CLI::ExistingFile);
    export_cmd->add_option("--features", me.features)->required()->check(CLI::ExistingFile);
    export_cmd->add_option("--split", me.split, "train|valid|test")->capture_default_str();
    export_cmd->add_flag("--pooled", me.pooled, "Export pooled encoder features instead of head outputs");
    export_cmd->add_option("-o,--out", me.out, "Output directory")->required();

    // -- rank ----------------------------------------------------------------
    auto* rank_cmd = app.add_subcommand("rank", "Ranking evaluation and trial curation");
    rank_cmd->require_subcommand(1);
    struct {
        std::vector<std::string> embeddings;
        std::size_t batch = 4096;
        std::string ks = "1,10,25,50", out = "-", manifest, answers_out, splits = "test";
        std::uint64_t seed = 0;
        int per_function = 24;
    } rk;
    auto* rank_eval = rank_cmd->add_subcommand("eval", "Top-k% accuracy in shuffled batches");
    rank_eval->add_option("--embeddings", rk.embeddings, "Embedding table directories")->required();
    rank_eval->add_option("--batch-size", rk.batch)->capture_default_str();
    rank_eval->add_option("--k", rk.ks, "Comma-separated k values (percent)")->capture_default_str();
    rank_eval->add_option("--seed", rk.seed)->capture_default_str();
    rank_eval->add_option("-o,--out", rk.out, "CSV output");
    auto* rank_curate = rank_cmd->add_subcommand("curate", "Balanced four-candidate trial sets");
    rank_curate->add_option("--manifest", rk.manifest)->required()->check(CLI::ExistingFile);
    rank_curate->add_option("--per-function", rk.per_function)->capture_default_str();
    rank_curate->add_option("--splits", rk.splits, "Comma-separated splits to draw from")->capture_default_str();
    rank_curate->add_option("--seed", rk.seed)->capture_default_str();
    rank_curate->add_option("--embeddings", rk.embeddings, "Tables for model answers");
    rank_curate->add_option("--answers", rk.answers_out, "Model answers output (needs --embeddings)");
    rank_curate->add_option("-o,--out", rk.out, "Trials JSON output");

    // -- probe ---------------------------------------------------------------
    auto* probe_cmd = app.add_subcommand("probe", "Function probing and rating correlation");
    probe_cmd->require_subcommand(1);
    struct {
        std::vector<std::string> embeddings, inputs;
        double C = 1.0;
        int folds = 10;
        std::uint64_t seed = 0;
        unsigned threads = 1;
        std::string out = "-", ratings, similarities;
    } pr;
    auto* probe_run = probe_cmd->add_subcommand("run", "Linear SVM with k-fold cross-validation");
    probe_run->add_option("--embeddings", pr.embeddings, "Embedding table directories")->required();
    probe_run->add_option("--input", pr.inputs, "feedback|context|concat (repeatable)");
    probe_run->add_option("--C", pr.C)->capture_default_str();
    probe_run->add_option("--folds", pr.folds)->capture_default_str();
    probe_run->add_option("--seed", pr.seed)->capture_default_str();
    probe_run->add_option("--threads", pr.threads)->capture_default_str();
    probe_run->add_option("-o,--out", pr.out, "CSV output");
    auto* probe_corr = probe_cmd->add_subcommand("correlate", "Pearson r between human ratings and model similarities");
    probe_corr->add_option("--ratings", pr.ratings)->required()->check(CLI::ExistingFile);
    probe_corr->add_option("--similarities", pr.similarities)->required()->check(CLI::ExistingFile);

    // -- serve ---------------------------------------------------------------
    struct {
        std::string config, trials, answers, media, state_dir, static_dir, host = "127.0.0.1";
        int port = 8080;
        std::uint64_t seed = 0;
    } sv;
    auto* serve = app.add_subcommand("serve", "Human-evaluation HTTP service");
    serve->add_option("--config", sv.config, "Pipeline config (uses its output_dir and service block)")
        ->check(CLI::ExistingFile);
    serve->add_option("--trials", sv.trials, "Trials JSON");
    serve->add_option("--answers", sv.answers, "Model answers JSON");
    serve->add_option("--media", sv.media, "Media index JSON");
    serve->add_option("--state-dir", sv.state_dir, "Event log directory");
    serve->add_option("--static", sv.static_dir, "UI bundle served at /");
    auto* host_opt = serve->add_option("--host", sv.host)->envname("FBRANK_HOST")->capture_default_str();
    auto* port_opt = serve->add_option("--port", sv.port, "0 picks a free port")->envname("FBRANK_PORT")->capture_default_str();
    serve->add_option("--seed", sv.seed)->capture_default_str();

    // -- pipeline ------------------------------------------------------------
    struct {
        std::string config, stages = "all", output_dir;
        std::optional<std::uint64_t> seed;
        unsigned threads = 0;
        bool print_hash = false;
    } pl;
    auto* pipe = app.add_subcommand("pipeline", "Run pipeline stages from a config file");
    pipe->add_option("--config", pl.config)->required()->check(CLI::ExistingFile);
    pipe->add_option("--stages", pl.stages, "all or extract,split,train,export,rank,probe,curate")->capture_default_str();
    pipe->add_option("--output-dir", pl.output_dir)->envname("FBRANK_OUTPUT_DIR");
    pipe->add_option("--seed", pl.seed, "Overrides the config seed");
    pipe->add_option("--threads", pl.threads);
    pipe->add_flag("--print-hash", pl.print_hash, "Print the config hash and exit");

    // -- fixture -------------------------------------------------------------
    fixture::FixtureOptions fx;
    std::string fixture_dir;
    bool no_text = false;
    auto* fix = app.add_subcommand("fixture", "Write a synthetic end-to-end fixture");
    fix->add_option("-o,--out", fixture_dir)->required();
    fix->add_option("--conversations", fx.conversations)->capture_default_str();
    fix->add_option("--blocks", fx.blocks)->capture_default_str();
    fix->add_option("--seed", fx.seed)->capture_default_str();
    fix->add_flag("--media", fx.media, "Also write a media index");
    fix->add_flag("--no-text", no_text, "Audio features only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    log::set_verbose(verbose);

    try {
        if (extract->parsed()) {
            const auto lexicon = ex.lexicon.empty() ? corpus::Lexicon::defaults() : corpus::Lexicon::from_file(ex.lexicon);
            std::vector<corpus::WordToken> tokens;
            for (const auto& p : ex.transcripts) {
                auto part = corpus::read_transcripts(p);
                tokens.insert(tokens.end(), part.begin(), part.end());
            }
            auto result = corpus::extract_feedback_instances(tokens, lexicon, ex.cfg);
            for (const auto& d : result.diagnostics) log::warn(d);
            if (!ex.labels.empty()) corpus::apply_labels(result.instances, corpus::read_labels(ex.labels));
            std::vector<corpus::ContextWindow> windows;
            for (const auto& inst : result.instances) windows.push_back(corpus::build_context(inst, tokens));
            const json header = {{"v", 1}, {"kind", "instances"}, {"lexicon_version", lexicon.version()}};
            emit(ex.out, header.dump() + "\n" + corpus::serialize_instances(result.instances, windows));
            std::cerr << result.instances.size() << " instances, " << result.diagnostics.size()
                      << " conversations rejected\n";
        } else if (split->parsed()) {
            const auto parts = split_string(sp.ratios, ',');
            if (parts.size() != 3) throw ConfigError("--ratios needs three comma-separated values");
            corpus::SplitRatios ratios;
            try {
                ratios = {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
            } catch (const std::exception&) {
                throw ConfigError("--ratios must be numeric");
            }
            std::vector<corpus::FeedbackInstance> instances;
            std::map<std::string, corpus::ContextWindow> windows;
            for (auto& [inst, w] : corpus::read_instances(sp.instances)) {
                if (w) windows[inst.id] = *w;
                instances.push_back(inst);
            }
            auto manifest = corpus::split_dataset(instances, ratios, sp.seed);
            manifest.corpus_name = sp.name;
            manifest.seed = sp.seed;
            const auto header = json::parse(io::read_lines(sp.instances).at(0));
            manifest.lexicon_version = header.value("lexicon_version", std::string());
            for (auto& e : manifest.entries)
                if (auto it = windows.find(e.instance.id); it != windows.end()) e.context = it->second;
            emit(sp.out, corpus::serialize_manifest(manifest));
        } else if (train_run->parsed() || train_search->parsed()) {
            const auto manifest = corpus::read_manifest(tr.manifest);
            const auto store = features::FeatureStore::open(tr.features);
            fs::create_directories(tr.out);
            train::TrainResult result;
            train::TrainConfig used;
            if (train_run->parsed()) {
                used = train::TrainConfig::from_json(read_json(tr.config));
                used.seed = tr.seed;
                const auto a = train::load_pairs(manifest, corpus::Split::train, store, used.modalities);
                const auto b = train::load_pairs(manifest, corpus::Split::valid, store, used.modalities);
                result = train::train_loop(a, b, used);
            } else {
                auto space = search::SearchSpace::from_json(read_json(tr.space));
                if (tr.budget) space.budget = tr.budget;
                space.seed = tr.seed;
                space.validate();
                const auto a = train::load_pairs(manifest, corpus::Split::train, store, space.base.modalities);
                const auto b = train::load_pairs(manifest, corpus::Split::valid, store, space.base.modalities);
                auto found = search::run_search(space, a, b, tr.threads);
                io::write_file_atomic((fs::path(tr.out) / "search.json").string(), found.to_json().dump(1) + "\n");
                used = found.table.front().config;
                used.seed = found.table.front().seed;
                result = std::move(*found.best);
            }
            const json meta = {{"train", used.to_json()}, {"best_epoch", result.best_epoch}, {"best_val", result.best_val}};
            model::save_checkpoint((fs::path(tr.out) / "model.fbck").string(), result.best, meta);
            io::write_file_atomic((fs::path(tr.out) / "history.csv").string(), train::history_csv(result.history));
            std::cerr << "best epoch " << result.best_epoch << ", validation top-" << used.validation_k << "% "
                      << result.best_val << "\n";
        } else if (export_cmd->parsed()) {
            json meta;
            const auto model = model::load_checkpoint(me.checkpoint, &meta);
            std::vector<features::Modality> mods;
            for (const auto& m : meta.at("train").at("modalities")) mods.push_back(features::parse_modality(m.get<std::string>()));
            const auto data = train::load_pairs(corpus::read_manifest(me.manifest), corpus::parse_split(me.split),
                                                features::FeatureStore::open(me.features), mods);
            embeddings::write_table(me.out, train::embed(model, data, me.pooled),
                                    {{"split", me.split}, {"kind", me.pooled ? "pooled" : "model"}});
            std::cerr << data.size() << " rows written to " << me.out << "\n";
        } else if (rank_eval->parsed()) {
            const auto ks = parse_ks(rk.ks);
            for (int k : ks) rank::MetricConfig{k, rk.batch}.validate();
            std::vector<pipeline::RankingRow> rows;
            for (const auto& dir : rk.embeddings) {
                const auto t = embeddings::read_table(dir);
                const auto results = rank::rank_in_batches(t.ids, t.context, t.feedback, rk.batch, rk.seed);
                pipeline::RankingRow row{fs::path(dir).filename().string(), results.size(),
                                         std::min(rk.batch, t.size()), {}};
                for (int k : ks) row.accuracy.push_back(rank::topk_percent_accuracy(results, k));
                rows.push_back(row);
            }
            pipeline::RankingRow random{"random_baseline", 0, rk.batch, {}};
            for (int k : ks)
                random.accuracy.push_back(100.0 * static_cast<double>(rank::topk_cutoff(k, rk.batch)) /
                                          static_cast<double>(rk.batch));
            rows.push_back(random);
            emit(rk.out, pipeline::ranking_csv(rows, ks, ""));
        } else if (rank_curate->parsed()) {
            const auto manifest = corpus::read_manifest(rk.manifest);
            std::set<corpus::Split> wanted;
            for (const auto& s : split_string(rk.splits, ',')) wanted.insert(corpus::parse_split(trim(s)));
            std::vector<rank::LabeledInstance> labelled;
            for (const auto& e : manifest.entries)
                if (wanted.count(e.split) && e.instance.function_label)
                    labelled.push_back({e.instance.id, e.instance.conversation_id, *e.instance.function_label});
            const auto trials = rank::curate_trials(labelled, rk.per_function, rk.seed);
            emit(rk.out, rank::serialize_trials(trials));
            if (!rk.answers_out.empty()) {
                if (rk.embeddings.empty()) throw ConfigError("--answers needs --embeddings");
                json arr = json::array();
                for (const auto& a : rank::model_trial_answers(trials, merged_tables(rk.embeddings)))
                    arr.push_back(rank::to_json(a));
                emit(rk.answers_out, json({{"v", 1}, {"answers", arr}}).dump(1) + "\n");
            }
            std::cerr << trials.size() << " trials\n";
        } else if (probe_run->parsed()) {
            const auto table = merged_tables(pr.embeddings);
            if (pr.inputs.empty()) pr.inputs = {"feedback", "context", "concat"};
            probe::ProbeConfig cfg;
            cfg.C = pr.C;
            cfg.folds = pr.folds;
            cfg.seed = pr.seed;
            cfg.validate();
            std::vector<std::pair<probe::ProbeInput, probe::ProbeResult>> rows;
            for (const auto& name : pr.inputs) {
                cfg.input = probe::parse_probe_input(name);
                const auto data = probe::probe_data(table, cfg.input);
                rows.emplace_back(cfg.input, probe::cross_validate(data.x, data.y, static_cast<int>(corpus::kNumFunctions),
                                                                   cfg, pr.threads));
            }
            emit(pr.out, probe::probe_csv(rows, cfg));
        } else if (probe_corr->parsed()) {
            const auto r = probe::correlate_ratings(probe::read_pair_scores(pr.ratings),
                                                    probe::read_pair_scores(pr.similarities));
            std::cout << r.to_json().dump() << "\n";
        } else if (serve->parsed()) {
            if (!sv.config.empty()) {
                const auto cfg = pipeline::PipelineConfig::load(sv.config);
                const fs::path out(cfg.output_dir);
                if (sv.trials.empty()) sv.trials = (out / "trials.json").string();
                if (sv.answers.empty() && fs::exists(out / "model_answers.json"))
                    sv.answers = (out / "model_answers.json").string();
                if (sv.media.empty()) sv.media = cfg.media_index;
                if (sv.state_dir.empty()) sv.state_dir = cfg.state_dir;
                if (sv.static_dir.empty()) sv.static_dir = cfg.static_dir;
                if (host_opt->count() == 0 && !std::getenv("FBRANK_HOST")) sv.host = cfg.host;
                if (port_opt->count() == 0 && !std::getenv("FBRANK_PORT")) sv.port = cfg.port;
                if (serve->get_option("--seed")->count() == 0) sv.seed = cfg.seed;
            }
            if (sv.trials.empty()) throw ConfigError("serve needs --trials or --config");
            if (!fs::exists(sv.trials)) throw DataError("missing " + sv.trials + "; run stage 'curate' first");
            const auto trials = rank::parse_trials(io::read_file(sv.trials));
            std::map<std::string, evalservice::MediaClip> media;
            if (!sv.media.empty()) media = evalservice::read_media_index(sv.media);
            evalservice::ServiceOptions so;
            so.state_dir = sv.state_dir;
            so.seed = sv.seed;
            evalservice::EvalService service(trials, media, read_answers(sv.answers), so);
            evalservice::ServerOptions server_opts{sv.host, sv.port, sv.static_dir};
            evalservice::HttpServer server(service, server_opts);
            const int port = server.bind();
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cout << "listening on http://" << sv.host << ":" << port << std::endl;
            server.listen();
            g_server = nullptr;
        } else if (pipe->parsed()) {
            auto cfg = pipeline::PipelineConfig::load(pl.config);
            if (!pl.output_dir.empty()) cfg.output_dir = pl.output_dir;
            if (pl.seed) cfg.seed = *pl.seed;
            if (pl.threads) cfg.threads = pl.threads;
            if (pl.print_hash) {
                std::cout << cfg.hash() << "\n";
                return 0;
            }
            for (const auto& r : pipeline::run_pipeline(cfg, pipeline::parse_stages(pl.stages))) {
                std::cout << pipeline::to_string(r.stage) << ":";
                for (const auto& a : r.artifacts) std::cout << " " << a;
                std::cout << "\n";
            }
        } else if (fix->parsed()) {
            fx.text = !no_text;
            const auto s = fixture::write_fixture(fixture_dir, fx);
            std::cout << s.config_path << "\n";
            std::cerr << s.tokens << " tokens, " << s.instances << " instances, " << s.labelled << " labels\n";
        }
    } catch (const Error& e) {
        std::cerr << "fbrank: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "fbrank: unexpected failure: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
