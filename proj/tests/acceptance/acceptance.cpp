// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   acceptance [--only name[,name...]]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "../oracles.hpp"
#include "fbrank/corpus.hpp"
#include "fbrank/error.hpp"
#include "fbrank/fixture.hpp"
#include "fbrank/log.hpp"
#include "fbrank/pipeline.hpp"
#include "fbrank/probe.hpp"
#include "fbrank/rank.hpp"
#include "fbrank/train.hpp"
#include "fbrank/util.hpp"

using namespace fbrank;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Eigen::MatrixXd normal_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

model::SegmentSummary summary(Rng& rng, const model::ModelSpec& spec) {
    model::SegmentSummary s;
    for (std::size_t m = 0; m < spec.layers.size(); ++m) s.per_modality.push_back(normal_matrix(rng, spec.layers[m], spec.dims[m]));
    return s;
}

// ---------------------------------------------------------------------------

Outcome gradient_integrity() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(1000 + seed);
        model::ModelSpec spec;
        spec.modalities = {features::Modality::audio};
        spec.layers = {3};
        spec.dims = {5};
        if (seed % 2) {
            spec.modalities.push_back(features::Modality::text);
            spec.layers.push_back(2);
            spec.dims.push_back(4);
        }
        if (seed % 3 == 1) spec.hidden_dims = {6};
        if (seed % 3 == 2) spec.hidden_dims = {7, 5};
        spec.output_dim = 4;
        auto model = model::make_dual_encoder(spec, 0.05 + 0.1 * rng.uniform(), true, seed);
        for (auto* tower : {&model.context, &model.feedback})
            for (auto& w : tower->pooling)
                for (Eigen::Index i = 0; i < w.logits.size(); ++i) w.logits[i] = rng.normal();
        const std::size_t n = 3 + seed % 4;
        std::vector<model::SegmentSummary> ctx, fb;
        for (std::size_t i = 0; i < n; ++i) {
            ctx.push_back(summary(rng, spec));
            fb.push_back(summary(rng, spec));
        }
        std::vector<const model::SegmentSummary*> cp, fp;
        for (std::size_t i = 0; i < n; ++i) {
            cp.push_back(&ctx[i]);
            fp.push_back(&fb[i]);
        }
        auto tape = model::zeros_like(model);
        train::batch_loss(model, cp, fp, &tape);
        const auto params = model::parameter_views(model);
        const auto grads = model::parameter_views(std::as_const(tape));
        std::vector<double> analytic, numeric;
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < params[k].size(); ++i) {
                analytic.push_back(grads[k][i]);
                numeric.push_back(oracle::central_difference(params[k][i], 1e-6,
                                                             [&] { return train::batch_loss(model, cp, fp, nullptr); }));
            }
        worst = std::max(worst, oracle::relative_error(analytic, numeric));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {worst < 1e-4 && secs < 10.0,
            "20 seeds, worst relative error " + fmt("%.2e", worst) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome loss_oracles() {
    log::ScopedCapture quiet;
    double worst = 0.0;
    for (int n : {2, 8, 256}) {
        const auto r = train::symmetric_info_nce({Eigen::MatrixXd::Zero(n, n)}, 0.07);
        worst = std::max(worst, std::abs(r.loss - std::log(static_cast<double>(n))));
    }
    const auto id = train::symmetric_info_nce({Eigen::MatrixXd::Identity(2, 2)}, 1.0);
    const double id_err = std::abs(id.loss - std::log1p(std::exp(-1.0)));
    const auto one = train::symmetric_info_nce({Eigen::MatrixXd::Constant(1, 1, 0.3)}, 0.07);
    return {worst < 1e-9 && id_err < 1e-9 && one.loss == 0.0,
            "zero sims |L - ln N| <= " + fmt("%.1e", worst) + ", identity N=2 err " + fmt("%.1e", id_err) +
                ", N=1 loss " + fmt("%g", one.loss)};
}

Outcome random_baseline() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(77);
    const std::size_t n = 5000;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("r" + std::to_string(i));
    const auto ctx = normal_matrix(rng, n, 64);
    const auto fb = normal_matrix(rng, n, 64);
    const auto results = rank::rank_in_batches(ids, ctx, fb, 100, 5);
    bool ok = results.size() == n;
    std::string detail = std::to_string(results.size()) + " contexts, batch 100:";
    for (int k : rank::kStandardK) {
        const double acc = rank::topk_percent_accuracy(results, k);
        ok = ok && std::abs(acc - k) <= 4.0;
        detail += " top-" + std::to_string(k) + "% " + fmt("%.2f", acc);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ok = ok && secs < 30.0;
    return {ok, detail + ", " + fmt("%.2f", secs) + " s"};
}

Outcome synthetic_learnability() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(2718);
    const int layers = 3, dim = 24;
    const Eigen::MatrixXd transform = normal_matrix(rng, dim, dim) / std::sqrt(static_cast<double>(dim));
    auto make = [&](std::size_t n, const std::string& prefix) {
        train::PairDataset d;
        for (std::size_t i = 0; i < n; ++i) {
            model::SegmentSummary f, c;
            const Eigen::MatrixXd x = normal_matrix(rng, layers, dim);
            Eigen::MatrixXd y = x * transform;
            const double scale = std::sqrt(y.squaredNorm() / static_cast<double>(y.size()));
            y += 0.05 * scale * normal_matrix(rng, layers, dim);
            f.per_modality.push_back(x);
            c.per_modality.push_back(y);
            d.ids.push_back(prefix + std::to_string(i));
            d.conversations.push_back(prefix + std::to_string(i));
            d.labels.push_back(std::nullopt);
            d.contexts.push_back(std::move(c));
            d.feedbacks.push_back(std::move(f));
        }
        return d;
    };
    const auto train_set = make(512, "a");
    const auto held_out = make(512, "b");

    // the generating transform applied to the feedback side
    Eigen::MatrixXd oc(512, dim), of(512, dim);
    for (Eigen::Index i = 0; i < 512; ++i) {
        oc.row(i) = held_out.contexts[i].per_modality[0].colwise().mean();
        of.row(i) = held_out.feedbacks[i].per_modality[0].colwise().mean() * transform;
    }
    const double oracle_acc = rank::topk_percent_accuracy(rank::rank_in_batches(held_out.ids, oc, of, 64, 3), 25);

    train::TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.optimizer.lr = 1e-2;
    cfg.temperature = 0.07;
    cfg.output_dim = dim;
    cfg.max_epochs = 300;
    cfg.patience = 300;
    cfg.validation_k = 25;
    cfg.seed = 11;
    log::ScopedCapture quiet;
    const auto result = train::train_loop(train_set, held_out, cfg);
    const double train_acc = train::evaluate(result.best, train_set, 64, 25, train::evaluation_seed(cfg.seed));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {result.best_val >= 90.0 && train_acc >= 90.0 && secs < 300.0,
            "top-25% held-out " + fmt("%.2f", result.best_val) + ", train " + fmt("%.2f", train_acc) +
                " (oracle " + fmt("%.2f", oracle_acc) + "), best epoch " + std::to_string(result.best_epoch) + "/" +
                std::to_string(result.history.size()) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome extraction_oracle() {
    const auto lexicon = corpus::Lexicon::defaults();
    std::size_t transcripts = 0, instances = 0, mismatches = 0, splits_checked = 0, straddles = 0;
    log::ScopedCapture quiet;
    for (std::uint64_t batch = 0; batch < 50; ++batch) {
        Rng rng(batch);
        std::vector<corpus::WordToken> tokens;
        for (int c = 0; c < 20; ++c, ++transcripts) {
            auto conv = oracle::random_transcript(rng, "b" + std::to_string(batch) + "c" + std::to_string(c));
            // a small speaker pool so that conversations get linked
            const std::string spk[2] = {"s" + std::to_string(rng.index(30)), "s" + std::to_string(rng.index(30))};
            for (auto& t : conv) t.speaker_id = spk[static_cast<int>(t.channel)];
            if (spk[0] == spk[1])
                for (auto& t : conv) t.speaker_id += t.channel == corpus::Channel::A ? "a" : "b";
            tokens.insert(tokens.end(), conv.begin(), conv.end());
        }
        corpus::ExtractionConfig cfg;
        if (batch % 2) cfg.post_silence_s = 0.0;
        const auto res = corpus::extract_feedback_instances(tokens, lexicon, cfg);
        std::vector<oracle::Span> got;
        for (const auto& f : res.instances)
            got.push_back({f.conversation_id, static_cast<int>(f.channel), f.start_s, f.end_s});
        std::sort(got.begin(), got.end());
        const auto want = oracle::brute_force_extract(tokens, lexicon.entries(), cfg.min_duration_s, cfg.pre_silence_s,
                                                      cfg.post_silence_s, cfg.join_gap_s);
        if (got != want) ++mismatches;
        instances += got.size();

        corpus::DatasetManifest m;
        try {
            m = corpus::split_dataset(res.instances, {0.8, 0.1, 0.1}, batch);
        } catch (const DataError&) {
            continue;  // too few independent groups for three splits
        }
        ++splits_checked;
        std::map<std::string, std::set<corpus::Split>> seen;
        for (const auto& e : m.entries) {
            seen["c:" + e.instance.conversation_id].insert(e.split);
            seen["s:" + e.instance.speaker_id].insert(e.split);
            seen["s:" + e.instance.interlocutor_id].insert(e.split);
        }
        for (const auto& [key, s] : seen) straddles += s.size() > 1;
    }
    return {mismatches == 0 && straddles == 0 && splits_checked > 0,
            std::to_string(transcripts) + " transcripts, " + std::to_string(instances) + " instances, " +
                std::to_string(mismatches) + " mismatching batches; " + std::to_string(splits_checked) +
                " splits, " + std::to_string(straddles) + " straddling speakers/conversations"};
}

Outcome probe_sanity() {
    Rng rng(31);
    const int k = 10, per = 40, d = 16;
    Eigen::MatrixXd x(k * per, d);
    std::vector<int> y;
    for (int c = 0; c < k; ++c)
        for (int i = 0; i < per; ++i) {
            for (int j = 0; j < d; ++j) x(c * per + i, j) = 0.6 * rng.normal() + (j == c ? 4.0 : 0.0);
            y.push_back(c);
        }
    probe::ProbeConfig cfg;
    cfg.folds = 10;
    const auto sep = probe::cross_validate(x, y, k, cfg, 4);
    auto shuffled = y;
    rng.shuffle(shuffled);
    const auto shuf = probe::cross_validate(x, shuffled, k, cfg, 4);
    const auto r = probe::pearson_correlation({1, 2, 3}, {1, 3, 2});
    const double r_err = std::abs(r.r - 0.5);
    const double oracle_err = std::abs(oracle::pearson_r({1, 2, 3}, {1, 3, 2}) - 0.5);
    return {sep.mean_accuracy >= 95.0 && std::abs(shuf.mean_accuracy - 10.0) <= 5.0 && r_err < 1e-9 && oracle_err < 1e-9,
            "separable " + fmt("%.2f", sep.mean_accuracy) + "%, shuffled " + fmt("%.2f", shuf.mean_accuracy) +
                "%, pearson r " + fmt("%.12f", r.r)};
}

Outcome trial_curation() {
    std::vector<rank::LabeledInstance> pool;
    std::map<std::string, std::pair<std::string, corpus::FunctionLabel>> info;
    std::size_t n = 0;
    for (auto f : corpus::kAllFunctions)
        for (int i = 0; i < 36; ++i, ++n) {
            const std::string id = std::string(corpus::to_string(f)) + std::to_string(i);
            const std::string conv = "c" + std::to_string(n % 11);
            pool.push_back({id, conv, f});
            info[id] = {conv, f};
        }
    log::ScopedCapture quiet;
    const auto trials = rank::curate_trials(pool, 24, 240);
    std::map<corpus::FunctionLabel, int> per_function;
    std::map<rank::FunctionCondition, int> per_condition;
    std::set<std::string> trial_ids, contexts;
    std::size_t broken = 0;
    for (const auto& t : trials) {
        trial_ids.insert(t.trial_id);
        contexts.insert(t.context_id);
        const auto& [conv, label] = info.at(t.context_id);
        ++per_function[label];
        ++per_condition[t.condition];
        bool ok = t.candidates.size() == 4 && t.true_id == t.context_id &&
                  std::count(t.candidates.begin(), t.candidates.end(), t.true_id) == 1;
        std::set<corpus::FunctionLabel> labels;
        std::set<std::string> unique(t.candidates.begin(), t.candidates.end());
        ok = ok && unique.size() == 4;
        for (std::size_t i = 0; ok && i < t.candidates.size(); ++i) {
            const auto& [cconv, clabel] = info.at(t.candidates[i]);
            labels.insert(clabel);
            ok = ok && clabel == t.candidate_labels[i];
            if (t.candidates[i] != t.true_id) ok = ok && cconv != conv;
        }
        if (t.condition == rank::FunctionCondition::same_function)
            ok = ok && labels.size() == 1 && *labels.begin() == label;
        else
            ok = ok && labels.size() == 4;
        broken += !ok;
    }
    bool balanced = true;
    for (auto f : corpus::kAllFunctions) balanced = balanced && per_function[f] == 24;
    const int same = per_condition[rank::FunctionCondition::same_function];
    const int diff = per_condition[rank::FunctionCondition::different_function];
    return {trials.size() == 240 && trial_ids.size() == 240 && balanced && same == 120 && diff == 120 && broken == 0,
            std::to_string(trials.size()) + " trials, " + std::to_string(same) + " same / " + std::to_string(diff) +
                " different, 24 per function: " + (balanced ? "yes" : "no") + ", " + std::to_string(broken) +
                " trials violate an invariant"};
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = io::read_file(e.path().string());
    return files;
}

Outcome determinism() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto root = fs::temp_directory_path() / "fbrank_acceptance_determinism";
    fs::remove_all(root);
    fixture::FixtureOptions opts;
    opts.seed = 5;
    log::ScopedCapture quiet;
    const auto fx = fixture::write_fixture((root / "fixture").string(), opts);
    auto cfg = pipeline::PipelineConfig::load(fx.config_path);
    std::map<std::string, std::string> runs[2];
    for (int r = 0; r < 2; ++r) {
        cfg.output_dir = (root / ("run" + std::to_string(r))).string();
        cfg.threads = r == 0 ? 1 : 4;
        pipeline::run_pipeline(cfg, pipeline::parse_stages("all"));
        runs[r] = tree(cfg.output_dir);
    }
    std::size_t differ = 0;
    for (const auto& [name, bytes] : runs[0]) {
        auto it = runs[1].find(name);
        differ += it == runs[1].end() || it->second != bytes;
    }
    differ += runs[1].size() - std::min(runs[1].size(), runs[0].size());
    bool key_files = true;
    for (const char* f : {"manifest.jsonl", "ranking.csv", "probe.csv", "history.csv", "model.fbck", "trials.json"})
        key_files = key_files && runs[0].count(f);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fs::remove_all(root);
    return {differ == 0 && key_files,
            std::to_string(runs[0].size()) + " artifacts per run (1 vs 4 threads), " + std::to_string(differ) +
                " differ, " + fmt("%.1f", secs) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient_integrity", gradient_integrity},
        {"loss_oracles", loss_oracles},
        {"random_baseline", random_baseline},
        {"synthetic_learnability", synthetic_learnability},
        {"extraction_oracle", extraction_oracle},
        {"probe_sanity", probe_sanity},
        {"trial_curation", trial_curation},
        {"determinism", determinism},
    };
    std::set<std::string> only;
    if (argc == 3 && std::string(argv[1]) == "--only")
        for (const auto& s : split_string(argv[2], ',')) only.insert(s);

    int failed = 0;
    for (const auto& [name, run] : criteria) {
        if (!only.empty() && !only.count(name)) continue;
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    }
    return failed ? 1 : 0;
}
