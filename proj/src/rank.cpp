#include "fbrank/rank.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>

#include "fbrank/embeddings.hpp"
#include "fbrank/error.hpp"
#include "fbrank/log.hpp"
#include "fbrank/util.hpp"

namespace fbrank::rank {

using corpus::FunctionLabel;
using nlohmann::json;

Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& m, std::string_view what) {
    Eigen::MatrixXd out = m;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double norm = m.row(r).norm();
        if (!(norm > 0.0) || !std::isfinite(norm))
            throw DataError(std::string(what) + " row " + std::to_string(r) + " has zero or non-finite norm");
        out.row(r) /= norm;
    }
    return out;
}

RankingResult rank_candidates(std::string_view context_id, const Eigen::VectorXd& context,
                              const std::vector<std::string>& candidate_ids, const Eigen::MatrixXd& candidates,
                              std::string_view true_id) {
    if (static_cast<Eigen::Index>(candidate_ids.size()) != candidates.rows())
        throw ShapeError("candidate ids and embeddings differ in count");
    if (candidates.cols() != context.size()) throw ShapeError("candidate and context dimensions differ");
    const auto truth_it = std::find(candidate_ids.begin(), candidate_ids.end(), true_id);
    if (truth_it == candidate_ids.end())
        throw DataError("ground truth '" + std::string(true_id) + "' is not among the candidates");
    const auto truth = static_cast<std::size_t>(truth_it - candidate_ids.begin());

    const double cnorm = context.norm();
    if (!(cnorm > 0.0)) throw DataError("context " + std::string(context_id) + " has a zero-norm embedding");
    const Eigen::MatrixXd unit = normalize_rows(candidates, "candidate");
    const Eigen::VectorXd scores = unit * (context / cnorm);

    std::vector<std::size_t> order(candidate_ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = scores[static_cast<Eigen::Index>(a)];
        const double sb = scores[static_cast<Eigen::Index>(b)];
        if (sa != sb) return sa > sb;
        // among equal scores the ground truth goes last
        return a != truth && b == truth;
    });

    RankingResult r;
    r.context_id = std::string(context_id);
    r.batch_size = candidate_ids.size();
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        r.ordered.push_back(candidate_ids[order[pos]]);
        if (order[pos] == truth) r.ground_truth_rank = pos + 1;
    }
    return r;
}

void MetricConfig::validate() const {
    if (std::find(kStandardK.begin(), kStandardK.end(), k_percent) == kStandardK.end())
        throw ConfigError("k must be one of 1, 10, 25, 50 (got " + std::to_string(k_percent) + ")");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
}

std::size_t topk_cutoff(int k_percent, std::size_t batch_size) {
    if (k_percent < 1 || k_percent > 100) throw ConfigError("k percent must lie in [1, 100]");
    return std::max<std::size_t>(1, static_cast<std::size_t>(k_percent) * batch_size / 100);
}

double topk_percent_accuracy(const std::vector<RankingResult>& results, int k_percent) {
    if (results.empty()) throw DataError("no ranking results to score");
    std::size_t hits = 0;
    for (const auto& r : results)
        if (r.ground_truth_rank <= topk_cutoff(k_percent, r.batch_size)) ++hits;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(results.size());
}

std::vector<RankingResult> rank_in_batches(const std::vector<std::string>& ids, const Eigen::MatrixXd& contexts,
                                           const Eigen::MatrixXd& feedbacks, std::size_t batch_size,
                                           std::uint64_t seed) {
    const auto n = ids.size();
    if (contexts.rows() != static_cast<Eigen::Index>(n) || feedbacks.rows() != static_cast<Eigen::Index>(n))
        throw ShapeError("ids, contexts and feedbacks differ in count");
    if (contexts.cols() != feedbacks.cols()) throw ShapeError("context and feedback dimensions differ");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    const Eigen::MatrixXd ctx = normalize_rows(contexts, "context");
    const Eigen::MatrixXd fb = normalize_rows(feedbacks, "feedback");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<RankingResult> results;
    results.reserve(n);
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
        const std::size_t size = std::min(batch_size, n - begin);
        Eigen::MatrixXd bc(size, ctx.cols()), bf(size, fb.cols());
        for (std::size_t k = 0; k < size; ++k) {
            bc.row(static_cast<Eigen::Index>(k)) = ctx.row(static_cast<Eigen::Index>(order[begin + k]));
            bf.row(static_cast<Eigen::Index>(k)) = fb.row(static_cast<Eigen::Index>(order[begin + k]));
        }
        const Eigen::MatrixXd scores = bc * bf.transpose();
        for (std::size_t i = 0; i < size; ++i) {
            const double truth = scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i));
            std::size_t rank = 1;
            for (std::size_t j = 0; j < size; ++j)
                if (j != i && scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) >= truth) ++rank;
            results.push_back({ids[order[begin + i]], {}, rank, size});
        }
    }
    return results;
}

// ---------------------------------------------------------------------------
// Trials

std::string_view to_string(FunctionCondition c) {
    return c == FunctionCondition::same_function ? "same_function" : "different_function";
}

std::string_view to_string(ModalityCondition c) {
    return c == ModalityCondition::audio_only ? "audio_only" : "audio_text";
}

FunctionCondition parse_function_condition(std::string_view text) {
    if (text == "same_function") return FunctionCondition::same_function;
    if (text == "different_function") return FunctionCondition::different_function;
    throw DataError("unknown function condition '" + std::string(text) + "'");
}

ModalityCondition parse_modality_condition(std::string_view text) {
    if (text == "audio_only") return ModalityCondition::audio_only;
    if (text == "audio_text") return ModalityCondition::audio_text;
    throw DataError("unknown modality condition '" + std::string(text) + "'");
}

void check_trial(const TrialSet& t) {
    if (t.candidates.size() != 4 || t.candidate_labels.size() != 4)
        throw DataError("trial " + t.trial_id + " must have exactly four candidates");
    if (std::count(t.candidates.begin(), t.candidates.end(), t.true_id) != 1)
        throw DataError("trial " + t.trial_id + " does not contain its true candidate exactly once");
    std::vector<std::string> ids = t.candidates;
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw DataError("trial " + t.trial_id + " repeats a candidate");
    std::vector<FunctionLabel> labels = t.candidate_labels;
    std::sort(labels.begin(), labels.end());
    const auto distinct = static_cast<std::size_t>(std::unique(labels.begin(), labels.end()) - labels.begin());
    if (t.condition == FunctionCondition::same_function && distinct != 1)
        throw DataError("same-function trial " + t.trial_id + " mixes function labels");
    if (t.condition == FunctionCondition::different_function && distinct != 4)
        throw DataError("different-function trial " + t.trial_id + " repeats a function label");
}

std::vector<TrialSet> curate_trials(const std::vector<LabeledInstance>& instances, int per_function,
                                    std::uint64_t seed, ModalityCondition modality) {
    if (per_function < 1) throw ConfigError("per_function must be positive");
    std::map<FunctionLabel, std::vector<const LabeledInstance*>> by_label;
    for (const auto& inst : instances) by_label[inst.label].push_back(&inst);
    for (auto& [label, list] : by_label)
        std::sort(list.begin(), list.end(), [](const auto* a, const auto* b) { return a->id < b->id; });

    std::size_t available = static_cast<std::size_t>(per_function);
    for (FunctionLabel f : corpus::kAllFunctions) {
        const std::size_t count = by_label.count(f) ? by_label[f].size() : 0;
        if (count < 4)
            throw DataError("function " + std::string(corpus::to_string(f)) + " has only " + std::to_string(count) +
                            " labelled instances; at least 4 are needed");
        available = std::min(available, count);
    }
    if (available < static_cast<std::size_t>(per_function))
        log::warn("reducing per_function from " + std::to_string(per_function) + " to " + std::to_string(available) +
                  " for lack of labelled instances");

    Rng rng(seed);
    auto pick_distractor = [&](const std::vector<const LabeledInstance*>& pool, const LabeledInstance& context,
                               const std::vector<std::string>& taken) -> const LabeledInstance* {
        std::vector<const LabeledInstance*> eligible;
        for (const auto* p : pool)
            if (p->conversation_id != context.conversation_id &&
                std::find(taken.begin(), taken.end(), p->id) == taken.end())
                eligible.push_back(p);
        if (eligible.empty()) return nullptr;
        return eligible[rng.index(eligible.size())];
    };

    std::vector<TrialSet> trials;
    for (FunctionLabel f : corpus::kAllFunctions) {
        std::vector<const LabeledInstance*> contexts = by_label[f];
        rng.shuffle(contexts);
        contexts.resize(available);
        const std::size_t same_count = (available + 1) / 2;
        for (std::size_t k = 0; k < contexts.size(); ++k) {
            const LabeledInstance& ctx = *contexts[k];
            TrialSet t;
            t.context_id = ctx.id;
            t.true_id = ctx.id;
            t.modality = modality;
            t.condition = k < same_count ? FunctionCondition::same_function : FunctionCondition::different_function;
            std::vector<std::pair<std::string, FunctionLabel>> picks = {{ctx.id, f}};
            std::vector<std::string> taken = {ctx.id};

            std::vector<FunctionLabel> distractor_labels;
            if (t.condition == FunctionCondition::same_function) {
                distractor_labels.assign(3, f);
            } else {
                std::vector<FunctionLabel> others;
                for (FunctionLabel g : corpus::kAllFunctions)
                    if (g != f) others.push_back(g);
                rng.shuffle(others);
                distractor_labels.assign(others.begin(), others.begin() + 3);
            }
            for (FunctionLabel g : distractor_labels) {
                const LabeledInstance* d = pick_distractor(by_label[g], ctx, taken);
                if (!d)
                    throw DataError("no eligible " + std::string(corpus::to_string(g)) + " distractor for context " +
                                    ctx.id + " outside its conversation");
                picks.emplace_back(d->id, g);
                taken.push_back(d->id);
            }
            rng.shuffle(picks);
            for (const auto& [id, label] : picks) {
                t.candidates.push_back(id);
                t.candidate_labels.push_back(label);
            }
            trials.push_back(std::move(t));
        }
    }
    for (std::size_t i = 0; i < trials.size(); ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "t%03zu", i + 1);
        trials[i].trial_id = buf;
        check_trial(trials[i]);
    }
    return trials;
}

json to_json(const TrialSet& t) {
    json labels = json::array();
    for (auto l : t.candidate_labels) labels.push_back(corpus::to_string(l));
    return {{"v", 1},
            {"trial_id", t.trial_id},
            {"context_id", t.context_id},
            {"true_id", t.true_id},
            {"candidates", t.candidates},
            {"candidate_labels", labels},
            {"condition", to_string(t.condition)},
            {"modality", to_string(t.modality)}};
}

TrialSet trial_from_json(const json& j) {
    TrialSet t;
    try {
        t.trial_id = j.at("trial_id").get<std::string>();
        t.context_id = j.at("context_id").get<std::string>();
        t.true_id = j.at("true_id").get<std::string>();
        t.candidates = j.at("candidates").get<std::vector<std::string>>();
        for (const auto& l : j.at("candidate_labels")) t.candidate_labels.push_back(corpus::parse_function(l.get<std::string>()));
        t.condition = parse_function_condition(j.at("condition").get<std::string>());
        t.modality = parse_modality_condition(j.value("modality", std::string("audio_only")));
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed trial: ") + e.what());
    }
    check_trial(t);
    return t;
}

std::string serialize_trials(const std::vector<TrialSet>& trials) {
    json arr = json::array();
    for (const auto& t : trials) arr.push_back(to_json(t));
    return json({{"v", 1}, {"trials", arr}}).dump(1) + "\n";
}

std::vector<TrialSet> parse_trials(std::string_view text) {
    std::vector<TrialSet> trials;
    try {
        const json j = json::parse(text);
        for (const auto& t : j.at("trials")) trials.push_back(trial_from_json(t));
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed trials document: ") + e.what());
    }
    return trials;
}

std::vector<ModelAnswer> model_trial_answers(const std::vector<TrialSet>& trials,
                                             const embeddings::EmbeddingTable& table) {
    std::vector<ModelAnswer> answers;
    std::size_t unembedded = 0;
    std::string first_missing;
    for (const auto& t : trials) {
        const auto ctx = table.find(t.context_id);
        std::vector<std::size_t> rows;
        std::string missing = ctx ? std::string() : t.context_id;
        for (const auto& c : t.candidates) {
            const auto row = table.find(c);
            if (!row && missing.empty()) missing = c;
            rows.push_back(row.value_or(0));
        }
        if (!missing.empty()) {
            if (unembedded++ == 0) first_missing = "trial " + t.trial_id + " (" + missing + ")";
            continue;
        }
        const Eigen::VectorXd c = table.context.row(static_cast<Eigen::Index>(*ctx)).transpose();
        const double cnorm = c.norm();
        ModelAnswer a;
        a.trial_id = t.trial_id;
        bool degenerate = !(cnorm > 0.0);
        for (std::size_t k = 0; k < rows.size() && !degenerate; ++k) {
            const Eigen::VectorXd f = table.feedback.row(static_cast<Eigen::Index>(rows[k])).transpose();
            const double fnorm = f.norm();
            if (!(fnorm > 0.0)) degenerate = true;
            a.scores.push_back(c.dot(f) / (cnorm * fnorm));
        }
        if (degenerate) {
            log::warn("trial " + t.trial_id + " skipped: zero-norm embedding");
            continue;
        }
        a.choice = static_cast<std::size_t>(std::max_element(a.scores.begin(), a.scores.end()) - a.scores.begin());
        a.chosen_id = t.candidates[a.choice];
        a.correct = a.chosen_id == t.true_id;
        answers.push_back(std::move(a));
    }
    if (unembedded)
        log::warn(std::to_string(unembedded) + " trial(s) have no model answer, missing embeddings; first: " +
                  first_missing);
    return answers;
}

json to_json(const ModelAnswer& a) {
    return {{"trial_id", a.trial_id}, {"choice", a.choice}, {"chosen_id", a.chosen_id},
            {"scores", a.scores},     {"correct", a.correct}};
}

ModelAnswer answer_from_json(const json& j) {
    ModelAnswer a;
    try {
        a.trial_id = j.at("trial_id").get<std::string>();
        a.choice = j.at("choice").get<std::size_t>();
        a.chosen_id = j.at("chosen_id").get<std::string>();
        a.scores = j.at("scores").get<std::vector<double>>();
        a.correct = j.value("correct", false);
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed model answer: ") + e.what());
    }
    return a;
}

}  // namespace fbrank::rank
