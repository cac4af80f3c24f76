#include <doctest.h>

#include <cmath>
#include <set>

#include "../oracles.hpp"
#include "fbrank/embeddings.hpp"
#include "fbrank/error.hpp"
#include "fbrank/log.hpp"
#include "fbrank/rank.hpp"

using namespace fbrank;
using namespace fbrank::rank;
using corpus::FunctionLabel;

namespace {

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

std::vector<std::string> make_ids(std::size_t n) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("i" + std::to_string(i));
    return ids;
}

std::vector<double> row_vec(const Eigen::MatrixXd& m, Eigen::Index r) {
    std::vector<double> out(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[c] = m(r, c);
    return out;
}

RankingResult with_rank(std::size_t rank, std::size_t batch) {
    RankingResult r;
    r.ground_truth_rank = rank;
    r.batch_size = batch;
    return r;
}

// Ten functions, `per` instances each, spread over conversations c0..c7.
std::vector<LabeledInstance> labelled_pool(std::size_t per) {
    std::vector<LabeledInstance> out;
    std::size_t n = 0;
    for (FunctionLabel f : corpus::kAllFunctions)
        for (std::size_t i = 0; i < per; ++i, ++n)
            out.push_back({std::string(corpus::to_string(f)) + "_" + std::to_string(i), "c" + std::to_string(n % 8), f});
    return out;
}

}  // namespace

TEST_CASE("self-similar orthonormal batch ranks every truth first") {
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(6, 6);
    const auto ids = make_ids(6);
    for (Eigen::Index i = 0; i < 6; ++i) {
        const auto r = rank_candidates(ids[i], eye.row(i).transpose(), ids, eye, ids[i]);
        CHECK(r.ground_truth_rank == 1);
        CHECK(r.ordered.front() == ids[i]);
        CHECK(r.batch_size == 6);
    }
}

TEST_CASE("identical candidates rank the truth last") {
    const Eigen::MatrixXd same = Eigen::MatrixXd::Ones(5, 3);
    const auto ids = make_ids(5);
    const auto r = rank_candidates("c", Eigen::Vector3d(1, 2, 3), ids, same, ids[2]);
    CHECK(r.ground_truth_rank == 5);
    CHECK(r.ordered.back() == ids[2]);
}

TEST_CASE("hand-sorted four candidate example") {
    // Unit context along e0; candidate i has cosine s_i with it.
    const std::vector<double> scores = {0.9, 0.2, 0.7, 0.4};
    Eigen::MatrixXd cand(4, 2);
    for (int i = 0; i < 4; ++i) cand.row(i) << scores[i], std::sqrt(1 - scores[i] * scores[i]);
    const auto ids = make_ids(4);
    const auto r = rank_candidates("c", Eigen::Vector2d(1, 0), ids, cand, ids[2]);
    CHECK(r.ground_truth_rank == 2);
    CHECK(r.ordered == std::vector<std::string>{"i0", "i2", "i3", "i1"});
}

TEST_CASE("ranking rejects zero norms and missing truth") {
    const auto ids = make_ids(2);
    Eigen::MatrixXd cand = Eigen::MatrixXd::Identity(2, 2);
    CHECK_THROWS_AS(rank_candidates("c", Eigen::Vector2d(0, 0), ids, cand, ids[0]), DataError);
    CHECK_THROWS_AS(rank_candidates("c", Eigen::Vector2d(1, 0), ids, cand, "nope"), DataError);
    cand.row(1).setZero();
    CHECK_THROWS_AS(rank_candidates("c", Eigen::Vector2d(1, 0), ids, cand, ids[0]), DataError);
}

TEST_CASE("cutoff arithmetic") {
    CHECK(topk_cutoff(25, 8) == 2);
    CHECK(topk_cutoff(1, 4096) == 40);
    CHECK(topk_cutoff(1, 50) == 1);
    CHECK(topk_cutoff(50, 3) == 1);
    CHECK(topk_cutoff(10, 100) == 10);
    std::vector<RankingResult> rs;
    for (std::size_t r : {1, 1, 1, 1, 5, 5, 5, 5}) rs.push_back(with_rank(r, 8));
    CHECK(topk_percent_accuracy(rs, 25) == doctest::Approx(50.0));
    CHECK_THROWS_AS(topk_percent_accuracy({}, 25), DataError);
    CHECK_THROWS_AS((MetricConfig{30, 100}.validate()), ConfigError);
}

TEST_CASE("perfect rankings score 100 for every k") {
    std::vector<RankingResult> rs;
    for (int i = 0; i < 10; ++i) rs.push_back(with_rank(1, 64));
    for (int k : kStandardK) CHECK(topk_percent_accuracy(rs, k) == 100.0);
}

TEST_CASE("random embeddings sit at the chance level") {
    Rng rng(2024);
    const std::size_t n = 2000;
    const auto ids = make_ids(n);
    const auto ctx = random_matrix(rng, n, 32);
    const auto fb = random_matrix(rng, n, 32);
    const auto results = rank_in_batches(ids, ctx, fb, 100, 7);
    REQUIRE(results.size() == n);
    for (int k : kStandardK) CHECK(std::abs(topk_percent_accuracy(results, k) - k) <= 4.0);
}

TEST_CASE("accuracy is monotone in k") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<RankingResult> rs;
        for (int i = 0; i < 50; ++i) {
            const std::size_t batch = 1 + rng.index(200);
            rs.push_back(with_rank(1 + rng.index(batch), batch));
        }
        double prev = -1;
        for (int k : kStandardK) {
            const double a = topk_percent_accuracy(rs, k);
            CHECK(a >= prev);
            prev = a;
        }
    }
}

TEST_CASE("ranks ignore positive rescaling") {
    Rng rng(6);
    const auto ids = make_ids(12);
    const auto cand = random_matrix(rng, 12, 5);
    Eigen::MatrixXd scaled = cand;
    for (Eigen::Index r = 0; r < 12; ++r) scaled.row(r) *= 0.01 + 10.0 * rng.uniform();
    const Eigen::VectorXd ctx = random_matrix(rng, 5, 1);
    for (std::size_t t = 0; t < 12; ++t) {
        const auto a = rank_candidates("c", ctx, ids, cand, ids[t]);
        const auto b = rank_candidates("c", ctx * 3.5, ids, scaled, ids[t]);
        CHECK(a.ground_truth_rank == b.ground_truth_rank);
        CHECK(a.ordered == b.ordered);
    }
}

TEST_CASE("batched ranking agrees with the brute-force oracle") {
    Rng rng(7);
    const std::size_t n = 53;
    const auto ids = make_ids(n);
    Eigen::MatrixXd ctx = random_matrix(rng, n, 4);
    Eigen::MatrixXd fb = random_matrix(rng, n, 4);
    // Some exact ties to exercise the tie rule.
    fb.row(3) = fb.row(4);
    fb.row(10) = fb.row(11) * 2.0;
    const auto results = rank_in_batches(ids, ctx, fb, 10, 99);
    REQUIRE(results.size() == n);

    // Reconstruct batch membership from the result order.
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) index[ids[i]] = i;
    std::size_t start = 0;
    std::size_t last_batch = 0;
    for (std::size_t r = 0; r < results.size(); r += last_batch) {
        last_batch = results[r].batch_size;
        std::vector<std::size_t> members;
        for (std::size_t k = r; k < r + last_batch; ++k) members.push_back(index.at(results[k].context_id));
        std::vector<std::vector<double>> candidates;
        for (auto m : members) candidates.push_back(row_vec(fb, m));
        for (std::size_t k = 0; k < members.size(); ++k)
            CHECK(results[r + k].ground_truth_rank == oracle::brute_force_rank(row_vec(ctx, members[k]), candidates, k));
        start += last_batch;
    }
    CHECK(start == n);
    CHECK(results.back().batch_size == 3);
}

TEST_CASE("batched ranking is seed deterministic") {
    Rng rng(8);
    const auto ids = make_ids(40);
    const auto ctx = random_matrix(rng, 40, 3);
    const auto fb = random_matrix(rng, 40, 3);
    const auto a = rank_in_batches(ids, ctx, fb, 16, 1);
    const auto b = rank_in_batches(ids, ctx, fb, 16, 1);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].context_id == b[i].context_id);
        CHECK(a[i].ground_truth_rank == b[i].ground_truth_rank);
    }
    const auto whole = rank_in_batches(ids, ctx, fb, 1000, 1);
    for (const auto& r : whole) CHECK(r.batch_size == 40);
}

// ---------------------------------------------------------------------------
// Trials

TEST_CASE("curation yields 240 balanced trials") {
    const auto pool = labelled_pool(40);
    const auto trials = curate_trials(pool, 24, 11);
    REQUIRE(trials.size() == 240);
    std::map<FunctionLabel, int> per_function;
    std::map<FunctionCondition, int> per_condition;
    std::map<std::string, std::string> conv;
    std::map<std::string, FunctionLabel> label;
    for (const auto& p : pool) {
        conv[p.id] = p.conversation_id;
        label[p.id] = p.label;
    }
    std::set<std::string> trial_ids;
    for (const auto& t : trials) {
        check_trial(t);
        trial_ids.insert(t.trial_id);
        ++per_function[label.at(t.context_id)];
        ++per_condition[t.condition];
        CHECK(t.candidates.size() == 4);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(label.at(t.candidates[i]) == t.candidate_labels[i]);
            if (t.candidates[i] != t.true_id) CHECK(conv.at(t.candidates[i]) != conv.at(t.context_id));
        }
        std::set<FunctionLabel> labels(t.candidate_labels.begin(), t.candidate_labels.end());
        CHECK(labels.size() == (t.condition == FunctionCondition::same_function ? 1u : 4u));
    }
    CHECK(trial_ids.size() == 240);
    for (FunctionLabel f : corpus::kAllFunctions) CHECK(per_function[f] == 24);
    CHECK(per_condition[FunctionCondition::same_function] == 120);
    CHECK(per_condition[FunctionCondition::different_function] == 120);
}

TEST_CASE("curation is seeded and reduces per_function with a warning") {
    const auto pool = labelled_pool(30);
    CHECK(serialize_trials(curate_trials(pool, 24, 3)) == serialize_trials(curate_trials(pool, 24, 3)));
    CHECK(serialize_trials(curate_trials(pool, 24, 3)) != serialize_trials(curate_trials(pool, 24, 4)));

    std::vector<LabeledInstance> small;
    std::size_t y = 0;
    for (const auto& p : pool)
        if (p.label != FunctionLabel::Y || y++ < 10) small.push_back(p);
    log::ScopedCapture capture;
    const auto trials = curate_trials(small, 24, 3);
    CHECK(trials.size() == 100);
    CHECK(capture.contains("reducing per_function"));

    CHECK_THROWS_AS(curate_trials(labelled_pool(3), 24, 1), DataError);
}

TEST_CASE("trial json round trip") {
    const auto trials = curate_trials(labelled_pool(12), 6, 5, ModalityCondition::audio_text);
    const auto back = parse_trials(serialize_trials(trials));
    REQUIRE(back.size() == trials.size());
    CHECK(serialize_trials(back) == serialize_trials(trials));
    CHECK(back[0].modality == ModalityCondition::audio_text);
    CHECK_THROWS_AS(parse_trials("{\"v\":1,\"trials\":[{\"trial_id\":1}]}"), DataError);
}

TEST_CASE("model answers take the argmax") {
    TrialSet t;
    t.trial_id = "t000";
    t.context_id = "ctx";
    t.true_id = "b";
    t.candidates = {"a", "b", "c", "d"};
    t.candidate_labels.assign(4, FunctionLabel::C);
    embeddings::EmbeddingTable table;
    table.ids = {"ctx", "a", "b", "c", "d"};
    table.context = Eigen::MatrixXd::Zero(5, 2);
    table.feedback = Eigen::MatrixXd::Zero(5, 2);
    table.context.row(0) << 1, 0;
    const std::vector<double> s = {0.1, 0.8, 0.3, 0.2};
    for (int i = 0; i < 4; ++i) {
        table.context.row(i + 1) << 1, 0;
        table.feedback.row(i + 1) << s[i], std::sqrt(1 - s[i] * s[i]);
    }
    table.feedback.row(0) << 1, 0;
    const auto answers = model_trial_answers({t}, table);
    REQUIRE(answers.size() == 1);
    CHECK(answers[0].choice == 1);  // second candidate
    CHECK(answers[0].chosen_id == "b");
    CHECK(answers[0].correct);
    for (int i = 0; i < 4; ++i) CHECK(answers[0].scores[i] == doctest::Approx(s[i]).epsilon(1e-12));

    TrialSet missing = t;
    missing.trial_id = "t001";
    missing.candidates[3] = "zz";
    log::ScopedCapture capture;
    CHECK(model_trial_answers({missing}, table).empty());
    CHECK(capture.contains("t001"));
}

TEST_CASE("random embeddings answer trials at chance") {
    Rng rng(13);
    const auto pool = labelled_pool(200);
    const auto trials = curate_trials(pool, 200, 17);
    embeddings::EmbeddingTable table;
    for (const auto& p : pool) table.ids.push_back(p.id);
    table.context = random_matrix(rng, pool.size(), 16);
    table.feedback = random_matrix(rng, pool.size(), 16);
    const auto answers = model_trial_answers(trials, table);
    REQUIRE(answers.size() == trials.size());
    double correct = 0;
    for (const auto& a : answers) correct += a.correct;
    CHECK(std::abs(100.0 * correct / answers.size() - 25.0) <= 4.0);
}
