#include <doctest.h>

#include <cmath>
#include <numeric>

#include "../oracles.hpp"
#include "fbrank/checkpoint.hpp"
#include "fbrank/error.hpp"
#include "fbrank/log.hpp"
#include "fbrank/optim.hpp"
#include "fbrank/train.hpp"
#include "helpers.hpp"

using namespace fbrank;
using namespace fbrank::train;

namespace {

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

PairDataset random_pairs(Rng& rng, std::size_t n, const model::ModelSpec& spec, bool identical) {
    PairDataset d;
    for (std::size_t i = 0; i < n; ++i) {
        d.ids.push_back("p" + std::to_string(i));
        d.conversations.push_back("c" + std::to_string(i));
        d.labels.push_back(std::nullopt);
        auto ctx = testing::random_summary(rng, spec.layers, spec.dims);
        d.feedbacks.push_back(identical ? ctx : testing::random_summary(rng, spec.layers, spec.dims));
        d.contexts.push_back(std::move(ctx));
    }
    return d;
}

}  // namespace

TEST_CASE("uniform scores give ln N") {
    for (double tau : {0.05, 0.07, 1.0}) {
        const auto r = symmetric_info_nce({Eigen::MatrixXd::Zero(8, 8)}, tau);
        CHECK(r.loss == doctest::Approx(std::log(8.0)).epsilon(1e-12));
    }
    const auto r = symmetric_info_nce({Eigen::MatrixXd::Constant(5, 5, 0.3)}, 0.1);
    CHECK(r.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("two orthogonal pairs at unit temperature") {
    const auto r = symmetric_info_nce({Eigen::MatrixXd::Identity(2, 2)}, 1.0);
    CHECK(std::abs(r.loss - std::log1p(std::exp(-1.0))) < 1e-12);
    CHECK(r.loss == doctest::Approx(0.3133).epsilon(1e-4));
}

TEST_CASE("single pair has zero loss and warns") {
    log::ScopedCapture capture;
    const auto r = symmetric_info_nce({Eigen::MatrixXd::Constant(1, 1, 0.4)}, 0.07);
    CHECK(r.loss == 0.0);
    CHECK(r.grad_scores.norm() == 0.0);
    CHECK(capture.messages().size() == 1);
}

TEST_CASE("InfoNCE gradients match central differences") {
    Rng rng(3);
    for (double tau : {0.05, 1.0}) {
        Eigen::MatrixXd s = random_matrix(rng, 8, 8).cwiseMin(1.0).cwiseMax(-1.0);
        const auto r = symmetric_info_nce({s}, tau);
        std::vector<double> analytic, numeric;
        for (Eigen::Index i = 0; i < s.size(); ++i) {
            analytic.push_back(r.grad_scores.data()[i]);
            numeric.push_back(
                oracle::central_difference(s.data()[i], 1e-6, [&] { return symmetric_info_nce({s}, tau).loss; }));
        }
        CHECK(oracle::relative_error(analytic, numeric) < 1e-4);

        double log_tau = std::log(tau);
        const double num = oracle::central_difference(
            log_tau, 1e-6, [&] { return symmetric_info_nce({s}, std::exp(log_tau)).loss; });
        CHECK(oracle::relative_error(r.grad_log_temperature, num) < 1e-4);
    }
}

TEST_CASE("joint permutation leaves the loss unchanged") {
    Rng rng(4);
    const Eigen::MatrixXd s = random_matrix(rng, 6, 6);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Eigen::MatrixXd p(6, 6);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) p(i, j) = s(perm[i], perm[j]);
    CHECK(symmetric_info_nce({p}, 0.1).loss == doctest::Approx(symmetric_info_nce({s}, 0.1).loss).epsilon(1e-12));
}

TEST_CASE("raising a diagonal score lowers the loss") {
    Rng rng(5);
    Eigen::MatrixXd s = random_matrix(rng, 5, 5) * 0.3;
    double prev = symmetric_info_nce({s}, 0.1).loss;
    for (int step = 0; step < 5; ++step) {
        s(2, 2) += 0.1;
        const double now = symmetric_info_nce({s}, 0.1).loss;
        CHECK(now < prev);
        prev = now;
    }
}

TEST_CASE("cosine similarity matrix") {
    Eigen::MatrixXd c(1, 2), f(1, 2);
    c << 1, 0;
    f << 1, 1;
    CHECK(cosine_similarity_matrix(c, f).scores(0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));

    Rng rng(6);
    const Eigen::MatrixXd a = random_matrix(rng, 4, 3);
    const Eigen::MatrixXd b = random_matrix(rng, 4, 3);
    const auto s1 = cosine_similarity_matrix(a, b).scores;
    const auto s2 = cosine_similarity_matrix(a * 7.5, b * 0.01).scores;
    CHECK((s1 - s2).cwiseAbs().maxCoeff() < 1e-12);
    std::vector<double> r0(a.cols()), r1(b.cols());
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
        r0[k] = a(1, k);
        r1[k] = b(3, k);
    }
    CHECK(s1(1, 3) == doctest::Approx(oracle::cosine(r0, r1)).epsilon(1e-12));

    Eigen::MatrixXd z = a;
    z.row(2).setZero();
    CHECK_THROWS_AS(cosine_similarity_matrix(z, b), DataError);
    CHECK_THROWS_AS(cosine_similarity_matrix(a, random_matrix(rng, 3, 3)), ShapeError);
}

TEST_CASE("cosine backward matches central differences") {
    Rng rng(7);
    Eigen::MatrixXd a = random_matrix(rng, 4, 3);
    Eigen::MatrixXd b = random_matrix(rng, 4, 3);
    const Eigen::MatrixXd r = random_matrix(rng, 4, 4);
    auto objective = [&] { return (cosine_similarity_matrix(a, b).scores.array() * r.array()).sum(); };
    CosineCache cache;
    cosine_similarity_matrix(a, b, &cache);
    const auto g = cosine_backward(cache, r);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        CHECK(oracle::relative_error(g.ctx.data()[i], oracle::central_difference(a.data()[i], 1e-6, objective)) < 1e-5);
        CHECK(oracle::relative_error(g.fb.data()[i], oracle::central_difference(b.data()[i], 1e-6, objective)) < 1e-5);
    }
}

TEST_CASE("full chain gradient on a four pair batch") {
    Rng rng(8);
    auto spec = testing::small_spec({6});
    auto model = model::make_dual_encoder(spec, 0.1, true, 3);
    for (auto* tower : {&model.context, &model.feedback})
        for (auto& w : tower->pooling)
            for (Eigen::Index i = 0; i < w.logits.size(); ++i) w.logits[i] = rng.normal();
    const auto data = random_pairs(rng, 4, spec, false);
    const auto ctx = testing::pointers(data.contexts);
    const auto fb = testing::pointers(data.feedbacks);

    auto tape = model::zeros_like(model);
    batch_loss(model, ctx, fb, &tape);
    const auto params = model::parameter_views(model);
    const auto grads = model::parameter_views(std::as_const(tape));
    REQUIRE(params.size() == grads.size());
    std::vector<double> analytic, numeric;
    for (std::size_t k = 0; k < params.size(); ++k)
        for (std::size_t i = 0; i < params[k].size(); ++i) {
            analytic.push_back(grads[k][i]);
            numeric.push_back(
                oracle::central_difference(params[k][i], 1e-6, [&] { return batch_loss(model, ctx, fb, nullptr); }));
        }
    CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
}

TEST_CASE("training config json round trip and validation") {
    TrainConfig c;
    c.batch_size = 32;
    c.optimizer.lr = 3e-4;
    c.hidden_dims = {1024};
    c.learn_temperature = true;
    c.modalities = {features::Modality::audio, features::Modality::text};
    const auto back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());

    CHECK_THROWS_AS(TrainConfig::from_json({{"batch_size", 1}}), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"temperature", 0.9}}), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"validation_k", 30}}), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"optimizer", "sgd"}}), ConfigError);
    CHECK_THROWS_AS(TrainConfig::from_json({{"modalities", {"audio", "audio"}}}), ConfigError);
}

TEST_CASE("identical pairs become retrievable") {
    Rng rng(9);
    auto spec = testing::small_spec({}, 16, 2, 12);
    const auto data = random_pairs(rng, 64, spec, true);
    TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.optimizer.lr = 1e-2;
    cfg.output_dim = 16;
    cfg.max_epochs = 200;
    cfg.patience = 200;
    cfg.validation_k = 1;
    const auto result = train_loop(data, data, cfg);
    CHECK(result.best_val >= 95.0);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    Rng rng(10);
    auto spec = testing::small_spec({4});
    const auto data = random_pairs(rng, 8, spec, false);

    auto model = model::make_dual_encoder(spec, 0.07, true, 1);
    const std::string before = model::encode_checkpoint(model);
    auto tape = model::zeros_like(model);
    optim::AdamState state;
    optim::AdamConfig opt;
    opt.lr = 0.0;
    opt.weight_decay = 0.01;
    for (int k = 0; k < 3; ++k) {
        model::zero(tape);
        batch_loss(model, testing::pointers(data.contexts), testing::pointers(data.feedbacks), &tape);
        optim::step(model, tape, state, opt);
    }
    CHECK(model::encode_checkpoint(model) == before);

    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.optimizer.lr = 0.0;
    cfg.output_dim = 4;
    cfg.max_epochs = 4;
    cfg.patience = 10;
    const auto result = train_loop(data, data, cfg);
    REQUIRE(result.history.size() == 4);
    for (const auto& rec : result.history) {
        CHECK(rec.loss == doctest::Approx(result.history.front().loss).epsilon(1e-12));
        CHECK(rec.val_top25 == result.history.front().val_top25);
    }
}

TEST_CASE("patience zero runs one epoch") {
    Rng rng(11);
    auto spec = testing::small_spec();
    const auto data = random_pairs(rng, 10, spec, false);
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.output_dim = 4;
    cfg.patience = 0;
    const auto result = train_loop(data, data, cfg);
    CHECK(result.history.size() == 1);
    CHECK(result.best_epoch == 1);
}

TEST_CASE("training is deterministic and needs two pairs") {
    Rng rng(12);
    auto spec = testing::small_spec({3});
    const auto data = random_pairs(rng, 12, spec, false);
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.output_dim = 4;
    cfg.max_epochs = 3;
    cfg.seed = 77;
    const auto a = train_loop(data, data, cfg);
    const auto b = train_loop(data, data, cfg);
    CHECK(model::encode_checkpoint(a.best) == model::encode_checkpoint(b.best));
    CHECK(history_csv(a.history, "seed=77") == history_csv(b.history, "seed=77"));
    CHECK(history_csv(a.history).rfind("epoch,loss,val_top25,tau\n", 0) == 0);

    PairDataset one = data;
    one.ids.resize(1);
    one.conversations.resize(1);
    one.labels.resize(1);
    one.contexts.resize(1);
    one.feedbacks.resize(1);
    CHECK_THROWS_AS(train_loop(one, data, cfg), DataError);
}
