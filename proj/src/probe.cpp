#include "fbrank/probe.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "fbrank/error.hpp"
#include "fbrank/log.hpp"
#include "fbrank/util.hpp"

namespace fbrank::probe {

using nlohmann::json;

std::string_view to_string(ProbeInput p) {
    switch (p) {
        case ProbeInput::feedback: return "feedback";
        case ProbeInput::context: return "context";
        case ProbeInput::concatenated: return "concat";
    }
    return "feedback";
}

ProbeInput parse_probe_input(std::string_view text) {
    if (text == "feedback") return ProbeInput::feedback;
    if (text == "context") return ProbeInput::context;
    if (text == "concat" || text == "concatenated") return ProbeInput::concatenated;
    throw ConfigError("probe input must be feedback, context or concat (got '" + std::string(text) + "')");
}

void ProbeConfig::validate() const {
    if (!(C > 0.0) || !std::isfinite(C)) throw ConfigError("SVM C must be positive");
    if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
    if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
    if (max_passes < 1) throw ConfigError("max_passes must be positive");
}

// ---------------------------------------------------------------------------
// SVM

Eigen::MatrixXd LinearSvm::decision(const Eigen::MatrixXd& x) const {
    if (x.cols() != weights.rows())
        throw ShapeError("probe expects " + std::to_string(weights.rows()) + " features, got " +
                         std::to_string(x.cols()));
    Eigen::MatrixXd d = x * weights;
    d.rowwise() += bias.transpose();
    return d;
}

std::vector<int> LinearSvm::predict(const Eigen::MatrixXd& x) const {
    const Eigen::MatrixXd d = decision(x);
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index k = 1; k < d.cols(); ++k)
            if (d(i, k) > d(i, best)) best = k;
        out[i] = classes[best];
    }
    return out;
}

namespace {

// Binary problem, labels +-1. xt is d x n (samples in columns).
void solve_binary(const Eigen::MatrixXd& xt, const std::vector<double>& sign, double C, double tolerance,
                  int max_passes, std::uint64_t seed, Eigen::Ref<Eigen::VectorXd> w, double& b) {
    const Eigen::Index n = xt.cols();
    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd q = xt.colwise().squaredNorm().transpose().array() + 1.0;
    w.setZero();
    b = 0.0;
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(seed);

    auto objective = [&] {
        const Eigen::VectorXd margin = xt.transpose() * w;
        double hinge = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) hinge += std::max(0.0, 1.0 - sign[i] * (margin[i] + b));
        return 0.5 * (w.squaredNorm() + b * b) + C * hinge;
    };

    double previous = std::numeric_limits<double>::infinity();
    for (int pass = 0; pass < max_passes; ++pass) {
        rng.shuffle(order);
        for (Eigen::Index i : order) {
            const double g = sign[i] * (xt.col(i).dot(w) + b) - 1.0;
            const double old = alpha[i];
            const double updated = std::clamp(old - g / q[i], 0.0, C);
            if (updated == old) continue;
            alpha[i] = updated;
            const double delta = (updated - old) * sign[i];
            w.noalias() += delta * xt.col(i);
            b += delta;
        }
        const double now = objective();
        if (std::abs(previous - now) <= tolerance * std::max(1.0, std::abs(now))) return;
        previous = now;
    }
    log::warn("linear SVM stopped at " + std::to_string(max_passes) + " passes before reaching tolerance");
}

}  // namespace

LinearSvm fit_linear_svm(const Eigen::MatrixXd& x, const std::vector<int>& y, double C, double tolerance,
                         int max_passes, std::uint64_t seed) {
    if (static_cast<std::size_t>(x.rows()) != y.size()) throw ShapeError("probe features and labels differ in count");
    if (!x.allFinite()) throw DataError("probe features contain non-finite values");
    if (!(C > 0.0)) throw ConfigError("SVM C must be positive");
    const std::set<int> present(y.begin(), y.end());
    if (present.size() < 2) throw DataError("linear SVM needs at least two classes");

    LinearSvm svm;
    svm.classes.assign(present.begin(), present.end());
    const auto k = static_cast<Eigen::Index>(svm.classes.size());
    svm.weights = Eigen::MatrixXd::Zero(x.cols(), k);
    svm.bias = Eigen::VectorXd::Zero(k);
    const Eigen::MatrixXd xt = x.transpose();
    std::vector<double> sign(y.size());
    for (Eigen::Index c = 0; c < k; ++c) {
        for (std::size_t i = 0; i < y.size(); ++i) sign[i] = y[i] == svm.classes[c] ? 1.0 : -1.0;
        double b = 0.0;
        solve_binary(xt, sign, C, tolerance, max_passes, mix_seed(seed, static_cast<std::uint64_t>(c)),
                     svm.weights.col(c), b);
        svm.bias[c] = b;
    }
    return svm;
}

// ---------------------------------------------------------------------------
// Cross-validation

std::vector<std::vector<std::size_t>> make_folds(const std::vector<int>& y, int folds, std::uint64_t seed,
                                                 bool* stratified) {
    if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
    if (static_cast<std::size_t>(folds) > y.size())
        throw ConfigError(std::to_string(folds) + " folds requested for " + std::to_string(y.size()) + " samples");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
    bool can_stratify = true;
    for (const auto& [label, members] : by_class)
        if (members.size() < static_cast<std::size_t>(folds)) can_stratify = false;

    Rng rng(seed);
    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(folds));
    if (can_stratify) {
        std::size_t next = 0;
        for (auto& [label, members] : by_class) {
            rng.shuffle(members);
            for (std::size_t i : members) out[next++ % out.size()].push_back(i);
        }
    } else {
        log::warn("a class has fewer than " + std::to_string(folds) +
                  " samples; using non-stratified folds");
        std::vector<std::size_t> all(y.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        rng.shuffle(all);
        for (std::size_t i = 0; i < all.size(); ++i) out[i % out.size()].push_back(all[i]);
    }
    for (auto& f : out) std::sort(f.begin(), f.end());
    if (stratified) *stratified = can_stratify;
    return out;
}

json ProbeResult::to_json() const {
    json conf = json::array();
    for (Eigen::Index r = 0; r < confusion.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < confusion.cols(); ++c) row.push_back(confusion(r, c));
        conf.push_back(row);
    }
    return {{"v", 1},
            {"fold_accuracy", fold_accuracy},
            {"mean_accuracy", mean_accuracy},
            {"stratified", stratified},
            {"confusion", conf}};
}

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    return out;
}

}  // namespace

ProbeResult cross_validate(const Eigen::MatrixXd& x, const std::vector<int>& y, int num_classes,
                           const ProbeConfig& config, unsigned threads) {
    config.validate();
    if (static_cast<std::size_t>(x.rows()) != y.size()) throw ShapeError("probe features and labels differ in count");
    for (int label : y)
        if (label < 0 || label >= num_classes) throw DataError("label " + std::to_string(label) + " out of range");

    ProbeResult result;
    const auto folds = make_folds(y, config.folds, config.seed, &result.stratified);
    std::vector<std::vector<int>> predictions(folds.size());

    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors(folds.size());
    auto worker = [&] {
        for (std::size_t f = next++; f < folds.size(); f = next++) {
            try {
                std::vector<std::size_t> train_rows;
                std::vector<bool> held(y.size(), false);
                for (std::size_t i : folds[f]) held[i] = true;
                for (std::size_t i = 0; i < y.size(); ++i)
                    if (!held[i]) train_rows.push_back(i);
                std::vector<int> train_y;
                for (std::size_t i : train_rows) train_y.push_back(y[i]);
                const std::set<int> present(train_y.begin(), train_y.end());
                if (present.size() == 1) {
                    predictions[f].assign(folds[f].size(), *present.begin());
                    continue;
                }
                const LinearSvm svm = fit_linear_svm(take_rows(x, train_rows), train_y, config.C, config.tolerance,
                                                     config.max_passes, mix_seed(config.seed, f));
                predictions[f] = svm.predict(take_rows(x, folds[f]));
            } catch (const std::exception& e) {
                errors[f] = e.what();
            }
        }
    };
    const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(folds.size())));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (std::size_t f = 0; f < folds.size(); ++f)
        if (!errors[f].empty()) throw DataError("fold " + std::to_string(f) + ": " + errors[f]);

    result.confusion = Eigen::MatrixXi::Zero(num_classes, num_classes);
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::size_t correct = 0;
        for (std::size_t k = 0; k < folds[f].size(); ++k) {
            const int truth = y[folds[f][k]];
            const int pred = predictions[f][k];
            ++result.confusion(truth, pred);
            correct += truth == pred;
        }
        result.fold_accuracy.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(folds[f].size()));
    }
    result.mean_accuracy = std::accumulate(result.fold_accuracy.begin(), result.fold_accuracy.end(), 0.0) /
                           static_cast<double>(result.fold_accuracy.size());
    return result;
}

ProbeData probe_data(const embeddings::EmbeddingTable& table, ProbeInput input) {
    table.check();
    if (table.labels.size() != table.size()) throw DataError("embedding table carries no function labels");
    ProbeData d;
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < table.size(); ++i) {
        if (!table.labels[i]) continue;
        rows.push_back(static_cast<Eigen::Index>(i));
        d.y.push_back(static_cast<int>(*table.labels[i]));
        d.ids.push_back(table.ids[i]);
    }
    const Eigen::Index m = table.context.cols();
    const Eigen::Index width = input == ProbeInput::concatenated ? 2 * m : m;
    d.x.resize(static_cast<Eigen::Index>(rows.size()), width);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto r = static_cast<Eigen::Index>(k);
        switch (input) {
            case ProbeInput::feedback: d.x.row(r) = table.feedback.row(rows[k]); break;
            case ProbeInput::context: d.x.row(r) = table.context.row(rows[k]); break;
            case ProbeInput::concatenated:
                d.x.row(r).head(m) = table.context.row(rows[k]);
                d.x.row(r).tail(m) = table.feedback.row(rows[k]);
                break;
        }
    }
    if (d.y.empty()) throw DataError("no labelled instances to probe");
    return d;
}

std::string probe_csv(const std::vector<std::pair<ProbeInput, ProbeResult>>& rows, const ProbeConfig& config) {
    std::string out = "input,C,folds";
    for (int f = 1; f <= config.folds; ++f) out += ",fold_" + std::to_string(f);
    out += ",mean_accuracy\n";
    char buf[64];
    for (const auto& [input, r] : rows) {
        std::snprintf(buf, sizeof buf, "%g", config.C);
        out += std::string(to_string(input)) + "," + buf + "," + std::to_string(config.folds);
        for (double a : r.fold_accuracy) {
            std::snprintf(buf, sizeof buf, ",%.4f", a);
            out += buf;
        }
        std::snprintf(buf, sizeof buf, ",%.4f\n", r.mean_accuracy);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Correlation

json CorrelationResult::to_json() const { return {{"v", 1}, {"r", r}, {"p_value", p_value}, {"n", n}}; }

CorrelationResult pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ShapeError("correlation inputs differ in length");
    if (x.size() < 3) throw DataError("correlation needs at least 3 pairs");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) throw DataError("correlation is undefined for a constant input");
    CorrelationResult out;
    out.n = x.size();
    out.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    if (std::abs(out.r) >= 1.0) {
        out.p_value = 0.0;
    } else {
        const double df = n - 2.0;
        const double t = out.r * std::sqrt(df / (1.0 - out.r * out.r));
        boost::math::students_t dist(df);
        out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    }
    return out;
}

CorrelationResult correlate_ratings(const std::vector<PairScore>& ratings, const std::vector<PairScore>& similarities) {
    std::map<std::pair<std::string, std::string>, std::pair<double, int>> mean;
    for (const auto& r : ratings) {
        auto& slot = mean[{r.context_id, r.candidate_id}];
        slot.first += r.value;
        ++slot.second;
    }
    std::map<std::pair<std::string, std::string>, double> sim;
    for (const auto& s : similarities) sim[{s.context_id, s.candidate_id}] = s.value;
    std::vector<double> human, model;
    std::size_t dropped = 0;
    for (const auto& [key, acc] : mean) {
        auto it = sim.find(key);
        if (it == sim.end()) {
            ++dropped;
            continue;
        }
        human.push_back(acc.first / acc.second);
        model.push_back(it->second);
    }
    if (dropped > 0) log::warn(std::to_string(dropped) + " rated pairs have no model similarity");
    return pearson_correlation(model, human);
}

std::vector<PairScore> read_pair_scores(const std::string& path) {
    const auto lines = io::read_lines(path);
    std::vector<PairScore> out;
    bool header = true;
    std::size_t line_no = 0;
    for (const auto& raw : lines) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            header = false;
            if (line.rfind("context_id,", 0) == 0) continue;
        }
        const auto cells = split_string(line, ',');
        if (cells.size() != 3) throw DataError(path + ":" + std::to_string(line_no) + ": expected 3 columns");
        try {
            std::size_t used = 0;
            const double v = std::stod(cells[2], &used);
            if (used != trim(cells[2]).size() && used != cells[2].size()) throw std::invalid_argument("trailing");
            out.push_back({trim(cells[0]), trim(cells[1]), v});
        } catch (const std::exception&) {
            throw DataError(path + ":" + std::to_string(line_no) + ": bad number '" + cells[2] + "'");
        }
    }
    return out;
}

}  // namespace fbrank::probe
