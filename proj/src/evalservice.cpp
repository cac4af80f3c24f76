#include "fbrank/evalservice.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <numeric>
#include <regex>
#include <set>

#include <httplib.h>

#include "fbrank/error.hpp"
#include "fbrank/features.hpp"
#include "fbrank/log.hpp"
#include "fbrank/probe.hpp"
#include "fbrank/util.hpp"

namespace fbrank::evalservice {

namespace fs = std::filesystem;
using nlohmann::json;
using rank::FunctionCondition;
using rank::ModalityCondition;

std::string_view to_string(SessionState s) {
    switch (s) {
        case SessionState::active: return "active";
        case SessionState::complete: return "complete";
        case SessionState::abandoned: return "abandoned";
    }
    return "active";
}

namespace {

SessionState parse_state(std::string_view s) {
    if (s == "active") return SessionState::active;
    if (s == "complete") return SessionState::complete;
    if (s == "abandoned") return SessionState::abandoned;
    throw DataError("unknown session state '" + std::string(s) + "'");
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void check_version(const json& j) {
    if (j.contains("v") && j.at("v") != 1) throw ServiceError(400, "unsupported payload version");
}

}  // namespace

json TrialResponse::to_json() const {
    json j = {{"trial_id", trial_id},
              {"chosen", chosen},
              {"ratings", ratings},
              {"context_intelligible", context_intelligible},
              {"submitted_at", submitted_at}};
    if (!idempotency_key.empty()) j["idempotency_key"] = idempotency_key;
    if (!presentation_order.empty()) j["presentation_order"] = presentation_order;
    return j;
}

TrialResponse TrialResponse::from_json(const json& j) {
    TrialResponse r;
    try {
        check_version(j);
        r.trial_id = j.at("trial_id").get<std::string>();
        r.chosen = j.at("chosen").get<std::string>();
        r.ratings = j.at("ratings").get<std::map<std::string, int>>();
        r.context_intelligible = j.at("context_intelligible").get<bool>();
        r.submitted_at = j.value("submitted_at", std::string());
        r.idempotency_key = j.value("idempotency_key", std::string());
        r.presentation_order = j.value("presentation_order", std::vector<std::string>{});
    } catch (const json::exception& e) {
        throw ServiceError(400, std::string("malformed response: ") + e.what());
    }
    return r;
}

json Session::to_json() const {
    json responses_json = json::object();
    for (const auto& [id, r] : responses) responses_json[id] = r.to_json();
    return {{"session_id", session_id},
            {"participant_id", participant_id},
            {"condition", rank::to_string(condition)},
            {"trials", trial_ids},
            {"state", evalservice::to_string(state)},
            {"responses", responses_json}};
}

Session Session::from_json(const json& j) {
    Session s;
    try {
        s.session_id = j.at("session_id").get<std::string>();
        s.participant_id = j.at("participant_id").get<std::string>();
        s.condition = rank::parse_modality_condition(j.at("condition").get<std::string>());
        s.trial_ids = j.at("trials").get<std::vector<std::string>>();
        s.state = parse_state(j.at("state").get<std::string>());
        const json responses = j.value("responses", json::object());
        for (const auto& [id, r] : responses.items()) s.responses[id] = TrialResponse::from_json(r);
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed session record: ") + e.what());
    }
    return s;
}

std::map<std::string, MediaClip> read_media_index(const std::string& path) {
    std::map<std::string, MediaClip> out;
    const fs::path base = fs::absolute(fs::path(path)).parent_path();
    try {
        const json j = json::parse(io::read_file(path));
        if (j.value("v", 0) != 1) throw DataError(path + ": unsupported media index version");
        for (const auto& [id, clip] : j.at("clips").items()) {
            MediaClip c;
            fs::path p = clip.at("path").get<std::string>();
            c.path = (p.is_absolute() ? p : base / p).lexically_normal().string();
            if (clip.contains("transcript") && !clip.at("transcript").is_null())
                c.transcript = clip.at("transcript").get<std::string>();
            out.emplace(id, std::move(c));
        }
    } catch (const json::exception& e) {
        throw DataError(path + ": malformed media index: " + e.what());
    }
    return out;
}

std::string context_clip(const std::string& instance_id) { return features::context_segment(instance_id); }
std::string candidate_clip(const std::string& instance_id) { return features::feedback_segment(instance_id); }

void validate_response(const TrialResponse& r, const rank::TrialSet& trial) {
    const auto& c = trial.candidates;
    if (std::find(c.begin(), c.end(), r.chosen) == c.end())
        throw ServiceError(400, "chosen candidate '" + r.chosen + "' is not part of trial " + trial.trial_id);
    if (r.ratings.size() != c.size()) throw ServiceError(400, "ratings must cover all four candidates");
    for (const auto& id : c) {
        auto it = r.ratings.find(id);
        if (it == r.ratings.end()) throw ServiceError(400, "missing rating for candidate '" + id + "'");
        if (it->second < 1 || it->second > 4)
            throw ServiceError(400, "rating " + std::to_string(it->second) + " for '" + id + "' is outside 1-4");
    }
    if (!r.presentation_order.empty()) {
        std::vector<std::string> a = r.presentation_order, b = c;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b) throw ServiceError(400, "presentation_order must list the four candidates");
    }
}

// ---------------------------------------------------------------------------
// Aggregation

double ConditionCell::accuracy() const {
    return responses == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(responses);
}

double ConditionCell::intelligibility() const {
    return responses == 0 ? 0.0 : 100.0 * static_cast<double>(intelligible) / static_cast<double>(responses);
}

json AggregateReport::to_json() const {
    json conditions = json::object();
    for (const auto& [cond, by_fc] : cells) {
        json c = json::object();
        for (const auto& [name, cell] : by_fc)
            c[name] = {{"responses", cell.responses},
                       {"correct", cell.correct},
                       {"accuracy", cell.responses ? json(cell.accuracy()) : json(nullptr)},
                       {"intelligibility", cell.responses ? json(cell.intelligibility()) : json(nullptr)}};
        auto it = correlation.find(cond);
        c["correlation"] = it == correlation.end() ? json::object() : json(it->second);
        conditions[std::string(rank::to_string(cond))] = c;
    }
    json pair_rows = json::array();
    for (const auto& p : pairs)
        pair_rows.push_back({{"condition", rank::to_string(p.condition)},
                             {"context_id", p.context_id},
                             {"candidate_id", p.candidate_id},
                             {"mean_rating", p.mean_rating},
                             {"n", p.n},
                             {"same_function", p.same_function},
                             {"similarity", p.similarity ? json(*p.similarity) : json(nullptr)}});
    return {{"v", 1}, {"sessions", sessions}, {"conditions", conditions}, {"model", model_accuracy}, {"pairs", pair_rows}};
}

AggregateReport aggregate(const std::vector<Session>& sessions, const std::vector<rank::TrialSet>& trials,
                          const std::vector<rank::ModelAnswer>* answers) {
    std::map<std::string, const rank::TrialSet*> by_id;
    for (const auto& t : trials) by_id[t.trial_id] = &t;

    std::map<std::pair<std::string, std::string>, double> similarity;
    AggregateReport report;
    if (answers) {
        std::map<std::string, std::size_t> correct, total;
        for (const auto& a : *answers) {
            auto it = by_id.find(a.trial_id);
            if (it == by_id.end()) continue;
            const rank::TrialSet& t = *it->second;
            for (std::size_t i = 0; i < t.candidates.size() && i < a.scores.size(); ++i)
                similarity[{t.context_id, t.candidates[i]}] = a.scores[i];
            for (const std::string& key : {std::string(rank::to_string(t.condition)), std::string("all")}) {
                ++total[key];
                correct[key] += a.correct;
            }
        }
        for (const auto& [key, n] : total)
            report.model_accuracy[key] = 100.0 * static_cast<double>(correct[key]) / static_cast<double>(n);
    }

    // Sorted iteration keeps the report independent of arrival order.
    std::vector<const Session*> complete;
    for (const auto& s : sessions)
        if (s.state == SessionState::complete) complete.push_back(&s);
    if (complete.empty()) throw ServiceError(409, "no complete session to aggregate");
    std::sort(complete.begin(), complete.end(),
              [](const Session* a, const Session* b) { return a->session_id < b->session_id; });
    report.sessions = complete.size();

    struct Acc {
        double sum = 0;
        std::size_t n = 0;
        bool same = false;
    };
    std::map<std::tuple<ModalityCondition, std::string, std::string>, Acc> pair_acc;
    for (const Session* s : complete) {
        for (const auto& [trial_id, r] : s->responses) {
            auto it = by_id.find(trial_id);
            if (it == by_id.end()) throw DataError("response for unknown trial " + trial_id);
            const rank::TrialSet& t = *it->second;
            const bool same = t.condition == FunctionCondition::same_function;
            for (const std::string& key : {std::string(rank::to_string(t.condition)), std::string("all")}) {
                ConditionCell& cell = report.cells[s->condition][key];
                ++cell.responses;
                cell.correct += r.chosen == t.true_id;
                cell.intelligible += r.context_intelligible;
            }
            for (const auto& [cand, rating] : r.ratings) {
                Acc& acc = pair_acc[{s->condition, t.context_id, cand}];
                acc.sum += rating;
                ++acc.n;
                acc.same = same;
            }
        }
    }

    bool any_overlap = false;
    for (const auto& [key, acc] : pair_acc) {
        PairRating p;
        p.condition = std::get<0>(key);
        p.context_id = std::get<1>(key);
        p.candidate_id = std::get<2>(key);
        p.mean_rating = acc.sum / static_cast<double>(acc.n);
        p.n = acc.n;
        p.same_function = acc.same;
        auto it = similarity.find({p.context_id, p.candidate_id});
        if (it != similarity.end()) {
            p.similarity = it->second;
            any_overlap = true;
        }
        report.pairs.push_back(std::move(p));
    }
    if (answers && !any_overlap) throw DataError("no rated pair has a model similarity score");

    if (answers) {
        for (const auto& [cond, unused] : report.cells) {
            for (const std::string scope : {"all", "same_function"}) {
                std::vector<double> human, model;
                for (const auto& p : report.pairs)
                    if (p.condition == cond && p.similarity && (scope == "all" || p.same_function)) {
                        human.push_back(p.mean_rating);
                        model.push_back(*p.similarity);
                    }
                try {
                    report.correlation[cond][scope] = probe::pearson_correlation(model, human).to_json();
                } catch (const DataError& e) {
                    report.correlation[cond][scope] = {{"v", 1}, {"r", nullptr}, {"n", human.size()}, {"note", e.what()}};
                }
            }
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Service

EvalService::EvalService(std::vector<rank::TrialSet> trials, std::map<std::string, MediaClip> media,
                         std::vector<rank::ModelAnswer> answers, ServiceOptions options)
    : trials_(std::move(trials)), media_(std::move(media)), answers_(std::move(answers)), options_(std::move(options)) {
    if (!options_.clock) options_.clock = utc_now;
    std::size_t same = 0, different = 0;
    std::set<std::string> same_ctx, diff_ctx;
    for (std::size_t i = 0; i < trials_.size(); ++i) {
        rank::check_trial(trials_[i]);
        if (!trial_index_.emplace(trials_[i].trial_id, i).second)
            throw DataError("duplicate trial id " + trials_[i].trial_id);
        if (trials_[i].condition == FunctionCondition::same_function) {
            ++same;
            same_ctx.insert(trials_[i].context_id);
        } else {
            ++different;
            diff_ctx.insert(trials_[i].context_id);
        }
    }
    const std::size_t half = kTrialsPerSession / 2;
    if (same_ctx.size() < half || diff_ctx.size() < half)
        throw ConfigError("trial pool needs at least " + std::to_string(half) +
                          " distinct contexts per function condition (have " + std::to_string(same_ctx.size()) + "/" +
                          std::to_string(diff_ctx.size()) + ")");
    (void)same;
    (void)different;

    if (!media_.empty()) {
        std::vector<std::string> missing;
        for (const auto& t : trials_) {
            if (!media_.count(context_clip(t.context_id))) missing.push_back(context_clip(t.context_id));
            for (const auto& c : t.candidates)
                if (!media_.count(candidate_clip(c))) missing.push_back(candidate_clip(c));
        }
        if (!missing.empty())
            throw DataError(std::to_string(missing.size()) + " clips referenced by trials are not registered, e.g. " +
                            missing.front());
    }

    std::vector<std::size_t> perm(trials_.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(mix_seed(options_.seed, 0x7e11));
    rng.shuffle(perm);
    tie_order_.resize(perm.size());
    for (std::size_t r = 0; r < perm.size(); ++r) tie_order_[perm[r]] = r;
    for (auto c : {ModalityCondition::audio_only, ModalityCondition::audio_text})
        coverage_[c].assign(trials_.size(), 0);

    if (!options_.state_dir.empty()) {
        fs::create_directories(options_.state_dir);
        recover();
    }
}

const rank::TrialSet& EvalService::trial(const std::string& trial_id) const {
    auto it = trial_index_.find(trial_id);
    if (it == trial_index_.end()) throw ServiceError(404, "unknown trial " + trial_id);
    return trials_[it->second];
}

Session& EvalService::find_session(const std::string& id) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session " + id);
    return it->second;
}

const Session& EvalService::find_session(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown session " + id);
    return it->second;
}

Session EvalService::create_session(const std::string& participant_id, ModalityCondition condition) {
    if (participant_id.empty()) throw ServiceError(400, "participant_id is required");
    std::lock_guard lock(mutex_);
    for (const auto& [id, s] : sessions_)
        if (s.participant_id == participant_id && s.state == SessionState::active)
            throw ServiceError(409, "participant " + participant_id + " already has active session " + id);

    const auto& cov = coverage_.at(condition);
    std::set<std::string> used_contexts;
    std::vector<std::string> chosen;
    for (FunctionCondition fc : {FunctionCondition::same_function, FunctionCondition::different_function}) {
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < trials_.size(); ++i)
            if (trials_[i].condition == fc) pool.push_back(i);
        std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
            return std::pair(cov[a], tie_order_[a]) < std::pair(cov[b], tie_order_[b]);
        });
        std::size_t taken = 0;
        for (std::size_t i : pool) {
            if (taken == kTrialsPerSession / 2) break;
            if (!used_contexts.insert(trials_[i].context_id).second) continue;
            chosen.push_back(trials_[i].trial_id);
            ++taken;
        }
        if (taken < kTrialsPerSession / 2) {
            log::warn("trial pool too small for distinct contexts; reusing least-covered trials");
            for (std::size_t i : pool) {
                if (taken == kTrialsPerSession / 2) break;
                if (std::find(chosen.begin(), chosen.end(), trials_[i].trial_id) != chosen.end()) continue;
                chosen.push_back(trials_[i].trial_id);
                ++taken;
            }
        }
    }
    Rng rng(mix_seed(options_.seed, session_counter_ + 1));
    rng.shuffle(chosen);

    Session s;
    s.session_id = "s" + hex64(mix_seed(options_.seed ^ 0x5e55, session_counter_)).substr(0, 12);
    s.participant_id = participant_id;
    s.condition = condition;
    s.trial_ids = std::move(chosen);
    const json event = {{"v", 1}, {"type", "session_created"}, {"session", s.to_json()}};
    commit(event);
    return s;
}

Session EvalService::session(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    return find_session(session_id);
}

json EvalService::trial_payload(const std::string& session_id, std::size_t index) const {
    std::lock_guard lock(mutex_);
    const Session& s = find_session(session_id);
    if (index < 1 || index > s.trial_ids.size())
        throw ServiceError(404, "trial index must lie in 1.." + std::to_string(s.trial_ids.size()));
    const rank::TrialSet& t = trial(s.trial_ids[index - 1]);
    const bool text = s.condition == ModalityCondition::audio_text;
    auto clip_json = [&](const std::string& clip) {
        json c = {{"clip_id", clip}, {"url", "/media/" + clip}};
        if (text) {
            auto it = media_.find(clip);
            if (it != media_.end() && it->second.transcript) c["transcript"] = *it->second.transcript;
        }
        return c;
    };
    json candidates = json::array();
    for (const auto& id : t.candidates) {
        json c = clip_json(candidate_clip(id));
        c["candidate_id"] = id;
        candidates.push_back(std::move(c));
    }
    json out = {{"v", 1},
                {"session_id", s.session_id},
                {"index", index},
                {"total", s.trial_ids.size()},
                {"trial_id", t.trial_id},
                {"condition", rank::to_string(s.condition)},
                {"context", clip_json(context_clip(t.context_id))},
                {"candidates", candidates}};
    auto r = s.responses.find(t.trial_id);
    out["answered"] = r != s.responses.end();
    if (r != s.responses.end()) out["response"] = r->second.to_json();
    return out;
}

json EvalService::acknowledgement(const Session& s, const TrialResponse& r) const {
    return {{"v", 1},
            {"session_id", s.session_id},
            {"trial_id", r.trial_id},
            {"accepted", true},
            {"answered", s.responses.size()},
            {"remaining", s.trial_ids.size() - s.responses.size()},
            {"state", to_string(s.state)}};
}

json EvalService::submit_response(const std::string& session_id, TrialResponse response) {
    std::lock_guard lock(mutex_);
    Session& s = find_session(session_id);
    if (std::find(s.trial_ids.begin(), s.trial_ids.end(), response.trial_id) == s.trial_ids.end())
        throw ServiceError(404, "trial " + response.trial_id + " is not assigned to session " + session_id);
    auto existing = s.responses.find(response.trial_id);
    if (existing != s.responses.end()) {
        if (!response.idempotency_key.empty() && response.idempotency_key == existing->second.idempotency_key)
            return acknowledgement(s, existing->second);
        throw ServiceError(409, "trial " + response.trial_id + " was already answered");
    }
    if (s.state != SessionState::active)
        throw ServiceError(409, "session " + session_id + " is " + std::string(to_string(s.state)));
    validate_response(response, trial(response.trial_id));
    if (response.submitted_at.empty()) response.submitted_at = options_.clock();

    const json event = {{"v", 1}, {"type", "response"}, {"session_id", session_id}, {"response", response.to_json()}};
    commit(event);
    return acknowledgement(s, s.responses.at(response.trial_id));
}

void EvalService::abandon(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    Session& s = find_session(session_id);
    if (s.state != SessionState::active)
        throw ServiceError(409, "session " + session_id + " is " + std::string(to_string(s.state)));
    const json event = {{"v", 1}, {"type", "abandoned"}, {"session_id", session_id}};
    commit(event);
}

AggregateReport EvalService::report() const {
    std::vector<Session> copy;
    {
        std::lock_guard lock(mutex_);
        for (const auto& [id, s] : sessions_) copy.push_back(s);
    }
    return aggregate(copy, trials_, answers_.empty() ? nullptr : &answers_);
}

std::optional<MediaClip> EvalService::media(const std::string& clip_id) const {
    auto it = media_.find(clip_id);
    if (it == media_.end()) return std::nullopt;
    return it->second;
}

std::vector<Session> EvalService::sessions() const {
    std::lock_guard lock(mutex_);
    std::vector<Session> out;
    for (const auto& [id, s] : sessions_) out.push_back(s);
    return out;
}

std::map<std::string, std::size_t> EvalService::coverage(ModalityCondition condition) const {
    std::lock_guard lock(mutex_);
    std::map<std::string, std::size_t> out;
    const auto& cov = coverage_.at(condition);
    for (std::size_t i = 0; i < trials_.size(); ++i) out[trials_[i].trial_id] = cov[i];
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

void EvalService::apply_event(const json& event) {
    const std::string type = event.at("type").get<std::string>();
    if (type == "session_created") {
        Session s = Session::from_json(event.at("session"));
        for (const auto& id : s.trial_ids) {
            auto it = trial_index_.find(id);
            if (it == trial_index_.end()) throw DataError("session " + s.session_id + " references unknown trial " + id);
            ++coverage_[s.condition][it->second];
        }
        ++session_counter_;
        const std::string id = s.session_id;
        sessions_[id] = std::move(s);
    } else if (type == "response") {
        Session& s = find_session(event.at("session_id").get<std::string>());
        TrialResponse r = TrialResponse::from_json(event.at("response"));
        s.responses[r.trial_id] = std::move(r);
        if (s.responses.size() == s.trial_ids.size()) s.state = SessionState::complete;
    } else if (type == "abandoned") {
        find_session(event.at("session_id").get<std::string>()).state = SessionState::abandoned;
    } else {
        throw DataError("unknown event type '" + type + "'");
    }
}

void EvalService::persist(const json& event) {
    if (options_.state_dir.empty()) return;
    const std::string path = (fs::path(options_.state_dir) / "events.jsonl").string();
    const std::string line = event.dump() + "\n";
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw ServiceError(500, "cannot open event log " + path);
    std::size_t written = 0;
    while (written < line.size()) {
        const ssize_t n = ::write(fd, line.data() + written, line.size() - written);
        if (n <= 0) {
            ::close(fd);
            throw ServiceError(500, "write to event log failed");
        }
        written += static_cast<std::size_t>(n);
    }
    const bool synced = ::fsync(fd) == 0;
    ::close(fd);
    if (!synced) throw ServiceError(500, "fsync of event log failed");
}

void EvalService::commit(const json& event) {
    persist(event);
    apply_event(event);
    ++events_;
    if (!options_.state_dir.empty() && ++events_since_snapshot_ >= options_.snapshot_every) snapshot_locked();
}

void EvalService::snapshot() {
    std::lock_guard lock(mutex_);
    if (!options_.state_dir.empty()) snapshot_locked();
}

void EvalService::snapshot_locked() {
    json sessions = json::array();
    for (const auto& [id, s] : sessions_) sessions.push_back(s.to_json());
    const json snap = {{"v", 1}, {"events", events_}, {"session_counter", session_counter_}, {"sessions", sessions}};
    io::write_file_atomic((fs::path(options_.state_dir) / "snapshot.json").string(), snap.dump() + "\n");
    events_since_snapshot_ = 0;
}

void EvalService::recover() {
    const fs::path dir(options_.state_dir);
    std::size_t skip = 0;
    if (fs::exists(dir / "snapshot.json")) {
        try {
            const json snap = json::parse(io::read_file((dir / "snapshot.json").string()));
            if (snap.value("v", 0) != 1) throw DataError("unsupported snapshot version");
            for (const auto& j : snap.at("sessions")) {
                // replaying the creation event restores coverage counts too
                Session s = Session::from_json(j);
                SessionState state = s.state;
                auto responses = std::move(s.responses);
                s.responses.clear();
                s.state = SessionState::active;
                apply_event({{"type", "session_created"}, {"session", s.to_json()}});
                Session& restored = sessions_.at(s.session_id);
                restored.responses = std::move(responses);
                restored.state = state;
            }
            session_counter_ = snap.at("session_counter").get<std::uint64_t>();
            skip = snap.at("events").get<std::size_t>();
        } catch (const json::exception& e) {
            throw DataError(std::string("corrupt snapshot: ") + e.what());
        }
    }

    const fs::path log_path = dir / "events.jsonl";
    if (!fs::exists(log_path)) {
        if (skip > 0) throw DataError("snapshot refers to " + std::to_string(skip) + " events but the log is missing");
        events_ = 0;
        return;
    }
    std::string text = io::read_file(log_path.string());
    if (!text.empty() && text.back() != '\n') {
        // a write that never got acknowledged
        const auto cut = text.find_last_of('\n');
        const std::size_t keep = cut == std::string::npos ? 0 : cut + 1;
        log::warn("event log ends with a partial record; dropping " + std::to_string(text.size() - keep) + " bytes");
        text.resize(keep);
        fs::resize_file(log_path, keep);
    }
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        const auto end = text.find('\n', start);
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line_no <= skip) continue;
        try {
            apply_event(json::parse(line));
        } catch (const json::exception& e) {
            throw DataError("event log line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (line_no < skip)
        throw DataError("snapshot covers " + std::to_string(skip) + " events but the log holds " +
                        std::to_string(line_no));
    events_ = line_no;
    events_since_snapshot_ = line_no - skip;
}


// ---------------------------------------------------------------------------
// HTTP

namespace {

std::string content_type_for(const std::string& path) {
    const std::string ext = fs::path(path).extension().string();
    if (ext == ".mp3") return "audio/mpeg";
    if (ext == ".ogg" || ext == ".opus") return "audio/ogg";
    if (ext == ".flac") return "audio/flac";
    if (ext == ".m4a") return "audio/mp4";
    if (ext == ".webm") return "audio/webm";
    return "audio/wav";
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

json session_body(const Session& s) {
    json j = s.to_json();
    j["v"] = 1;
    j["answered"] = s.responses.size();
    j["total"] = s.trial_ids.size();
    return j;
}

// Clients may name the trial by its 1-based index, the choice by candidate
// position (1-4) and give ratings as an array in presentation order.
TrialResponse response_from_request(const EvalService& service, const Session& s, const json& body) {
    if (!body.is_object()) throw ServiceError(400, "response body must be a JSON object");
    if (body.contains("v") && body.at("v") != 1) throw ServiceError(400, "unsupported payload version");
    json j = body;
    if (!j.contains("trial_id")) {
        if (!j.contains("index") || !j.at("index").is_number_integer())
            throw ServiceError(400, "trial_id or index is required");
        const auto index = j.at("index").get<long long>();
        if (index < 1 || index > static_cast<long long>(s.trial_ids.size()))
            throw ServiceError(404, "trial index out of range");
        j["trial_id"] = s.trial_ids[static_cast<std::size_t>(index - 1)];
    }
    if (!j.at("trial_id").is_string()) throw ServiceError(400, "trial_id must be a string");
    const auto& ids = s.trial_ids;
    if (std::find(ids.begin(), ids.end(), j.at("trial_id").get<std::string>()) == ids.end())
        throw ServiceError(404, "trial is not assigned to this session");
    const rank::TrialSet& t = service.trial(j.at("trial_id").get<std::string>());
    if (j.contains("chosen") && j.at("chosen").is_number_integer()) {
        const auto c = j.at("chosen").get<long long>();
        if (c < 1 || c > static_cast<long long>(t.candidates.size()))
            throw ServiceError(400, "chosen position must lie in 1-4");
        j["chosen"] = t.candidates[static_cast<std::size_t>(c - 1)];
    }
    if (j.contains("ratings") && j.at("ratings").is_array()) {
        const json& arr = j.at("ratings");
        if (arr.size() != t.candidates.size()) throw ServiceError(400, "ratings must cover all four candidates");
        json m = json::object();
        for (std::size_t i = 0; i < arr.size(); ++i) m[t.candidates[i]] = arr[i];
        j["ratings"] = m;
    }
    const json ratings = j.value("ratings", json::object());
    for (const auto& [k, v] : ratings.items())
        if (!v.is_number_integer()) throw ServiceError(400, "rating for '" + k + "' must be an integer");
    if (!j.contains("context_intelligible")) throw ServiceError(400, "context_intelligible is required");
    j.erase("submitted_at");  // server clock only
    return TrialResponse::from_json(j);
}

}  // namespace

struct HttpServer::Impl {
    EvalService& service;
    ServerOptions options;
    httplib::Server server;
    bool bound = false;

    Impl(EvalService& s, ServerOptions o) : service(s), options(std::move(o)) {}

    template <typename F>
    httplib::Server::Handler guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const ServiceError& e) {
                send_json(res, e.status, {{"v", 1}, {"error", e.what()}});
            } catch (const json::exception& e) {
                send_json(res, 400, {{"v", 1}, {"error", std::string("malformed JSON: ") + e.what()}});
            } catch (const Error& e) {
                send_json(res, 400, {{"v", 1}, {"error", e.what()}});
            } catch (const std::exception& e) {
                log::warn(std::string("request failed: ") + e.what());
                send_json(res, 500, {{"v", 1}, {"error", "internal error"}});
            }
        };
    }

    void routes() {
        server.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const json body = json::parse(req.body);
            if (body.contains("v") && body.at("v") != 1) throw ServiceError(400, "unsupported payload version");
            if (!body.contains("participant_id") || !body.at("participant_id").is_string())
                throw ServiceError(400, "participant_id is required");
            const std::string cond = body.value("condition", std::string("audio_only"));
            rank::ModalityCondition condition;
            try {
                condition = rank::parse_modality_condition(cond);
            } catch (const Error& e) {
                throw ServiceError(400, e.what());
            }
            const Session s = service.create_session(body.at("participant_id").get<std::string>(), condition);
            send_json(res, 201, session_body(s));
        }));
        server.Get(R"(/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, session_body(service.session(req.matches[1])));
        }));
        server.Get(R"(/sessions/([^/]+)/trials/(\d+))",
                   guarded([this](const httplib::Request& req, httplib::Response& res) {
                       const std::size_t n = std::stoul(req.matches[2]);
                       send_json(res, 200, service.trial_payload(req.matches[1], n));
                   }));
        server.Post(R"(/sessions/([^/]+)/responses)",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const std::string id = req.matches[1];
                        const Session s = service.session(id);
                        TrialResponse r = response_from_request(service, s, json::parse(req.body));
                        send_json(res, 201, service.submit_response(id, std::move(r)));
                    }));
        server.Post(R"(/sessions/([^/]+)/abandon)",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        service.abandon(req.matches[1]);
                        send_json(res, 200, session_body(service.session(req.matches[1])));
                    }));
        server.Get("/report", guarded([this](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, service.report().to_json());
        }));
        server.Get(R"(/media/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto clip = service.media(req.matches[1]);
            if (!clip) throw ServiceError(404, "unknown clip " + std::string(req.matches[1]));
            std::string bytes;
            try {
                bytes = io::read_file(clip->path);
            } catch (const Error&) {
                throw ServiceError(404, "media file missing for clip " + std::string(req.matches[1]));
            }
            res.status = 200;
            res.set_content(std::move(bytes), content_type_for(clip->path));
        }));
        if (!options.static_dir.empty()) {
            if (!server.set_mount_point("/", options.static_dir))
                throw ConfigError("static directory " + options.static_dir + " does not exist");
        }
    }
};

HttpServer::HttpServer(EvalService& service, ServerOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
    impl_->routes();
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind() {
    int port = impl_->options.port;
    if (port == 0) {
        port = impl_->server.bind_to_any_port(impl_->options.host);
        if (port < 0) throw ConfigError("cannot bind " + impl_->options.host);
    } else if (!impl_->server.bind_to_port(impl_->options.host, port)) {
        throw ConfigError("cannot bind " + impl_->options.host + ":" + std::to_string(port));
    }
    impl_->bound = true;
    return port;
}

void HttpServer::listen() {
    if (!impl_->bound) bind();
    impl_->server.listen_after_bind();
}

void HttpServer::stop() {
    if (impl_) impl_->server.stop();
}

}  // namespace fbrank::evalservice
