#pragma once

// Human-evaluation service: assigns trial sets to participants, records their
// best-match choices, 1-4 ratings and intelligibility flags, and aggregates
// the responses against model answers.
//
// State lives in memory and is made durable through an append-only JSON-Lines
// event log (events.jsonl) plus a periodic snapshot (snapshot.json) in the
// state directory. Every acknowledged write is flushed and fsync'ed first.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fbrank/rank.hpp"

namespace fbrank::evalservice {

enum class SessionState { active, complete, abandoned };
std::string_view to_string(SessionState s);

inline constexpr std::size_t kTrialsPerSession = 20;

struct TrialResponse {
    std::string trial_id;
    std::string chosen;                 // candidate id
    std::map<std::string, int> ratings;  // candidate id -> 1..4
    bool context_intelligible = true;
    std::string submitted_at;
    std::string idempotency_key;
    std::vector<std::string> presentation_order;  // as shown to the participant, if reported

    [[nodiscard]] nlohmann::json to_json() const;
    static TrialResponse from_json(const nlohmann::json& j);
};

struct Session {
    std::string session_id;
    std::string participant_id;
    rank::ModalityCondition condition = rank::ModalityCondition::audio_only;
    std::vector<std::string> trial_ids;  // presentation order, 20 entries
    SessionState state = SessionState::active;
    std::map<std::string, TrialResponse> responses;  // by trial id

    [[nodiscard]] nlohmann::json to_json() const;
    static Session from_json(const nlohmann::json& j);
};

struct MediaClip {
    std::string path;  // absolute, or relative to the media index
    std::optional<std::string> transcript;
};

// {"v":1,"clips":{"<clip_id>":{"path":"...","transcript":"..."}}}
std::map<std::string, MediaClip> read_media_index(const std::string& path);

// Clip ids follow the feature segment naming: <instance>.ctx / <instance>.fb.
std::string context_clip(const std::string& instance_id);
std::string candidate_clip(const std::string& instance_id);

// Checks a response against its trial; throws ServiceError(400) on violations.
void validate_response(const TrialResponse& response, const rank::TrialSet& trial);

// ---------------------------------------------------------------------------
// Aggregation

struct ConditionCell {
    std::size_t responses = 0;
    std::size_t correct = 0;
    std::size_t intelligible = 0;
    [[nodiscard]] double accuracy() const;
    [[nodiscard]] double intelligibility() const;
};

struct PairRating {
    rank::ModalityCondition condition;
    std::string context_id;
    std::string candidate_id;
    double mean_rating = 0.0;
    std::size_t n = 0;
    bool same_function = false;
    std::optional<double> similarity;
};

struct AggregateReport {
    // condition -> {same_function, different_function, all}
    std::map<rank::ModalityCondition, std::map<std::string, ConditionCell>> cells;
    std::vector<PairRating> pairs;
    // condition -> {"all", "same_function"} -> correlation, when >= 3 pairs with non-constant scores
    std::map<rank::ModalityCondition, std::map<std::string, nlohmann::json>> correlation;
    std::map<std::string, double> model_accuracy;  // same_function / different_function / all
    std::size_t sessions = 0;

    [[nodiscard]] nlohmann::json to_json() const;
};

// Only complete sessions contribute. Throws ServiceError(409) without a
// complete session and DataError when model answers are given but share no
// rated pair.
AggregateReport aggregate(const std::vector<Session>& sessions, const std::vector<rank::TrialSet>& trials,
                          const std::vector<rank::ModelAnswer>* answers);

// ---------------------------------------------------------------------------
// Service

struct ServiceOptions {
    std::string state_dir;  // empty = in-memory only
    std::uint64_t seed = 0;
    std::size_t snapshot_every = 50;  // events between snapshots
    std::function<std::string()> clock;  // timestamps; defaults to UTC ISO-8601
};

class EvalService {
public:
    EvalService(std::vector<rank::TrialSet> trials, std::map<std::string, MediaClip> media,
                std::vector<rank::ModelAnswer> answers, ServiceOptions options);

    Session create_session(const std::string& participant_id, rank::ModalityCondition condition);
    [[nodiscard]] Session session(const std::string& session_id) const;
    // 1-based index into the session's trials.
    [[nodiscard]] nlohmann::json trial_payload(const std::string& session_id, std::size_t index) const;
    // Returns the acknowledgement body. Same idempotency key on an answered
    // trial returns the original acknowledgement; any other resubmission is 409.
    nlohmann::json submit_response(const std::string& session_id, TrialResponse response);
    void abandon(const std::string& session_id);
    [[nodiscard]] AggregateReport report() const;

    [[nodiscard]] const rank::TrialSet& trial(const std::string& trial_id) const;
    [[nodiscard]] std::optional<MediaClip> media(const std::string& clip_id) const;
    [[nodiscard]] std::vector<Session> sessions() const;
    // Per-trial assignment counts for one condition.
    [[nodiscard]] std::map<std::string, std::size_t> coverage(rank::ModalityCondition condition) const;

    void snapshot();

private:
    void snapshot_locked();
    void apply_event(const nlohmann::json& event);
    void persist(const nlohmann::json& event);
    void commit(const nlohmann::json& event);
    void recover();
    nlohmann::json acknowledgement(const Session& s, const TrialResponse& r) const;
    Session& find_session(const std::string& id);
    const Session& find_session(const std::string& id) const;

    std::vector<rank::TrialSet> trials_;
    std::map<std::string, std::size_t> trial_index_;
    std::vector<std::size_t> tie_order_;  // seeded rank per trial for coverage ties
    std::map<std::string, MediaClip> media_;
    std::vector<rank::ModelAnswer> answers_;
    ServiceOptions options_;

    mutable std::mutex mutex_;
    std::map<std::string, Session> sessions_;
    std::map<rank::ModalityCondition, std::vector<std::size_t>> coverage_;
    std::uint64_t session_counter_ = 0;
    std::size_t events_ = 0;
    std::size_t events_since_snapshot_ = 0;
};

// ---------------------------------------------------------------------------
// HTTP

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 = any free port
    std::string static_dir;  // optional UI bundle mounted at /
};

class HttpServer {
public:
    HttpServer(EvalService& service, ServerOptions options);
    ~HttpServer();
    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // Binds and returns the port; listening happens in listen().
    int bind();
    void listen();  // blocks until stop()
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace fbrank::evalservice
