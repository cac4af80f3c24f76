#include "fbrank/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "fbrank/error.hpp"
#include "fbrank/log.hpp"
#include "fbrank/util.hpp"

namespace fbrank::corpus {

using nlohmann::json;

namespace {

constexpr double kTimeEps = 1e-9;

constexpr std::array<std::string_view, kNumFunctions> kFunctionNames = {"C", "A", "S",  "U",  "D",
                                                                        "Y", "N", "Ds", "MS", "SS"};

std::string default_speaker(const std::string& conv, Channel ch) {
    return conv + ":" + std::string(to_string(ch));
}

std::string make_instance_id(const std::string& conv, Channel ch, double start_s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%08lld", static_cast<long long>(std::llround(start_s * 1000.0)));
    return conv + "_" + std::string(to_string(ch)) + "_" + buf;
}

// Speech occupies [start, end); windows are half-open as well.
bool overlaps(const WordToken& t, double lo, double hi) { return t.start_s < hi && t.end_s > lo; }

std::size_t word_parts(std::string_view normalized) {
    return static_cast<std::size_t>(std::count(normalized.begin(), normalized.end(), '-')) + 1;
}

struct ChannelStream {
    std::vector<const WordToken*> words;
    std::string speaker;
};

}  // namespace

std::string_view to_string(Channel ch) { return ch == Channel::A ? "A" : "B"; }

std::string_view to_string(FunctionLabel label) { return kFunctionNames[static_cast<std::size_t>(label)]; }

std::string_view to_string(LabelSource source) {
    switch (source) {
        case LabelSource::manual: return "manual";
        case LabelSource::automatic: return "automatic";
        case LabelSource::lexicon: return "lexicon";
    }
    return "lexicon";
}

Channel parse_channel(std::string_view text) {
    if (text == "A" || text == "a") return Channel::A;
    if (text == "B" || text == "b") return Channel::B;
    throw DataError("invalid channel '" + std::string(text) + "'");
}

FunctionLabel parse_function(std::string_view text) {
    for (std::size_t i = 0; i < kNumFunctions; ++i)
        if (kFunctionNames[i] == text) return kAllFunctions[i];
    throw DataError("unknown function label '" + std::string(text) + "'");
}

LabelSource parse_label_source(std::string_view text) {
    if (text == "manual") return LabelSource::manual;
    if (text == "automatic") return LabelSource::automatic;
    if (text == "lexicon") return LabelSource::lexicon;
    throw DataError("unknown label source '" + std::string(text) + "'");
}

std::string_view to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view text) {
    if (text == "train") return Split::train;
    if (text == "valid") return Split::valid;
    if (text == "test") return Split::test;
    throw DataError("unknown split '" + std::string(text) + "'");
}

std::string normalize_word(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
        const bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-' || c == '\'' ||
                          static_cast<unsigned char>(c) >= 0x80;
        if (keep) out.push_back(c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lexicon

Lexicon::Lexicon(std::vector<std::string> entries) {
    for (auto& e : entries) {
        std::string key = to_lower(trim(e));
        if (key.empty() || key[0] == '#') continue;
        std::replace(key.begin(), key.end(), ' ', '-');
        max_words_ = std::max(max_words_, word_parts(key));
        entries_.insert(std::move(key));
    }
}

Lexicon Lexicon::from_file(const std::string& path) {
    Lexicon lex(io::read_lines(path));
    if (lex.empty()) throw ConfigError("lexicon " + path + " has no entries");
    return lex;
}

Lexicon Lexicon::defaults() {
    return Lexicon({"uh-huh", "mhm", "yeah", "right", "wow", "really", "no", "yes", "oh", "okay", "gosh", "jeez",
                    "what", "pardon", "huh"});
}

std::string Lexicon::version() const {
    std::uint64_t h = fnv1a("lexicon");
    for (const auto& e : entries_) h = fnv1a(e + "\n", h);
    return hex64(h);
}

// ---------------------------------------------------------------------------
// Extraction

ExtractionResult extract_feedback_instances(std::vector<WordToken> tokens, const Lexicon& lexicon,
                                            const ExtractionConfig& config) {
    if (lexicon.empty()) throw ConfigError("lexicon is empty");
    if (config.min_duration_s < 0 || config.pre_silence_s < 0 || config.post_silence_s < 0 || config.join_gap_s < 0)
        throw ConfigError("extraction constraints must be non-negative");

    std::stable_sort(tokens.begin(), tokens.end(), [](const WordToken& a, const WordToken& b) {
        if (a.conversation_id != b.conversation_id) return a.conversation_id < b.conversation_id;
        if (a.channel != b.channel) return a.channel < b.channel;
        if (a.start_s != b.start_s) return a.start_s < b.start_s;
        if (a.end_s != b.end_s) return a.end_s < b.end_s;
        return a.text < b.text;
    });

    ExtractionResult result;
    std::size_t begin = 0;
    while (begin < tokens.size()) {
        std::size_t end = begin;
        while (end < tokens.size() && tokens[end].conversation_id == tokens[begin].conversation_id) ++end;
        const std::string& conv = tokens[begin].conversation_id;

        std::array<ChannelStream, 2> streams;
        std::string problem;
        for (std::size_t i = begin; i < end && problem.empty(); ++i) {
            const WordToken& t = tokens[i];
            auto& stream = streams[static_cast<std::size_t>(t.channel)];
            if (!(t.end_s > t.start_s) || t.start_s < 0 || t.text.empty()) {
                problem = "invalid token '" + t.text + "' at " + std::to_string(t.start_s);
                break;
            }
            if (!stream.words.empty() && t.start_s < stream.words.back()->end_s) {
                problem = "overlapping tokens on channel " + std::string(to_string(t.channel)) + " at " +
                          std::to_string(t.start_s) + "s";
                break;
            }
            if (stream.speaker.empty())
                stream.speaker = t.speaker_id.empty() ? default_speaker(conv, t.channel) : t.speaker_id;
            stream.words.push_back(&t);
        }
        if (!problem.empty()) {
            result.diagnostics.push_back("conversation " + conv + " rejected: " + problem);
            log::warn(result.diagnostics.back());
            begin = end;
            continue;
        }

        std::vector<FeedbackInstance> found;
        for (std::size_t c = 0; c < 2; ++c) {
            const auto& words = streams[c].words;
            const Channel ch = static_cast<Channel>(c);
            const std::string speaker = streams[c].speaker;
            std::string other = streams[1 - c].speaker;
            if (other.empty()) other = default_speaker(conv, static_cast<Channel>(1 - c));

            for (std::size_t i = 0; i < words.size(); ++i) {
                const bool onset = i == 0 || words[i]->start_s - words[i - 1]->end_s >= config.join_gap_s;
                if (!onset) continue;

                // Longest lexicon prefix of the unit starting at i.
                std::size_t best_len = 0;
                std::string key;
                std::size_t parts = 0;
                for (std::size_t j = i; j < words.size(); ++j) {
                    if (j > i && words[j]->start_s - words[j - 1]->end_s >= config.join_gap_s) break;
                    const std::string w = normalize_word(words[j]->text);
                    if (w.empty()) break;
                    parts += word_parts(w);
                    if (parts > lexicon.max_words()) break;
                    key = j == i ? w : key + "-" + w;
                    if (lexicon.contains(key)) best_len = j - i + 1;
                }
                if (best_len == 0) continue;

                const WordToken& first = *words[i];
                const WordToken& last = *words[i + best_len - 1];
                const double start = first.start_s;
                const double stop = last.end_s;
                if (stop - start < config.min_duration_s - kTimeEps) continue;

                bool waive_pre = true;
                for (std::size_t k = i; k < i + best_len; ++k)
                    waive_pre = waive_pre && words[k]->crosstalk_free.value_or(false);
                if (!waive_pre && i > 0 && overlaps(*words[i - 1], start - config.pre_silence_s, start)) continue;

                const std::size_t next = i + best_len;
                if (config.post_silence_s > 0 && next < words.size() &&
                    overlaps(*words[next], stop, stop + config.post_silence_s))
                    continue;

                FeedbackInstance inst;
                inst.id = make_instance_id(conv, ch, start);
                inst.conversation_id = conv;
                inst.channel = ch;
                inst.speaker_id = speaker;
                inst.interlocutor_id = other;
                inst.start_s = start;
                inst.end_s = stop;
                for (std::size_t k = i; k < i + best_len; ++k) inst.tokens.push_back(words[k]->text);
                inst.label_source = LabelSource::lexicon;
                found.push_back(std::move(inst));
            }
        }
        std::stable_sort(found.begin(), found.end(), [](const FeedbackInstance& a, const FeedbackInstance& b) {
            if (a.start_s != b.start_s) return a.start_s < b.start_s;
            return a.channel < b.channel;
        });
        for (auto& f : found) result.instances.push_back(std::move(f));
        begin = end;
    }
    return result;
}

ContextWindow build_context(const FeedbackInstance& instance, const std::vector<WordToken>& tokens) {
    ContextWindow window;
    window.instance_id = instance.id;
    window.ctx_end_s = instance.start_s;
    window.ctx_start_s = std::max(0.0, instance.start_s - kContextSeconds);
    window.short_context = instance.start_s < kContextSeconds;

    std::vector<const WordToken*> words;
    for (const auto& t : tokens) {
        if (t.conversation_id != instance.conversation_id || t.channel == instance.channel) continue;
        if (overlaps(t, window.ctx_start_s, window.ctx_end_s)) words.push_back(&t);
    }
    std::stable_sort(words.begin(), words.end(),
                     [](const WordToken* a, const WordToken* b) { return a->start_s < b->start_s; });
    for (const auto* w : words) {
        if (!window.transcript_text.empty()) window.transcript_text += ' ';
        window.transcript_text += w->text;
    }
    return window;
}

// ---------------------------------------------------------------------------
// Splits

std::vector<const ManifestEntry*> DatasetManifest::in_split(Split split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(&e);
    return out;
}

namespace {

struct DisjointSet {
    std::vector<std::size_t> parent;
    explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

}  // namespace

DatasetManifest split_dataset(const std::vector<FeedbackInstance>& instances, const SplitRatios& ratios,
                              std::uint64_t seed) {
    const std::array<double, 3> target = {ratios.train, ratios.valid, ratios.test};
    for (double r : target)
        if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
    if (std::abs(target[0] + target[1] + target[2] - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");

    // Conversations are linked when they share a speaker.
    std::map<std::string, std::size_t> conv_index;
    for (const auto& inst : instances) conv_index.emplace(inst.conversation_id, 0);
    std::size_t next = 0;
    for (auto& [conv, idx] : conv_index) idx = next++;

    DisjointSet groups(conv_index.size());
    std::map<std::string, std::size_t> speaker_home;
    for (const auto& inst : instances) {
        const std::size_t c = conv_index.at(inst.conversation_id);
        for (const std::string& spk : {inst.speaker_id, inst.interlocutor_id}) {
            if (spk.empty()) continue;
            auto [it, inserted] = speaker_home.emplace(spk, c);
            if (!inserted) groups.unite(it->second, c);
        }
    }

    std::map<std::size_t, std::size_t> weight;  // component root -> instance count
    for (const auto& [conv, idx] : conv_index) weight.emplace(groups.find(idx), 0);
    for (const auto& inst : instances) ++weight[groups.find(conv_index.at(inst.conversation_id))];

    std::size_t active = 0;
    for (double r : target) active += r > 0 ? 1 : 0;
    if (conv_index.size() < active || weight.size() < active)
        throw DataError("fewer independent conversation groups (" + std::to_string(weight.size()) +
                        ") than non-empty splits (" + std::to_string(active) + ")");

    std::vector<std::pair<std::size_t, std::size_t>> order(weight.begin(), weight.end());
    Rng rng(seed);
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

    const double total = static_cast<double>(instances.size());
    std::array<double, 3> assigned = {0, 0, 0};
    std::array<std::size_t, 3> groups_in = {0, 0, 0};
    std::map<std::size_t, Split> component_split;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const std::size_t remaining = order.size() - k;
        std::size_t empty_active = 0;
        for (std::size_t s = 0; s < 3; ++s) empty_active += (target[s] > 0 && groups_in[s] == 0) ? 1 : 0;
        const bool must_fill = remaining <= empty_active;

        std::size_t best = 3;
        double best_deficit = -1e300;
        for (std::size_t s = 0; s < 3; ++s) {
            if (target[s] <= 0) continue;
            if (must_fill && groups_in[s] > 0) continue;
            const double deficit = target[s] * total - assigned[s];
            if (deficit > best_deficit) {
                best_deficit = deficit;
                best = s;
            }
        }
        component_split[order[k].first] = static_cast<Split>(best);
        assigned[best] += static_cast<double>(order[k].second);
        ++groups_in[best];
    }

    DatasetManifest manifest;
    for (const auto& inst : instances) {
        ManifestEntry entry;
        entry.instance = inst;
        entry.split = component_split.at(groups.find(conv_index.at(inst.conversation_id)));
        manifest.entries.push_back(std::move(entry));
    }
    if (total > 0) {
        for (std::size_t s = 0; s < 3; ++s) {
            const double achieved = assigned[s] / total;
            if (std::abs(achieved - target[s]) > 0.05)
                log::warn("split " + std::string(to_string(static_cast<Split>(s))) + " holds " +
                          std::to_string(achieved * 100.0) + "% of instances (target " +
                          std::to_string(target[s] * 100.0) + "%)");
        }
    }
    return manifest;
}

std::size_t apply_labels(std::vector<FeedbackInstance>& instances, const std::vector<LabelRecord>& labels,
                         double tolerance_s) {
    std::size_t applied = 0;
    for (auto& inst : instances) {
        for (const auto& rec : labels) {
            if (rec.conversation_id == inst.conversation_id && rec.channel == inst.channel &&
                std::abs(rec.start_s - inst.start_s) <= tolerance_s) {
                inst.function_label = rec.label;
                inst.label_source = rec.source;
                ++applied;
                break;
            }
        }
    }
    return applied;
}

// ---------------------------------------------------------------------------
// JSON-Lines

WordToken parse_word_token(const json& j) {
    WordToken t;
    try {
        t.conversation_id = j.at("conv").get<std::string>();
        t.channel = parse_channel(j.at("ch").get<std::string>());
        t.start_s = j.at("start").get<double>();
        t.end_s = j.at("end").get<double>();
        t.text = j.at("text").get<std::string>();
        if (j.contains("spk")) t.speaker_id = j.at("spk").get<std::string>();
        if (j.contains("xtalk_free")) t.crosstalk_free = j.at("xtalk_free").get<bool>();
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed word token: ") + e.what());
    }
    return t;
}

json to_json(const WordToken& token) {
    json j = {{"conv", token.conversation_id},
              {"ch", to_string(token.channel)},
              {"start", token.start_s},
              {"end", token.end_s},
              {"text", token.text}};
    if (!token.speaker_id.empty()) j["spk"] = token.speaker_id;
    if (token.crosstalk_free) j["xtalk_free"] = *token.crosstalk_free;
    return j;
}

std::vector<WordToken> read_transcripts(const std::string& path) {
    std::vector<WordToken> tokens;
    std::size_t line_no = 0;
    for (const auto& line : io::read_lines(path)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            tokens.push_back(parse_word_token(json::parse(line)));
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return tokens;
}

std::vector<LabelRecord> read_labels(const std::string& path) {
    std::vector<LabelRecord> labels;
    for (const auto& line : io::read_lines(path)) {
        if (trim(line).empty()) continue;
        try {
            const json j = json::parse(line);
            LabelRecord rec;
            rec.conversation_id = j.at("conv").get<std::string>();
            rec.channel = parse_channel(j.at("ch").get<std::string>());
            rec.start_s = j.at("start").get<double>();
            rec.label = parse_function(j.at("label").get<std::string>());
            rec.source = parse_label_source(j.value("source", std::string("manual")));
            labels.push_back(rec);
        } catch (const json::exception& e) {
            throw DataError(path + ": malformed label record: " + e.what());
        }
    }
    return labels;
}

json to_json(const FeedbackInstance& inst) {
    json j = {{"id", inst.id},
              {"conv", inst.conversation_id},
              {"ch", to_string(inst.channel)},
              {"spk", inst.speaker_id},
              {"other", inst.interlocutor_id},
              {"start", inst.start_s},
              {"end", inst.end_s},
              {"tokens", inst.tokens},
              {"label_source", to_string(inst.label_source)}};
    j["label"] = inst.function_label ? json(to_string(*inst.function_label)) : json(nullptr);
    return j;
}

FeedbackInstance instance_from_json(const json& j) {
    FeedbackInstance inst;
    try {
        inst.id = j.at("id").get<std::string>();
        inst.conversation_id = j.at("conv").get<std::string>();
        inst.channel = parse_channel(j.at("ch").get<std::string>());
        inst.speaker_id = j.value("spk", default_speaker(inst.conversation_id, inst.channel));
        inst.interlocutor_id = j.value("other", std::string());
        inst.start_s = j.at("start").get<double>();
        inst.end_s = j.at("end").get<double>();
        inst.tokens = j.at("tokens").get<std::vector<std::string>>();
        inst.label_source = parse_label_source(j.value("label_source", std::string("lexicon")));
        if (j.contains("label") && !j.at("label").is_null())
            inst.function_label = parse_function(j.at("label").get<std::string>());
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed instance record: ") + e.what());
    }
    return inst;
}

json to_json(const ContextWindow& w) {
    return {{"start", w.ctx_start_s}, {"end", w.ctx_end_s}, {"text", w.transcript_text}, {"short_context", w.short_context}};
}

namespace {

std::optional<ContextWindow> context_from_json(const json& j, const std::string& id) {
    if (!j.contains("ctx") || j.at("ctx").is_null()) return std::nullopt;
    const json& c = j.at("ctx");
    ContextWindow w;
    w.instance_id = id;
    w.ctx_start_s = c.at("start").get<double>();
    w.ctx_end_s = c.at("end").get<double>();
    w.transcript_text = c.value("text", std::string());
    w.short_context = c.value("short_context", false);
    return w;
}

}  // namespace

std::string serialize_instances(const std::vector<FeedbackInstance>& instances,
                                const std::vector<ContextWindow>& contexts) {
    std::map<std::string, const ContextWindow*> by_id;
    for (const auto& c : contexts) by_id[c.instance_id] = &c;
    std::ostringstream out;
    for (const auto& inst : instances) {
        json j = to_json(inst);
        if (auto it = by_id.find(inst.id); it != by_id.end()) j["ctx"] = to_json(*it->second);
        out << j.dump() << '\n';
    }
    return out.str();
}

std::vector<std::pair<FeedbackInstance, std::optional<ContextWindow>>> read_instances(const std::string& path) {
    std::vector<std::pair<FeedbackInstance, std::optional<ContextWindow>>> out;
    for (const auto& line : io::read_lines(path)) {
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path + ": " + e.what());
        }
        if (j.contains("kind")) continue;
        auto inst = instance_from_json(j);
        auto ctx = context_from_json(j, inst.id);
        out.emplace_back(std::move(inst), std::move(ctx));
    }
    return out;
}

std::string serialize_manifest(const DatasetManifest& manifest) {
    std::ostringstream out;
    json header = {{"v", 1},
                   {"kind", "manifest"},
                   {"corpus", manifest.corpus_name},
                   {"lexicon_version", manifest.lexicon_version}};
    if (!manifest.config_hash.empty()) header["config_hash"] = manifest.config_hash;
    if (manifest.seed) header["seed"] = *manifest.seed;
    out << header.dump() << '\n';
    for (const auto& e : manifest.entries) {
        json j = to_json(e.instance);
        j["split"] = to_string(e.split);
        if (e.context) j["ctx"] = to_json(*e.context);
        out << j.dump() << '\n';
    }
    return out.str();
}

DatasetManifest read_manifest(const std::string& path) {
    DatasetManifest manifest;
    bool header_seen = false;
    for (const auto& line : io::read_lines(path)) {
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path + ": " + e.what());
        }
        if (j.value("kind", std::string()) == "manifest") {
            manifest.corpus_name = j.value("corpus", std::string());
            manifest.lexicon_version = j.value("lexicon_version", std::string());
            manifest.config_hash = j.value("config_hash", std::string());
            if (j.contains("seed")) manifest.seed = j.at("seed").get<std::uint64_t>();
            header_seen = true;
            continue;
        }
        ManifestEntry e;
        e.instance = instance_from_json(j);
        if (!j.contains("split")) throw DataError(path + ": entry " + e.instance.id + " has no split tag");
        e.split = parse_split(j.at("split").get<std::string>());
        e.context = context_from_json(j, e.instance.id);
        manifest.entries.push_back(std::move(e));
    }
    if (!header_seen) throw DataError(path + " is not a manifest (missing header line)");
    return manifest;
}

}  // namespace fbrank::corpus
