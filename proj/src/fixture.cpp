#include "fbrank/fixture.hpp"

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "fbrank/corpus.hpp"
#include "fbrank/error.hpp"
#include "fbrank/features.hpp"
#include "fbrank/util.hpp"

namespace fbrank::fixture {

namespace fs = std::filesystem;
using nlohmann::json;
using corpus::FunctionLabel;

namespace {

constexpr int kLatent = 8;

// Feedback wordings per function, indexed like corpus::kAllFunctions.
const std::array<std::vector<std::vector<std::string>>, corpus::kNumFunctions> kWordings = {{
    {{"uh-huh"}, {"mhm"}},          // C
    {{"yeah"}, {"right"}},          // A
    {{"oh", "no"}, {"jeez"}},       // S
    {{"pardon"}, {"huh"}},          // U
    {{"no", "way"}, {"nah"}},       // D
    {{"yes"}, {"yep"}},             // Y
    {{"no"}, {"nope"}},             // N
    {{"gosh"}, {"ugh"}},            // Ds
    {{"oh"}, {"really"}},           // MS
    {{"wow"}, {"what"}},            // SS
}};

const std::vector<std::string> kTalk = {"so",   "we",    "went",  "to",   "the",  "store", "and", "then", "my",
                                        "sister", "said", "that", "it",   "was",  "kind",  "of",  "late", "i",
                                        "think", "they", "were", "going", "home", "after", "work"};

struct Event {
    std::string conv;
    corpus::Channel channel;
    double start = 0;
    std::size_t function = 0;
};

// 16 kHz mono 16-bit PCM, 0.1 s of silence.
std::string silent_wav() {
    const std::uint32_t samples = 1600, rate = 16000, bytes = samples * 2;
    std::string out;
    auto u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    auto u16 = [&](std::uint16_t v) {
        out.push_back(static_cast<char>(v & 0xff));
        out.push_back(static_cast<char>(v >> 8));
    };
    out += "RIFF";
    u32(36 + bytes);
    out += "WAVEfmt ";
    u32(16);
    u16(1);
    u16(1);
    u32(rate);
    u32(rate * 2);
    u16(2);
    u16(16);
    out += "data";
    u32(bytes);
    out.append(bytes, '\0');
    return out;
}

features::FeatureTensor make_tensor(Rng& rng, const std::vector<Eigen::MatrixXd>& maps, const Eigen::VectorXd& z,
                                    std::uint32_t frames, const std::vector<double>& layer_gain) {
    const auto layers = static_cast<std::uint32_t>(maps.size());
    const auto dim = static_cast<std::uint32_t>(maps.front().rows());
    features::FeatureTensor t(layers, frames, dim);
    for (std::uint32_t l = 0; l < layers; ++l) {
        const Eigen::VectorXd signal = layer_gain[l] * (maps[l] * z);
        for (std::uint32_t f = 0; f < frames; ++f)
            for (std::uint32_t d = 0; d < dim; ++d)
                t.at(l, f, d) = static_cast<float>(signal(d) + 0.5 * rng.normal());
    }
    return t;
}

std::vector<Eigen::MatrixXd> random_maps(Rng& rng, std::uint32_t layers, std::uint32_t dim) {
    std::vector<Eigen::MatrixXd> maps;
    for (std::uint32_t l = 0; l < layers; ++l) {
        Eigen::MatrixXd m(dim, kLatent);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() / std::sqrt(double(kLatent));
        maps.push_back(std::move(m));
    }
    return maps;
}

}  // namespace

FixtureSummary write_fixture(const std::string& dir_str, const FixtureOptions& o) {
    if (o.conversations < 2 || o.blocks < 1) throw ConfigError("fixture needs at least 2 conversations and 1 block");
    if (o.layers < 1 || o.frames < 1 || o.audio_dim < 1 || o.text_dim < 1)
        throw ConfigError("fixture feature dimensions must be positive");
    const fs::path dir(dir_str);
    fs::create_directories(dir / "features");
    FixtureSummary summary;

    // -- transcripts -------------------------------------------------------
    Rng rng(mix_seed(o.seed, 1));
    std::vector<corpus::WordToken> tokens;
    std::vector<Event> events;
    auto word = [&](const std::string& conv, corpus::Channel ch, const std::string& spk, double s, double e,
                    const std::string& text) {
        corpus::WordToken w;
        w.conversation_id = conv;
        w.channel = ch;
        w.speaker_id = spk;
        w.start_s = s;
        w.end_s = e;
        w.text = text;
        tokens.push_back(std::move(w));
    };
    for (int c = 0; c < o.conversations; ++c) {
        char name[16];
        std::snprintf(name, sizeof name, "fx%03d", c);
        const std::string conv = name;
        // every sixth conversation reuses a speaker of the previous one
        const std::string spk_a = "spk" + std::to_string(2 * c);
        const std::string spk_b = "spk" + std::to_string(c % 6 == 5 ? 2 * c - 1 : 2 * c + 1);
        for (int b = 0; b < o.blocks; ++b) {
            const double b0 = 1.0 + 8.0 * b;
            const bool a_talks = rng.index(2) == 0;
            const auto talker = a_talks ? corpus::Channel::A : corpus::Channel::B;
            const auto listener = a_talks ? corpus::Channel::B : corpus::Channel::A;
            const std::string& talker_spk = a_talks ? spk_a : spk_b;
            const std::string& listener_spk = a_talks ? spk_b : spk_a;
            double t = b0;
            while (t < b0 + 5.5) {
                const double len = 0.2 + 0.05 * static_cast<double>(rng.index(5));
                word(conv, talker, talker_spk, t, t + len, kTalk[rng.index(kTalk.size())]);
                t += len + (rng.index(8) == 0 ? 0.4 : 0.05 * static_cast<double>(1 + rng.index(2)));
            }
            // listener feedback
            Event ev{conv, listener, b0 + 4.2 + 0.05 * static_cast<double>(rng.index(20)), rng.index(corpus::kNumFunctions)};
            const auto& wording = kWordings[ev.function][rng.index(kWordings[ev.function].size())];
            const std::size_t noise = rng.index(20);
            if (noise == 0) {
                word(conv, listener, listener_spk, ev.start - 2.0, ev.start - 1.7, "um");  // breaks the silence rule
            }
            double s = ev.start;
            for (const auto& w : wording) {
                const double len = noise == 1 ? 0.15 : 0.25 + 0.05 * static_cast<double>(rng.index(4));
                word(conv, listener, listener_spk, s, s + len, w);
                s += len + 0.05;
            }
            events.push_back(ev);
        }
    }
    {
        std::ostringstream out;
        for (const auto& w : tokens) out << corpus::to_json(w).dump() << '\n';
        io::write_file_atomic((dir / "transcripts.jsonl").string(), out.str());
    }
    summary.tokens = tokens.size();

    std::vector<std::string> lexicon_entries;
    for (const auto& wordings : kWordings)
        for (const auto& w : wordings) {
            std::string key;
            for (const auto& part : w) key += (key.empty() ? "" : "-") + part;
            lexicon_entries.push_back(key);
        }
    std::sort(lexicon_entries.begin(), lexicon_entries.end());
    lexicon_entries.erase(std::unique(lexicon_entries.begin(), lexicon_entries.end()), lexicon_entries.end());
    {
        std::string text;
        for (const auto& e : lexicon_entries) text += e + "\n";
        io::write_file_atomic((dir / "lexicon.txt").string(), text);
    }

    // -- labels --------------------------------------------------------------
    Rng label_rng(mix_seed(o.seed, 2));
    {
        std::ostringstream out;
        for (const auto& ev : events) {
            if (label_rng.uniform() >= o.labelled_fraction) continue;
            out << json({{"conv", ev.conv},
                         {"ch", corpus::to_string(ev.channel)},
                         {"start", ev.start},
                         {"label", corpus::to_string(corpus::kAllFunctions[ev.function])},
                         {"source", "manual"}})
                       .dump()
                << '\n';
            ++summary.labelled;
        }
        io::write_file_atomic((dir / "labels.jsonl").string(), out.str());
    }

    // -- features ------------------------------------------------------------
    // Only segments that survive extraction get features, as an encoder run
    // over the extracted manifest would produce.
    const auto extracted =
        corpus::extract_feedback_instances(tokens, corpus::Lexicon(lexicon_entries), corpus::ExtractionConfig{});
    std::map<std::string, std::size_t> function_of;
    for (const auto& ev : events) {
        char key[64];
        std::snprintf(key, sizeof key, "%s/%s/%lld", ev.conv.c_str(), std::string(corpus::to_string(ev.channel)).c_str(),
                      static_cast<long long>(std::llround(ev.start * 1000)));
        function_of[key] = ev.function;
    }

    Rng feat_rng(mix_seed(o.seed, 3));
    std::vector<Eigen::VectorXd> prototypes;
    for (std::size_t f = 0; f < corpus::kNumFunctions; ++f) {
        Eigen::VectorXd p(kLatent);
        for (int i = 0; i < kLatent; ++i) p(i) = 1.2 * feat_rng.normal();
        prototypes.push_back(p);
    }
    const auto ctx_audio = random_maps(feat_rng, o.layers, o.audio_dim);
    const auto fb_audio = random_maps(feat_rng, o.layers, o.audio_dim);
    const auto ctx_text = random_maps(feat_rng, o.layers, o.text_dim);
    const auto fb_text = random_maps(feat_rng, o.layers, o.text_dim);
    std::vector<double> gain;
    for (std::uint32_t l = 0; l < o.layers; ++l) gain.push_back(l + 1 == o.layers ? 0.6 : (l == o.layers / 2 ? 1.2 : 0.4));

    features::FeatureStore store;
    std::map<std::string, json> media;
    for (const auto& inst : extracted.instances) {
        char key[64];
        std::snprintf(key, sizeof key, "%s/%s/%lld", inst.conversation_id.c_str(),
                      std::string(corpus::to_string(inst.channel)).c_str(),
                      static_cast<long long>(std::llround(inst.start_s * 1000)));
        const auto it = function_of.find(key);
        if (it == function_of.end()) throw DataError("fixture extraction produced an unexpected instance " + inst.id);
        Eigen::VectorXd z = prototypes[it->second];
        for (int i = 0; i < kLatent; ++i) z(i) += 0.8 * feat_rng.normal();
        const bool has_text = o.text && feat_rng.index(20) != 0;

        const std::string ctx_id = features::context_segment(inst.id);
        const std::string fb_id = features::feedback_segment(inst.id);
        const std::uint32_t fb_frames = std::max<std::uint32_t>(1, o.frames - static_cast<std::uint32_t>(feat_rng.index(2)));
        auto put = [&](const std::string& seg, features::Modality m, const std::vector<Eigen::MatrixXd>& maps,
                       std::uint32_t frames, const char* encoder) {
            auto t = make_tensor(feat_rng, maps, z, frames, gain);
            t.segment_id = seg;
            t.modality = m;
            t.encoder_name = encoder;
            const std::string rel = features::feature_path("all", seg, m);
            fs::create_directories((dir / "features" / rel).parent_path());
            features::write_fbf((dir / "features" / rel).string(), t);
            store.add(seg, m, {rel, encoder, {t.layers, t.frames, t.dim}});
        };
        put(ctx_id, features::Modality::audio, ctx_audio, o.frames, "synthetic-audio");
        put(fb_id, features::Modality::audio, fb_audio, fb_frames, "synthetic-audio");
        if (has_text) {
            put(ctx_id, features::Modality::text, ctx_text, o.frames, "synthetic-text");
            put(fb_id, features::Modality::text, fb_text, fb_frames, "synthetic-text");
        }
        if (o.media) {
            std::string fb_text_str;
            for (const auto& w : inst.tokens) fb_text_str += (fb_text_str.empty() ? "" : " ") + w;
            media[ctx_id] = {{"path", "silence.wav"},
                             {"transcript", corpus::build_context(inst, tokens).transcript_text}};
            media[fb_id] = {{"path", "silence.wav"}, {"transcript", fb_text_str}};
        }
    }
    store.save_index((dir / "features" / "index.json").string());
    summary.instances = extracted.instances.size();

    if (o.media) {
        fs::create_directories(dir / "media");
        io::write_file_atomic((dir / "media" / "silence.wav").string(), silent_wav());
        json clips = json::object();
        for (auto& [id, c] : media) clips[id] = std::move(c);
        io::write_file_atomic((dir / "media" / "index.json").string(), json({{"v", 1}, {"clips", clips}}).dump(1) + "\n");
    }

    // -- pipeline config -----------------------------------------------------
    json modalities = o.text ? json::array({"audio", "text"}) : json::array({"audio"});
    json config = {
        {"v", 1},
        {"seed", o.seed},
        {"output_dir", "out"},
        {"threads", 2},
        {"corpus",
         {{"name", "fixture"},
          {"transcripts", {"transcripts.jsonl"}},
          {"lexicon", "lexicon.txt"},
          {"labels", "labels.jsonl"},
          {"extraction", {{"min_duration_s", 0.2}, {"pre_silence_s", 4.0}, {"post_silence_s", 1.0}}},
          {"ratios", {0.8, 0.1, 0.1}}}},
        {"features", {{"index", "features/index.json"}}},
        {"train",
         {{"batch_size", 32},
          {"lr", 0.005},
          {"temperature", 0.1},
          {"head", {{"hidden_dims", json::array()}, {"output_dim", 16}}},
          {"modalities", modalities},
          {"patience", 5},
          {"validation_k", 1},
          {"max_epochs", 40}}},
        {"rank", {{"ks", {1, 10, 25, 50}}, {"batch_size", 32}, {"splits", {"valid", "test"}}}},
        {"probe", {{"inputs", {"feedback", "context", "concat"}}, {"C", 1.0}, {"folds", 5}, {"splits", {"train", "valid", "test"}}}},
        {"curate", {{"per_function", 24}, {"splits", {"train", "valid", "test"}}}},
        {"service", {{"host", "127.0.0.1"}, {"port", 8080}, {"state_dir", "out/service"}}}};
    if (o.media) config["service"]["media_index"] = "media/index.json";
    summary.config_path = (dir / "pipeline.json").string();
    io::write_file_atomic(summary.config_path, config.dump(2) + "\n");
    return summary;
}

}  // namespace fbrank::fixture
