#pragma once

// Independent reference implementations used by unit and acceptance tests.
// Nothing here calls into the code path it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "fbrank/corpus.hpp"
#include "fbrank/util.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Extraction: O(n^2) re-scan of the raw token list.

struct Span {
    std::string conv;
    int channel;
    double start;
    double end;
    auto operator<=>(const Span&) const = default;
};

inline std::string plain_word(const std::string& text) {
    std::string out;
    for (char c : text) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c + 32);
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-' || c == '\'') out.push_back(c);
    }
    return out;
}

inline std::vector<Span> brute_force_extract(const std::vector<fbrank::corpus::WordToken>& tokens,
                                             const std::set<std::string>& lexicon, double min_dur,
                                             double pre, double post, double join_gap) {
    using fbrank::corpus::WordToken;
    std::set<std::string> convs;
    for (const auto& t : tokens) convs.insert(t.conversation_id);

    auto speech_in = [&](const std::string& conv, int ch, double lo, double hi) {
        for (const auto& u : tokens)
            if (u.conversation_id == conv && static_cast<int>(u.channel) == ch && u.start_s < hi && u.end_s > lo)
                return true;
        return false;
    };

    std::size_t max_parts = 0;
    for (const auto& e : lexicon)
        max_parts = std::max<std::size_t>(max_parts, 1 + std::count(e.begin(), e.end(), '-'));

    std::vector<Span> out;
    for (const auto& conv : convs) {
        bool broken = false;
        for (std::size_t i = 0; i < tokens.size() && !broken; ++i) {
            const auto& a = tokens[i];
            if (a.conversation_id != conv) continue;
            if (!(a.end_s > a.start_s) || a.text.empty() || a.start_s < 0) broken = true;
            for (std::size_t j = 0; j < tokens.size() && !broken; ++j) {
                const auto& b = tokens[j];
                if (i == j || b.conversation_id != conv || b.channel != a.channel) continue;
                if (a.start_s < b.end_s && b.start_s < a.end_s) broken = true;
                if (a.start_s == b.start_s && a.end_s == b.end_s) broken = true;
            }
        }
        if (broken) continue;

        for (const auto& first : tokens) {
            if (first.conversation_id != conv) continue;
            const int ch = static_cast<int>(first.channel);
            // onset: nothing on this channel ends within join_gap before it
            bool onset = true;
            for (const auto& u : tokens)
                if (u.conversation_id == conv && static_cast<int>(u.channel) == ch && u.end_s <= first.start_s &&
                    first.start_s - u.end_s < join_gap)
                    onset = false;
            if (!onset) continue;

            // follow the unit forward
            std::vector<const WordToken*> unit{&first};
            while (true) {
                const WordToken* nxt = nullptr;
                for (const auto& u : tokens)
                    if (u.conversation_id == conv && static_cast<int>(u.channel) == ch &&
                        u.start_s >= unit.back()->end_s && (!nxt || u.start_s < nxt->start_s))
                        nxt = &u;
                if (!nxt || nxt->start_s - unit.back()->end_s >= join_gap) break;
                unit.push_back(nxt);
            }

            std::size_t best = 0;
            std::string key;
            std::size_t parts = 0;
            for (std::size_t k = 0; k < unit.size(); ++k) {
                const std::string w = plain_word(unit[k]->text);
                if (w.empty()) break;
                parts += 1 + std::count(w.begin(), w.end(), '-');
                if (parts > max_parts) break;
                key = k == 0 ? w : key + "-" + w;
                if (lexicon.count(key)) best = k + 1;
            }
            if (best == 0) continue;

            const double start = first.start_s;
            const double end = unit[best - 1]->end_s;
            if (end - start < min_dur - 1e-9) continue;
            bool xtalk_free = true;
            for (std::size_t k = 0; k < best; ++k) xtalk_free = xtalk_free && unit[k]->crosstalk_free.value_or(false);
            if (!xtalk_free && speech_in(conv, ch, start - pre, start)) continue;
            if (post > 0 && speech_in(conv, ch, end, end + post)) continue;
            out.push_back({conv, ch, start, end});
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Random two-channel transcript with long and short pauses, lexicon hits,
// multi-word units and an occasional malformed (overlapping) token.
inline std::vector<fbrank::corpus::WordToken> random_transcript(fbrank::Rng& rng, const std::string& conv,
                                                                bool allow_overlap = true) {
    static const std::vector<std::string> vocab = {
        "uh-huh", "mhm", "yeah", "right", "wow", "really", "oh", "okay", "no", "yes", "huh", "what",
        "so",     "i",   "think", "the",  "we",  "went",   "to", "uh",   "Yeah.", "RIGHT", "really?", "um"};
    std::vector<fbrank::corpus::WordToken> out;
    for (int ch = 0; ch < 2; ++ch) {
        double t = 0.05 * static_cast<double>(rng.index(40));
        const std::size_t n = 5 + rng.index(25);
        for (std::size_t k = 0; k < n; ++k) {
            fbrank::corpus::WordToken w;
            w.conversation_id = conv;
            w.channel = static_cast<fbrank::corpus::Channel>(ch);
            w.start_s = t;
            w.end_s = t + 0.05 * static_cast<double>(2 + rng.index(10));
            w.text = vocab[rng.index(vocab.size())];
            if (rng.index(6) == 0) w.crosstalk_free = rng.index(2) == 0;
            out.push_back(w);
            const std::size_t kind = rng.index(4);
            const double gap = kind == 0 ? 0.05 * static_cast<double>(rng.index(6))
                               : kind == 1 ? 0.05 * static_cast<double>(rng.index(30))
                                           : 0.05 * static_cast<double>(60 + rng.index(80));
            t = w.end_s + gap;
        }
    }
    if (allow_overlap && rng.index(20) == 0 && out.size() > 2) {
        auto dup = out[1];
        dup.start_s = out[1].start_s + 0.01;
        dup.end_s = out[1].end_s + 0.02;
        out.push_back(dup);
    }
    rng.shuffle(out);
    return out;
}

// ---------------------------------------------------------------------------
// Central finite differences on a flat parameter vector.

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

// Norm-wise variant for whole gradient arrays: ||a - n|| / max(||a||, ||n||).
// Entries far below the round-off of the finite difference do not dominate.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    return std::sqrt(diff) / denom;
}

// Applies f to a perturbed parameter and restores it.
inline double central_difference(double& parameter, double eps, const std::function<double()>& f) {
    const double saved = parameter;
    parameter = saved + eps;
    const double up = f();
    parameter = saved - eps;
    const double down = f();
    parameter = saved;
    return (up - down) / (2.0 * eps);
}

// ---------------------------------------------------------------------------
// Ranking: compares every candidate's similarity with the truth directly.

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// 1-based pessimistic rank of `truth` among `candidates`.
inline std::size_t brute_force_rank(const std::vector<double>& context, const std::vector<std::vector<double>>& candidates,
                                    std::size_t truth) {
    const double s = cosine(context, candidates[truth]);
    std::size_t rank = 1;
    for (std::size_t j = 0; j < candidates.size(); ++j)
        if (j != truth && cosine(context, candidates[j]) >= s) ++rank;
    return rank;
}

// ---------------------------------------------------------------------------
// Separability: exhaustive sweep of directions for two labelled 2-D point sets.
// True when some direction puts every positive strictly above every negative.

inline bool separable_2d(const std::vector<std::pair<double, double>>& pos,
                         const std::vector<std::pair<double, double>>& neg, int directions = 7200) {
    for (int k = 0; k < directions; ++k) {
        const double a = 2.0 * 3.14159265358979323846 * k / directions;
        const double c = std::cos(a), s = std::sin(a);
        double lo_pos = 1e300, hi_neg = -1e300;
        for (const auto& [x, y] : pos) lo_pos = std::min(lo_pos, c * x + s * y);
        for (const auto& [x, y] : neg) hi_neg = std::max(hi_neg, c * x + s * y);
        if (lo_pos > hi_neg) return true;
    }
    return false;
}

// Two-sided p value of Pearson r with one degree of freedom (n = 3). Student's
// t with 1 df is the Cauchy distribution: p = 1 - (2 / pi) atan(|t|).
inline double pearson_p_three_points(double r) {
    const double t = std::abs(r) / std::sqrt(1.0 - r * r);
    return 1.0 - 2.0 / 3.14159265358979323846 * std::atan(t);
}

// Raw-moment form in long double, independent of the library's centred sums.
inline double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
    long double n = x.size(), sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += (long double)x[i] * x[i];
        syy += (long double)y[i] * y[i];
        sxy += (long double)x[i] * y[i];
    }
    return static_cast<double>((n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy)));
}

}  // namespace oracle
