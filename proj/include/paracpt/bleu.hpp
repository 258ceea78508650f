#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "paracpt/common.hpp"

namespace paracpt {

enum class PreTokenizer { whitespace, punctuation };

inline std::string pretokenizer_name(PreTokenizer p) { return p == PreTokenizer::whitespace ? "whitespace" : "punctuation"; }

inline PreTokenizer parse_pretokenizer(const std::string& s)
{
    if (s == "whitespace" || s == "ws") {
        return PreTokenizer::whitespace;
    }
    if (s == "punctuation" || s == "punct") {
        return PreTokenizer::punctuation;
    }
    throw Error("unknown pre-tokenizer: " + s);
}

inline std::vector<std::string> bleu_tokens(std::string_view text, PreTokenizer pre)
{
    if (pre == PreTokenizer::whitespace) {
        return split_whitespace(text);
    }
    // ASCII punctuation becomes its own token.
    std::string spaced;
    spaced.reserve(text.size() * 2);
    for (char c : text) {
        const auto u = static_cast<unsigned char>(c);
        if (u < 0x80 && std::ispunct(u)) {
            spaced += ' ';
            spaced += c;
            spaced += ' ';
        } else {
            spaced += c;
        }
    }
    return split_whitespace(spaced);
}

inline constexpr std::size_t kBleuOrder = 4;

/// Sufficient statistics of one or more sentences.
struct BleuStats {
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;
    std::array<std::size_t, kBleuOrder> matches{};
    std::array<std::size_t, kBleuOrder> totals{};

    BleuStats& operator+=(const BleuStats& o)
    {
        hyp_len += o.hyp_len;
        ref_len += o.ref_len;
        for (std::size_t n = 0; n < kBleuOrder; ++n) {
            matches[n] += o.matches[n];
            totals[n] += o.totals[n];
        }
        return *this;
    }
};

inline BleuStats sentence_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref)
{
    BleuStats s;
    s.hyp_len = hyp.size();
    s.ref_len = ref.size();
    for (std::size_t n = 1; n <= kBleuOrder; ++n) {
        std::map<std::vector<std::string>, std::size_t> ref_counts;
        for (std::size_t i = 0; i + n <= ref.size(); ++i) {
            ++ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)];
        }
        std::map<std::vector<std::string>, std::size_t> hyp_counts;
        for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
            ++hyp_counts[std::vector<std::string>(hyp.begin() + i, hyp.begin() + i + n)];
        }
        for (const auto& [gram, count] : hyp_counts) {
            const auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) {
                s.matches[n - 1] += std::min(count, it->second);
            }
            s.totals[n - 1] += count;
        }
    }
    return s;
}

enum class Smoothing { none, add_one };

struct BleuReport {
    double score = 0.0;
    std::array<double, kBleuOrder> precisions{};
    double brevity_penalty = 0.0;
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;
    Smoothing smoothing = Smoothing::none;
    PreTokenizer pretokenizer = PreTokenizer::whitespace;
};

/// Corpus BLEU from pooled statistics. Strict mode scores 0 when any order
/// has no match; add-one smooths orders 2..4. Kept out of line so equal
/// statistics always give bit-identical scores.
[[gnu::noinline]] inline BleuReport bleu_from_stats(const BleuStats& s, Smoothing smoothing = Smoothing::none)
{
    BleuReport r;
    r.hyp_len = s.hyp_len;
    r.ref_len = s.ref_len;
    r.smoothing = smoothing;
    bool zero = false;
    double log_sum = 0.0;
    for (std::size_t n = 0; n < kBleuOrder; ++n) {
        double m = static_cast<double>(s.matches[n]);
        double t = static_cast<double>(s.totals[n]);
        if (smoothing == Smoothing::add_one && n > 0) {
            m += 1.0;
            t += 1.0;
        }
        r.precisions[n] = t > 0.0 ? m / t : 0.0;
        if (r.precisions[n] <= 0.0) {
            zero = true;
        } else {
            log_sum += std::log(r.precisions[n]);
        }
    }
    if (s.hyp_len == 0) {
        r.brevity_penalty = 0.0;
    } else if (s.hyp_len < s.ref_len) {
        r.brevity_penalty = std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len));
    } else {
        r.brevity_penalty = 1.0;
    }
    r.score = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(kBleuOrder));
    return r;
}

inline std::vector<BleuStats> per_sentence_stats(const std::vector<std::string>& hyps,
                                                 const std::vector<std::string>& refs, PreTokenizer pre)
{
    if (hyps.size() != refs.size()) {
        throw Error("BLEU: " + std::to_string(hyps.size()) + " hypotheses but " + std::to_string(refs.size()) +
                    " references");
    }
    std::vector<BleuStats> out;
    out.reserve(hyps.size());
    for (std::size_t i = 0; i < hyps.size(); ++i) {
        out.push_back(sentence_stats(bleu_tokens(hyps[i], pre), bleu_tokens(refs[i], pre)));
    }
    return out;
}

inline BleuReport corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
                              PreTokenizer pre = PreTokenizer::whitespace, Smoothing smoothing = Smoothing::none)
{
    if (hyps.empty()) {
        throw Error("BLEU: at least one sentence is required");
    }
    BleuStats total;
    for (const auto& s : per_sentence_stats(hyps, refs, pre)) {
        total += s;
    }
    auto r = bleu_from_stats(total, smoothing);
    r.pretokenizer = pre;
    return r;
}

struct SignificanceResult {
    double p_value = 1.0;
    std::size_t n_resamples = 0;
    double delta_observed = 0.0;

    bool significant(double alpha = 0.05) const { return delta_observed > 0.0 && p_value < alpha; }
};

/// One-sided paired bootstrap: is system a better than system b? The
/// p-value is the fraction of resamples with BLEU(a) - BLEU(b) <= 0.
inline SignificanceResult paired_bootstrap(const std::vector<std::string>& hyp_a, const std::vector<std::string>& hyp_b,
                                           const std::vector<std::string>& refs, std::size_t n_resamples = 1000,
                                           std::uint64_t seed = 0, PreTokenizer pre = PreTokenizer::whitespace,
                                           Smoothing smoothing = Smoothing::none)
{
    if (hyp_a.size() != refs.size() || hyp_b.size() != refs.size()) {
        throw Error("paired_bootstrap: hypothesis and reference counts differ");
    }
    if (refs.empty()) {
        throw Error("paired_bootstrap: at least one sentence is required");
    }
    if (n_resamples < 100) {
        throw Error("paired_bootstrap: n_resamples must be at least 100");
    }
    const auto sa = per_sentence_stats(hyp_a, refs, pre);
    const auto sb = per_sentence_stats(hyp_b, refs, pre);
    BleuStats ta;
    BleuStats tb;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        ta += sa[i];
        tb += sb[i];
    }
    SignificanceResult r;
    r.n_resamples = n_resamples;
    r.delta_observed = bleu_from_stats(ta, smoothing).score - bleu_from_stats(tb, smoothing).score;

    Rng rng(seed);
    std::size_t not_better = 0;
    for (std::size_t k = 0; k < n_resamples; ++k) {
        BleuStats ra;
        BleuStats rb;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            const auto j = rng.uniform_below(refs.size());
            ra += sa[j];
            rb += sb[j];
        }
        if (bleu_from_stats(ra, smoothing).score - bleu_from_stats(rb, smoothing).score <= 0.0) {
            ++not_better;
        }
    }
    r.p_value = static_cast<double>(not_better) / static_cast<double>(n_resamples);
    return r;
}

} // namespace paracpt
