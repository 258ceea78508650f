#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "paracpt/common.hpp"
#include "paracpt/corpus.hpp"

namespace paracpt {

enum class SyntheticTask { substitution_cipher, word_reversal, cipher_plus_reversal };

inline std::string task_name(SyntheticTask t)
{
    switch (t) {
    case SyntheticTask::substitution_cipher:
        return "substitution_cipher";
    case SyntheticTask::word_reversal:
        return "word_reversal";
    case SyntheticTask::cipher_plus_reversal:
        return "cipher_plus_reversal";
    }
    return "?";
}

inline SyntheticTask parse_task(const std::string& s)
{
    if (s == "substitution_cipher" || s == "substitution") {
        return SyntheticTask::substitution_cipher;
    }
    if (s == "word_reversal" || s == "reversal") {
        return SyntheticTask::word_reversal;
    }
    if (s == "cipher_plus_reversal") {
        return SyntheticTask::cipher_plus_reversal;
    }
    throw Error("unknown synthetic task: " + s);
}

/// 16 lowercase consonant-vowel words for language A followed by 16
/// uppercase ones for language B.
inline std::vector<std::string> default_vocab()
{
    static const char* consonants = "bdfgklmnprstvz";
    static const char* vowels = "aeiou";
    std::vector<std::string> lower;
    for (std::size_t i = 0; lower.size() < 16; ++i) {
        lower.push_back(std::string{consonants[i % 14], vowels[(i * 3) % 5]});
    }
    std::vector<std::string> out = lower;
    for (const auto& w : lower) {
        std::string up = w;
        std::transform(up.begin(), up.end(), up.begin(), [](char c) { return static_cast<char>(c - 'a' + 'A'); });
        out.push_back(up);
    }
    return out;
}

/// Words are split in half: the first half forms language A's lexicon and
/// the second half language B's. The cipher maps A word i to B word
/// cipher[i]; when absent it is a seeded permutation. Word reversal keeps
/// the A lexicon on both sides.
struct SyntheticTaskSpec {
    SyntheticTask task = SyntheticTask::cipher_plus_reversal;
    std::vector<std::string> vocab = default_vocab();
    std::size_t min_len = 3;
    std::size_t max_len = 8;
    std::size_t n_train = 20000;
    std::size_t n_val = 500;
    std::size_t n_test = 500;
    std::size_t n_sft = 1000;
    std::uint64_t seed = 0;
    std::string lang_a = "la";
    std::string lang_b = "lb";
    std::optional<std::vector<std::size_t>> cipher;

    void validate() const
    {
        if (vocab.size() < 8) {
            throw Error("synthetic vocab must have at least 8 words");
        }
        if (vocab.size() % 2 != 0) {
            throw Error("synthetic vocab must have an even number of words");
        }
        std::set<std::string> uniq;
        for (const auto& w : vocab) {
            if (w.empty() || w.find_first_of(" \t\n\r") != std::string::npos) {
                throw Error("synthetic vocab words must be non-empty and contain no whitespace");
            }
            uniq.insert(w);
        }
        if (uniq.size() != vocab.size()) {
            throw Error("synthetic vocab words must be distinct");
        }
        if (min_len < 1 || max_len < min_len) {
            throw Error("sentence length range must satisfy 1 <= min <= max");
        }
        if (n_train < 1 || n_val < 1 || n_test < 1) {
            throw Error("split sizes must be at least 1");
        }
        if (cipher) {
            const std::size_t half = vocab.size() / 2;
            std::vector<std::size_t> sorted = *cipher;
            std::sort(sorted.begin(), sorted.end());
            for (std::size_t i = 0; i < sorted.size(); ++i) {
                if (sorted.size() != half || sorted[i] != i) {
                    throw Error("cipher must be a permutation of 0.." + std::to_string(half - 1));
                }
            }
        }
        Direction(lang_a, lang_b);
    }

    Direction direction() const { return Direction(lang_a, lang_b); }
};

struct SyntheticSplits {
    Corpus train;
    Corpus val;
    Corpus test;
    Corpus sft;
};

namespace detail {

inline std::vector<std::size_t> resolve_cipher(const SyntheticTaskSpec& spec)
{
    if (spec.cipher) {
        return *spec.cipher;
    }
    std::vector<std::size_t> perm(spec.vocab.size() / 2);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        perm[i] = i;
    }
    Rng rng(mix_seed(spec.seed, 0x63697068));
    rng.shuffle(perm);
    return perm;
}

inline std::string join_words(const std::vector<std::string>& words)
{
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) {
            out += ' ';
        }
        out += words[i];
    }
    return out;
}

} // namespace detail

/// Maps an A-language sentence (as lexicon indices) to its B-language text.
inline std::string synthetic_target(const SyntheticTaskSpec& spec, const std::vector<std::size_t>& cipher,
                                    const std::vector<std::size_t>& source)
{
    const std::size_t half = spec.vocab.size() / 2;
    std::vector<std::string> out;
    out.reserve(source.size());
    for (std::size_t w : source) {
        switch (spec.task) {
        case SyntheticTask::word_reversal:
            out.push_back(spec.vocab[w]);
            break;
        default:
            out.push_back(spec.vocab[half + cipher[w]]);
        }
    }
    if (spec.task != SyntheticTask::substitution_cipher) {
        std::reverse(out.begin(), out.end());
    }
    return detail::join_words(out);
}

/// Seed-deterministic A->B splits whose source sentences are pairwise
/// distinct across train, val, test and sft.
inline SyntheticSplits generate(const SyntheticTaskSpec& spec)
{
    spec.validate();
    const std::size_t half = spec.vocab.size() / 2;
    const auto cipher = detail::resolve_cipher(spec);
    const Direction dir = spec.direction();

    std::size_t capacity = 0;
    {
        double total = 0.0;
        double p = 1.0;
        for (std::size_t l = 1; l <= spec.max_len; ++l) {
            p *= static_cast<double>(half);
            if (l >= spec.min_len) {
                total += p;
            }
        }
        capacity = total > 1e18 ? std::numeric_limits<std::size_t>::max() : static_cast<std::size_t>(total);
    }
    const std::size_t wanted = spec.n_train + spec.n_val + spec.n_test + spec.n_sft;
    if (wanted > capacity / 2) {
        throw Error("synthetic spec asks for " + std::to_string(wanted) + " distinct sentences but only " +
                    std::to_string(capacity) + " exist");
    }

    Rng rng(mix_seed(spec.seed, 0x73796e74));
    std::unordered_set<std::string> seen;
    SyntheticSplits out;
    auto fill = [&](Corpus& corpus, std::size_t n, const std::string& label) {
        corpus.provenance = "synthetic:" + task_name(spec.task) + ":" + label;
        corpus.pairs.reserve(n);
        while (corpus.pairs.size() < n) {
            const std::size_t len = spec.min_len + rng.uniform_below(spec.max_len - spec.min_len + 1);
            std::vector<std::size_t> words(len);
            std::vector<std::string> text(len);
            for (std::size_t i = 0; i < len; ++i) {
                words[i] = rng.uniform_below(half);
                text[i] = spec.vocab[words[i]];
            }
            auto src = detail::join_words(text);
            if (!seen.insert(src).second) {
                continue;
            }
            const auto id = static_cast<PairId>(corpus.pairs.size());
            corpus.pairs.push_back(ParallelPair{id, std::move(src), synthetic_target(spec, cipher, words), dir, {}});
        }
    };
    fill(out.test, spec.n_test, "test");
    fill(out.val, spec.n_val, "val");
    fill(out.sft, spec.n_sft, "sft");
    fill(out.train, spec.n_train, "train");
    return out;
}

/// Swaps source/target text and direction of every pair.
inline Corpus invert_direction(const Corpus& corpus)
{
    Corpus out;
    out.provenance = corpus.provenance;
    out.pairs.reserve(corpus.pairs.size());
    for (const auto& p : corpus.pairs) {
        out.pairs.push_back(ParallelPair{p.id, p.target_text, p.source_text, p.direction.reversed(), p.similarity});
    }
    return out;
}

} // namespace paracpt
