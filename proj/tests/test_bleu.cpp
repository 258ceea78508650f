#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace paracpt;

namespace {

std::vector<std::string> random_sentences(Rng& rng, std::size_t n, std::size_t vocab = 6)
{
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::string s;
        const std::size_t len = 1 + rng.uniform_below(8);
        for (std::size_t k = 0; k < len; ++k) {
            s += (k ? " w" : "w") + std::to_string(rng.uniform_below(vocab));
        }
        out.push_back(s);
    }
    return out;
}

} // namespace

TEST(Bleu, HandComputedCase)
{
    const auto r = corpus_bleu({"a b c d"}, {"a b c d e"});
    EXPECT_NEAR(r.score, 77.88, 0.01);
    EXPECT_NEAR(r.score, 100.0 * std::exp(-0.25), 1e-9);
    for (double p : r.precisions) {
        EXPECT_EQ(p, 1.0);
    }
    EXPECT_NEAR(r.brevity_penalty, std::exp(1.0 - 5.0 / 4.0), 1e-12);
    EXPECT_EQ(r.hyp_len, 4u);
    EXPECT_EQ(r.ref_len, 5u);
}

TEST(Bleu, ClippedCounts)
{
    // "the the the the" vs "the cat": unigram 1/4 after clipping, no bigram.
    const auto r = corpus_bleu({"the the the the"}, {"the cat"});
    EXPECT_DOUBLE_EQ(r.precisions[0], 0.25);
    EXPECT_EQ(r.precisions[1], 0.0);
    EXPECT_EQ(r.score, 0.0);
    const auto s = corpus_bleu({"the the the the"}, {"the cat"}, PreTokenizer::whitespace, Smoothing::add_one);
    EXPECT_GT(s.score, 0.0);
    EXPECT_DOUBLE_EQ(s.precisions[1], 1.0 / 4.0);
}

TEST(Bleu, IdentityIsExactlyHundred)
{
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        auto h = random_sentences(rng, 1 + rng.uniform_below(10));
        // Every sentence needs four tokens for 4-gram precision to be defined.
        for (auto& s : h) {
            s += " x y z w";
        }
        EXPECT_EQ(corpus_bleu(h, h).score, 100.0);
    }
}

TEST(Bleu, PermutationInvariant)
{
    Rng rng(2);
    for (int t = 0; t < 30; ++t) {
        auto h = random_sentences(rng, 20, 4);
        auto r = random_sentences(rng, 20, 4);
        std::vector<std::size_t> perm(20);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        std::vector<std::string> hp, rp;
        for (auto i : perm) {
            hp.push_back(h[i]);
            rp.push_back(r[i]);
        }
        EXPECT_NEAR(corpus_bleu(h, r).score, corpus_bleu(hp, rp).score, 1e-9);
    }
}

TEST(Bleu, BrevityPenaltyIsMonotone)
{
    const std::string ref = "a b c d e f g h i j k l";
    double prev = -1.0;
    for (std::size_t n = 4; n <= 12; ++n) {
        std::string hyp;
        for (std::size_t i = 0; i < n; ++i) {
            hyp += (i ? " " : "") + std::string(1, static_cast<char>('a' + i));
        }
        const auto r = corpus_bleu({hyp}, {ref});
        EXPECT_GT(r.brevity_penalty, prev);
        prev = r.brevity_penalty;
    }
    EXPECT_EQ(prev, 1.0);
    EXPECT_EQ(corpus_bleu({"a b c d e f"}, {"a b c d"}).brevity_penalty, 1.0);
}

TEST(Bleu, EmptyHypothesesAndErrors)
{
    EXPECT_EQ(corpus_bleu({""}, {"a b c d"}).score, 0.0);
    EXPECT_THROW(corpus_bleu({}, {}), Error);
    EXPECT_THROW(corpus_bleu({"a"}, {"a", "b"}), Error);
    EXPECT_THROW(parse_pretokenizer("moses"), Error);
}

TEST(Bleu, PunctuationPreTokenizer)
{
    EXPECT_EQ(bleu_tokens("Hello, world!", PreTokenizer::punctuation),
              (std::vector<std::string>{"Hello", ",", "world", "!"}));
    EXPECT_EQ(bleu_tokens("Hello, world!", PreTokenizer::whitespace),
              (std::vector<std::string>{"Hello,", "world!"}));
}

TEST(Bootstrap, PerfectBeatsEmpty)
{
    Rng rng(3);
    auto refs = random_sentences(rng, 50);
    for (auto& s : refs) {
        s += " p q r s";
    }
    const std::vector<std::string> empty(refs.size(), "");
    const auto r = paired_bootstrap(refs, empty, refs, 1000, 7);
    EXPECT_LT(r.p_value, 0.01);
    EXPECT_TRUE(r.significant());
    EXPECT_EQ(r.n_resamples, 1000u);
    EXPECT_EQ(r.delta_observed, 100.0);
    const auto rev = paired_bootstrap(empty, refs, refs, 1000, 7);
    EXPECT_FALSE(rev.significant());
    EXPECT_EQ(rev.p_value, 1.0);
}

TEST(Bootstrap, DeterministicBySeed)
{
    Rng rng(4);
    const auto refs = random_sentences(rng, 40, 3);
    const auto a = random_sentences(rng, 40, 3);
    const auto b = random_sentences(rng, 40, 3);
    const auto x = paired_bootstrap(a, b, refs, 500, 11, PreTokenizer::whitespace, Smoothing::add_one);
    const auto y = paired_bootstrap(a, b, refs, 500, 11, PreTokenizer::whitespace, Smoothing::add_one);
    EXPECT_EQ(x.p_value, y.p_value);
    EXPECT_EQ(x.delta_observed, y.delta_observed);
}

TEST(Bootstrap, SelfComparisonNeverSignificant)
{
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto refs = random_sentences(rng, 30, 3);
        const auto hyp = random_sentences(rng, 30, 3);
        const auto r = paired_bootstrap(hyp, hyp, refs, 200, static_cast<std::uint64_t>(trial));
        EXPECT_FALSE(r.significant(0.05));
        EXPECT_EQ(r.p_value, 1.0);
    }
}

TEST(Bootstrap, Errors)
{
    EXPECT_THROW(paired_bootstrap({"a"}, {"a", "b"}, {"a"}, 1000), Error);
    EXPECT_THROW(paired_bootstrap({}, {}, {}, 1000), Error);
    EXPECT_THROW(paired_bootstrap({"a"}, {"a"}, {"a"}, 10), Error);
}
