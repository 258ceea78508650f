#include <map>
#include <sstream>
#include <unordered_set>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace paracpt;

namespace {

std::vector<std::string> words_of(const std::string& s)
{
    std::istringstream is(s);
    std::vector<std::string> out;
    for (std::string w; is >> w;) {
        out.push_back(w);
    }
    return out;
}

SyntheticTaskSpec small_spec(SyntheticTask task, std::uint64_t seed = 3)
{
    SyntheticTaskSpec s;
    s.task = task;
    s.seed = seed;
    s.n_train = 300;
    s.n_val = 40;
    s.n_test = 40;
    s.n_sft = 50;
    return s;
}

} // namespace

TEST(Synthetic, DefaultVocabulary)
{
    const auto v = default_vocab();
    ASSERT_EQ(v.size(), 32u);
    EXPECT_EQ(std::set<std::string>(v.begin(), v.end()).size(), 32u);
    for (std::size_t i = 0; i < 16; ++i) {
        EXPECT_TRUE(std::islower(static_cast<unsigned char>(v[i][0])));
        EXPECT_TRUE(std::isupper(static_cast<unsigned char>(v[16 + i][0])));
    }
}

TEST(Synthetic, FixedCipherExample)
{
    SyntheticTaskSpec s;
    s.vocab = {"a", "b", "c", "d", "W", "X", "Y", "Z"};
    s.cipher = std::vector<std::size_t>{2, 0, 3, 1};
    s.task = SyntheticTask::substitution_cipher;
    EXPECT_EQ(synthetic_target(s, *s.cipher, {0, 1, 3}), "Y W X");
    s.task = SyntheticTask::cipher_plus_reversal;
    EXPECT_EQ(synthetic_target(s, *s.cipher, {0, 1, 3}), "X W Y");
    s.task = SyntheticTask::word_reversal;
    EXPECT_EQ(synthetic_target(s, *s.cipher, {0, 1, 3}), "d b a");
}

TEST(Synthetic, TransformsHoldOnEveryPair)
{
    for (auto task : {SyntheticTask::substitution_cipher, SyntheticTask::word_reversal,
                      SyntheticTask::cipher_plus_reversal}) {
        const auto spec = small_spec(task);
        const auto splits = generate(spec);
        std::map<std::string, std::string> mapping;
        for (const auto* c : {&splits.train, &splits.val, &splits.test, &splits.sft}) {
            for (const auto& p : c->pairs) {
                EXPECT_EQ(p.direction, Direction("la", "lb"));
                auto src = words_of(p.source_text);
                auto tgt = words_of(p.target_text);
                ASSERT_EQ(src.size(), tgt.size());
                ASSERT_GE(src.size(), spec.min_len);
                ASSERT_LE(src.size(), spec.max_len);
                if (task != SyntheticTask::substitution_cipher) {
                    std::reverse(tgt.begin(), tgt.end());
                }
                for (std::size_t i = 0; i < src.size(); ++i) {
                    if (task == SyntheticTask::word_reversal) {
                        EXPECT_EQ(src[i], tgt[i]);
                    } else {
                        auto [it, fresh] = mapping.emplace(src[i], tgt[i]);
                        EXPECT_EQ(it->second, tgt[i]) << "cipher is not a function";
                    }
                }
            }
        }
        if (task != SyntheticTask::word_reversal) {
            std::set<std::string> images;
            for (const auto& [k, v] : mapping) {
                images.insert(v);
                EXPECT_TRUE(std::isupper(static_cast<unsigned char>(v[0])));
            }
            EXPECT_EQ(images.size(), mapping.size()) << "cipher is not injective";
        }
    }
}

TEST(Synthetic, DeterministicAndSeedSensitive)
{
    const auto spec = small_spec(SyntheticTask::cipher_plus_reversal, 5);
    const auto a = generate(spec);
    const auto b = generate(spec);
    EXPECT_EQ(a.train.pairs, b.train.pairs);
    EXPECT_EQ(a.test.pairs, b.test.pairs);
    const auto c = generate(small_spec(SyntheticTask::cipher_plus_reversal, 6));
    EXPECT_NE(a.train.pairs, c.train.pairs);
}

TEST(Synthetic, SplitsAreDisjointAndSized)
{
    const auto spec = small_spec(SyntheticTask::cipher_plus_reversal);
    const auto s = generate(spec);
    EXPECT_EQ(s.train.size(), 300u);
    EXPECT_EQ(s.val.size(), 40u);
    EXPECT_EQ(s.test.size(), 40u);
    EXPECT_EQ(s.sft.size(), 50u);
    std::unordered_set<std::string> all;
    std::size_t total = 0;
    for (const auto* c : {&s.train, &s.val, &s.test, &s.sft}) {
        for (std::size_t i = 0; i < c->pairs.size(); ++i) {
            EXPECT_EQ(c->pairs[i].id, i);
            all.insert(c->pairs[i].source_text);
            ++total;
        }
    }
    EXPECT_EQ(all.size(), total);
}

TEST(Synthetic, InvertDirectionIsAnInvolution)
{
    const auto s = generate(small_spec(SyntheticTask::substitution_cipher));
    const auto inv = invert_direction(s.val);
    ASSERT_EQ(inv.size(), s.val.size());
    for (std::size_t i = 0; i < inv.size(); ++i) {
        EXPECT_EQ(inv.pairs[i].source_text, s.val.pairs[i].target_text);
        EXPECT_EQ(inv.pairs[i].target_text, s.val.pairs[i].source_text);
        EXPECT_EQ(inv.pairs[i].direction, Direction("lb", "la"));
    }
    EXPECT_EQ(invert_direction(inv).pairs, s.val.pairs);
}

TEST(Synthetic, Validation)
{
    auto s = small_spec(SyntheticTask::cipher_plus_reversal);
    s.vocab = {"a", "b", "c"};
    EXPECT_THROW(generate(s), Error);
    s = small_spec(SyntheticTask::cipher_plus_reversal);
    s.vocab[3] = s.vocab[2];
    EXPECT_THROW(generate(s), Error);
    s = small_spec(SyntheticTask::cipher_plus_reversal);
    s.vocab[0] = "has space";
    EXPECT_THROW(generate(s), Error);
    s = small_spec(SyntheticTask::cipher_plus_reversal);
    s.min_len = 5;
    s.max_len = 4;
    EXPECT_THROW(generate(s), Error);
    s = small_spec(SyntheticTask::cipher_plus_reversal);
    s.cipher = std::vector<std::size_t>{0, 1, 2};
    EXPECT_THROW(generate(s), Error);
    s = small_spec(SyntheticTask::cipher_plus_reversal);
    s.min_len = 1;
    s.max_len = 1;
    EXPECT_THROW(generate(s), Error); // 16 sentences cannot fill 430
    s = small_spec(SyntheticTask::cipher_plus_reversal);
    s.lang_b = "la";
    EXPECT_THROW(generate(s), Error);
    EXPECT_THROW(parse_task("caesar"), Error);
    EXPECT_EQ(parse_task(task_name(SyntheticTask::word_reversal)), SyntheticTask::word_reversal);
}
