#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace paracpt;

namespace {

const Direction kEnJa("en", "ja");
const Direction kAB("la", "lb");

SftExample example_with(std::size_t prompt_len, std::size_t target_len, std::uint64_t seed, std::size_t vocab)
{
    Rng rng(seed);
    SftExample ex;
    for (std::size_t i = 0; i < prompt_len + target_len; ++i) {
        ex.input_ids.push_back(static_cast<TokenId>(rng.uniform_below(vocab)));
    }
    ex.prompt_len = prompt_len;
    ex.loss_mask = mask_from_prompt_len(ex.input_ids.size(), prompt_len);
    return ex;
}

std::vector<double> random_logits(std::size_t rows, std::size_t vocab, Rng& rng)
{
    std::vector<double> l(rows * vocab);
    for (auto& v : l) {
        v = rng.normal(0.0, 2.0);
    }
    return l;
}

} // namespace

TEST(RenderPrompt, EnJaTemplates)
{
    const ParallelPair p{0, "Good morning", "おはよう", kEnJa, std::nullopt};
    EXPECT_EQ(render_prompt(p, en_ja_template()),
              "Translate this from English to Japanese:\nEnglish: Good morning\nJapanese: ");
    const ParallelPair q{1, "おはよう", "Good morning", kEnJa.reversed(), std::nullopt};
    const auto ja = render_prompt(q, ja_en_template());
    EXPECT_EQ(ja, "これを日本語から英語に翻訳してください :\n日本語 : おはよう\n英語 : ");
    for (char c : ja) {
        // Every fixed segment is non-ASCII apart from spacing and punctuation.
        if (static_cast<unsigned char>(c) < 0x80) {
            EXPECT_TRUE(c == ' ' || c == ':' || c == '\n') << c;
        }
    }
    EXPECT_THROW(render_prompt(p, ja_en_template()), Error);
}

TEST(RenderPrompt, CustomAndSyntheticTemplates)
{
    const ParallelPair p{0, "abc", "x", kAB, std::nullopt};
    EXPECT_EQ(render_prompt(p, PromptTemplate(kAB, "T {source} ->", "->")), "T abc ->");
    EXPECT_EQ(render_prompt(p, template_for(kAB)), "la>lb\nla: abc\nlb: ");
    EXPECT_THROW(PromptTemplate(kAB, "no placeholder", ""), Error);
    EXPECT_THROW(PromptTemplate(kAB, "{source} {source}", ""), Error);
    EXPECT_THROW(PromptTemplate(kAB, "{source} ->", "=>"), Error);
}

TEST(BuildSft, MaskLayout)
{
    const auto tok = byte_tokenizer();
    const ParallelPair p{0, "a", "xyz", kAB, std::nullopt};
    const PromptTemplate t(kAB, "T{source}->", "->");
    const auto ex = build_sft_example(p, t, *tok);
    ASSERT_EQ(ex.prompt_len, 4u);
    ASSERT_EQ(ex.input_ids.size(), 8u);
    EXPECT_EQ(ex.loss_mask, (std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1, 1, 1}));
    EXPECT_EQ(ex.input_ids.back(), tok->eos());
    EXPECT_EQ(ex.supervised_count(), 4u);
    EXPECT_THROW(build_sft_example(ParallelPair{1, "a", "", kAB, std::nullopt}, t, *tok), Error);
}

TEST(BuildSft, MaskedSegmentsDecodeToPromptAndTarget)
{
    const auto tok = byte_tokenizer();
    const ParallelPair p{3, "Good morning", "おはよう", kEnJa, std::nullopt};
    const auto ex = build_sft_example(p, en_ja_template(), *tok);
    std::vector<TokenId> masked, unmasked;
    for (std::size_t i = 0; i < ex.input_ids.size(); ++i) {
        (ex.loss_mask[i] ? unmasked : masked).push_back(ex.input_ids[i]);
    }
    EXPECT_EQ(tok->decode(masked), render_prompt(p, en_ja_template()));
    EXPECT_EQ(unmasked.back(), tok->eos());
    unmasked.pop_back();
    EXPECT_EQ(tok->decode(unmasked), "おはよう");
    EXPECT_EQ(ex.prompt_len, tok->encode(render_prompt(p, en_ja_template())).size());
    EXPECT_EQ(build_sft_example(p, en_ja_template(), *tok), ex);
}

TEST(MaskedNll, UniformModelClosedForm)
{
    for (std::size_t k : {1u, 4u, 9u}) {
        const std::size_t vocab = 259;
        const auto ex = example_with(6, k, k, vocab);
        const std::vector<double> zeros(ex.input_ids.size() * vocab, 0.0);
        EXPECT_NEAR(masked_nll<double>(zeros, vocab, ex), static_cast<double>(k) * std::log(259.0), 1e-6);
    }
}

TEST(MaskedNll, PerturbingMaskedPositionsChangesNothing)
{
    Rng rng(21);
    const std::size_t vocab = 13;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t prompt = 1 + rng.uniform_below(8);
        const std::size_t target = 1 + rng.uniform_below(6);
        const auto ex = example_with(prompt, target, rng.next(), vocab);
        auto logits = random_logits(ex.input_ids.size(), vocab, rng);
        const double base = masked_nll<double>(logits, vocab, ex);
        EXPECT_GE(base, 0.0);
        // Row j predicts token j+1; rows 0..prompt-2 predict prompt tokens,
        // and the last row predicts past the end.
        for (std::size_t row = 0; row + 1 < prompt; ++row) {
            for (std::size_t v = 0; v < vocab; ++v) {
                logits[row * vocab + v] += rng.normal(0.0, 10.0);
            }
        }
        for (std::size_t v = 0; v < vocab; ++v) {
            logits[(ex.input_ids.size() - 1) * vocab + v] += rng.normal(0.0, 10.0);
        }
        EXPECT_EQ(masked_nll<double>(logits, vocab, ex), base);
        // A supervised row does matter.
        logits[(prompt - 1) * vocab + ex.input_ids[prompt]] += 5.0;
        EXPECT_LT(masked_nll<double>(logits, vocab, ex), base);
    }
}

TEST(MaskedNll, CertainPredictionGivesZero)
{
    const std::size_t vocab = 5;
    SftExample ex;
    ex.input_ids = {1, 2, 3};
    ex.prompt_len = 2;
    ex.loss_mask = mask_from_prompt_len(3, 2);
    std::vector<double> logits(3 * vocab, 0.0);
    logits[1 * vocab + 3] = 1e4;
    EXPECT_NEAR(masked_nll<double>(logits, vocab, ex), 0.0, 1e-12);
    EXPECT_THROW(masked_nll<double>(std::vector<double>(2 * vocab), vocab, ex), Error);
}

TEST(MaskedNll, AllTrueMaskEqualsCausalLoss)
{
    // The transformer scores a window with its next-token loss; the SFT loss
    // over the same ids with every position supervised must agree.
    auto cfg = paracpt::testing::tiny_config(5);
    const Transformer<double> model(cfg);
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t c = cfg.context_len;
        std::vector<TokenId> ids(c + 1);
        for (auto& id : ids) {
            id = static_cast<TokenId>(rng.uniform_below(cfg.vocab_size));
        }
        const PackedWindow w{{ids.begin(), ids.end() - 1}, {ids.begin() + 1, ids.end()}};
        const double causal = cpt_loss(model, w) * static_cast<double>(c);

        SftExample ex;
        ex.input_ids = ids;
        ex.prompt_len = 0;
        ex.loss_mask = mask_from_prompt_len(ids.size(), 0);
        const auto lw = model.logits(w.input_ids);
        std::vector<double> logits(lw.data(), lw.data() + lw.size());
        logits.resize((c + 1) * cfg.vocab_size, 0.0); // row c predicts nothing
        EXPECT_NEAR(masked_nll<double>(logits, cfg.vocab_size, ex), causal, 1e-9);

        // Same through the training-example path used by SFT.
        EXPECT_NEAR(model.nll(example_from_sft(ex)), causal, 1e-9);
    }
}

TEST(SftFile, RoundTripAndLayout)
{
    paracpt::testing::TempDir dir;
    const auto tok = byte_tokenizer();
    std::vector<SftExample> exs;
    for (PairId i = 0; i < 5; ++i) {
        exs.push_back(build_sft_example(ParallelPair{i, "s" + std::to_string(i), "t", kAB, std::nullopt},
                                        template_for(kAB), *tok));
    }
    save_sft(exs, dir.file("s.bfsf"));
    EXPECT_EQ(load_sft(dir.file("s.bfsf")), exs);
    const auto bytes = paracpt::testing::slurp(dir.file("s.bfsf"));
    EXPECT_EQ(bytes.substr(0, 4), "BFSF");
    std::size_t expected = 4 + 2 + 8;
    for (const auto& e : exs) {
        expected += 8 + 4 * e.input_ids.size();
    }
    EXPECT_EQ(bytes.size(), expected);
    EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 5);
    EXPECT_EQ(static_cast<unsigned char>(bytes[14]), exs[0].input_ids.size());
    EXPECT_EQ(static_cast<unsigned char>(bytes[18]), exs[0].prompt_len);
}
