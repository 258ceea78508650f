#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace paracpt;
using paracpt::testing::TempDir;
using paracpt::testing::spit;

namespace {

const Direction kEnJa("en", "ja");

std::string random_text(Rng& rng)
{
    static const std::vector<std::string> atoms = {"a", "Z", " ", "\t", "\n", "\"", "\\", "/", "\r", "\x01",
                                                   "\x1f", "é", "あ", "日本", "😀", "{", "}", "'", ",", " "};
    std::string s = "x";
    const auto n = rng.uniform_below(12);
    for (std::size_t i = 0; i < n; ++i) {
        s += atoms[rng.uniform_below(atoms.size())];
    }
    return s + "y";
}

} // namespace

TEST(LanguageCode, RejectsInvalidCodes)
{
    EXPECT_NO_THROW(LanguageCode("en"));
    EXPECT_NO_THROW(LanguageCode("la2"));
    EXPECT_THROW(LanguageCode(""), Error);
    EXPECT_THROW(LanguageCode("EN"), Error);
    EXPECT_THROW(LanguageCode("e-n"), Error);
    EXPECT_THROW(Direction("en", "en"), Error);
}

TEST(LoadPairs, AssignsSequentialIds)
{
    TempDir dir;
    spit(dir.file("p.jsonl"), R"({"src":"a","tgt":"b","src_lang":"en","tgt_lang":"ja"}
{"src":"c","tgt":"d","src_lang":"en","tgt_lang":"ja"}
{"src":"e","tgt":"f","src_lang":"en","tgt_lang":"ja"}
)");
    const auto c = load_pairs(dir.file("p.jsonl"), kEnJa);
    ASSERT_EQ(c.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(c.pairs[i].id, static_cast<PairId>(i));
    }
    EXPECT_EQ(c.pairs[2].source_text, "e");
    EXPECT_EQ(c.pairs[2].direction, kEnJa);
}

TEST(LoadPairs, EmptyFileGivesEmptyCorpus)
{
    TempDir dir;
    spit(dir.file("e.jsonl"), "");
    EXPECT_TRUE(load_pairs(dir.file("e.jsonl"), kEnJa).empty());
}

TEST(LoadPairs, MissingFieldNamesLine)
{
    TempDir dir;
    spit(dir.file("m.jsonl"), R"({"src":"a","tgt":"b","src_lang":"en","tgt_lang":"ja"}
{"src":"c","src_lang":"en","tgt_lang":"ja"}
)");
    try {
        load_pairs(dir.file("m.jsonl"), kEnJa);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("line 2: missing field"), std::string::npos) << e.what();
    }
}

TEST(LoadPairs, RejectsMalformedRecords)
{
    TempDir dir;
    spit(dir.file("bad.jsonl"), "{\"src\":\"a\",\"tgt\":\"b\"}\nnot json\n");
    EXPECT_THROW(load_pairs(dir.file("bad.jsonl"), kEnJa), Error);
    spit(dir.file("blank.jsonl"), R"({"src":"  ","tgt":"b","src_lang":"en","tgt_lang":"ja"})");
    EXPECT_THROW(load_pairs(dir.file("blank.jsonl"), kEnJa), Error);
    spit(dir.file("sim.jsonl"), R"({"src":"a","tgt":"b","src_lang":"en","tgt_lang":"ja","sim":1.5})");
    EXPECT_THROW(load_pairs(dir.file("sim.jsonl"), kEnJa), Error);
    spit(dir.file("dup.jsonl"), R"({"id":4,"src":"a","tgt":"b","src_lang":"en","tgt_lang":"ja"}
{"id":4,"src":"a","tgt":"b","src_lang":"en","tgt_lang":"ja"})");
    EXPECT_THROW(load_pairs(dir.file("dup.jsonl"), kEnJa), Error);
    spit(dir.file("dir.jsonl"), R"({"src":"a","tgt":"b","src_lang":"ja","tgt_lang":"en"})");
    EXPECT_THROW(load_pairs(dir.file("dir.jsonl"), kEnJa), Error);
    EXPECT_THROW(load_pairs(dir.file("missing.jsonl"), kEnJa), Error);
}

TEST(SavePairs, RoundTripsRandomTextWithControlCharacters)
{
    TempDir dir;
    Rng rng(42);
    Corpus c;
    for (PairId i = 0; i < 100; ++i) {
        std::optional<double> sim;
        if (i % 3 == 0) {
            sim = rng.uniform01() * 2.0 - 1.0;
        }
        c.pairs.push_back(ParallelPair{i * 7 + 1, random_text(rng), random_text(rng), kEnJa, sim});
    }
    save_pairs(c, dir.file("rt.jsonl"));
    auto back = load_pairs(dir.file("rt.jsonl"), kEnJa);
    back.provenance = c.provenance;
    EXPECT_EQ(back, c);
}

TEST(SavePairs, EscapesTabAndNewline)
{
    TempDir dir;
    Corpus c;
    c.pairs.push_back(ParallelPair{0, "a\tb\nc", "\"q\"\r", kEnJa, 0.5});
    save_pairs(c, dir.file("esc.jsonl"));
    const auto text = paracpt::testing::slurp(dir.file("esc.jsonl"));
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
    EXPECT_EQ(text.find('\t'), std::string::npos);
    EXPECT_EQ(load_pairs(dir.file("esc.jsonl")).pairs, c.pairs);
}

TEST(SavePairs, EmptyCorpusWritesNoRecords)
{
    TempDir dir;
    save_pairs(Corpus{}, dir.file("empty.jsonl"));
    EXPECT_EQ(paracpt::testing::slurp(dir.file("empty.jsonl")), "");
    EXPECT_THROW(save_pairs(Corpus{}, dir.file("no/such/dir/x.jsonl")), Error);
}
