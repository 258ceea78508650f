#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace paracpt;
using paracpt::testing::TempDir;

namespace {

json tiny_spec(json cells, std::size_t cpt_epochs = 1)
{
    return json{
        {"name", "tiny"},
        {"task",
         {{"task", "cipher_plus_reversal"},
          {"words_per_language", 4},
          {"min_len", 2},
          {"max_len", 3},
          {"n_train", 24},
          {"n_val", 4},
          {"n_test", 6},
          {"n_sft", 6}}},
        {"model", {{"context_len", 48}, {"embed_dim", 16}, {"n_layers", 1}, {"n_heads", 2}, {"ffn_dim", 32}}},
        {"cpt", {{"peak_lr", 3e-3}, {"batch_size", 2}, {"epochs", cpt_epochs}, {"validate_every", 2}}},
        {"sft", {{"peak_lr", 1e-3}, {"batch_size", 4}, {"epochs", 1}, {"validate_every", 2}}},
        {"sft_directions", {"ab", "ba"}},
        {"seeds", {0, 1}},
        {"max_new_tokens", 8},
        {"bootstrap", 100},
        {"cells", std::move(cells)}};
}

json two_cells()
{
    return json::array({json{{"name", "direct"}, {"cpt", json::array()}, {"sft", true}},
                        json{{"name", "mix"}, {"cpt", json::array({json{{"ordering", "mix"}}})}, {"sft", true}}});
}

json run_spec(const json& j, const std::filesystem::path& out)
{
    ExperimentRunner runner(parse_experiment(j), out);
    return runner.run();
}

} // namespace

TEST(Experiment, ZeroEpochCellIsNearChance)
{
    TempDir dir;
    auto j = tiny_spec(json::array({json{{"name", "untrained"}, {"cpt", json::array()}, {"sft", false}}}));
    j["seeds"] = {0};
    const auto m = run_spec(j, dir.path());
    ASSERT_EQ(m.at("cells").size(), 1u);
    const auto& cell = m.at("cells")[0];
    EXPECT_EQ(cell.at("status"), "ok");
    for (const char* d : {"ab", "ba"}) {
        EXPECT_LT(cell.at("results").at(d).at("mean").get<double>(), 5.0);
        EXPECT_EQ(cell.at("results").at(d).at("per_seed").size(), 1u);
    }
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "matrix.json"));
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "matrix.txt"));
    EXPECT_NE(paracpt::testing::slurp((dir.path() / "matrix.txt").string()).find("untrained"), std::string::npos);
}

TEST(Experiment, MatrixShapeAndSignificance)
{
    TempDir dir;
    auto j = tiny_spec(two_cells());
    j["baseline"] = "direct";
    const auto m = run_spec(j, dir.path());
    EXPECT_EQ(m.at("seeds"), json({0, 1}));
    ASSERT_EQ(m.at("cells").size(), 2u);
    const auto& mix = m.at("cells")[1];
    EXPECT_EQ(mix.at("name"), "mix");
    for (const char* d : {"ab", "ba"}) {
        const auto& r = mix.at("results").at(d);
        ASSERT_EQ(r.at("per_seed").size(), 2u);
        ASSERT_EQ(r.at("p_values").size(), 2u);
        const double mean = (r.at("per_seed")[0].get<double>() + r.at("per_seed")[1].get<double>()) / 2.0;
        EXPECT_NEAR(r.at("mean").get<double>(), mean, 1e-12);
        EXPECT_LE(r.at("n_sig").get<std::size_t>(), 2u);
        EXPECT_FALSE(m.at("cells")[0].at("results").at(d).contains("p_values"));
    }
}

TEST(Experiment, ResumesFromCachedArtifacts)
{
    TempDir dir;
    const auto j = tiny_spec(two_cells());
    const auto first = run_spec(j, dir.path());
    const auto first_text = paracpt::testing::slurp((dir.path() / "matrix.json").string());

    const ExperimentRunner probe(parse_experiment(j), dir.path());
    const auto spec = parse_experiment(j);
    const auto removed = probe.cell_result_path(spec.cells[1], 1);
    ASSERT_TRUE(std::filesystem::exists(removed));
    const auto kept = probe.cell_result_path(spec.cells[0], 0);
    const auto kept_time = std::filesystem::last_write_time(kept);
    std::filesystem::remove(removed);

    const auto second = run_spec(j, dir.path());
    EXPECT_TRUE(std::filesystem::exists(removed));
    EXPECT_EQ(std::filesystem::last_write_time(kept), kept_time);
    EXPECT_EQ(first, second);
    EXPECT_EQ(paracpt::testing::slurp((dir.path() / "matrix.json").string()), first_text);
}

TEST(Experiment, FailedCellIsRecordedAndOthersRun)
{
    TempDir dir;
    auto cells = two_cells();
    cells.push_back(json{{"name", "broken"}, {"cpt", json::array()}, {"sft", json{{"peak_lr", -1.0}}}});
    const auto m = run_spec(tiny_spec(cells), dir.path());
    ASSERT_EQ(m.at("cells").size(), 3u);
    EXPECT_EQ(m.at("cells")[0].at("status"), "ok");
    EXPECT_EQ(m.at("cells")[1].at("status"), "ok");
    const auto& broken = m.at("cells")[2];
    EXPECT_EQ(broken.at("status"), "failed");
    ASSERT_EQ(broken.at("errors").size(), 2u);
    EXPECT_NE(broken.at("errors")[0].at("error").get<std::string>().find("peak_lr"), std::string::npos);
    EXPECT_TRUE(broken.at("results").at("ab").at("mean").is_null());
    EXPECT_NE(ExperimentRunner::render_table(m).find("failed"), std::string::npos);
}

TEST(Experiment, DataFractionsShareOneTrainingRun)
{
    TempDir dir;
    auto cells = json::array();
    for (double f : {0.25, 0.5, 1.0}) {
        cells.push_back(json{{"name", "mix_" + std::to_string(static_cast<int>(f * 100))},
                             {"cpt", json::array({json{{"ordering", "mix"}, {"stop_fraction", f}}})},
                             {"sft", false}});
    }
    auto j = tiny_spec(cells, 2);
    j["seeds"] = {0};
    run_spec(j, dir.path());
    std::set<std::string> runs;
    std::size_t snapshots = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path() / "stages")) {
        const auto name = e.path().filename().string();
        runs.insert(name.substr(0, name.find('@')));
        ++snapshots;
        EXPECT_TRUE(std::filesystem::exists(e.path() / "model.bfck"));
    }
    EXPECT_EQ(runs.size(), 1u);
    EXPECT_EQ(snapshots, 3u);
}

TEST(Experiment, SequentialStagesBuildOnEachOther)
{
    TempDir dir;
    auto cells = json::array(
        {json{{"name", "ab"}, {"cpt", json::array({json{{"ordering", "ab"}}})}, {"sft", false}},
         json{{"name", "ab_ba"},
              {"cpt", json::array({json{{"ordering", "ab"}}, json{{"ordering", "ba"}}})},
              {"sft", false}},
         json{{"name", "ab_ba_replay"},
              {"cpt", json::array({json{{"ordering", "ab"}},
                                   json{{"ordering", "ba"}, {"replay", json{{"fraction", 0.1}}}}})},
              {"sft", false}}});
    auto j = tiny_spec(cells);
    j["seeds"] = {0};
    const auto m = run_spec(j, dir.path());
    for (const auto& c : m.at("cells")) {
        EXPECT_EQ(c.at("status"), "ok") << c.dump();
    }
    // ab once, then two distinct second stages.
    EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir.path() / "stages"),
                            std::filesystem::directory_iterator{}),
              3);
}

TEST(Experiment, ParseErrors)
{
    const auto good = tiny_spec(two_cells());
    EXPECT_NO_THROW(parse_experiment(good));
    auto j = good;
    j["cells"].push_back(j["cells"][0]);
    EXPECT_THROW(parse_experiment(j), Error);
    j = good;
    j["baseline"] = "nope";
    EXPECT_THROW(parse_experiment(j), Error);
    j = good;
    j["cells"] = json::array();
    EXPECT_THROW(parse_experiment(j), Error);
    j = good;
    j["cells"][0]["eval"] = {"ac"};
    EXPECT_THROW(parse_experiment(j), Error);
    j = good;
    j["cells"][1]["cpt"][0]["stop_fraction"] = 0.0;
    EXPECT_THROW(parse_experiment(j), Error);
    j = good;
    j["cpt"]["learning_rate"] = 1.0;
    EXPECT_THROW(parse_experiment(j), Error);
    j = good;
    j["task"]["words_per_language"] = 2;
    EXPECT_THROW(parse_experiment(j), Error);
    j = good;
    j["seeds"] = json::array();
    EXPECT_THROW(parse_experiment(j), Error);
    TempDir dir;
    paracpt::testing::spit(dir.file("bad.json"), "{ not json");
    EXPECT_THROW(load_experiment(dir.file("bad.json")), Error);
}

TEST(Experiment, AdapterStrings)
{
    const auto a = parse_adapter_string("r=4,alpha=8,dropout=0,targets=q+v+ffn_up");
    EXPECT_EQ(a.rank, 4u);
    EXPECT_EQ(a.alpha, 8.0);
    EXPECT_EQ(a.dropout, 0.0);
    EXPECT_EQ(a.targets, (std::set<MatrixRole>{MatrixRole::query, MatrixRole::value, MatrixRole::ffn_up}));
    const auto back = adapter_from_json(adapter_to_json(a));
    EXPECT_EQ(back.rank, a.rank);
    EXPECT_EQ(back.targets, a.targets);
    EXPECT_THROW(parse_adapter_string("r=4,beta=1"), Error);
    EXPECT_THROW(parse_adapter_string("r"), Error);
}
