#include "cbsm/error.hpp"
#include "cbsm/run_config.hpp"
#include "cbsm/tensor_io.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace cbsm;

TEST(RunConfig, DefaultsRoundTripThroughJson)
{
    const auto a = RunConfig::from_json(nlohmann::json::object());
    const auto b = RunConfig::from_json(a.to_json());
    EXPECT_EQ(a.to_json(), b.to_json());
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.hash(), sha256_hex(a.to_json().dump()));
    EXPECT_EQ(a.training_tasks().size(), 4U);
    EXPECT_EQ(a.held_out_tasks().size(), 2U);
}

TEST(RunConfig, HashIgnoresKeyOrderAndMnistLocation)
{
    const auto j1 = nlohmann::json::parse(R"({"num_samples": 3000, "seed": 4, "mnist_dir": "/a"})");
    const auto j2 = nlohmann::json::parse(R"({"mnist_dir": "/elsewhere", "seed": 4, "num_samples": 3000})");
    EXPECT_EQ(RunConfig::from_json(j1).hash(), RunConfig::from_json(j2).hash());
    const auto j3 = nlohmann::json::parse(R"({"num_samples": 3001, "seed": 4})");
    EXPECT_NE(RunConfig::from_json(j1).hash(), RunConfig::from_json(j3).hash());
}

TEST(RunConfig, RejectsUnknownKeysTasksAndDepths)
{
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"epochz": 3})")), ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"tasks": ["parity", "nope"]})")), ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"tasks": ["parity", "parity"]})")), ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"tree_depths": {"parity": 0}})")), ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"num_samples": "many"})")), ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"train": {"weights": {"lambda1": -1}}})")),
                 ConfigError);
    EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse("[1, 2]")), ConfigError);
}

TEST(RunConfig, DepthOverrideReachesTheTree)
{
    const auto cfg = RunConfig::from_json(nlohmann::json::parse(R"({"tree_depths": {"parity": 3}})"));
    for (const auto& t : cfg.training_tasks()) {
        if (t.name == "parity") {
            EXPECT_EQ(t.tree.depth, 3);
        }
    }
}

TEST(Seeds, DerivationIsStableAndStageSpecific)
{
    EXPECT_EQ(derive_seed(0, "train"), derive_seed(0, "train"));
    EXPECT_NE(derive_seed(0, "train"), derive_seed(0, "refine"));
    EXPECT_NE(derive_seed(0, "train"), derive_seed(1, "train"));
    EXPECT_EQ(derive_seed(7, "data"), std::stoull(sha256_hex("data:7").substr(0, 16), nullptr, 16));

    RunConfig c;
    c.apply_seed(3);
    EXPECT_EQ(c.train.seed, derive_seed(3, "train"));
    EXPECT_EQ(c.dataset.seed, derive_seed(3, "data"));
    const auto parsed = RunConfig::from_json({{"seed", 3}});
    EXPECT_EQ(parsed.refine.seed, derive_seed(3, "refine"));
}

TEST(Manifest, ListsEveryFileWithItsChecksum)
{
    fixtures::TempDir dir("man");
    std::filesystem::create_directories(dir.path() / "sub");
    std::ofstream(dir.path() / "a.txt") << "alpha";
    std::ofstream(dir.path() / "sub" / "b.txt") << "beta";
    RunConfig cfg;
    const auto m = write_run_manifest(dir.path(), "unit", cfg, 42, {{"note", 1}});
    EXPECT_EQ(m["stage"], "unit");
    EXPECT_EQ(m["stage_seed"], 42);
    EXPECT_EQ(m["config_hash"], cfg.hash());
    EXPECT_EQ(m["note"], 1);
    EXPECT_EQ(m["files"]["a.txt"], sha256_hex("alpha"));
    EXPECT_EQ(m["files"]["sub/b.txt"], sha256_hex("beta"));
    const auto again = write_run_manifest(dir.path(), "unit", cfg, 42, {{"note", 1}});
    EXPECT_EQ(again, m);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "run.json"));
}

TEST(JsonlWriter, TruncatesThenAppendsOneObjectPerLine)
{
    fixtures::TempDir dir("jsonl");
    const auto path = dir.path() / "log.jsonl";
    std::ofstream(path) << "stale\n";
    {
        JsonlWriter w(path);
        w.write({{"epoch", 0}});
        w.write({{"epoch", 1}});
    }
    std::ifstream in(path);
    std::string line;
    std::vector<nlohmann::json> lines;
    while (std::getline(in, line)) {
        lines.push_back(nlohmann::json::parse(line));
    }
    ASSERT_EQ(lines.size(), 2U);
    EXPECT_EQ(lines[1]["epoch"], 1);
}
