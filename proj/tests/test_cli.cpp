#include "test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>

namespace {

struct Result {
    int code{-1};
    std::string output;
};

Result run_cli(const std::string& args)
{
    const std::string cmd = std::string(CBSM_CLI_PATH) + " " + args + " 2>&1";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) {
        return r;
    }
    std::array<char, 512> buf{};
    while (fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) {
        r.output += buf.data();
    }
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

bool have_mnist()
{
    return std::filesystem::exists(std::filesystem::path(CBSM_MNIST_DIR) / "train-images-idx3-ubyte");
}

nlohmann::json read_json(const std::filesystem::path& p)
{
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

} // namespace

TEST(Cli, UsageErrorsExitWithOne)
{
    EXPECT_EQ(run_cli("").code, 1);
    EXPECT_EQ(run_cli("train").code, 1);
    EXPECT_EQ(run_cli("frobnicate --out /tmp/x").code, 1);
    EXPECT_EQ(run_cli("--help").code, 0);
}

TEST(Cli, MissingPrerequisiteIsDependencyError)
{
    cbsm::fixtures::TempDir dir("cli");
    const auto r = run_cli("refine --out " + dir.path().string());
    EXPECT_EQ(r.code, 2) << r.output;
    EXPECT_NE(r.output.find("surrogate"), std::string::npos) << r.output;
    EXPECT_EQ(run_cli("train --out " + dir.path().string()).code, 2);
}

TEST(Cli, UnsupportedDeviceIsDependencyError)
{
    cbsm::fixtures::TempDir dir("cli");
    const auto r = run_cli("train --out " + dir.path().string() + " --device cuda");
    EXPECT_EQ(r.code, 2) << r.output;
}

TEST(Cli, BadConfigIsConfigError)
{
    cbsm::fixtures::TempDir dir("cli");
    std::ofstream(dir.path() / "cfg.json") << R"({"num_sample": 10})";
    const auto r = run_cli("make-data --out " + (dir.path() / "run").string() + " --config " +
                           (dir.path() / "cfg.json").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("num_sample"), std::string::npos) << r.output;
}

TEST(Cli, MakeDataPointsAtTheMnistFlag)
{
    cbsm::fixtures::TempDir dir("cli");
    const auto r = run_cli("make-data --out " + (dir.path() / "run").string() + " --mnist " +
                           (dir.path() / "nowhere").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find("--mnist"), std::string::npos) << r.output;
}

TEST(Cli, MakeDataIsReproducible)
{
    if (!have_mnist()) {
        GTEST_SKIP() << "MNIST not found at " << CBSM_MNIST_DIR;
    }
    cbsm::fixtures::TempDir dir("cli");
    std::ofstream(dir.path() / "cfg.json") << R"({"num_samples": 600, "seed": 5})";
    const auto cfg = " --config " + (dir.path() / "cfg.json").string() + " --mnist " + CBSM_MNIST_DIR;
    ASSERT_EQ(run_cli("make-data --out " + (dir.path() / "a").string() + cfg).code, 0);
    ASSERT_EQ(run_cli("make-data --out " + (dir.path() / "b").string() + cfg).code, 0);
    const auto a = read_json(dir.path() / "a" / "data" / "run.json");
    const auto b = read_json(dir.path() / "b" / "data" / "run.json");
    EXPECT_EQ(a, b);
    EXPECT_EQ(a["seed"], 5);
    EXPECT_EQ(a["files"].size(), 5U);

    ASSERT_EQ(run_cli("make-data --out " + (dir.path() / "c").string() + cfg + " --seed 6").code, 0);
    const auto c = read_json(dir.path() / "c" / "data" / "run.json");
    EXPECT_NE(c["files"]["train.cbt"], a["files"]["train.cbt"]);
    EXPECT_NE(c["config_hash"], a["config_hash"]);
}
