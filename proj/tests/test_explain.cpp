#include "cbsm/error.hpp"
#include "cbsm/explain.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cbsm;

namespace {

Surrogate small_surrogate(std::uint64_t seed)
{
    return build_surrogate(fixtures::tiny_model(), HeadOptions{}, {{"a", fixtures::tree_opts(2, 2)},
                                                                  {"b", fixtures::tree_opts(3, 4)}},
                           seed);
}

// Targets equal to the surrogate's own hard-mask predictions on posterior means.
SurrogateData self_targets(Surrogate& s, const torch::Tensor& pixels)
{
    const auto mu = encode_means(s.model, pixels);
    torch::NoGradGuard guard;
    auto outs = s.head->forward(mu, MaskMode::Hard);
    for (auto& o : outs) {
        o = torch::nn::functional::one_hot(o.argmax(1), o.size(1)).to(torch::kFloat32);
    }
    return {{pixels, torch::arange(pixels.size(0), torch::kInt64)}, outs};
}

} // namespace

TEST(GlobalExplanation, ListsConceptsAboveThreshold)
{
    auto s = small_surrogate(1);
    {
        torch::NoGradGuard guard;
        s.head->mask_column(0).copy_(torch::tensor({2.0F, -2.0F, 0.5F}));
        s.head->mask_column(1).fill_(-3.0F);
    }
    const auto g = global_explanation(s.head, "a");
    EXPECT_EQ(g.related, (std::vector<std::int64_t>{0, 2}));
    EXPECT_FALSE(g.empty);
    EXPECT_TRUE(global_explanation(s.head, "b").empty);
    s.head->set_threshold(0.0);
    EXPECT_EQ(global_explanation(s.head, "b").related.size(), 3U);
    EXPECT_THROW(global_explanation(s.head, "c"), ConfigError);
}

TEST(LocalExplanation, DeterministicAndConsistentWithTheTree)
{
    auto s = small_surrogate(2);
    const auto image = torch::rand({8, 8});
    const auto a = local_explanation(s.model, s.head, "b", image, 12);
    const auto b = local_explanation(s.model, s.head, "b", image, 12);
    EXPECT_EQ(a.to_json(), b.to_json());
    EXPECT_EQ(a.path.steps.size(), 3U);
    EXPECT_EQ(a.surrogate.size(), 4U);
    EXPECT_TRUE(a.blackbox.empty());
    EXPECT_EQ(a.concept_values.size(), 3U);
    EXPECT_THROW(local_explanation(s.model, s.head, "b", torch::rand({1, 8, 8}), 0), ConfigError);

    const auto j = a.to_json({"w", "x", "y", "z"});
    EXPECT_EQ(j["sample_id"], 12);
    EXPECT_EQ(j["path"].size(), 3U);
}

TEST(LocalExplanation, SharpSamplesFollowTheHardPath)
{
    auto s = small_surrogate(3);
    {
        torch::NoGradGuard guard;
        s.head->tree(1)->weights.mul_(400.0F);
    }
    int sharp = 0;
    for (int i = 0; i < 200; ++i) {
        const auto e = local_explanation(s.model, s.head, "b", torch::rand({8, 8}), i);
        bool is_sharp = true;
        for (const auto& step : e.path.steps) {
            is_sharp = is_sharp && std::abs(step.p_right - 0.5) > 0.49;
        }
        if (is_sharp) {
            ++sharp;
            EXPECT_EQ(e.hard_path_predicted, e.predicted) << "sample " << i;
        }
    }
    EXPECT_GT(sharp, 20);
}

TEST(Traversal, ValuesAndGrid)
{
    const auto v = traversal_values(7);
    ASSERT_EQ(v.size(), 7U);
    EXPECT_DOUBLE_EQ(v.front(), -3.0);
    EXPECT_DOUBLE_EQ(v[3], 0.0);
    EXPECT_DOUBLE_EQ(v.back(), 3.0);
    EXPECT_THROW(traversal_values(0), ConfigError);

    auto s = small_surrogate(4);
    const auto base = torch::tensor({0.2F, -0.4F, 1.0F});
    const auto grid = traverse(s.model, base, 1, v);
    EXPECT_EQ(grid.images.sizes(), (std::vector<std::int64_t>{7, 8, 8}));
    const auto others = torch::cat({grid.vectors.select(1, 0).unsqueeze(1), grid.vectors.select(1, 2).unsqueeze(1)}, 1);
    EXPECT_TRUE(torch::equal(others, torch::tensor({0.2F, 1.0F}).expand({7, 2})));
    EXPECT_FLOAT_EQ(grid.vectors[6][1].item<float>(), 3.0F);

    const auto flat = traverse(s.model, base, 0, std::vector<double>(5, 0.7));
    for (std::int64_t i = 1; i < 5; ++i) {
        EXPECT_TRUE(torch::equal(flat.images[i], flat.images[0]));
    }
    EXPECT_THROW(traverse(s.model, base, 3, v), ConfigError);
    EXPECT_THROW(traverse(s.model, base, 0, {4.0}), ConfigError);
}

TEST(Fidelity, PerfectWhenTargetsAreTheSurrogateItself)
{
    auto s = small_surrogate(5);
    const auto data = self_targets(s, torch::rand({300, 8, 8}));
    const auto report = fidelity_report(s.model, s.head, data);
    ASSERT_EQ(report.size(), 2U);
    for (const auto& f : report) {
        EXPECT_DOUBLE_EQ(f.agreement, 1.0) << f.task;
        EXPECT_LE(f.num_nodes, (std::int64_t{1} << f.depth) - 1);
    }
    EXPECT_EQ(report[1].depth, 3);
    EXPECT_EQ(report[1].num_concepts, 3);
}

TEST(Fidelity, ChanceLevelAgainstUnrelatedLabels)
{
    torch::manual_seed(6);
    auto s = small_surrogate(6);
    const std::int64_t n = 4000;
    const SurrogateData data{{torch::rand({n, 8, 8}), torch::arange(n, torch::kInt64)},
                             {torch::nn::functional::one_hot(torch::randint(0, 2, {n}, torch::kInt64), 2).to(torch::kFloat32),
                              torch::nn::functional::one_hot(torch::randint(0, 4, {n}, torch::kInt64), 4).to(torch::kFloat32)}};
    const auto report = fidelity_report(s.model, s.head, data);
    EXPECT_NEAR(report[0].agreement, 0.5, 0.05);
    EXPECT_NEAR(report[1].agreement, 0.25, 0.05);
    EXPECT_THROW(fidelity_report(s.model, s.head, SurrogateData{}), DataError);
}

TEST(MutualInformation, RecoversLabelEntropyAndVanishesWhenShuffled)
{
    torch::manual_seed(7);
    const std::int64_t n = 5000;
    const auto labels = torch::randint(0, 2, {n}, torch::kInt64);
    const auto p1 = labels.to(torch::kFloat64).mean().item<double>();
    const double entropy = -p1 * std::log(p1) - (1 - p1) * std::log(1 - p1);
    const auto informative = labels.to(torch::kFloat64) + 0.01 * torch::randn({n}, torch::kFloat64);
    EXPECT_NEAR(binned_mutual_information(informative, labels), entropy, 0.05 * entropy);

    const auto shuffled = labels.index_select(0, torch::randperm(n, torch::kInt64));
    EXPECT_LT(binned_mutual_information(informative, shuffled), 0.02);

    EXPECT_NEAR(binned_mutual_information(torch::ones({n}), labels), 0.0, 1e-12);
    EXPECT_THROW(binned_mutual_information(torch::rand({10}), torch::zeros({10}), 20), DataError);
    EXPECT_THROW(binned_mutual_information(torch::rand({30}), torch::zeros({29}), 20), ConfigError);
}

TEST(MutualInformation, FlowMatrixAndSelectedSum)
{
    torch::manual_seed(8);
    const auto labels = torch::randint(0, 3, {2000}, torch::kInt64);
    const auto concepts = torch::stack({labels.to(torch::kFloat32) + 0.01 * torch::randn({2000}), torch::randn({2000})}, 1);
    const auto mi = mi_flow(concepts, {labels, labels}, 10);
    EXPECT_EQ(mi.sizes(), (std::vector<std::int64_t>{2, 2}));
    EXPECT_GT(mi[0][0].item<double>(), 0.9);
    EXPECT_LT(mi[1][0].item<double>(), 0.05);
    const auto mask = torch::tensor({{1.0F, 0.0F}, {0.0F, 1.0F}});
    EXPECT_NEAR(selected_information(mi, mask), mi[0][0].item<double>() + mi[1][1].item<double>(), 1e-12);
    EXPECT_THROW(selected_information(mi, torch::ones({3, 2})), ConfigError);
}

TEST(Efficacy, RejectsBadSizesAndComputesMedians)
{
    EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
    EXPECT_DOUBLE_EQ(median({4.0, 1.0}), 2.5);
    EXPECT_THROW(median({}), ConfigError);

    EfficacyConfig cfg;
    cfg.model = fixtures::tiny_model();
    const SurrogateData pool{{torch::rand({10, 8, 8}), torch::arange(10, torch::kInt64)}, {fixtures::random_distribution(10, 2)}};
    cfg.sizes = {0};
    EXPECT_THROW(efficacy_curve(cfg, {{"a", fixtures::tree_opts(2, 2)}}, pool, pool, {}), ConfigError);
    cfg.sizes = {11};
    EXPECT_THROW(efficacy_curve(cfg, {{"a", fixtures::tree_opts(2, 2)}}, pool, pool, {}), ConfigError);
}
