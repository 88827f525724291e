#include "cbsm/error.hpp"
#include "cbsm/explanation_head.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cbsm;

namespace {

// Independent oracle: walk every root-to-leaf path and multiply gate
// probabilities in double precision.
torch::Tensor enumerate_leaves(const SoftDecisionTree& tree, const torch::Tensor& z)
{
    const auto w = tree->weights.detach().to(torch::kFloat64);
    const auto b = tree->bias.detach().to(torch::kFloat64);
    const auto zd = z.to(torch::kFloat64);
    const int depth = tree->options().depth;
    const double beta = tree->options().beta;
    const auto leaves = tree->num_leaves();
    auto probs = torch::zeros({z.size(0), leaves}, torch::kFloat64);
    for (std::int64_t i = 0; i < z.size(0); ++i) {
        for (std::int64_t leaf = 0; leaf < leaves; ++leaf) {
            double p = 1.0;
            std::int64_t node = 0;
            for (int d = 0; d < depth; ++d) {
                const bool right = ((leaf >> (depth - 1 - d)) & 1) != 0;
                const double a = (w[node] * zd[i]).sum().item<double>() + b[node].item<double>();
                const double g = 1.0 / (1.0 + std::exp(-beta * a));
                p *= right ? g : 1.0 - g;
                node = 2 * node + (right ? 2 : 1);
            }
            probs[i][leaf] = p;
        }
    }
    return probs;
}

} // namespace

TEST(SoftTree, ForwardMatchesLeafEnumeration)
{
    for (int depth = 1; depth <= 4; ++depth) {
        torch::manual_seed(depth);
        auto opts = fixtures::tree_opts(depth, 3);
        opts.beta = 1.7;
        SoftDecisionTree tree(4, opts);
        tree->to(torch::kFloat64);
        torch::NoGradGuard guard;
        tree->bias.copy_(torch::randn({tree->num_inner()}, torch::kFloat64));
        const auto z = torch::randn({6, 4}, torch::kFloat64);
        const auto leaf_prob = enumerate_leaves(tree, z);
        const auto expected = torch::matmul(leaf_prob, tree->leaf_distributions());
        EXPECT_LT((tree->forward(z) - expected).abs().max().item<double>(), 1e-6) << "depth " << depth;
        EXPECT_LT((tree->route(z).leaf_prob.sum(1) - 1.0).abs().max().item<double>(), 1e-12);
    }
}

TEST(SoftTree, DepthOneSplitsOnASingleGate)
{
    SoftDecisionTree tree(2, fixtures::tree_opts(1, 2));
    torch::NoGradGuard guard;
    tree->weights.copy_(torch::tensor({{1.0F, 0.0F}}));
    tree->bias.zero_();
    const auto r = tree->route(torch::tensor({{2.0F, 5.0F}}));
    const float g = 1.0F / (1.0F + std::exp(-2.0F));
    EXPECT_NEAR(r.leaf_prob[0][0].item<float>(), 1.0F - g, 1e-6F);
    EXPECT_NEAR(r.leaf_prob[0][1].item<float>(), g, 1e-6F);
}

TEST(SoftTree, RejectsBadOptions)
{
    EXPECT_THROW(SoftDecisionTree(3, fixtures::tree_opts(0, 2)), ConfigError);
    EXPECT_THROW(SoftDecisionTree(3, fixtures::tree_opts(2, 1)), ConfigError);
}

TEST(SoftTree, HardPathTieGoesLeftAndHasDepthSteps)
{
    SoftDecisionTree tree(2, fixtures::tree_opts(2, 2));
    {
        torch::NoGradGuard guard;
        tree->weights.zero_();
        tree->bias.zero_();
    }
    const auto path = tree->hard_path(torch::tensor({0.3F, -0.7F}));
    ASSERT_EQ(path.steps.size(), 2U);
    EXPECT_FALSE(path.steps[0].went_right);
    EXPECT_EQ(path.steps[1].node, 1);
    EXPECT_EQ(path.leaf, 0);
    EXPECT_EQ(path.leaf_distribution.size(), 2U);
}

TEST(SoftTree, ComplexityTerms)
{
    SoftDecisionTree tree(3, fixtures::tree_opts(2, 2));
    torch::NoGradGuard guard;
    tree->weights.copy_(torch::tensor({{1.0F, -2.0F, 0.0F}, {0.5F, 0.0F, 0.0F}, {0.0F, 0.0F, -1.5F}}));
    EXPECT_FLOAT_EQ(tree->l1_term().item<float>(), 5.0F);

    // Perfectly balanced routing at every node: balance part is zero.
    TreeRouting balanced;
    balanced.gate = torch::full({4, 3}, 0.5);
    balanced.reach = torch::tensor({{1.0, 0.5, 0.5}}).repeat({4, 1});
    EXPECT_NEAR(tree->balance_term(balanced).item<double>(), 0.0, 1e-9);

    // Skewed root: only the root contributes, at full weight.
    TreeRouting skewed = balanced;
    skewed.gate = torch::tensor({{0.9, 0.5, 0.5}}).repeat({4, 1});
    const double expected = -0.5 * std::log(0.9) - 0.5 * std::log(0.1) - std::log(2.0);
    EXPECT_NEAR(tree->balance_term(skewed).item<double>(), expected, 1e-6);

    // The same skew one level down counts half.
    TreeRouting deeper = balanced;
    deeper.gate = torch::tensor({{0.5, 0.9, 0.5}}).repeat({4, 1});
    EXPECT_NEAR(tree->balance_term(deeper).item<double>(), 0.5 * expected, 1e-6);
}

TEST(Mask, HardMaskThresholdsSoftMask)
{
    ExplanationHead head(4, 0.5, 0.0);
    head->add_task("a", fixtures::tree_opts(2, 2));
    head->add_task("b", fixtures::tree_opts(2, 3));
    {
        torch::NoGradGuard guard;
        head->mask_column(0).copy_(torch::tensor({3.0F, -3.0F, 0.0F, 0.1F}));
        head->mask_column(1).copy_(torch::tensor({-1.0F, -1.0F, -1.0F, -1.0F}));
    }
    EXPECT_EQ(head->mask_logits().sizes(), (std::vector<std::int64_t>{4, 2}));
    EXPECT_TRUE(torch::equal(head->hard_mask().select(1, 0), torch::tensor({1.0F, 0.0F, 0.0F, 1.0F})));
    EXPECT_EQ(head->hard_mask().select(1, 1).sum().item<float>(), 0.0F);

    head->set_threshold(0.0);
    EXPECT_EQ(head->hard_mask().sum().item<float>(), 8.0F);
    EXPECT_THROW(ExplanationHead(4, 1.0), ConfigError);
}

TEST(Mask, HardModeZeroesUnselectedConcepts)
{
    ExplanationHead head(3);
    head->add_task("t", fixtures::tree_opts(2, 2));
    {
        torch::NoGradGuard guard;
        head->mask_column(0).copy_(torch::tensor({4.0F, -4.0F, 4.0F}));
    }
    const auto z = torch::tensor({{1.5F, 2.5F, -3.0F}});
    EXPECT_TRUE(torch::equal(head->mask_apply(z, 0, MaskMode::Hard), torch::tensor({{1.5F, 0.0F, -3.0F}})));
    EXPECT_THROW(head->mask_apply(z, 1, MaskMode::Hard), ConfigError);
    EXPECT_THROW(head->mask_apply(torch::zeros({1, 4}), 0, MaskMode::Hard), ConfigError);
}

TEST(Mask, MaskedConceptsCannotChangeTheOutput)
{
    torch::manual_seed(8);
    for (const bool straight_through : {false, true}) {
        ExplanationHead head(5);
        head->set_straight_through(straight_through);
        head->add_task("t", fixtures::tree_opts(3, 4));
        {
            torch::NoGradGuard guard;
            head->mask_column(0).copy_(torch::tensor({3.0F, -3.0F, 2.0F, -5.0F, -0.5F}));
        }
        for (int trial = 0; trial < 20; ++trial) {
            const auto z = torch::randn({16, 5});
            auto perturbed = z.clone();
            for (const std::int64_t j : {1, 3, 4}) {
                perturbed.select(1, j).copy_(torch::randn({16}) * 10.0);
            }
            EXPECT_TRUE(torch::equal(head->forward(z, MaskMode::Hard)[0], head->forward(perturbed, MaskMode::Hard)[0]));
            if (straight_through) {
                EXPECT_TRUE(
                    torch::equal(head->forward(z, MaskMode::Soft)[0], head->forward(perturbed, MaskMode::Soft)[0]));
            }
        }
    }
}

TEST(Mask, StraightThroughPassesSoftGradient)
{
    ExplanationHead head(2, 0.5, 0.0);
    head->set_straight_through(true);
    head->add_task("t", fixtures::tree_opts(1, 2));
    {
        torch::NoGradGuard guard;
        head->mask_column(0).copy_(torch::tensor({1.0F, -1.0F}));
    }
    const auto z = torch::tensor({{2.0F, 3.0F}});
    const auto out = head->mask_apply(z, 0, MaskMode::Soft);
    EXPECT_TRUE(torch::equal(out, torch::tensor({{2.0F, 0.0F}})));
    out.sum().backward();
    const auto s = torch::sigmoid(torch::tensor({1.0F, -1.0F}));
    const auto expected = torch::tensor({2.0F, 3.0F}) * s * (1 - s);
    EXPECT_TRUE(torch::allclose(head->mask_column(0).grad(), expected));
}

TEST(Mask, SparsityPenaltyIsSumOfSquaredSoftMask)
{
    ExplanationHead head(3, 0.5, 0.0);
    head->add_task("a", fixtures::tree_opts(1, 2));
    head->add_task("b", fixtures::tree_opts(1, 2));
    EXPECT_NEAR(head->mask_sparsity_penalty().item<double>(), 6 * 0.25, 1e-6);
    const std::vector<std::int64_t> only_b{1};
    EXPECT_NEAR(head->mask_sparsity_penalty(&only_b).item<double>(), 3 * 0.25, 1e-6);
}

TEST(Head, TaskBookkeeping)
{
    ExplanationHead head(6);
    EXPECT_EQ(head->add_task("x", fixtures::tree_opts(2, 2)), 0);
    EXPECT_EQ(head->add_task("y", fixtures::tree_opts(3, 5)), 1);
    EXPECT_THROW(head->add_task("x", fixtures::tree_opts(2, 2)), ConfigError);
    EXPECT_EQ(head->task_index("y"), 1);
    EXPECT_THROW(head->task_index("z"), ConfigError);
    EXPECT_EQ(head->task_parameters(1).size(), 4U);
    const auto outs = head->forward(torch::randn({7, 6}), MaskMode::Soft);
    ASSERT_EQ(outs.size(), 2U);
    EXPECT_EQ(outs[1].sizes(), (std::vector<std::int64_t>{7, 5}));

    const auto copy = ExplanationHeadImpl::from_json(head->to_json());
    EXPECT_EQ(copy->to_json(), head->to_json());
}

TEST(Rules, ExtractionListsSelectedConceptsAndPrunes)
{
    SoftDecisionTree tree(3, fixtures::tree_opts(2, 2));
    {
        torch::NoGradGuard guard;
        tree->weights.copy_(torch::tensor({{2.0F, 7.0F, 0.0F}, {0.0F, 1.0F, 0.0F}, {-1.0F, 0.0F, 0.5F}}));
        tree->bias.copy_(torch::tensor({0.25F, -1.0F, 0.0F}));
    }
    const auto mask = torch::tensor({1.0F, 0.0F, 1.0F});
    const auto rules = extract_rules(tree, mask, torch::tensor({1.0, 0.005, 0.995}));
    EXPECT_EQ(rules.concepts, (std::vector<std::int64_t>{0, 2}));
    ASSERT_EQ(rules.rules.size(), 2U);
    EXPECT_EQ(rules.pruned_nodes, (std::vector<std::int64_t>{1}));
    ASSERT_EQ(rules.rules[0].terms.size(), 1U);
    EXPECT_EQ(rules.rules[0].terms[0].concept_index, 0);
    EXPECT_EQ(rules.rules[1].terms.size(), 2U);
    EXPECT_EQ(rules.leaf_distributions.size(), 4U);

    const auto text = rules.to_text({"stroke", "slant", "width"});
    EXPECT_NE(text.find("concepts: stroke width"), std::string::npos);
    EXPECT_EQ(text.find("slant"), std::string::npos);
    EXPECT_EQ(rules.to_json()["pruned_nodes"], nlohmann::json::array({1}));

    const auto unpruned = extract_rules(tree, torch::tensor({0.0F, 1.0F, 0.0F}));
    EXPECT_EQ(unpruned.rules.size(), 3U);
    EXPECT_TRUE(unpruned.rules[2].constant);
    EXPECT_FALSE(unpruned.rules[2].constant_right);
}

TEST(Rules, ReachMassAndNodeCount)
{
    SoftDecisionTree tree(1, fixtures::tree_opts(2, 2));
    {
        torch::NoGradGuard guard;
        tree->weights.fill_(50.0F);
        tree->bias.zero_();
    }
    // Every sample is far right of the root split, so node 1 is never reached.
    const auto mass = reach_mass(tree, torch::full({10, 1}, 3.0F));
    EXPECT_NEAR(mass[0].item<float>(), 1.0F, 1e-6F);
    EXPECT_LT(mass[1].item<float>(), 0.01F);
    EXPECT_EQ(pruned_node_count(mass), 2);
}
