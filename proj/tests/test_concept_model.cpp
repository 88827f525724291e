#include "cbsm/concept_model.hpp"
#include "cbsm/error.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace cbsm;

namespace {

ConceptPosterior gaussian(std::int64_t n, std::int64_t k, double sigma, bool duplicate_first)
{
    auto mu = torch::randn({n, k}, torch::kFloat64);
    if (duplicate_first) {
        mu.select(1, 1).copy_(mu.select(1, 0));
    }
    return {mu, torch::full({n, k}, 2.0 * std::log(sigma), torch::kFloat64)};
}

} // namespace

TEST(ConceptModel, ShapesFollowOptions)
{
    torch::manual_seed(0);
    ConceptModel model(ConceptModelOptions{});
    const auto post = model->encode(torch::rand({4, 84, 84}));
    EXPECT_EQ(post.mu.sizes(), (std::vector<std::int64_t>{4, 6}));
    EXPECT_EQ(post.log_var.sizes(), (std::vector<std::int64_t>{4, 6}));
    EXPECT_EQ(model->decode(post.mu).sizes(), (std::vector<std::int64_t>{4, 84, 84}));
    EXPECT_THROW(model->encode(torch::rand({4, 28, 28})), ConfigError);
    EXPECT_THROW(model->decode(torch::rand({4, 5})), ConfigError);
}

TEST(ConceptModel, RejectsIndivisibleImageSize)
{
    auto o = fixtures::tiny_model();
    o.height = 10;
    EXPECT_THROW(ConceptModel{o}, ConfigError);
}

TEST(ConceptModel, KlMatchesMonteCarlo)
{
    torch::manual_seed(1);
    for (int trial = 0; trial < 4; ++trial) {
        const ConceptPosterior post{torch::randn({1, 4}, torch::kFloat64),
                                    torch::randn({1, 4}, torch::kFloat64) * 0.8};
        const double closed = kl_to_standard_normal(post).item<double>();

        const std::int64_t draws = 100000;
        const auto eps = torch::randn({draws, 4}, torch::kFloat64);
        const auto z = sample({post.mu.expand({draws, 4}), post.log_var.expand({draws, 4})}, eps);
        const auto log_q = (-0.5 * (post.log_var + eps.pow(2))).sum(1);
        const auto log_p = (-0.5 * z.pow(2)).sum(1);
        const double mc = (log_q - log_p).mean().item<double>();
        EXPECT_NEAR(mc, closed, 0.02 * closed) << "trial " << trial;
    }
}

TEST(ConceptModel, KlIsZeroAtThePrior)
{
    const ConceptPosterior post{torch::zeros({3, 6}), torch::zeros({3, 6})};
    EXPECT_TRUE(torch::equal(kl_to_standard_normal(post), torch::zeros({3})));
}

TEST(ConceptModel, BernoulliLikelihoodMatchesDirectFormula)
{
    torch::manual_seed(2);
    const auto logits = torch::randn({2, 8, 8}, torch::kFloat64) * 3.0;
    const auto x = torch::rand({2, 8, 8}, torch::kFloat64);
    const auto p = torch::sigmoid(logits);
    const auto direct = (x * p.log() + (1 - x) * (1 - p).log()).sum({1, 2});
    EXPECT_TRUE(torch::allclose(bernoulli_log_likelihood(logits, x), direct, 1e-10, 1e-10));
}

TEST(ConceptModel, ElboTermsUseTheGivenNoise)
{
    torch::manual_seed(3);
    ConceptModel model(fixtures::tiny_model());
    const auto x = torch::rand({5, 8, 8});
    const auto noise = torch::randn({5, 3});
    const auto a = elbo_terms(model, x, noise);
    const auto b = elbo_terms(model, x, noise);
    EXPECT_TRUE(torch::equal(a.recon_log_lik, b.recon_log_lik));
    EXPECT_TRUE(torch::equal(a.z, a.posterior.mu + noise * torch::exp(0.5 * a.posterior.log_var)));
    EXPECT_TRUE((a.kl >= 0).all().item<bool>());
    EXPECT_TRUE((a.recon_log_lik <= 0).all().item<bool>());
}

TEST(TotalCorrelation, NearZeroForIndependentCoordinates)
{
    for (int seed = 0; seed < 5; ++seed) {
        torch::manual_seed(seed);
        const auto post = gaussian(512, 2, 0.5, false);
        const auto z = sample(post, torch::randn({512, 2}, torch::kFloat64));
        EXPECT_LT(std::abs(tc_estimate(z, post).item<double>()), 0.05) << "seed " << seed;
    }
}

TEST(TotalCorrelation, LargeForDuplicatedCoordinate)
{
    for (int seed = 0; seed < 5; ++seed) {
        torch::manual_seed(seed);
        const auto post = gaussian(512, 2, 0.5, true);
        auto z = sample(post, torch::randn({512, 2}, torch::kFloat64));
        z.select(1, 1).copy_(z.select(1, 0));
        EXPECT_GT(tc_estimate(z, post).item<double>(), 0.5) << "seed " << seed;
    }
}

TEST(TotalCorrelation, SingleConceptAndTinyBatch)
{
    const auto post = gaussian(16, 1, 1.0, false);
    EXPECT_EQ(tc_estimate(post.mu, post).item<double>(), 0.0);
    const auto two = gaussian(1, 2, 1.0, false);
    EXPECT_THROW(tc_estimate(two.mu, two), ConfigError);
}

TEST(Reparameterization, GradientMatchesFiniteDifferences)
{
    torch::manual_seed(4);
    auto mu = torch::randn({3, 4}, torch::kFloat64).requires_grad_(true);
    auto lv = torch::randn({3, 4}, torch::kFloat64).requires_grad_(true);
    const auto eps = torch::randn({3, 4}, torch::kFloat64);
    auto f = [&](const torch::Tensor& m, const torch::Tensor& l) {
        return (torch::sin(sample({m, l}, eps)) * torch::arange(12, torch::kFloat64).reshape({3, 4})).sum();
    };
    f(mu, lv).backward();
    const double h = 1e-6;
    torch::NoGradGuard guard;
    for (auto* p : {&mu, &lv}) {
        const auto analytic = p->grad().clone();
        for (std::int64_t i = 0; i < p->numel(); ++i) {
            auto flat = p->view({-1});
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double up = f(mu, lv).item<double>();
            flat[i] = orig - h;
            const double down = f(mu, lv).item<double>();
            flat[i] = orig;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic.view({-1})[i].item<double>();
            EXPECT_LE(std::abs(a - numeric), 1e-4 * std::max({std::abs(a), std::abs(numeric), 1e-3}));
        }
    }
}
