#include "cbsm/blackbox.hpp"
#include "cbsm/error.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace cbsm;

namespace {

FactorLabel digits(int a, int b, int c)
{
    return FactorLabel{{a, b, c}};
}

} // namespace

TEST(Tasks, RegistryLabelsMatchDefinitions)
{
    const auto& d1 = find_task("d1-value");
    const auto& parity = find_task("parity");
    const auto& sum = find_task("digit-sum");
    const auto& eq = find_task("d2-equals-d3");
    EXPECT_EQ(d1.labeler(digits(5, 0, 1)), 2);
    EXPECT_EQ(d1.num_classes, 3);
    EXPECT_EQ(parity.labeler(digits(0, 0, 1)), 1);
    EXPECT_EQ(parity.labeler(digits(1, 5, 0)), 0);
    EXPECT_EQ(eq.labeler(digits(0, 5, 5)), 1);
    EXPECT_EQ(eq.labeler(digits(5, 0, 5)), 0);
    EXPECT_EQ(sum.num_classes, static_cast<std::int64_t>(sum.class_names.size()));
    EXPECT_EQ(sum.class_names.at(static_cast<std::size_t>(sum.labeler(digits(5, 5, 1)))), "11");
    EXPECT_EQ(sum.class_names.at(static_cast<std::size_t>(sum.labeler(digits(0, 0, 0)))), "0");
    EXPECT_THROW(find_task("no-such-task"), ConfigError);

    for (const auto& name : generalization_task_names()) {
        EXPECT_TRUE(find_task(name).held_out) << name;
    }
    for (const auto& name : training_task_names()) {
        EXPECT_FALSE(find_task(name).held_out) << name;
    }
}

TEST(Tasks, LabelTensorFollowsLabeler)
{
    const std::vector<FactorLabel> labels{digits(0, 1, 5), digits(5, 5, 5), digits(1, 0, 0)};
    const auto y = task_labels(find_task("d1-value"), labels);
    EXPECT_TRUE(torch::equal(y, torch::tensor({0, 2, 1}, torch::kInt64)));
}

TEST(OracleBlackBox, ReturnsOneHotOfTheTrueClass)
{
    const auto data = synthesize_triple(fixtures::strip_spec(), fixtures::fake_pool(), 40);
    const auto& task = find_task("parity");
    const auto oracle = oracle_blackbox(task, data);
    const auto p = oracle->predict_proba(data.images);
    ASSERT_EQ(p.size(0), 40);
    EXPECT_TRUE(torch::equal(p.sum(1), torch::ones({40})));
    EXPECT_TRUE(torch::equal(p.argmax(1), task_labels(task, data.labels)));
    EXPECT_EQ(blackbox_accuracy(*oracle, data), 1.0);

    ImageBatch stranger = data.images.select(torch::tensor({0}, torch::kInt64));
    stranger.ids = torch::tensor({999999}, torch::kInt64);
    EXPECT_THROW(oracle->predict_proba(stranger), DataError);
}

TEST(NetworkBlackBox, LearnsAnEasyTaskAndRoundTrips)
{
    DatasetSpec spec;
    spec.seed = 2;
    const auto s = split(synthesize_triple(spec, fixtures::fake_pool(), 1500), spec);
    BlackBoxTrainConfig cfg;
    cfg.epochs = 3;
    cfg.min_accuracy = 0.9;
    cfg.seed = 5;
    BlackBoxReport report;
    const auto net = train_blackbox(find_task("d1-value"), s.train, s.val, cfg, &report);
    EXPECT_GE(report.val_accuracy, 0.9);
    EXPECT_EQ(report.epoch_loss.size(), 3U);

    const auto p = predict_in_chunks(*net, s.test.images, 64);
    EXPECT_LT((p.sum(1) - 1.0).abs().max().item<float>(), 1e-5F);

    fixtures::TempDir dir("bb");
    save_blackbox(*net, {{"val_accuracy", report.val_accuracy}}, cfg.seed, dir.path());
    const auto back = load_blackbox(dir.path());
    EXPECT_TRUE(torch::equal(back->predict_proba(s.test.images), net->predict_proba(s.test.images)));
    EXPECT_EQ(back->task().name, "d1-value");
}

TEST(NetworkBlackBox, BelowMinimumAccuracyFails)
{
    DatasetSpec spec;
    const auto s = split(synthesize_triple(spec, fixtures::fake_pool(), 300), spec);
    BlackBoxTrainConfig cfg;
    cfg.epochs = 1;
    cfg.min_accuracy = 1.01;
    EXPECT_THROW(train_blackbox(find_task("d1-value"), s.train, s.val, cfg), TrainingError);
}

TEST(NetworkBlackBox, MissingCheckpointIsDependencyError)
{
    fixtures::TempDir dir("bb");
    EXPECT_THROW(load_blackbox(dir.path()), DependencyError);
}
