#pragma once

// Classification tasks over TripleMNIST factors and the opaque classifiers
// ("black boxes") that the surrogate explains. The surrogate only ever calls
// BlackBox::predict_proba.

#include "cbsm/data.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace cbsm {

struct TaskSpec {
    std::string name;
    std::int64_t num_classes{2};
    std::function<std::int64_t(const FactorLabel&)> labeler;
    std::vector<std::string> class_names;
    // Default soft-tree depth used when explaining this task.
    int tree_depth{2};
    // Held out from joint training and reserved for compositional generalization.
    bool held_out{false};
};

// d1-value, parity, d2-equals-d3, digit-sum, then the held-out d2-value and
// count-fives.
const std::vector<TaskSpec>& builtin_tasks();
const TaskSpec& find_task(const std::string& name);
std::vector<std::string> training_task_names();
std::vector<std::string> generalization_task_names();

// Class index per label, int64 [n].
torch::Tensor task_labels(const TaskSpec& task, const std::vector<FactorLabel>& labels);

enum class BlackBoxKind { TrainedNetwork, Oracle };

class BlackBox {
public:
    explicit BlackBox(TaskSpec task) : task_(std::move(task)) {}
    virtual ~BlackBox() = default;

    const TaskSpec& task() const { return task_; }
    virtual BlackBoxKind kind() const = 0;
    // Class distribution per image, float32 [n, num_classes], rows sum to 1.
    virtual torch::Tensor predict_proba(const ImageBatch& images) const = 0;

private:
    TaskSpec task_;
};

using BlackBoxSet = std::vector<std::shared_ptr<const BlackBox>>;

// One-hot answers looked up from ground-truth factors by sample id.
class OracleBlackBox final : public BlackBox {
public:
    OracleBlackBox(TaskSpec task, const LabeledSet& known);

    BlackBoxKind kind() const override { return BlackBoxKind::Oracle; }
    torch::Tensor predict_proba(const ImageBatch& images) const override;

private:
    std::map<std::int64_t, std::int64_t> class_by_id_;
};

std::shared_ptr<OracleBlackBox> oracle_blackbox(const TaskSpec& task, const LabeledSet& known);

// Small CNN: two strided conv blocks and an MLP head.
class ClassifierNetImpl : public torch::nn::Module {
public:
    ClassifierNetImpl(std::int64_t height, std::int64_t width, std::int64_t num_classes);
    torch::Tensor forward(torch::Tensor x); // [n,H,W] -> logits [n,C]

private:
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::Linear fc1_{nullptr};
    torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(ClassifierNet);

class NetworkBlackBox final : public BlackBox {
public:
    NetworkBlackBox(TaskSpec task, std::int64_t height, std::int64_t width);

    BlackBoxKind kind() const override { return BlackBoxKind::TrainedNetwork; }
    torch::Tensor predict_proba(const ImageBatch& images) const override;

    ClassifierNet& net() { return net_; }
    std::int64_t height() const { return height_; }
    std::int64_t width() const { return width_; }

private:
    std::int64_t height_;
    std::int64_t width_;
    ClassifierNet net_;
};

struct BlackBoxTrainConfig {
    int epochs{4};
    std::int64_t batch_size{128};
    double learning_rate{1e-3};
    std::uint64_t seed{0};
    // Below this validation accuracy training is reported as failed.
    double min_accuracy{0.90};

    nlohmann::json to_json() const;
    static BlackBoxTrainConfig from_json(const nlohmann::json& j);
};

struct BlackBoxReport {
    double val_accuracy{0.0};
    std::vector<double> epoch_loss;
};

// Throws TrainingError when validation accuracy ends below cfg.min_accuracy.
std::shared_ptr<NetworkBlackBox> train_blackbox(const TaskSpec& task, const LabeledSet& train,
                                                const LabeledSet& val, const BlackBoxTrainConfig& cfg,
                                                BlackBoxReport* report = nullptr);

// Fraction of rows where argmax(predict_proba) equals the task label.
double blackbox_accuracy(const BlackBox& model, const LabeledSet& data);

// Directory with manifest.json and params.cbt.
void save_blackbox(const NetworkBlackBox& model, const nlohmann::json& metrics, std::uint64_t seed,
                   const std::filesystem::path& dir);
std::shared_ptr<NetworkBlackBox> load_blackbox(const std::filesystem::path& dir);

// predict_proba over a large set in chunks, without autograd.
torch::Tensor predict_in_chunks(const BlackBox& model, const ImageBatch& images, std::int64_t chunk = 512);

} // namespace cbsm
