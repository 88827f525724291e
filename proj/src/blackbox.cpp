#include "cbsm/blackbox.hpp"

#include "cbsm/error.hpp"
#include "cbsm/tensor_io.hpp"

#include <algorithm>
#include <fstream>

namespace cbsm {

namespace fs = std::filesystem;

namespace {

std::int64_t index_in(const std::vector<int>& values, int v)
{
    const auto it = std::find(values.begin(), values.end(), v);
    if (it == values.end()) {
        throw ConfigError("factor value " + std::to_string(v) + " outside the task's domain");
    }
    return it - values.begin();
}

std::vector<TaskSpec> make_builtin_tasks()
{
    // Digit sums over {0,1,5}^3 take exactly these ten values.
    static const std::vector<int> kSums{0, 1, 2, 3, 5, 6, 7, 10, 11, 15};
    static const std::vector<int> kDigits{0, 1, 5};

    std::vector<TaskSpec> tasks;
    tasks.push_back({"d1-value", 3, [](const FactorLabel& f) { return index_in(kDigits, f.d1()); },
                     {"0", "1", "5"}, 2, false});
    tasks.push_back({"parity", 2, [](const FactorLabel& f) { return std::int64_t{f.d3() % 2}; },
                     {"even", "odd"}, 2, false});
    tasks.push_back({"d2-equals-d3", 2, [](const FactorLabel& f) { return std::int64_t{f.d2() == f.d3()}; },
                     {"false", "true"}, 4, false});
    tasks.push_back({"digit-sum", 10,
                     [](const FactorLabel& f) { return index_in(kSums, f.d1() + f.d2() + f.d3()); },
                     {"0", "1", "2", "3", "5", "6", "7", "10", "11", "15"}, 5, false});
    tasks.push_back({"d2-value", 3, [](const FactorLabel& f) { return index_in(kDigits, f.d2()); },
                     {"0", "1", "5"}, 2, true});
    tasks.push_back({"count-fives", 4,
                     [](const FactorLabel& f) {
                         return static_cast<std::int64_t>(std::count(f.digits.begin(), f.digits.end(), 5));
                     },
                     {"0", "1", "2", "3"}, 4, true});
    return tasks;
}

} // namespace

const std::vector<TaskSpec>& builtin_tasks()
{
    static const std::vector<TaskSpec> tasks = make_builtin_tasks();
    return tasks;
}

const TaskSpec& find_task(const std::string& name)
{
    for (const auto& t : builtin_tasks()) {
        if (t.name == name) {
            return t;
        }
    }
    throw ConfigError("unknown task '" + name + "'");
}

std::vector<std::string> training_task_names()
{
    std::vector<std::string> names;
    for (const auto& t : builtin_tasks()) {
        if (!t.held_out) {
            names.push_back(t.name);
        }
    }
    return names;
}

std::vector<std::string> generalization_task_names()
{
    std::vector<std::string> names;
    for (const auto& t : builtin_tasks()) {
        if (t.held_out) {
            names.push_back(t.name);
        }
    }
    return names;
}

torch::Tensor task_labels(const TaskSpec& task, const std::vector<FactorLabel>& labels)
{
    auto out = torch::empty({static_cast<std::int64_t>(labels.size())}, torch::kInt64);
    auto a = out.accessor<std::int64_t, 1>();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        a[static_cast<std::int64_t>(i)] = task.labeler(labels[i]);
    }
    return out;
}

OracleBlackBox::OracleBlackBox(TaskSpec task, const LabeledSet& known) : BlackBox(std::move(task))
{
    auto ids = known.images.ids.accessor<std::int64_t, 1>();
    for (std::int64_t i = 0; i < known.size(); ++i) {
        class_by_id_[ids[i]] = this->task().labeler(known.labels[static_cast<std::size_t>(i)]);
    }
}

torch::Tensor OracleBlackBox::predict_proba(const ImageBatch& images) const
{
    const auto n = images.size();
    auto out = torch::zeros({n, task().num_classes}, torch::kFloat32);
    auto ids = images.ids.accessor<std::int64_t, 1>();
    for (std::int64_t i = 0; i < n; ++i) {
        const auto it = class_by_id_.find(ids[i]);
        if (it == class_by_id_.end()) {
            throw DataError("oracle black box: unknown sample id " + std::to_string(ids[i]));
        }
        out[i][it->second] = 1.0f;
    }
    return out;
}

std::shared_ptr<OracleBlackBox> oracle_blackbox(const TaskSpec& task, const LabeledSet& known)
{
    return std::make_shared<OracleBlackBox>(task, known);
}

ClassifierNetImpl::ClassifierNetImpl(std::int64_t height, std::int64_t width, std::int64_t num_classes)
{
    using namespace torch::nn;
    // 84 -> 21 -> 7 for the default canvas; other sizes must divide by 12.
    if (height % 12 != 0 || width % 12 != 0) {
        throw ConfigError("classifier: image size must be divisible by 12");
    }
    conv1_ = register_module("conv1", Conv2d(Conv2dOptions(1, 16, 4).stride(4)));
    conv2_ = register_module("conv2", Conv2d(Conv2dOptions(16, 32, 3).stride(3)));
    fc1_ = register_module("fc1", Linear(32 * (height / 12) * (width / 12), 128));
    fc2_ = register_module("fc2", Linear(128, num_classes));
}

torch::Tensor ClassifierNetImpl::forward(torch::Tensor x)
{
    x = torch::relu(conv1_(x.unsqueeze(1)));
    x = torch::relu(conv2_(x));
    x = torch::relu(fc1_(x.flatten(1)));
    return fc2_(x);
}

NetworkBlackBox::NetworkBlackBox(TaskSpec task, std::int64_t height, std::int64_t width)
    : BlackBox(std::move(task)), height_(height), width_(width),
      net_(height, width, this->task().num_classes)
{
}

torch::Tensor NetworkBlackBox::predict_proba(const ImageBatch& images) const
{
    torch::NoGradGuard no_grad;
    auto& net = const_cast<ClassifierNet&>(net_);
    return torch::softmax(net->forward(images.pixels), 1);
}

nlohmann::json BlackBoxTrainConfig::to_json() const
{
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"seed", seed},
            {"min_accuracy", min_accuracy}};
}

BlackBoxTrainConfig BlackBoxTrainConfig::from_json(const nlohmann::json& j)
{
    BlackBoxTrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.min_accuracy = j.value("min_accuracy", c.min_accuracy);
    return c;
}

double blackbox_accuracy(const BlackBox& model, const LabeledSet& data)
{
    if (data.size() == 0) {
        throw DataError("accuracy on an empty set");
    }
    const auto probs = predict_in_chunks(model, data.images);
    const auto truth = task_labels(model.task(), data.labels);
    return (probs.argmax(1) == truth).to(torch::kFloat64).mean().item<double>();
}

std::shared_ptr<NetworkBlackBox> train_blackbox(const TaskSpec& task, const LabeledSet& train,
                                                const LabeledSet& val, const BlackBoxTrainConfig& cfg,
                                                BlackBoxReport* report)
{
    if (train.size() == 0 || val.size() == 0) {
        throw DataError("train_blackbox: empty training or validation set");
    }
    torch::manual_seed(cfg.seed);
    auto model = std::make_shared<NetworkBlackBox>(task, train.images.pixels.size(1), train.images.pixels.size(2));
    auto& net = model->net();
    torch::optim::Adam optimizer(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
    const auto targets = task_labels(task, train.labels);
    std::mt19937_64 rng(cfg.seed);

    BlackBoxReport local;
    net->train();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double total = 0.0;
        for (const auto& idx : minibatch_indices(train.size(), cfg.batch_size, rng)) {
            const auto logits = net->forward(train.images.pixels.index_select(0, idx));
            auto loss = torch::nn::functional::cross_entropy(logits, targets.index_select(0, idx));
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            total += loss.item<double>() * static_cast<double>(idx.size(0));
        }
        local.epoch_loss.push_back(total / static_cast<double>(train.size()));
    }
    net->eval();
    local.val_accuracy = blackbox_accuracy(*model, val);
    if (report != nullptr) {
        *report = local;
    }
    if (local.val_accuracy < cfg.min_accuracy) {
        throw TrainingError("black box for '" + task.name + "' reached only " +
                            std::to_string(local.val_accuracy) + " validation accuracy after " +
                            std::to_string(cfg.epochs) + " epochs");
    }
    return model;
}

torch::Tensor predict_in_chunks(const BlackBox& model, const ImageBatch& images, std::int64_t chunk)
{
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> parts;
    for (std::int64_t start = 0; start < images.size(); start += chunk) {
        const auto len = std::min(chunk, images.size() - start);
        parts.push_back(model.predict_proba({images.pixels.narrow(0, start, len), images.ids.narrow(0, start, len)}));
    }
    if (parts.empty()) {
        return torch::zeros({0, model.task().num_classes});
    }
    return torch::cat(parts, 0);
}

void save_blackbox(const NetworkBlackBox& model, const nlohmann::json& metrics, std::uint64_t seed,
                   const fs::path& dir)
{
    fs::create_directories(dir);
    save_module(*const_cast<NetworkBlackBox&>(model).net(), dir / "params.cbt");
    const nlohmann::json manifest{{"format", "cbsm-blackbox"},
                                  {"format_version", 1},
                                  {"task", model.task().name},
                                  {"num_classes", model.task().num_classes},
                                  {"canvas", {model.height(), model.width()}},
                                  {"metrics", metrics},
                                  {"seed", seed},
                                  {"files", {{"params.cbt", sha256_file(dir / "params.cbt")}}}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

std::shared_ptr<NetworkBlackBox> load_blackbox(const fs::path& dir)
{
    std::ifstream in(dir / "manifest.json");
    if (!in) {
        throw DependencyError("missing black-box checkpoint " + (dir / "manifest.json").string());
    }
    const auto manifest = nlohmann::json::parse(in);
    const auto& task = find_task(manifest.at("task").get<std::string>());
    auto model = std::make_shared<NetworkBlackBox>(task, manifest.at("canvas").at(0).get<std::int64_t>(),
                                                   manifest.at("canvas").at(1).get<std::int64_t>());
    load_module(*model->net(), dir / "params.cbt");
    model->net()->eval();
    return model;
}

} // namespace cbsm
