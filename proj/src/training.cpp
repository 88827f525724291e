#include "cbsm/training.hpp"

#include "cbsm/error.hpp"
#include "cbsm/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>

namespace cbsm {

void LossWeights::validate() const
{
    for (const double v : {lambda1, lambda2, lambda3, lambda4}) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ConfigError("loss weights must be finite and nonnegative");
        }
    }
}

nlohmann::json LossWeights::to_json() const
{
    return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"lambda3", lambda3}, {"lambda4", lambda4}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j)
{
    LossWeights w;
    w.lambda1 = j.value("lambda1", w.lambda1);
    w.lambda2 = j.value("lambda2", w.lambda2);
    w.lambda3 = j.value("lambda3", w.lambda3);
    w.lambda4 = j.value("lambda4", w.lambda4);
    w.validate();
    return w;
}

std::vector<std::pair<std::string, double>> LossBreakdown::values() const
{
    auto v = [](const torch::Tensor& t) { return t.item<double>(); };
    return {{"recon_log_lik", v(recon_log_lik)},     {"kl", v(kl)},
            {"identifiability", v(identifiability)}, {"fidelity", v(fidelity)},
            {"tc", v(tc)},                           {"mask_penalty", v(mask_penalty)},
            {"tree_complexity", v(tree_complexity)}, {"explainability", v(explainability)},
            {"total", v(total)}};
}

nlohmann::json LossBreakdown::to_json() const
{
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, value] : values()) {
        j[name] = value;
    }
    return j;
}

torch::Tensor distribution_kl(const torch::Tensor& target, const torch::Tensor& predicted)
{
    const auto log_t = torch::log(target.clamp_min(1e-12));
    const auto log_p = torch::log(predicted.clamp_min(1e-12));
    return (target * (log_t - log_p)).sum(1).mean();
}

LossBreakdown composite_loss(ConceptModel& model, ExplanationHead& head, const torch::Tensor& x,
                             const std::vector<torch::Tensor>& targets, const LossWeights& weights,
                             const torch::Tensor& noise, MaskMode mode)
{
    const auto num_tasks = head->num_tasks();
    if (static_cast<std::int64_t>(targets.size()) != num_tasks) {
        throw ConfigError("composite loss: expected black-box targets for " + std::to_string(num_tasks) +
                          " tasks, got " + std::to_string(targets.size()));
    }
    LossBreakdown lb;
    const auto elbo = elbo_terms(model, x, noise);
    lb.recon_log_lik = elbo.recon_log_lik.mean();
    lb.kl = elbo.kl.mean();
    lb.identifiability = -lb.recon_log_lik + lb.kl;

    lb.fidelity = torch::zeros({}, x.options());
    lb.tree_complexity = torch::zeros({}, x.options());
    for (std::int64_t k = 0; k < num_tasks; ++k) {
        const auto& tree = head->tree(k);
        const auto routing = tree->route(head->mask_apply(elbo.z, k, mode));
        const auto out = torch::matmul(routing.leaf_prob, tree->leaf_distributions());
        lb.fidelity = lb.fidelity + distribution_kl(targets[static_cast<std::size_t>(k)], out);
        lb.tree_complexity = lb.tree_complexity + tree->complexity(routing);
    }
    if (num_tasks > 0) {
        lb.fidelity = lb.fidelity / static_cast<double>(num_tasks);
    }
    // TC of a one-row batch is taken as zero.
    lb.tc = x.size(0) >= 2 ? tc_estimate(elbo.z, elbo.posterior) : torch::zeros({}, x.options());
    lb.mask_penalty = head->mask_sparsity_penalty();
    lb.explainability = lb.tc + weights.lambda3 * lb.mask_penalty + weights.lambda4 * lb.tree_complexity;
    lb.total = lb.identifiability + weights.lambda1 * lb.fidelity + weights.lambda2 * lb.explainability;
    return lb;
}

SurrogateData SurrogateData::select(const torch::Tensor& index) const
{
    SurrogateData out;
    out.images = images.select(index);
    for (const auto& t : targets) {
        out.targets.push_back(t.index_select(0, index));
    }
    return out;
}

std::vector<torch::Tensor> blackbox_targets(const BlackBoxSet& blackboxes, const std::vector<std::string>& task_names,
                                            const ImageBatch& images)
{
    std::vector<torch::Tensor> out;
    for (const auto& name : task_names) {
        const auto it = std::find_if(blackboxes.begin(), blackboxes.end(),
                                     [&](const auto& bb) { return bb && bb->task().name == name; });
        if (it == blackboxes.end()) {
            throw ConfigError("no black box for task '" + name + "'");
        }
        out.push_back(predict_in_chunks(**it, images));
    }
    return out;
}

SurrogateData make_surrogate_data(const BlackBoxSet& blackboxes, const std::vector<std::string>& task_names,
                                  const ImageBatch& images)
{
    return {images, blackbox_targets(blackboxes, task_names, images)};
}

torch::Tensor encode_means(ConceptModel& model, const torch::Tensor& pixels, std::int64_t chunk)
{
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> parts;
    for (std::int64_t start = 0; start < pixels.size(0); start += chunk) {
        const auto len = std::min(chunk, pixels.size(0) - start);
        parts.push_back(model->encode(pixels.narrow(0, start, len)).mu);
    }
    if (parts.empty()) {
        return torch::zeros({0, model->options().num_concepts});
    }
    return torch::cat(parts, 0);
}

std::vector<double> agreement_accuracy(ConceptModel& model, const ExplanationHead& head, const SurrogateData& data)
{
    if (data.size() == 0) {
        throw DataError("agreement accuracy: empty evaluation set");
    }
    torch::NoGradGuard no_grad;
    const auto mu = encode_means(model, data.images.pixels);
    const auto outs = head->forward(mu, MaskMode::Hard);
    std::vector<double> acc;
    for (std::size_t k = 0; k < outs.size(); ++k) {
        const auto match = outs[k].argmax(1).eq(data.targets.at(k).argmax(1));
        acc.push_back(match.to(torch::kFloat64).mean().item<double>());
    }
    return acc;
}

nlohmann::json OptimizerSettings::to_json() const
{
    return {{"batch_size", batch_size}, {"lr_model", lr_model}, {"lr_tree", lr_tree}, {"lr_mask", lr_mask}};
}

OptimizerSettings OptimizerSettings::from_json(const nlohmann::json& j)
{
    OptimizerSettings o;
    o.batch_size = j.value("batch_size", o.batch_size);
    o.lr_model = j.value("lr_model", o.lr_model);
    o.lr_tree = j.value("lr_tree", o.lr_tree);
    o.lr_mask = j.value("lr_mask", o.lr_mask);
    if (o.batch_size < 2) {
        throw ConfigError("batch_size must be at least 2");
    }
    return o;
}

nlohmann::json TrainConfig::to_json() const
{
    return {{"epochs", epochs},
            {"sparsity_warmup_epochs", sparsity_warmup_epochs},
            {"straight_through", straight_through},
            {"optimizer", optimizer.to_json()},
            {"weights", weights.to_json()},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j)
{
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.sparsity_warmup_epochs = j.value("sparsity_warmup_epochs", c.sparsity_warmup_epochs);
    c.straight_through = j.value("straight_through", c.straight_through);
    if (j.contains("optimizer")) {
        c.optimizer = OptimizerSettings::from_json(j.at("optimizer"));
    }
    if (j.contains("weights")) {
        c.weights = LossWeights::from_json(j.at("weights"));
    }
    c.seed = j.value("seed", c.seed);
    return c;
}

namespace {

struct ParamGroups {
    std::vector<torch::Tensor> model;
    std::vector<torch::Tensor> trees;
    std::vector<torch::Tensor> masks;
};

ParamGroups head_groups(ExplanationHead& head, const std::vector<std::int64_t>& tasks)
{
    ParamGroups g;
    for (const auto k : tasks) {
        g.masks.push_back(head->mask_column(k));
        for (const auto& p : head->tree(k)->parameters()) {
            g.trees.push_back(p);
        }
    }
    return g;
}

std::vector<std::int64_t> all_tasks(const ExplanationHead& head)
{
    std::vector<std::int64_t> ks(static_cast<std::size_t>(head->num_tasks()));
    for (std::size_t k = 0; k < ks.size(); ++k) {
        ks[k] = static_cast<std::int64_t>(k);
    }
    return ks;
}

std::unique_ptr<torch::optim::Adam> make_optimizer(const ParamGroups& g, const OptimizerSettings& s)
{
    std::vector<torch::optim::OptimizerParamGroup> groups;
    auto add = [&](const std::vector<torch::Tensor>& params, double lr) {
        if (!params.empty()) {
            groups.emplace_back(params, std::make_unique<torch::optim::AdamOptions>(lr));
        }
    };
    add(g.model, s.lr_model);
    add(g.trees, s.lr_tree);
    add(g.masks, s.lr_mask);
    return std::make_unique<torch::optim::Adam>(std::move(groups), torch::optim::AdamOptions(s.lr_model));
}

std::unique_ptr<torch::optim::Adam> full_optimizer(ConceptModel& model, ExplanationHead& head,
                                                   const OptimizerSettings& s)
{
    auto g = head_groups(head, all_tasks(head));
    g.model = model->parameters();
    return make_optimizer(g, s);
}

void check_finite(const std::vector<std::pair<std::string, double>>& values, const std::string& where)
{
    for (const auto& [name, value] : values) {
        if (!std::isfinite(value)) {
            throw NumericalError("non-finite loss term '" + name + "' " + where);
        }
    }
}

double ramp(int epoch, int warmup)
{
    return warmup > 0 ? std::min(1.0, static_cast<double>(epoch) / warmup) : 1.0;
}

class RunningMeans {
public:
    void add(const std::vector<std::pair<std::string, double>>& values, std::int64_t rows)
    {
        for (const auto& [name, value] : values) {
            auto& slot = sums_[name];
            slot += value * static_cast<double>(rows);
        }
        rows_ += rows;
    }

    nlohmann::json to_json() const
    {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [name, sum] : sums_) {
            j[name] = rows_ > 0 ? sum / static_cast<double>(rows_) : 0.0;
        }
        return j;
    }

private:
    std::map<std::string, double> sums_;
    std::int64_t rows_{0};
};

nlohmann::json head_summary(ConceptModel& model, const ExplanationHead& head, const SurrogateData* eval_data,
                            const std::vector<std::int64_t>& tasks)
{
    nlohmann::json selected = nlohmann::json::object();
    const auto hard = head->hard_mask();
    for (const auto k : tasks) {
        selected[head->tasks()[static_cast<std::size_t>(k)].name] = hard.select(1, k).sum().item<std::int64_t>();
    }
    nlohmann::json j{{"mask_selected", selected}};
    if (eval_data != nullptr && eval_data->size() > 0) {
        const auto acc = agreement_accuracy(model, head, *eval_data);
        nlohmann::json agreement = nlohmann::json::object();
        for (const auto k : tasks) {
            agreement[head->tasks()[static_cast<std::size_t>(k)].name] = acc.at(static_cast<std::size_t>(k));
        }
        j["agreement"] = agreement;
    }
    return j;
}

void check_targets(const ExplanationHead& head, const SurrogateData& data, std::size_t expected)
{
    if (data.targets.size() != expected) {
        throw ConfigError("expected black-box targets for " + std::to_string(expected) + " tasks, got " +
                          std::to_string(data.targets.size()));
    }
    for (const auto& t : data.targets) {
        if (t.size(0) != data.size()) {
            throw ConfigError("black-box targets do not match the number of images");
        }
    }
    (void)head;
}

nlohmann::json head_summary_subset(const ExplanationHead& head, const std::vector<std::int64_t>& tasks,
                                   const HeadTrainingSet* eval_data)
{
    nlohmann::json selected = nlohmann::json::object();
    const auto hard = head->hard_mask();
    for (const auto k : tasks) {
        selected[head->tasks()[static_cast<std::size_t>(k)].name] = hard.select(1, k).sum().item<std::int64_t>();
    }
    nlohmann::json j{{"mask_selected", selected}};
    if (eval_data != nullptr && eval_data->size() > 0) {
        const auto acc = head_agreement(head, tasks, *eval_data);
        nlohmann::json agreement = nlohmann::json::object();
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            agreement[head->tasks()[static_cast<std::size_t>(tasks[i])].name] = acc[i];
        }
        j["agreement"] = agreement;
    }
    return j;
}

torch::Tensor standard_noise(std::int64_t rows, std::int64_t cols)
{
    return torch::randn({rows, cols});
}

} // namespace

std::vector<nlohmann::json> train(ConceptModel& model, ExplanationHead& head, const SurrogateData& train_data,
                                  const SurrogateData* eval_data, const TrainConfig& cfg, const EpochLogger& logger)
{
    if (train_data.size() == 0) {
        throw DataError("training set is empty");
    }
    cfg.weights.validate();
    check_targets(head, train_data, static_cast<std::size_t>(head->num_tasks()));
    torch::manual_seed(cfg.seed);
    std::mt19937_64 rng(cfg.seed);
    head->set_straight_through(cfg.straight_through);
    auto optimizer = full_optimizer(model, head, cfg.optimizer);
    const auto kc = model->options().num_concepts;

    std::vector<nlohmann::json> log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto weights = cfg.weights;
        weights.lambda3 *= ramp(epoch, cfg.sparsity_warmup_epochs);
        RunningMeans means;
        std::int64_t step = 0;
        for (const auto& index : minibatch_indices(train_data.size(), cfg.optimizer.batch_size, rng)) {
            if (index.size(0) < 2) {
                continue;
            }
            const auto batch = train_data.select(index);
            const auto lb = composite_loss(model, head, batch.images.pixels, batch.targets, weights,
                                           standard_noise(index.size(0), kc));
            const auto values = lb.values();
            check_finite(values, "at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
            optimizer->zero_grad();
            lb.total.backward();
            optimizer->step();
            means.add(values, index.size(0));
            ++step;
        }
        nlohmann::json record{{"stage", "train"}, {"epoch", epoch}, {"lambda3", weights.lambda3},
                              {"loss", means.to_json()}};
        record.update(head_summary(model, head, eval_data, all_tasks(head)));
        if (logger) {
            logger(record);
        }
        log.push_back(std::move(record));
    }
    return log;
}

RelatedSplit related_split(const ExplanationHead& head, std::int64_t task)
{
    const auto column = head->hard_mask().select(1, task);
    RelatedSplit s;
    s.task = task;
    for (std::int64_t j = 0; j < column.size(0); ++j) {
        (column[j].item<float>() > 0.5f ? s.related : s.unrelated).push_back(j);
    }
    return s;
}

torch::Tensor combine(const torch::Tensor& z_related, const torch::Tensor& z_unrelated, const RelatedSplit& split)
{
    const auto nr = static_cast<std::int64_t>(split.related.size());
    const auto nu = static_cast<std::int64_t>(split.unrelated.size());
    if (z_related.dim() != 2 || z_unrelated.dim() != 2 || z_related.size(1) != nr || z_unrelated.size(1) != nu ||
        z_related.size(0) != z_unrelated.size(0)) {
        throw ConfigError("combine: value widths must match the related/unrelated index sets");
    }
    auto z = torch::empty({z_related.size(0), nr + nu}, z_related.options());
    if (nr > 0) {
        z.index_copy_(1, torch::tensor(split.related, torch::kInt64), z_related);
    }
    if (nu > 0) {
        z.index_copy_(1, torch::tensor(split.unrelated, torch::kInt64), z_unrelated);
    }
    return z;
}

void RefineConfig::validate() const
{
    if (n_r < 1 || n_u < 1) {
        throw ConfigError("refine: n_r and n_u must be at least 1");
    }
    if (sampler == RelatedSampler::Grid && grid.empty()) {
        throw ConfigError("refine: grid sampler needs at least one grid value");
    }
    if (epochs < 0 || sweeps_per_epoch < 1 || real_per_generated < 0) {
        throw ConfigError("refine: epochs, sweeps_per_epoch and real_per_generated are out of range");
    }
    weights.validate();
}

nlohmann::json RefineConfig::to_json() const
{
    return {{"n_r", n_r},
            {"n_u", n_u},
            {"sampler", sampler == RelatedSampler::Prior ? "prior" : "grid"},
            {"grid", grid},
            {"epochs", epochs},
            {"sweeps_per_epoch", sweeps_per_epoch},
            {"real_per_generated", real_per_generated},
            {"straight_through", straight_through},
            {"optimizer", optimizer.to_json()},
            {"weights", weights.to_json()},
            {"seed", seed}};
}

RefineConfig RefineConfig::from_json(const nlohmann::json& j)
{
    RefineConfig c;
    c.n_r = j.value("n_r", c.n_r);
    c.n_u = j.value("n_u", c.n_u);
    const auto sampler = j.value("sampler", std::string("prior"));
    if (sampler == "prior") {
        c.sampler = RelatedSampler::Prior;
    } else if (sampler == "grid") {
        c.sampler = RelatedSampler::Grid;
    } else {
        throw ConfigError("refine: unknown sampler '" + sampler + "' (expected prior or grid)");
    }
    c.grid = j.value("grid", c.grid);
    c.epochs = j.value("epochs", c.epochs);
    c.sweeps_per_epoch = j.value("sweeps_per_epoch", c.sweeps_per_epoch);
    c.real_per_generated = j.value("real_per_generated", c.real_per_generated);
    c.straight_through = j.value("straight_through", c.straight_through);
    if (j.contains("optimizer")) {
        c.optimizer = OptimizerSettings::from_json(j.at("optimizer"));
    }
    if (j.contains("weights")) {
        c.weights = LossWeights::from_json(j.at("weights"));
    }
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

torch::Tensor generate_for_task(ConceptModel& model, const RelatedSplit& split, const RefineConfig& cfg,
                                std::int64_t sweep)
{
    torch::NoGradGuard no_grad;
    const auto nr = static_cast<std::int64_t>(split.related.size());
    const auto nu = static_cast<std::int64_t>(split.unrelated.size());
    torch::Tensor z_related;
    if (cfg.sampler == RelatedSampler::Prior) {
        z_related = torch::randn({cfg.n_r, nr});
    } else {
        // Draw i of the run is the i-th point of the grid in mixed-radix order.
        const auto g = static_cast<std::int64_t>(cfg.grid.size());
        z_related = torch::empty({cfg.n_r, nr});
        auto acc = z_related.accessor<float, 2>();
        for (std::int64_t i = 0; i < cfg.n_r; ++i) {
            std::int64_t code = sweep * cfg.n_r + i;
            for (std::int64_t j = 0; j < nr; ++j) {
                acc[i][j] = static_cast<float>(cfg.grid[static_cast<std::size_t>(code % g)]);
                code /= g;
            }
        }
    }
    z_related = z_related.repeat_interleave(cfg.n_u, 0);
    const auto z_unrelated = torch::randn({cfg.n_r * cfg.n_u, nu});
    return torch::sigmoid(model->decode(combine(z_related, z_unrelated, split)));
}

std::vector<nlohmann::json> refine(ConceptModel& model, ExplanationHead& head, const BlackBoxSet& blackboxes,
                                   const SurrogateData& real_data, const SurrogateData* eval_data,
                                   const RefineConfig& cfg, const EpochLogger& logger)
{
    cfg.validate();
    const auto num_tasks = static_cast<std::size_t>(head->num_tasks());
    if (cfg.real_per_generated > 0) {
        if (real_data.size() < 2) {
            throw DataError("refine: real training set is empty");
        }
        check_targets(head, real_data, num_tasks);
    }
    std::vector<std::string> names;
    for (const auto& t : head->tasks()) {
        names.push_back(t.name);
    }
    torch::manual_seed(cfg.seed);
    std::mt19937_64 rng(cfg.seed);
    head->set_straight_through(cfg.straight_through);
    auto optimizer = full_optimizer(model, head, cfg.optimizer);
    const auto kc = model->options().num_concepts;

    auto step_on = [&](const torch::Tensor& x, const std::vector<torch::Tensor>& targets, RunningMeans& means,
                       const std::string& where) {
        const auto lb = composite_loss(model, head, x, targets, cfg.weights, standard_noise(x.size(0), kc));
        const auto values = lb.values();
        check_finite(values, where);
        optimizer->zero_grad();
        lb.total.backward();
        optimizer->step();
        means.add(values, x.size(0));
    };

    std::vector<torch::Tensor> real_order;
    std::size_t real_next = 0;
    auto next_real = [&]() {
        while (true) {
            if (real_next >= real_order.size()) {
                real_order = minibatch_indices(real_data.size(), cfg.optimizer.batch_size, rng);
                real_next = 0;
            }
            const auto& index = real_order[real_next++];
            if (index.size(0) >= 2) {
                return real_data.select(index);
            }
        }
    };

    std::vector<nlohmann::json> log;
    nlohmann::json before{{"stage", "refine"}, {"epoch", -1}};
    before.update(head_summary(model, head, eval_data, all_tasks(head)));
    if (logger) {
        logger(before);
    }
    log.push_back(before);

    std::set<std::int64_t> warned;
    std::int64_t sweep = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        RunningMeans generated_means;
        RunningMeans real_means;
        std::int64_t generated_batches = 0;
        for (int s = 0; s < cfg.sweeps_per_epoch; ++s, ++sweep) {
            for (std::int64_t k = 0; k < static_cast<std::int64_t>(num_tasks); ++k) {
                const auto split = related_split(head, k);
                if (split.related.empty()) {
                    if (warned.insert(k).second) {
                        std::cerr << "warning: task '" << names[static_cast<std::size_t>(k)]
                                  << "' selects no concepts; skipping its generated batches\n";
                    }
                    continue;
                }
                const auto x = generate_for_task(model, split, cfg, sweep);
                ImageBatch generated{x, torch::full({x.size(0)}, -1, torch::kInt64)};
                const auto where = "at refine epoch " + std::to_string(epoch) + " sweep " + std::to_string(s);
                step_on(x, blackbox_targets(blackboxes, names, generated), generated_means, where);
                ++generated_batches;
                for (int r = 0; r < cfg.real_per_generated; ++r) {
                    const auto batch = next_real();
                    step_on(batch.images.pixels, batch.targets, real_means, where);
                }
            }
        }
        nlohmann::json record{{"stage", "refine"},
                              {"epoch", epoch},
                              {"generated_batches", generated_batches},
                              {"loss_generated", generated_means.to_json()}};
        if (cfg.real_per_generated > 0) {
            record["loss_real"] = real_means.to_json();
        }
        record.update(head_summary(model, head, eval_data, all_tasks(head)));
        if (logger) {
            logger(record);
        }
        log.push_back(std::move(record));
    }
    return log;
}

nlohmann::json GeneralizeConfig::to_json() const
{
    return {{"epochs", epochs},
            {"sparsity_warmup_epochs", sparsity_warmup_epochs},
            {"straight_through", straight_through},
            {"optimizer", optimizer.to_json()},
            {"weights", weights.to_json()},
            {"seed", seed}};
}

GeneralizeConfig GeneralizeConfig::from_json(const nlohmann::json& j)
{
    GeneralizeConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.sparsity_warmup_epochs = j.value("sparsity_warmup_epochs", c.sparsity_warmup_epochs);
    c.straight_through = j.value("straight_through", c.straight_through);
    if (j.contains("optimizer")) {
        c.optimizer = OptimizerSettings::from_json(j.at("optimizer"));
    }
    if (j.contains("weights")) {
        c.weights = LossWeights::from_json(j.at("weights"));
    }
    c.seed = j.value("seed", c.seed);
    return c;
}

ConceptPosterior encode_posterior(ConceptModel& model, const torch::Tensor& pixels, std::int64_t chunk)
{
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> mu;
    std::vector<torch::Tensor> log_var;
    for (std::int64_t start = 0; start < pixels.size(0); start += chunk) {
        const auto post = model->encode(pixels.narrow(0, start, std::min(chunk, pixels.size(0) - start)));
        mu.push_back(post.mu);
        log_var.push_back(post.log_var);
    }
    if (mu.empty()) {
        const auto k = model->options().num_concepts;
        return {torch::zeros({0, k}), torch::zeros({0, k})};
    }
    return {torch::cat(mu, 0), torch::cat(log_var, 0)};
}

std::vector<double> head_agreement(const ExplanationHead& head, const std::vector<std::int64_t>& tasks,
                                   const HeadTrainingSet& data)
{
    if (data.size() == 0) {
        throw DataError("agreement accuracy: empty evaluation set");
    }
    torch::NoGradGuard no_grad;
    std::vector<double> acc;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto z = head->mask_apply(data.concepts.mu, tasks[i], MaskMode::Hard);
        const auto out = head->tree(tasks[i])->forward(z);
        acc.push_back(out.argmax(1).eq(data.targets.at(i).argmax(1)).to(torch::kFloat64).mean().item<double>());
    }
    return acc;
}

std::vector<nlohmann::json> train_head_tasks(ExplanationHead& head, const std::vector<std::int64_t>& tasks,
                                             const HeadTrainingSet& data, const HeadTrainingSet* eval_data,
                                             const GeneralizeConfig& cfg, const std::string& stage,
                                             const EpochLogger& logger)
{
    if (data.size() == 0) {
        throw DataError(stage + ": training set is empty");
    }
    if (tasks.empty()) {
        throw ConfigError(stage + ": no tasks to train");
    }
    if (data.targets.size() != tasks.size()) {
        throw ConfigError(stage + ": expected targets for " + std::to_string(tasks.size()) + " tasks, got " +
                          std::to_string(data.targets.size()));
    }
    cfg.weights.validate();
    torch::manual_seed(cfg.seed);
    std::mt19937_64 rng(cfg.seed);
    head->set_straight_through(cfg.straight_through);
    auto optimizer = make_optimizer(head_groups(head, tasks), cfg.optimizer);
    const bool resample = data.concepts.log_var.defined();

    std::vector<nlohmann::json> log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lambda3 = cfg.weights.lambda3 * ramp(epoch, cfg.sparsity_warmup_epochs);
        RunningMeans means;
        std::int64_t step = 0;
        for (const auto& index : minibatch_indices(data.size(), cfg.optimizer.batch_size, rng)) {
            auto z = data.concepts.mu.index_select(0, index);
            if (resample) {
                const auto lv = data.concepts.log_var.index_select(0, index);
                z = z + torch::exp(0.5 * lv) * torch::randn_like(z);
            }
            auto fidelity = torch::zeros({});
            auto complexity = torch::zeros({});
            for (std::size_t i = 0; i < tasks.size(); ++i) {
                const auto& tree = head->tree(tasks[i]);
                const auto routing = tree->route(head->mask_apply(z, tasks[i], MaskMode::Soft));
                const auto out = torch::matmul(routing.leaf_prob, tree->leaf_distributions());
                fidelity = fidelity + distribution_kl(data.targets[i].index_select(0, index), out);
                complexity = complexity + tree->complexity(routing);
            }
            fidelity = fidelity / static_cast<double>(tasks.size());
            const auto penalty = head->mask_sparsity_penalty(&tasks);
            const auto total = cfg.weights.lambda1 * fidelity +
                               cfg.weights.lambda2 * (lambda3 * penalty + cfg.weights.lambda4 * complexity);
            const std::vector<std::pair<std::string, double>> values{{"fidelity", fidelity.item<double>()},
                                                                     {"mask_penalty", penalty.item<double>()},
                                                                     {"tree_complexity", complexity.item<double>()},
                                                                     {"total", total.item<double>()}};
            check_finite(values, "at " + stage + " epoch " + std::to_string(epoch) + " step " + std::to_string(step));
            optimizer->zero_grad();
            total.backward();
            optimizer->step();
            means.add(values, index.size(0));
            ++step;
        }
        nlohmann::json record{{"stage", stage}, {"epoch", epoch}, {"lambda3", lambda3}, {"loss", means.to_json()}};
        record.update(head_summary_subset(head, tasks, eval_data));
        if (logger) {
            logger(record);
        }
        log.push_back(std::move(record));
    }
    return log;
}

std::vector<nlohmann::json> generalize(ConceptModel& model, ExplanationHead& head, const std::vector<NewTask>& tasks,
                                       const SurrogateData& data, const SurrogateData* eval_data,
                                       const GeneralizeConfig& cfg, const EpochLogger& logger)
{
    if (data.size() == 0) {
        throw DataError("generalize: training set is empty");
    }
    check_targets(head, data, tasks.size());
    std::set<std::string> seen;
    for (const auto& t : tasks) {
        if (!seen.insert(t.name).second) {
            throw ConfigError("generalize: task '" + t.name + "' listed twice");
        }
        for (const auto& existing : head->tasks()) {
            if (existing.name == t.name) {
                throw ConfigError("generalize: task '" + t.name + "' already exists in the explanation head");
            }
        }
    }
    torch::manual_seed(cfg.seed);
    std::vector<std::int64_t> fresh;
    for (const auto& t : tasks) {
        fresh.push_back(head->add_task(t.name, t.tree));
    }
    const HeadTrainingSet train_set{encode_posterior(model, data.images.pixels), data.targets};
    std::optional<HeadTrainingSet> eval_set;
    if (eval_data != nullptr && eval_data->size() > 0) {
        check_targets(head, *eval_data, tasks.size());
        eval_set = HeadTrainingSet{encode_posterior(model, eval_data->images.pixels), eval_data->targets};
    }
    return train_head_tasks(head, fresh, train_set, eval_set ? &*eval_set : nullptr, cfg, "generalize", logger);
}

nlohmann::json HeadOptions::to_json() const
{
    return {{"threshold", threshold},
            {"mask_init", mask_init},
            {"tree_beta", tree_beta},
            {"tree_init_scale", tree_init_scale}};
}

HeadOptions HeadOptions::from_json(const nlohmann::json& j)
{
    HeadOptions o;
    o.threshold = j.value("threshold", o.threshold);
    o.mask_init = j.value("mask_init", o.mask_init);
    o.tree_beta = j.value("tree_beta", o.tree_beta);
    o.tree_init_scale = j.value("tree_init_scale", o.tree_init_scale);
    return o;
}

SoftTreeOptions tree_options_for(const TaskSpec& task, const HeadOptions& options, int depth_override)
{
    SoftTreeOptions t;
    t.depth = depth_override > 0 ? depth_override : task.tree_depth;
    t.num_classes = task.num_classes;
    t.beta = options.tree_beta;
    t.init_scale = options.tree_init_scale;
    return t;
}

Surrogate build_surrogate(const ConceptModelOptions& model_options, const HeadOptions& head_options,
                          const std::vector<NewTask>& tasks, std::uint64_t seed)
{
    torch::manual_seed(seed);
    Surrogate s;
    s.model = ConceptModel(model_options);
    s.head = ExplanationHead(model_options.num_concepts, head_options.threshold, head_options.mask_init);
    for (const auto& t : tasks) {
        s.head->add_task(t.name, t.tree);
    }
    return s;
}

void save_surrogate(const Surrogate& surrogate, const std::filesystem::path& dir, const nlohmann::json& extra)
{
    std::filesystem::create_directories(dir);
    save_module(*surrogate.model, dir / "concept_model.cbt");
    save_module(*surrogate.head, dir / "head.cbt");
    nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
    manifest["format"] = "cbsm-surrogate";
    manifest["format_version"] = 1;
    manifest["concept_model"] = surrogate.model->options().to_json();
    manifest["head"] = surrogate.head->to_json();
    manifest["files"] = {{"concept_model.cbt", sha256_file(dir / "concept_model.cbt")},
                         {"head.cbt", sha256_file(dir / "head.cbt")}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

Surrogate load_surrogate(const std::filesystem::path& dir)
{
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) {
        throw DependencyError("missing surrogate checkpoint " + manifest_path.string());
    }
    Surrogate s;
    s.manifest = nlohmann::json::parse(in);
    if (s.manifest.value("format", "") != "cbsm-surrogate") {
        throw DataError(manifest_path.string() + ": not a surrogate checkpoint");
    }
    for (const auto& [file, sha] : s.manifest.at("files").items()) {
        if (sha256_file(dir / file) != sha.get<std::string>()) {
            throw DataError("checksum mismatch for " + (dir / file).string());
        }
    }
    s.model = ConceptModel(ConceptModelOptions::from_json(s.manifest.at("concept_model")));
    s.head = ExplanationHead(ExplanationHeadImpl::from_json(s.manifest.at("head")));
    load_module(*s.model, dir / "concept_model.cbt");
    load_module(*s.head, dir / "head.cbt");
    return s;
}

} // namespace cbsm
