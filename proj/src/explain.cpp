#include "cbsm/explain.hpp"

#include "cbsm/error.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>

namespace cbsm {

nlohmann::json GlobalExplanation::to_json() const
{
    return {{"task", task}, {"related", related}, {"soft_mask", soft_mask}, {"empty", empty}};
}

GlobalExplanation global_explanation(const ExplanationHead& head, const std::string& task)
{
    const auto k = head->task_index(task);
    GlobalExplanation g;
    g.task = task;
    const auto column = head->soft_mask().select(1, k).to(torch::kFloat64).contiguous();
    g.soft_mask.assign(column.data_ptr<double>(), column.data_ptr<double>() + column.numel());
    for (std::size_t j = 0; j < g.soft_mask.size(); ++j) {
        if (g.soft_mask[j] > head->threshold()) {
            g.related.push_back(static_cast<std::int64_t>(j));
        }
    }
    g.empty = g.related.empty();
    if (g.empty) {
        std::cerr << "warning: the mask of task '" << task << "' selects no concepts\n";
    }
    return g;
}

nlohmann::json LocalExplanation::to_json(const std::vector<std::string>& class_names) const
{
    auto class_label = [&](std::int64_t c) -> nlohmann::json {
        if (c >= 0 && c < static_cast<std::int64_t>(class_names.size())) {
            return class_names[static_cast<std::size_t>(c)];
        }
        return c;
    };
    nlohmann::json concepts = nlohmann::json::array();
    for (const auto& [j, v] : concept_values) {
        concepts.push_back({{"concept", j}, {"value", v}});
    }
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : path.steps) {
        steps.push_back({{"node", s.node},
                         {"depth", s.depth},
                         {"activation", s.activation},
                         {"p_right", s.p_right},
                         {"branch", s.went_right ? "right" : "left"}});
    }
    nlohmann::json j{{"sample_id", sample_id},
                     {"task", task},
                     {"related_concepts", concepts},
                     {"path", steps},
                     {"leaf", path.leaf},
                     {"leaf_distribution", path.leaf_distribution},
                     {"surrogate", surrogate},
                     {"predicted", class_label(predicted)},
                     {"hard_path_predicted", class_label(hard_path_predicted)}};
    if (!blackbox.empty()) {
        const auto bb = std::distance(blackbox.begin(), std::max_element(blackbox.begin(), blackbox.end()));
        j["blackbox"] = blackbox;
        j["blackbox_predicted"] = class_label(bb);
        j["agrees"] = agrees;
    }
    return j;
}

namespace {

std::vector<double> to_vector(const torch::Tensor& t)
{
    const auto d = t.detach().to(torch::kFloat64).contiguous();
    return {d.data_ptr<double>(), d.data_ptr<double>() + d.numel()};
}

std::int64_t argmax(const std::vector<double>& v)
{
    return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
}

} // namespace

LocalExplanation local_explanation(ConceptModel& model, const ExplanationHead& head, const std::string& task,
                                   const torch::Tensor& image, std::int64_t sample_id, const BlackBox* blackbox)
{
    if (image.dim() != 2) {
        throw ConfigError("local explanation: expected a single [H, W] image");
    }
    torch::NoGradGuard no_grad;
    const auto k = head->task_index(task);
    const auto mu = model->encode(image.unsqueeze(0)).mu;
    const auto masked = head->mask_apply(mu, k, MaskMode::Hard);
    const auto& tree = head->tree(k);

    LocalExplanation e;
    e.sample_id = sample_id;
    e.task = task;
    const auto hard = head->hard_mask().select(1, k);
    for (std::int64_t j = 0; j < hard.size(0); ++j) {
        if (hard[j].item<float>() > 0.5f) {
            e.concept_values.emplace_back(j, mu[0][j].item<double>());
        }
    }
    e.path = tree->hard_path(masked[0]);
    e.surrogate = to_vector(tree->forward(masked)[0]);
    e.predicted = argmax(e.surrogate);
    e.hard_path_predicted = argmax(e.path.leaf_distribution);
    if (blackbox != nullptr) {
        ImageBatch one{image.unsqueeze(0), torch::full({1}, sample_id, torch::kInt64)};
        e.blackbox = to_vector(blackbox->predict_proba(one)[0]);
        e.agrees = e.predicted == argmax(e.blackbox);
    }
    return e;
}

std::vector<double> traversal_values(int n, double lo, double hi)
{
    if (n < 1) {
        throw ConfigError("traversal needs at least one value");
    }
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        v[static_cast<std::size_t>(i)] = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1);
    }
    return v;
}

TraversalGrid traverse(ConceptModel& model, const torch::Tensor& base, std::int64_t concept_index,
                       const std::vector<double>& values, double lo, double hi)
{
    const auto kc = model->options().num_concepts;
    if (base.dim() != 1 || base.size(0) != kc) {
        throw ConfigError("traverse: base must be a single concept vector of width " + std::to_string(kc));
    }
    if (concept_index < 0 || concept_index >= kc) {
        throw ConfigError("traverse: concept index " + std::to_string(concept_index) + " out of range");
    }
    for (const double v : values) {
        if (v < lo || v > hi) {
            throw ConfigError("traverse: value " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "]");
        }
    }
    torch::NoGradGuard no_grad;
    TraversalGrid g;
    g.base = base.to(torch::kFloat32).clone();
    g.concept_index = concept_index;
    g.values = values;
    g.vectors = g.base.unsqueeze(0).repeat({static_cast<std::int64_t>(values.size()), 1});
    g.vectors.select(1, concept_index).copy_(torch::tensor(values, torch::kFloat64).to(torch::kFloat32));
    g.images = values.empty() ? torch::zeros({0, model->options().height, model->options().width})
                              : torch::sigmoid(model->decode(g.vectors));
    return g;
}

nlohmann::json TaskFidelity::to_json() const
{
    return {{"task", task},
            {"agreement", agreement},
            {"hard_path_agreement", hard_path_agreement},
            {"num_concepts", num_concepts},
            {"depth", depth},
            {"num_nodes", num_nodes},
            {"sharp_samples", sharp_samples},
            {"sharp_mismatches", sharp_mismatches}};
}

std::vector<TaskFidelity> fidelity_report(ConceptModel& model, const ExplanationHead& head, const SurrogateData& test)
{
    if (test.size() == 0) {
        throw DataError("fidelity report: empty test set");
    }
    if (static_cast<std::int64_t>(test.targets.size()) != head->num_tasks()) {
        throw ConfigError("fidelity report: targets do not cover the head's tasks");
    }
    torch::NoGradGuard no_grad;
    const auto mu = encode_means(model, test.images.pixels);
    const auto hard = head->hard_mask();
    std::vector<TaskFidelity> report;
    for (std::int64_t k = 0; k < head->num_tasks(); ++k) {
        const auto& tree = head->tree(k);
        const auto masked = head->mask_apply(mu, k, MaskMode::Hard);
        const auto routing = tree->route(masked);
        const auto leaves = tree->leaf_distributions();
        const auto soft_pred = torch::matmul(routing.leaf_prob, leaves).argmax(1);
        const auto target = test.targets[static_cast<std::size_t>(k)].argmax(1);

        // Greedy descent for all rows at once; ties go left like hard_path.
        auto node = torch::zeros({mu.size(0)}, torch::kInt64);
        auto sharp = torch::ones({mu.size(0)}, torch::kBool);
        for (int d = 0; d < tree->options().depth; ++d) {
            const auto g = routing.gate.gather(1, node.unsqueeze(1)).squeeze(1);
            sharp = sharp & ((g - 0.5).abs() >= 0.1);
            node = 2 * node + 1 + (g > 0.5).to(torch::kInt64);
        }
        const auto hard_pred = leaves.argmax(1).index_select(0, node - tree->num_inner());

        TaskFidelity f;
        f.task = head->tasks()[static_cast<std::size_t>(k)].name;
        f.agreement = soft_pred.eq(target).to(torch::kFloat64).mean().item<double>();
        f.hard_path_agreement = hard_pred.eq(target).to(torch::kFloat64).mean().item<double>();
        f.num_concepts = hard.select(1, k).sum().item<std::int64_t>();
        f.depth = tree->options().depth;
        f.num_nodes = pruned_node_count(routing.reach.mean(0));
        f.sharp_samples = sharp.sum().item<std::int64_t>();
        f.sharp_mismatches = (sharp & hard_pred.ne(soft_pred)).sum().item<std::int64_t>();
        report.push_back(f);
    }
    return report;
}

double binned_mutual_information(const torch::Tensor& values, const torch::Tensor& labels, int bins)
{
    const auto n = values.numel();
    if (bins < 1) {
        throw ConfigError("mutual information: bin count must be positive");
    }
    if (n < bins) {
        throw DataError("mutual information: " + std::to_string(n) + " samples is fewer than " +
                        std::to_string(bins) + " bins");
    }
    if (labels.numel() != n) {
        throw ConfigError("mutual information: values and labels differ in length");
    }
    const auto v = values.detach().to(torch::kFloat64).contiguous();
    const auto y = labels.detach().to(torch::kInt64).contiguous();
    const double* vp = v.data_ptr<double>();
    const std::int64_t* yp = y.data_ptr<std::int64_t>();

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return vp[a] < vp[b]; });
    std::vector<int> bin_of(static_cast<std::size_t>(n));
    int current = 0;
    for (std::int64_t p = 0; p < n; ++p) {
        const auto i = order[static_cast<std::size_t>(p)];
        if (p == 0 || vp[i] != vp[order[static_cast<std::size_t>(p - 1)]]) {
            current = static_cast<int>(p * bins / n);
        }
        bin_of[static_cast<std::size_t>(i)] = current;
    }

    std::map<std::pair<int, std::int64_t>, double> joint;
    std::map<int, double> pb;
    std::map<std::int64_t, double> py;
    const double w = 1.0 / static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i) {
        const int b = bin_of[static_cast<std::size_t>(i)];
        joint[{b, yp[i]}] += w;
        pb[b] += w;
        py[yp[i]] += w;
    }
    double mi = 0.0;
    for (const auto& [key, p] : joint) {
        mi += p * std::log(p / (pb[key.first] * py[key.second]));
    }
    return std::max(0.0, mi);
}

torch::Tensor mi_flow(const torch::Tensor& concepts, const std::vector<torch::Tensor>& labels, int bins)
{
    const auto kc = concepts.size(1);
    auto mi = torch::zeros({kc, static_cast<std::int64_t>(labels.size())}, torch::kFloat64);
    for (std::int64_t j = 0; j < kc; ++j) {
        for (std::size_t k = 0; k < labels.size(); ++k) {
            mi[j][static_cast<std::int64_t>(k)] = binned_mutual_information(concepts.select(1, j), labels[k], bins);
        }
    }
    return mi;
}

double selected_information(const torch::Tensor& mi, const torch::Tensor& hard_mask)
{
    if (!mi.sizes().equals(hard_mask.sizes())) {
        throw ConfigError("selected information: MI matrix and mask differ in shape");
    }
    return (mi.to(torch::kFloat64) * (hard_mask > 0.5).to(torch::kFloat64)).sum().item<double>();
}

nlohmann::json EfficacyConfig::to_json() const
{
    return {{"sizes", sizes},
            {"seeds", seeds},
            {"model", model.to_json()},
            {"head", head.to_json()},
            {"train", train.to_json()},
            {"refine", refine.to_json()}};
}

EfficacyConfig EfficacyConfig::from_json(const nlohmann::json& j)
{
    EfficacyConfig c;
    c.sizes = j.value("sizes", c.sizes);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("model")) {
        c.model = ConceptModelOptions::from_json(j.at("model"));
    }
    if (j.contains("head")) {
        c.head = HeadOptions::from_json(j.at("head"));
    }
    if (j.contains("train")) {
        c.train = TrainConfig::from_json(j.at("train"));
    }
    if (j.contains("refine")) {
        c.refine = RefineConfig::from_json(j.at("refine"));
    }
    return c;
}

double median(std::vector<double> values)
{
    if (values.empty()) {
        throw ConfigError("median of an empty list");
    }
    std::sort(values.begin(), values.end());
    const auto m = values.size() / 2;
    return values.size() % 2 == 1 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

std::vector<EfficacyRow> efficacy_curve(const EfficacyConfig& cfg, const std::vector<NewTask>& tasks,
                                        const SurrogateData& pool, const SurrogateData& test,
                                        const BlackBoxSet& blackboxes, const EpochLogger& logger)
{
    if (cfg.seeds.empty()) {
        throw ConfigError("efficacy curve: no seeds");
    }
    for (const auto size : cfg.sizes) {
        if (size <= 0) {
            throw ConfigError("efficacy curve: training size must be positive, got " + std::to_string(size));
        }
        if (size > pool.size()) {
            throw ConfigError("efficacy curve: training size " + std::to_string(size) + " exceeds the " +
                              std::to_string(pool.size()) + " available samples");
        }
    }
    auto mean_of = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    std::vector<EfficacyRow> rows;
    for (const auto size : cfg.sizes) {
        EfficacyRow row;
        row.size = size;
        const auto subset = pool.select(torch::arange(size, torch::kInt64));
        for (const auto seed : cfg.seeds) {
            auto s = build_surrogate(cfg.model, cfg.head, tasks, seed);
            auto train_cfg = cfg.train;
            train_cfg.seed = seed;
            train(s.model, s.head, subset, nullptr, train_cfg);
            row.without_refine.push_back(mean_of(agreement_accuracy(s.model, s.head, test)));
            auto refine_cfg = cfg.refine;
            refine_cfg.seed = seed;
            refine(s.model, s.head, blackboxes, subset, nullptr, refine_cfg);
            row.with_refine.push_back(mean_of(agreement_accuracy(s.model, s.head, test)));
            if (logger) {
                logger({{"stage", "efficacy"},
                        {"size", size},
                        {"seed", seed},
                        {"without_refine", row.without_refine.back()},
                        {"with_refine", row.with_refine.back()}});
            }
        }
        row.median_without = median(row.without_refine);
        row.median_with = median(row.with_refine);
        rows.push_back(row);
    }
    return rows;
}

nlohmann::json efficacy_to_json(const std::vector<EfficacyRow>& rows)
{
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"size", r.size},
                       {"without_refine", r.without_refine},
                       {"with_refine", r.with_refine},
                       {"median_without", r.median_without},
                       {"median_with", r.median_with}});
    }
    return out;
}

} // namespace cbsm
