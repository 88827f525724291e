#include "cbsm/explanation_head.hpp"

#include "cbsm/error.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace cbsm {

nlohmann::json SoftTreeOptions::to_json() const
{
    return {{"depth", depth}, {"num_classes", num_classes}, {"beta", beta}, {"init_scale", init_scale}};
}

SoftTreeOptions SoftTreeOptions::from_json(const nlohmann::json& j)
{
    SoftTreeOptions o;
    o.depth = j.value("depth", o.depth);
    o.num_classes = j.value("num_classes", o.num_classes);
    o.beta = j.value("beta", o.beta);
    o.init_scale = j.value("init_scale", o.init_scale);
    return o;
}

SoftDecisionTreeImpl::SoftDecisionTreeImpl(std::int64_t num_concepts, const SoftTreeOptions& options)
    : options_(options)
{
    if (options_.depth < 1) {
        throw ConfigError("soft decision tree: depth must be at least 1");
    }
    if (options_.num_classes < 2) {
        throw ConfigError("soft decision tree: need at least two classes");
    }
    if (options_.beta <= 0.0) {
        throw ConfigError("soft decision tree: beta must be positive");
    }
    weights = register_parameter("weights", torch::randn({num_inner(), num_concepts}) * options_.init_scale);
    bias = register_parameter("bias", torch::zeros({num_inner()}));
    leaf_logits =
        register_parameter("leaf_logits", torch::randn({num_leaves(), options_.num_classes}) * options_.init_scale);
}

TreeRouting SoftDecisionTreeImpl::route(const torch::Tensor& z) const
{
    const auto n = z.size(0);
    TreeRouting r;
    r.gate = torch::sigmoid(options_.beta * (torch::matmul(z, weights.t()) + bias));
    std::vector<torch::Tensor> reach_levels;
    auto level = torch::ones({n, 1}, z.options());
    for (int d = 0; d < options_.depth; ++d) {
        const auto first = (std::int64_t{1} << d) - 1;
        const auto width = std::int64_t{1} << d;
        const auto g = r.gate.narrow(1, first, width);
        reach_levels.push_back(level);
        // Interleave (left, right) per parent to keep heap order.
        level = torch::stack({level * (1.0 - g), level * g}, 2).reshape({n, 2 * width});
    }
    r.reach = torch::cat(reach_levels, 1);
    r.leaf_prob = level;
    return r;
}

torch::Tensor SoftDecisionTreeImpl::leaf_distributions() const
{
    return torch::softmax(leaf_logits, 1);
}

torch::Tensor SoftDecisionTreeImpl::forward(const torch::Tensor& z) const
{
    return torch::matmul(route(z).leaf_prob, leaf_distributions());
}

torch::Tensor SoftDecisionTreeImpl::l1_term() const
{
    return weights.abs().sum();
}

torch::Tensor SoftDecisionTreeImpl::balance_term(const TreeRouting& routing) const
{
    const auto arrived = routing.reach.sum(0);
    const auto alpha =
        ((routing.reach * routing.gate).sum(0) / (arrived + 1e-8)).clamp(1e-6, 1.0 - 1e-6);
    const auto cross_entropy = -0.5 * torch::log(alpha) - 0.5 * torch::log(1.0 - alpha) - std::log(2.0);
    std::vector<double> decay(static_cast<std::size_t>(num_inner()));
    for (std::int64_t i = 0; i < num_inner(); ++i) {
        const int d = static_cast<int>(std::floor(std::log2(static_cast<double>(i + 1))));
        decay[static_cast<std::size_t>(i)] = std::ldexp(1.0, -d);
    }
    const auto weight = torch::tensor(decay, routing.gate.options());
    return (weight * cross_entropy).sum();
}

HardPath SoftDecisionTreeImpl::hard_path(const torch::Tensor& z) const
{
    torch::NoGradGuard no_grad;
    const auto zd = z.to(torch::kFloat64).flatten();
    const auto w = weights.detach().to(torch::kFloat64);
    const auto b = bias.detach().to(torch::kFloat64);
    HardPath path;
    std::int64_t node = 0;
    for (int d = 0; d < options_.depth; ++d) {
        PathStep step;
        step.node = node;
        step.depth = d;
        step.activation = (w[node] * zd).sum().item<double>() + b[node].item<double>();
        step.p_right = 1.0 / (1.0 + std::exp(-options_.beta * step.activation));
        step.went_right = step.p_right > 0.5;
        path.steps.push_back(step);
        node = 2 * node + (step.went_right ? 2 : 1);
    }
    path.leaf = node - num_inner();
    const auto dist = leaf_distributions().detach().to(torch::kFloat64)[path.leaf];
    path.leaf_distribution.assign(dist.data_ptr<double>(), dist.data_ptr<double>() + dist.numel());
    return path;
}

ExplanationHeadImpl::ExplanationHeadImpl(std::int64_t num_concepts, double threshold, double mask_init)
    : num_concepts_(num_concepts), threshold_(threshold), mask_init_(mask_init)
{
    if (num_concepts < 1) {
        throw ConfigError("explanation head: need at least one concept");
    }
    if (!(threshold >= 0.0 && threshold < 1.0)) {
        throw ConfigError("explanation head: threshold must lie in [0, 1)");
    }
}

std::int64_t ExplanationHeadImpl::add_task(const std::string& name, const SoftTreeOptions& tree_options)
{
    for (const auto& t : tasks_) {
        if (t.name == name) {
            throw ConfigError("task '" + name + "' already exists in the explanation head");
        }
    }
    const auto k = num_tasks();
    tasks_.push_back({name, tree_options});
    mask_columns_.push_back(
        register_parameter("mask_" + std::to_string(k), torch::full({num_concepts_}, mask_init_)));
    trees_.push_back(register_module("tree_" + std::to_string(k), SoftDecisionTree(num_concepts_, tree_options)));
    return k;
}

std::int64_t ExplanationHeadImpl::task_index(const std::string& name) const
{
    for (std::size_t k = 0; k < tasks_.size(); ++k) {
        if (tasks_[k].name == name) {
            return static_cast<std::int64_t>(k);
        }
    }
    throw ConfigError("unknown task '" + name + "' in explanation head");
}

void ExplanationHeadImpl::check_task(std::int64_t k) const
{
    if (k < 0 || k >= num_tasks()) {
        throw ConfigError("task index " + std::to_string(k) + " out of range");
    }
}

torch::Tensor ExplanationHeadImpl::mask_logits() const
{
    if (mask_columns_.empty()) {
        return torch::zeros({num_concepts_, 0});
    }
    return torch::stack(mask_columns_, 1);
}

torch::Tensor ExplanationHeadImpl::soft_mask() const
{
    return torch::sigmoid(mask_logits());
}

torch::Tensor ExplanationHeadImpl::hard_mask() const
{
    return (soft_mask() > threshold_).to(torch::kFloat32);
}

torch::Tensor& ExplanationHeadImpl::mask_column(std::int64_t k)
{
    check_task(k);
    return mask_columns_[static_cast<std::size_t>(k)];
}

torch::Tensor ExplanationHeadImpl::mask_apply(const torch::Tensor& z, std::int64_t k, MaskMode mode) const
{
    check_task(k);
    if (z.size(-1) != num_concepts_) {
        throw ConfigError("mask_apply: concept vector width mismatch");
    }
    const auto soft = torch::sigmoid(mask_columns_[static_cast<std::size_t>(k)]).to(z.scalar_type());
    const auto hard = (soft > threshold_).to(z.scalar_type());
    if (mode == MaskMode::Hard) {
        return z * hard.detach();
    }
    if (straight_through_) {
        return z * (hard.detach() + soft - soft.detach());
    }
    return z * soft;
}

std::vector<torch::Tensor> ExplanationHeadImpl::forward(const torch::Tensor& z, MaskMode mode) const
{
    std::vector<torch::Tensor> outputs;
    outputs.reserve(trees_.size());
    for (std::int64_t k = 0; k < num_tasks(); ++k) {
        outputs.push_back(trees_[static_cast<std::size_t>(k)]->forward(mask_apply(z, k, mode)));
    }
    return outputs;
}

torch::Tensor ExplanationHeadImpl::mask_sparsity_penalty(const std::vector<std::int64_t>* task_subset) const
{
    auto total = torch::zeros({});
    auto add = [&](std::int64_t k) {
        check_task(k);
        total = total + torch::sigmoid(mask_columns_[static_cast<std::size_t>(k)]).pow(2).sum();
    };
    if (task_subset != nullptr) {
        for (const auto k : *task_subset) {
            add(k);
        }
    } else {
        for (std::int64_t k = 0; k < num_tasks(); ++k) {
            add(k);
        }
    }
    return total;
}

const SoftDecisionTree& ExplanationHeadImpl::tree(std::int64_t k) const
{
    check_task(k);
    return trees_[static_cast<std::size_t>(k)];
}

SoftDecisionTree& ExplanationHeadImpl::tree(std::int64_t k)
{
    check_task(k);
    return trees_[static_cast<std::size_t>(k)];
}

std::vector<torch::Tensor> ExplanationHeadImpl::task_parameters(std::int64_t k)
{
    check_task(k);
    std::vector<torch::Tensor> params{mask_columns_[static_cast<std::size_t>(k)]};
    for (const auto& p : trees_[static_cast<std::size_t>(k)]->parameters()) {
        params.push_back(p);
    }
    return params;
}

nlohmann::json ExplanationHeadImpl::to_json() const
{
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : tasks_) {
        tasks.push_back({{"name", t.name}, {"tree", t.tree.to_json()}});
    }
    return {{"num_concepts", num_concepts_},
            {"threshold", threshold_},
            {"mask_init", mask_init_},
            {"straight_through", straight_through_},
            {"tasks", tasks}};
}

std::shared_ptr<ExplanationHeadImpl> ExplanationHeadImpl::from_json(const nlohmann::json& j)
{
    auto head = std::make_shared<ExplanationHeadImpl>(j.at("num_concepts").get<std::int64_t>(),
                                                      j.value("threshold", 0.5), j.value("mask_init", 2.0));
    head->set_straight_through(j.value("straight_through", false));
    for (const auto& t : j.at("tasks")) {
        head->add_task(t.at("name").get<std::string>(), SoftTreeOptions::from_json(t.at("tree")));
    }
    return head;
}

torch::Tensor reach_mass(const SoftDecisionTree& tree, const torch::Tensor& z)
{
    torch::NoGradGuard no_grad;
    return tree->route(z).reach.mean(0);
}

std::int64_t pruned_node_count(const torch::Tensor& mass, double prune_below)
{
    return (mass >= prune_below).sum().item<std::int64_t>();
}

RuleSet extract_rules(const SoftDecisionTree& tree, const torch::Tensor& hard_mask_column,
                      const std::optional<torch::Tensor>& reach, double prune_below)
{
    torch::NoGradGuard no_grad;
    RuleSet rules;
    const auto column = hard_mask_column.to(torch::kFloat64).flatten();
    for (std::int64_t j = 0; j < column.size(0); ++j) {
        if (column[j].item<double>() > 0.5) {
            rules.concepts.push_back(j);
        }
    }
    const auto w = tree->weights.detach().to(torch::kFloat64);
    const auto b = tree->bias.detach().to(torch::kFloat64);
    for (std::int64_t node = 0; node < tree->num_inner(); ++node) {
        Rule rule;
        rule.node = node;
        rule.depth = static_cast<int>(std::floor(std::log2(static_cast<double>(node + 1))));
        rule.bias = b[node].item<double>();
        if (reach) {
            rule.reach_mass = (*reach)[node].item<double>();
            if (*rule.reach_mass < prune_below) {
                rules.pruned_nodes.push_back(node);
                continue;
            }
        }
        for (const auto j : rules.concepts) {
            const double c = w[node][j].item<double>();
            if (c != 0.0) {
                rule.terms.push_back({j, c});
            }
        }
        if (rule.terms.empty()) {
            rule.constant = true;
            rule.constant_right = rule.bias > 0.0;
        }
        rules.rules.push_back(std::move(rule));
    }
    const auto leaves = tree->leaf_distributions().detach().to(torch::kFloat64);
    for (std::int64_t l = 0; l < leaves.size(0); ++l) {
        const auto row = leaves[l].contiguous();
        rules.leaf_distributions.emplace_back(row.data_ptr<double>(), row.data_ptr<double>() + row.numel());
    }
    return rules;
}

std::string RuleSet::to_text(const std::vector<std::string>& concept_names) const
{
    auto name = [&](std::int64_t j) {
        return j < static_cast<std::int64_t>(concept_names.size()) ? concept_names[static_cast<std::size_t>(j)]
                                                                   : "z" + std::to_string(j);
    };
    std::ostringstream out;
    out << std::fixed << std::setprecision(3);
    out << "concepts:";
    for (const auto j : concepts) {
        out << ' ' << name(j);
    }
    out << '\n';
    for (const auto& r : rules) {
        out << std::string(static_cast<std::size_t>(2 * r.depth), ' ') << "node " << r.node << ": ";
        if (r.constant) {
            out << "always " << (r.constant_right ? "right" : "left");
        } else {
            out << "if ";
            for (std::size_t t = 0; t < r.terms.size(); ++t) {
                const double c = r.terms[t].coefficient;
                if (t > 0) {
                    out << (c < 0 ? " - " : " + ") << std::abs(c);
                } else {
                    out << c;
                }
                out << '*' << name(r.terms[t].concept_index);
            }
            out << (r.bias < 0 ? " - " : " + ") << std::abs(r.bias) << " > 0 then right else left";
        }
        out << "  -> children " << 2 * r.node + 1 << "/" << 2 * r.node + 2;
        if (r.reach_mass) {
            out << "  (mass " << *r.reach_mass << ")";
        }
        out << '\n';
    }
    for (std::size_t l = 0; l < leaf_distributions.size(); ++l) {
        out << "leaf " << l << ": [";
        for (std::size_t c = 0; c < leaf_distributions[l].size(); ++c) {
            out << (c ? ", " : "") << leaf_distributions[l][c];
        }
        out << "]\n";
    }
    return out.str();
}

nlohmann::json RuleSet::to_json() const
{
    nlohmann::json list = nlohmann::json::array();
    for (const auto& r : rules) {
        nlohmann::json terms = nlohmann::json::array();
        for (const auto& t : r.terms) {
            terms.push_back({{"concept", t.concept_index}, {"coefficient", t.coefficient}});
        }
        nlohmann::json item{{"node", r.node},
                            {"depth", r.depth},
                            {"terms", terms},
                            {"bias", r.bias},
                            {"constant", r.constant},
                            {"left_child", 2 * r.node + 1},
                            {"right_child", 2 * r.node + 2}};
        if (r.constant) {
            item["constant_branch"] = r.constant_right ? "right" : "left";
        }
        if (r.reach_mass) {
            item["reach_mass"] = *r.reach_mass;
        }
        list.push_back(item);
    }
    return {{"concepts", concepts}, {"rules", list}, {"leaves", leaf_distributions}, {"pruned_nodes", pruned_nodes}};
}

} // namespace cbsm
