#pragma once

// The explainable mapping from concepts to task outputs: a relaxed binary
// (concept x task) mask followed by one soft decision tree per task.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cbsm {

enum class MaskMode { Soft, Hard };

struct SoftTreeOptions {
    int depth{2};
    std::int64_t num_classes{2};
    // Inverse temperature of every gate.
    double beta{1.0};
    // Std-dev of the initial gate weights and leaf logits.
    double init_scale{1.0};

    nlohmann::json to_json() const;
    static SoftTreeOptions from_json(const nlohmann::json& j);
};

// Inner nodes are stored in heap order: node i has children 2i+1 (left) and
// 2i+2 (right); leaves follow the inner nodes in the same order. The gate of
// node i is the probability of taking the right branch.
struct TreeRouting {
    torch::Tensor gate;      // [n, inner]
    torch::Tensor reach;     // [n, inner] probability of arriving at each inner node
    torch::Tensor leaf_prob; // [n, leaves]
};

struct PathStep {
    std::int64_t node{0};
    int depth{0};
    double activation{0.0}; // w . z + b
    double p_right{0.0};
    bool went_right{false};
};

struct HardPath {
    std::vector<PathStep> steps;
    std::int64_t leaf{0};
    std::vector<double> leaf_distribution;
};

class SoftDecisionTreeImpl : public torch::nn::Module {
public:
    SoftDecisionTreeImpl(std::int64_t num_concepts, const SoftTreeOptions& options);

    TreeRouting route(const torch::Tensor& z) const;
    torch::Tensor forward(const torch::Tensor& z) const; // class distribution [n, C]
    torch::Tensor leaf_distributions() const;            // softmax of leaf logits [leaves, C]

    // Sum of |w| over all gates.
    torch::Tensor l1_term() const;
    // Per inner node, cross-entropy between its batch-average right-branch
    // probability (weighted by arrival probability) and 0.5, minus log 2 so a
    // perfectly balanced node contributes 0; node terms decay as 2^-depth.
    torch::Tensor balance_term(const TreeRouting& routing) const;
    torch::Tensor complexity(const TreeRouting& routing) const { return l1_term() + balance_term(routing); }

    // Greedy descent through the higher-probability child of each node; an
    // exact 0.5 tie goes left. `z` is a single concept vector [k_c].
    HardPath hard_path(const torch::Tensor& z) const;

    const SoftTreeOptions& options() const { return options_; }
    std::int64_t num_inner() const { return (std::int64_t{1} << options_.depth) - 1; }
    std::int64_t num_leaves() const { return std::int64_t{1} << options_.depth; }

    torch::Tensor weights;     // [inner, k_c]
    torch::Tensor bias;        // [inner]
    torch::Tensor leaf_logits; // [leaves, C]

private:
    SoftTreeOptions options_;
};
TORCH_MODULE(SoftDecisionTree);

struct HeadTask {
    std::string name;
    SoftTreeOptions tree;
};

class ExplanationHeadImpl : public torch::nn::Module {
public:
    ExplanationHeadImpl(std::int64_t num_concepts, double threshold = 0.5, double mask_init = 2.0);

    // Appends a mask column and a tree; returns the new task index. Throws
    // ConfigError on a duplicate name.
    std::int64_t add_task(const std::string& name, const SoftTreeOptions& tree);

    std::int64_t num_concepts() const { return num_concepts_; }
    std::int64_t num_tasks() const { return static_cast<std::int64_t>(tasks_.size()); }
    const std::vector<HeadTask>& tasks() const { return tasks_; }
    std::int64_t task_index(const std::string& name) const;
    double threshold() const { return threshold_; }
    void set_threshold(double tau) { threshold_ = tau; }
    // Hard forward with soft (sigmoid) gradients in Soft mode.
    void set_straight_through(bool enabled) { straight_through_ = enabled; }

    torch::Tensor mask_logits() const; // [k_c, k_y]
    torch::Tensor soft_mask() const;   // sigmoid(mask_logits)
    torch::Tensor hard_mask() const;   // 1[soft_mask > threshold], float
    torch::Tensor& mask_column(std::int64_t k);

    torch::Tensor mask_apply(const torch::Tensor& z, std::int64_t k, MaskMode mode) const;
    std::vector<torch::Tensor> forward(const torch::Tensor& z, MaskMode mode) const;

    // Sum of squared soft mask entries, optionally over a subset of tasks.
    torch::Tensor mask_sparsity_penalty(const std::vector<std::int64_t>* task_subset = nullptr) const;

    const SoftDecisionTree& tree(std::int64_t k) const;
    SoftDecisionTree& tree(std::int64_t k);

    // Trainable tensors owned by task k: its mask column and tree.
    std::vector<torch::Tensor> task_parameters(std::int64_t k);

    nlohmann::json to_json() const;
    // Structure only; parameter values come from load_module.
    static std::shared_ptr<ExplanationHeadImpl> from_json(const nlohmann::json& j);

private:
    void check_task(std::int64_t k) const;

    std::int64_t num_concepts_;
    double threshold_;
    double mask_init_;
    bool straight_through_{false};
    std::vector<HeadTask> tasks_;
    std::vector<torch::Tensor> mask_columns_;
    std::vector<SoftDecisionTree> trees_;
};
TORCH_MODULE(ExplanationHead);

struct RuleTerm {
    std::int64_t concept_index{0};
    double coefficient{0.0};
};

// One inner node rendered as "sum(coef * z) + bias > 0 -> right".
struct Rule {
    std::int64_t node{0};
    int depth{0};
    std::vector<RuleTerm> terms;
    double bias{0.0};
    // No selected concept has a nonzero weight: the branch is fixed.
    bool constant{false};
    bool constant_right{false};
    std::optional<double> reach_mass;
};

struct RuleSet {
    std::vector<std::int64_t> concepts;
    std::vector<Rule> rules;
    std::vector<std::vector<double>> leaf_distributions;
    std::vector<std::int64_t> pruned_nodes;

    std::string to_text(const std::vector<std::string>& concept_names = {}) const;
    nlohmann::json to_json() const;
};

// Rules restricted to the concepts selected by `hard_mask_column` ([k_c] of
// {0,1}). With `reach_mass` ([inner], average arrival probability on some
// evaluation set), nodes below `prune_below` are dropped from the rule list.
RuleSet extract_rules(const SoftDecisionTree& tree, const torch::Tensor& hard_mask_column,
                      const std::optional<torch::Tensor>& reach_mass = std::nullopt, double prune_below = 0.01);

// Average arrival probability per inner node over the rows of z, [inner].
torch::Tensor reach_mass(const SoftDecisionTree& tree, const torch::Tensor& z);

// Inner nodes whose average arrival probability is at least prune_below.
std::int64_t pruned_node_count(const torch::Tensor& reach_mass, double prune_below = 0.01);

} // namespace cbsm
