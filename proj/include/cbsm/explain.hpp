#pragma once

// Global and local explanations, concept traversals, and the evaluation suite
// (agreement with the black boxes, mutual-information flow, data efficacy).

#include "cbsm/blackbox.hpp"
#include "cbsm/concept_model.hpp"
#include "cbsm/explanation_head.hpp"
#include "cbsm/training.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace cbsm {

struct GlobalExplanation {
    std::string task;
    std::vector<std::int64_t> related;
    std::vector<double> soft_mask;
    // Set when no concept clears the threshold.
    bool empty{false};

    nlohmann::json to_json() const;
};

GlobalExplanation global_explanation(const ExplanationHead& head, const std::string& task);

struct LocalExplanation {
    std::int64_t sample_id{-1};
    std::string task;
    // (concept index, posterior mean) for the related concepts only.
    std::vector<std::pair<std::int64_t, double>> concept_values;
    HardPath path;
    std::vector<double> surrogate;
    std::vector<double> blackbox; // empty when no black box was given
    std::int64_t predicted{0};
    std::int64_t hard_path_predicted{0};
    bool agrees{false};

    nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const;
};

// `image` is a single [H, W] picture.
LocalExplanation local_explanation(ConceptModel& model, const ExplanationHead& head, const std::string& task,
                                   const torch::Tensor& image, std::int64_t sample_id,
                                   const BlackBox* blackbox = nullptr);

struct TraversalGrid {
    torch::Tensor base;    // [k_c]
    std::int64_t concept_index{0};
    std::vector<double> values;
    torch::Tensor vectors; // [n, k_c]: base with one coordinate replaced
    torch::Tensor images;  // [n, H, W] in [0, 1]
};

// n evenly spaced values over [lo, hi].
std::vector<double> traversal_values(int n, double lo = -3.0, double hi = 3.0);

// Throws ConfigError for an out-of-range concept or a value outside [lo, hi].
TraversalGrid traverse(ConceptModel& model, const torch::Tensor& base, std::int64_t concept_index,
                       const std::vector<double>& values, double lo = -3.0, double hi = 3.0);

struct TaskFidelity {
    std::string task;
    double agreement{0.0};
    double hard_path_agreement{0.0};
    std::int64_t num_concepts{0};
    int depth{0};
    std::int64_t num_nodes{0}; // inner nodes reached by >= 1% of the mass
    // Samples where every gate on the hard path is outside [0.4, 0.6], and how
    // many of those disagree with the soft forward's argmax.
    std::int64_t sharp_samples{0};
    std::int64_t sharp_mismatches{0};

    nlohmann::json to_json() const;
};

// Throws DataError on an empty test set.
std::vector<TaskFidelity> fidelity_report(ConceptModel& model, const ExplanationHead& head,
                                          const SurrogateData& test);

// Plug-in mutual information (nats) between a quantile-binned real variable
// and a discrete label. Tied values share a bin. Throws DataError when there
// are fewer samples than bins.
double binned_mutual_information(const torch::Tensor& values, const torch::Tensor& labels, int bins = 20);

// [k_c, tasks] matrix of binned MI between each concept and each label vector.
torch::Tensor mi_flow(const torch::Tensor& concepts, const std::vector<torch::Tensor>& labels, int bins = 20);

// Sum of mi[j, k] over entries with hard_mask[j, k] = 1.
double selected_information(const torch::Tensor& mi, const torch::Tensor& hard_mask);

struct EfficacyConfig {
    std::vector<std::int64_t> sizes{1000, 5000, 20000};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    ConceptModelOptions model;
    HeadOptions head;
    TrainConfig train;
    RefineConfig refine;

    nlohmann::json to_json() const;
    static EfficacyConfig from_json(const nlohmann::json& j);
};

struct EfficacyRow {
    std::int64_t size{0};
    std::vector<double> without_refine; // mean agreement over tasks, per seed
    std::vector<double> with_refine;
    double median_without{0.0};
    double median_with{0.0};
};

double median(std::vector<double> values);

// For each size, trains on the first `size` rows of `pool` (one run per
// seed), measures mean agreement on `test`, refines, and measures again.
// Throws ConfigError for a non-positive size or one larger than the pool.
std::vector<EfficacyRow> efficacy_curve(const EfficacyConfig& cfg, const std::vector<NewTask>& tasks,
                                        const SurrogateData& pool, const SurrogateData& test,
                                        const BlackBoxSet& blackboxes, const EpochLogger& logger = {});

nlohmann::json efficacy_to_json(const std::vector<EfficacyRow>& rows);

} // namespace cbsm
