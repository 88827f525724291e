#pragma once

// Joint optimization of the concept model and explanation head, refinement on
// self-generated images, and extension of a trained head to unseen tasks.

#include "cbsm/blackbox.hpp"
#include "cbsm/concept_model.hpp"
#include "cbsm/data.hpp"
#include "cbsm/explanation_head.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace cbsm {

struct LossWeights {
    double lambda1{100.0}; // fidelity
    double lambda2{1.0};   // explainability
    double lambda3{1.0};   // mask sparsity, inside explainability
    double lambda4{0.1};   // tree complexity, inside explainability

    void validate() const;
    nlohmann::json to_json() const;
    static LossWeights from_json(const nlohmann::json& j);
};

// All terms are batch means of per-sample quantities except the mask penalty
// and tree complexity, which are properties of the parameters.
struct LossBreakdown {
    torch::Tensor recon_log_lik;
    torch::Tensor kl;
    torch::Tensor identifiability; // -recon_log_lik + kl
    torch::Tensor fidelity;        // KL(black box || surrogate), mean over tasks
    torch::Tensor tc;
    torch::Tensor mask_penalty;
    torch::Tensor tree_complexity; // summed over trees
    torch::Tensor explainability;  // tc + lambda3 * mask_penalty + lambda4 * tree_complexity
    torch::Tensor total;           // identifiability + lambda1 * fidelity + lambda2 * explainability

    // (name, value) in a fixed order: the order in which terms are checked for NaN.
    std::vector<std::pair<std::string, double>> values() const;
    nlohmann::json to_json() const;
};

// Mean over rows of KL(target || predicted) for row-stochastic [n, C] tensors.
torch::Tensor distribution_kl(const torch::Tensor& target, const torch::Tensor& predicted);

// `targets[k]` is the black-box distribution for head task k on x. `noise` is
// the standard normal draw used for the reparameterized sample.
LossBreakdown composite_loss(ConceptModel& model, ExplanationHead& head, const torch::Tensor& x,
                             const std::vector<torch::Tensor>& targets, const LossWeights& weights,
                             const torch::Tensor& noise, MaskMode mode = MaskMode::Soft);

// Images with black-box targets precomputed in head-task order.
struct SurrogateData {
    ImageBatch images;
    std::vector<torch::Tensor> targets;

    std::int64_t size() const { return images.size(); }
    SurrogateData select(const torch::Tensor& index) const;
};

// Throws ConfigError when `blackboxes` has no model for one of `task_names`.
std::vector<torch::Tensor> blackbox_targets(const BlackBoxSet& blackboxes, const std::vector<std::string>& task_names,
                                            const ImageBatch& images);
SurrogateData make_surrogate_data(const BlackBoxSet& blackboxes, const std::vector<std::string>& task_names,
                                  const ImageBatch& images);

// Posterior means, computed without autograd in chunks.
torch::Tensor encode_means(ConceptModel& model, const torch::Tensor& pixels, std::int64_t chunk = 512);

// Per head task: fraction of rows where the argmax of the hard-masked soft
// forward on posterior means equals the argmax of the target.
std::vector<double> agreement_accuracy(ConceptModel& model, const ExplanationHead& head, const SurrogateData& data);

struct OptimizerSettings {
    std::int64_t batch_size{128};
    double lr_model{1e-3};
    double lr_tree{1e-2};
    double lr_mask{3e-3};

    nlohmann::json to_json() const;
    static OptimizerSettings from_json(const nlohmann::json& j);
};

struct TrainConfig {
    int epochs{16};
    // lambda3 ramps linearly from 0 to its full value over these epochs.
    int sparsity_warmup_epochs{6};
    bool straight_through{true};
    OptimizerSettings optimizer;
    LossWeights weights;
    std::uint64_t seed{0};

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// Called once per epoch with the JSON-lines record.
using EpochLogger = std::function<void(const nlohmann::json&)>;

// Returns the per-epoch records. Throws DataError on an empty training set and
// NumericalError naming the first non-finite loss term.
std::vector<nlohmann::json> train(ConceptModel& model, ExplanationHead& head, const SurrogateData& train_data,
                                  const SurrogateData* eval_data, const TrainConfig& cfg,
                                  const EpochLogger& logger = {});

struct RelatedSplit {
    std::int64_t task{0};
    std::vector<std::int64_t> related;
    std::vector<std::int64_t> unrelated;
};

RelatedSplit related_split(const ExplanationHead& head, std::int64_t task);

// Scatter [n, |R|] and [n, |U|] values back into [n, k_c] concept vectors.
torch::Tensor combine(const torch::Tensor& z_related, const torch::Tensor& z_unrelated, const RelatedSplit& split);

enum class RelatedSampler { Prior, Grid };

struct RefineConfig {
    // Related-concept draws per generated batch and unrelated draws per related draw.
    std::int64_t n_r{64};
    std::int64_t n_u{2};
    RelatedSampler sampler{RelatedSampler::Prior};
    // Values per related coordinate for the grid sampler; draws cycle through
    // the cartesian grid.
    std::vector<double> grid{-2.0, -1.0, 0.0, 1.0, 2.0};
    int epochs{3};
    // One sweep = one generated batch per task.
    int sweeps_per_epoch{40};
    // Real minibatches after every generated one; 0 trains on generated data only.
    int real_per_generated{3};
    bool straight_through{true};
    OptimizerSettings optimizer;
    LossWeights weights;
    std::uint64_t seed{0};

    void validate() const;
    nlohmann::json to_json() const;
    static RefineConfig from_json(const nlohmann::json& j);
};

// Generated images for head task k: n_r related draws, each paired with n_u
// unrelated draws, decoded and squashed to [0, 1]. Rows are grouped by related draw.
torch::Tensor generate_for_task(ConceptModel& model, const RelatedSplit& split, const RefineConfig& cfg,
                                std::int64_t sweep);

std::vector<nlohmann::json> refine(ConceptModel& model, ExplanationHead& head, const BlackBoxSet& blackboxes,
                                   const SurrogateData& real_data, const SurrogateData* eval_data,
                                   const RefineConfig& cfg, const EpochLogger& logger = {});

struct NewTask {
    std::string name;
    SoftTreeOptions tree;
};

struct GeneralizeConfig {
    int epochs{8};
    int sparsity_warmup_epochs{3};
    bool straight_through{true};
    OptimizerSettings optimizer;
    LossWeights weights;
    std::uint64_t seed{0};

    nlohmann::json to_json() const;
    static GeneralizeConfig from_json(const nlohmann::json& j);
};

// Trains only the mask columns and trees of `tasks` on fixed concept
// posteriors; rows are resampled from (mu, log_var) each step unless log_var
// is undefined, in which case mu is used as is. `targets[i]` belongs to tasks[i].
struct HeadTrainingSet {
    ConceptPosterior concepts;
    std::vector<torch::Tensor> targets;

    std::int64_t size() const { return concepts.mu.defined() ? concepts.mu.size(0) : 0; }
};

std::vector<nlohmann::json> train_head_tasks(ExplanationHead& head, const std::vector<std::int64_t>& tasks,
                                             const HeadTrainingSet& data, const HeadTrainingSet* eval_data,
                                             const GeneralizeConfig& cfg, const std::string& stage,
                                             const EpochLogger& logger = {});

// Agreement of the hard-masked head on `concepts.mu` for each of `tasks`.
std::vector<double> head_agreement(const ExplanationHead& head, const std::vector<std::int64_t>& tasks,
                                   const HeadTrainingSet& data);

// Posterior over a large set, computed without autograd in chunks.
ConceptPosterior encode_posterior(ConceptModel& model, const torch::Tensor& pixels, std::int64_t chunk = 512);

// Appends one mask column and tree per new task and trains only those. The
// concept model and every existing head parameter are left untouched.
// `data.targets` holds the new tasks' black-box outputs in `tasks` order.
std::vector<nlohmann::json> generalize(ConceptModel& model, ExplanationHead& head, const std::vector<NewTask>& tasks,
                                       const SurrogateData& data, const SurrogateData* eval_data,
                                       const GeneralizeConfig& cfg, const EpochLogger& logger = {});

struct Surrogate {
    ConceptModel model{nullptr};
    ExplanationHead head{nullptr};
    nlohmann::json manifest;
};

struct HeadOptions {
    double threshold{0.5};
    double mask_init{2.0};
    double tree_beta{1.0};
    double tree_init_scale{1.0};

    nlohmann::json to_json() const;
    static HeadOptions from_json(const nlohmann::json& j);
};

// Tree options for a registered task: its default depth and class count.
SoftTreeOptions tree_options_for(const TaskSpec& task, const HeadOptions& options, int depth_override = 0);

// Freshly initialized concept model and head over `tasks`; parameter
// initialization is drawn from torch's generator seeded with `seed`.
Surrogate build_surrogate(const ConceptModelOptions& model_options, const HeadOptions& head_options,
                          const std::vector<NewTask>& tasks, std::uint64_t seed);

// Directory with manifest.json, concept_model.cbt and head.cbt. `extra` keys
// are merged into the manifest.
void save_surrogate(const Surrogate& surrogate, const std::filesystem::path& dir, const nlohmann::json& extra = {});
Surrogate load_surrogate(const std::filesystem::path& dir);

} // namespace cbsm
