#pragma once

// The single JSON document that configures every pipeline stage, plus seed
// derivation and per-stage run manifests.

#include "cbsm/blackbox.hpp"
#include "cbsm/concept_model.hpp"
#include "cbsm/data.hpp"
#include "cbsm/explain.hpp"
#include "cbsm/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

namespace cbsm {

struct RunConfig {
    DatasetSpec dataset;
    std::int64_t num_samples{25000};
    std::string mnist_dir;

    std::vector<std::string> tasks{training_task_names()};
    std::vector<std::string> generalize_tasks{generalization_task_names()};
    // Overrides of the registry's default tree depth, by task name.
    std::map<std::string, int> tree_depths;

    ConceptModelOptions model;
    HeadOptions head;
    BlackBoxTrainConfig blackbox;
    TrainConfig train;
    RefineConfig refine;
    GeneralizeConfig generalize;

    int mi_bins{20};
    int traversal_steps{7};
    double traversal_lo{-3.0};
    double traversal_hi{3.0};
    std::vector<std::int64_t> efficacy_sizes{1000, 5000, 20000};
    std::vector<std::uint64_t> efficacy_seeds{0, 1, 2};

    std::uint64_t seed{0};

    // Throws ConfigError for unknown tasks, bad dimensions or weights; prints
    // a warning when k_c is smaller than the number of training tasks.
    void validate() const;

    // Everything except mnist_dir, which names an input location rather than
    // part of the experiment.
    nlohmann::json to_json() const;
    // Unknown top-level keys are rejected. Stage seeds are re-derived from `seed`.
    static RunConfig from_json(const nlohmann::json& j);

    // Copies derive_seed(seed, stage) into every stage's seed field.
    void apply_seed(std::uint64_t top_level);

    // SHA-256 of the canonical (sorted-key, compact) serialization of to_json().
    std::string hash() const;

    std::vector<NewTask> training_tasks() const;
    std::vector<NewTask> held_out_tasks() const;
    EfficacyConfig efficacy() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

// First 8 bytes (big-endian) of SHA-256("<stage>:<seed>").
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage);

// run.json in `dir`: stage name, config hash, stage seed, and the SHA-256 of
// every other file under `dir` (relative paths, sorted).
nlohmann::json write_run_manifest(const std::filesystem::path& dir, const std::string& stage, const RunConfig& cfg,
                                  std::uint64_t stage_seed, const nlohmann::json& extra = {});

// Appends one compact JSON object per line; safe to share between threads.
class JsonlWriter {
public:
    explicit JsonlWriter(const std::filesystem::path& path);
    void write(const nlohmann::json& record);

private:
    std::filesystem::path path_;
    std::mutex mutex_;
};

} // namespace cbsm
