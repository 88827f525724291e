#include "cbsm/run_config.hpp"

#include "cbsm/error.hpp"
#include "cbsm/tensor_io.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>

namespace cbsm {

namespace {

const std::set<std::string> kTopLevelKeys{"dataset", "num_samples", "mnist_dir", "tasks",    "generalize_tasks",
                                          "tree_depths", "model",   "head",      "blackbox", "train",
                                          "refine",  "generalize",  "explain",   "efficacy", "seed"};

std::vector<NewTask> task_list(const std::vector<std::string>& names, const RunConfig& cfg)
{
    std::vector<NewTask> out;
    for (const auto& name : names) {
        const auto& spec = find_task(name);
        const auto it = cfg.tree_depths.find(name);
        out.push_back({name, tree_options_for(spec, cfg.head, it == cfg.tree_depths.end() ? 0 : it->second)});
    }
    return out;
}

} // namespace

void RunConfig::validate() const
{
    dataset.validate();
    model.validate();
    if (model.height != dataset.height || model.width != dataset.width) {
        throw ConfigError("model image size does not match the dataset canvas");
    }
    if (num_samples < 1) {
        throw ConfigError("num_samples must be positive");
    }
    if (tasks.empty()) {
        throw ConfigError("at least one training task is required");
    }
    std::set<std::string> seen;
    for (const auto* list : {&tasks, &generalize_tasks}) {
        for (const auto& name : *list) {
            find_task(name);
            if (!seen.insert(name).second) {
                throw ConfigError("task '" + name + "' is listed more than once");
            }
        }
    }
    for (const auto& [name, depth] : tree_depths) {
        find_task(name);
        if (depth < 1 || depth > 12) {
            throw ConfigError("tree depth for '" + name + "' must be in [1, 12]");
        }
    }
    train.weights.validate();
    refine.validate();
    generalize.weights.validate();
    if (mi_bins < 1 || traversal_steps < 1 || !(traversal_lo < traversal_hi)) {
        throw ConfigError("explain settings out of range");
    }
    if (model.num_concepts < static_cast<std::int64_t>(tasks.size())) {
        std::cerr << "warning: " << model.num_concepts << " concepts for " << tasks.size()
                  << " tasks; some tasks will have to share all their concepts\n";
    }
}

nlohmann::json RunConfig::to_json() const
{
    return {{"dataset", dataset.to_json()},
            {"num_samples", num_samples},
            {"tasks", tasks},
            {"generalize_tasks", generalize_tasks},
            {"tree_depths", tree_depths},
            {"model", model.to_json()},
            {"head", head.to_json()},
            {"blackbox", blackbox.to_json()},
            {"train", train.to_json()},
            {"refine", refine.to_json()},
            {"generalize", generalize.to_json()},
            {"explain",
             {{"mi_bins", mi_bins},
              {"traversal_steps", traversal_steps},
              {"traversal_range", {traversal_lo, traversal_hi}}}},
            {"efficacy", {{"sizes", efficacy_sizes}, {"seeds", efficacy_seeds}}},
            {"seed", seed}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j)
{
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (!kTopLevelKeys.contains(key)) {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    RunConfig c;
    try {
        if (j.contains("dataset")) {
            c.dataset = DatasetSpec::from_json(j.at("dataset"));
        }
        c.num_samples = j.value("num_samples", c.num_samples);
        c.mnist_dir = j.value("mnist_dir", c.mnist_dir);
        c.tasks = j.value("tasks", c.tasks);
        c.generalize_tasks = j.value("generalize_tasks", c.generalize_tasks);
        c.tree_depths = j.value("tree_depths", c.tree_depths);
        if (j.contains("model")) {
            c.model = ConceptModelOptions::from_json(j.at("model"));
        }
        if (j.contains("head")) {
            c.head = HeadOptions::from_json(j.at("head"));
        }
        if (j.contains("blackbox")) {
            c.blackbox = BlackBoxTrainConfig::from_json(j.at("blackbox"));
        }
        if (j.contains("train")) {
            c.train = TrainConfig::from_json(j.at("train"));
        }
        if (j.contains("refine")) {
            c.refine = RefineConfig::from_json(j.at("refine"));
        }
        if (j.contains("generalize")) {
            c.generalize = GeneralizeConfig::from_json(j.at("generalize"));
        }
        if (j.contains("explain")) {
            const auto& e = j.at("explain");
            c.mi_bins = e.value("mi_bins", c.mi_bins);
            c.traversal_steps = e.value("traversal_steps", c.traversal_steps);
            if (e.contains("traversal_range")) {
                c.traversal_lo = e.at("traversal_range").at(0).get<double>();
                c.traversal_hi = e.at("traversal_range").at(1).get<double>();
            }
        }
        if (j.contains("efficacy")) {
            c.efficacy_sizes = j.at("efficacy").value("sizes", c.efficacy_sizes);
            c.efficacy_seeds = j.at("efficacy").value("seeds", c.efficacy_seeds);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    c.apply_seed(j.value("seed", std::uint64_t{0}));
    c.validate();
    return c;
}

void RunConfig::apply_seed(std::uint64_t top_level)
{
    seed = top_level;
    dataset.seed = derive_seed(seed, "data");
    blackbox.seed = derive_seed(seed, "blackbox");
    train.seed = derive_seed(seed, "train");
    refine.seed = derive_seed(seed, "refine");
    generalize.seed = derive_seed(seed, "generalize");
}

std::string RunConfig::hash() const
{
    return sha256_hex(to_json().dump());
}

std::vector<NewTask> RunConfig::training_tasks() const
{
    return task_list(tasks, *this);
}

std::vector<NewTask> RunConfig::held_out_tasks() const
{
    return task_list(generalize_tasks, *this);
}

EfficacyConfig RunConfig::efficacy() const
{
    EfficacyConfig e;
    e.sizes = efficacy_sizes;
    e.seeds = efficacy_seeds;
    e.model = model;
    e.head = head;
    e.train = train;
    e.refine = refine;
    return e;
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return RunConfig::from_json(j);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage)
{
    const auto hex = sha256_hex(std::string(stage) + ":" + std::to_string(seed));
    return std::stoull(hex.substr(0, 16), nullptr, 16);
}

nlohmann::json write_run_manifest(const std::filesystem::path& dir, const std::string& stage, const RunConfig& cfg,
                                  std::uint64_t stage_seed, const nlohmann::json& extra)
{
    std::vector<std::string> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file()) {
            const auto rel = std::filesystem::relative(entry.path(), dir).generic_string();
            if (rel != "run.json") {
                files.push_back(rel);
            }
        }
    }
    std::sort(files.begin(), files.end());
    nlohmann::json checksums = nlohmann::json::object();
    for (const auto& f : files) {
        checksums[f] = sha256_file(dir / f);
    }
    nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
    manifest["stage"] = stage;
    manifest["config_hash"] = cfg.hash();
    manifest["seed"] = cfg.seed;
    manifest["stage_seed"] = stage_seed;
    manifest["files"] = checksums;
    std::ofstream(dir / "run.json") << manifest.dump(2) << "\n";
    return manifest;
}

JsonlWriter::JsonlWriter(const std::filesystem::path& path) : path_(path)
{
    std::ofstream truncate(path_, std::ios::trunc);
    if (!truncate) {
        throw Error("cannot open " + path_.string() + " for writing");
    }
}

void JsonlWriter::write(const nlohmann::json& record)
{
    const std::lock_guard<std::mutex> lock(mutex_);
    std::ofstream(path_, std::ios::app) << record.dump() << "\n";
}

} // namespace cbsm
