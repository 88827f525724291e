// cbsm: command-line driver for the concept bottleneck surrogate pipeline.
//
//   make-data -> train-blackbox -> train -> refine -> generalize -> explain / evaluate / traverse
//
// Every stage reads and writes under one run directory (--out). Exit codes:
// 0 success, 1 usage/config/data error, 2 missing dependency, 3 numerical failure.

#include "cbsm/blackbox.hpp"
#include "cbsm/concept_model.hpp"
#include "cbsm/data.hpp"
#include "cbsm/error.hpp"
#include "cbsm/explain.hpp"
#include "cbsm/explanation_head.hpp"
#include "cbsm/image_io.hpp"
#include "cbsm/run_config.hpp"
#include "cbsm/tensor_io.hpp"
#include "cbsm/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string device{"cpu"};
    std::optional<int> epochs;
    std::optional<std::int64_t> n_r;
    std::optional<std::int64_t> n_u;
    bool generated_only{false};
    std::string tasks;
    std::string mnist;
    std::optional<std::int64_t> sample_id;
    std::string task;
    std::optional<std::int64_t> concept_index;
    std::string from;
    bool efficacy{false};
    bool baseline{false};
};

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

void write_json(const fs::path& path, const json& j)
{
    std::ofstream(path) << j.dump(2) << "\n";
}

class Pipeline {
public:
    Pipeline(const Options& opt, const std::string& stage) : opt_(opt)
    {
        if (opt.device != "cpu") {
            throw cbsm::DependencyError("device '" + opt.device + "' is not available; only cpu is supported");
        }
        cfg_ = opt.config.empty() ? cbsm::RunConfig::from_json(json::object()) : cbsm::load_run_config(opt.config);
        if (opt.seed) {
            cfg_.apply_seed(*opt.seed);
        }
        if (!opt.mnist.empty()) {
            cfg_.mnist_dir = opt.mnist;
        }
        if (opt.epochs) {
            if (stage == "train-blackbox") {
                cfg_.blackbox.epochs = *opt.epochs;
            } else if (stage == "train" || stage == "evaluate") {
                cfg_.train.epochs = *opt.epochs;
            } else if (stage == "refine") {
                cfg_.refine.epochs = *opt.epochs;
            } else if (stage == "generalize") {
                cfg_.generalize.epochs = *opt.epochs;
            }
        }
        if (opt.n_r) {
            cfg_.refine.n_r = *opt.n_r;
        }
        if (opt.n_u) {
            cfg_.refine.n_u = *opt.n_u;
        }
        if (opt.generated_only) {
            cfg_.refine.real_per_generated = 0;
        }
        if (!opt.tasks.empty()) {
            (stage == "generalize" ? cfg_.generalize_tasks : cfg_.tasks) = split_list(opt.tasks);
        }
        cfg_.validate();
        if (opt.out.empty()) {
            throw cbsm::ConfigError("--out is required");
        }
        root_ = opt.out;
    }

    void make_data()
    {
        if (cfg_.mnist_dir.empty()) {
            throw cbsm::ConfigError("no MNIST directory given; pass --mnist DIR (or set mnist_dir in the config)");
        }
        cbsm::DigitPool pool;
        try {
            pool = cbsm::ingest_mnist(cfg_.mnist_dir, cbsm::MnistPart::Train);
        } catch (const cbsm::DataError& e) {
            throw cbsm::DataError(std::string(e.what()) + " (check --mnist)");
        }
        const auto data = cbsm::synthesize_triple(cfg_.dataset, pool, cfg_.num_samples);
        const auto splits = cbsm::split(data, cfg_.dataset);
        const auto dir = fresh_dir("data");
        cbsm::save_dataset(splits, cfg_.dataset, dir);
        finish(dir, "make-data", cfg_.dataset.seed);
        std::cout << "wrote " << splits.train.size() << "/" << splits.val.size() << "/" << splits.test.size()
                  << " train/val/test images to " << dir.string() << "\n";
    }

    void train_blackbox()
    {
        const auto splits = load_data();
        const auto dir = fresh_dir("blackbox");
        json metrics = json::object();
        std::vector<std::string> names = cfg_.tasks;
        names.insert(names.end(), cfg_.generalize_tasks.begin(), cfg_.generalize_tasks.end());
        for (const auto& name : names) {
            auto bb_cfg = cfg_.blackbox;
            bb_cfg.seed = cbsm::derive_seed(cfg_.blackbox.seed, name);
            cbsm::BlackBoxReport report;
            const auto model = cbsm::train_blackbox(cbsm::find_task(name), splits.train, splits.val, bb_cfg, &report);
            const double test_acc = cbsm::blackbox_accuracy(*model, splits.test);
            const json m{{"val_accuracy", report.val_accuracy}, {"test_accuracy", test_acc},
                         {"epoch_loss", report.epoch_loss}};
            cbsm::save_blackbox(*model, m, bb_cfg.seed, dir / name);
            metrics[name] = m;
            std::cout << name << ": val " << report.val_accuracy << " test " << test_acc << "\n";
        }
        write_json(dir / "metrics.json", metrics);
        finish(dir, "train-blackbox", cfg_.blackbox.seed);
    }

    void train()
    {
        const auto splits = load_data();
        const auto blackboxes = load_blackboxes(cfg_.tasks);
        const auto train_data = cbsm::make_surrogate_data(blackboxes, cfg_.tasks, splits.train.images);
        const auto val_data = cbsm::make_surrogate_data(blackboxes, cfg_.tasks, splits.val.images);
        auto s = cbsm::build_surrogate(cfg_.model, cfg_.head, cfg_.training_tasks(), cfg_.train.seed);
        const auto dir = fresh_dir("surrogate");
        cbsm::JsonlWriter log(dir / "metrics.jsonl");
        cbsm::train(s.model, s.head, train_data, &val_data, cfg_.train, progress(log));
        save(s, dir, splits, blackboxes, "train", cfg_.train.seed);
    }

    void refine()
    {
        auto s = cbsm::load_surrogate(root_ / "surrogate");
        const auto splits = load_data();
        const auto names = head_tasks(s.head);
        const auto blackboxes = load_blackboxes(names);
        const auto train_data = cbsm::make_surrogate_data(blackboxes, names, splits.train.images);
        const auto val_data = cbsm::make_surrogate_data(blackboxes, names, splits.val.images);
        const auto dir = fresh_dir("refined");
        cbsm::JsonlWriter log(dir / "metrics.jsonl");
        cbsm::refine(s.model, s.head, blackboxes, train_data, &val_data, cfg_.refine, progress(log));
        save(s, dir, splits, blackboxes, "refine", cfg_.refine.seed);
    }

    void generalize()
    {
        auto s = cbsm::load_surrogate(root_ / "refined");
        const auto splits = load_data();
        const auto blackboxes = load_blackboxes(cfg_.generalize_tasks);
        const auto train_data = cbsm::make_surrogate_data(blackboxes, cfg_.generalize_tasks, splits.train.images);
        const auto val_data = cbsm::make_surrogate_data(blackboxes, cfg_.generalize_tasks, splits.val.images);
        const auto dir = fresh_dir("generalized");
        cbsm::JsonlWriter log(dir / "metrics.jsonl");
        cbsm::generalize(s.model, s.head, cfg_.held_out_tasks(), train_data, &val_data, cfg_.generalize,
                         progress(log));
        save(s, dir, splits, load_blackboxes(head_tasks(s.head)), "generalize", cfg_.generalize.seed);
    }

    void explain()
    {
        const auto [source, s_const] = load_latest();
        auto s = s_const;
        const auto splits = load_data();
        const auto dir = fresh_dir(opt_.sample_id ? "explain_local" : "explain");
        const auto names = head_tasks(s.head);
        if (opt_.sample_id) {
            const auto task = opt_.task.empty() ? names.front() : opt_.task;
            const auto image = find_image(splits, *opt_.sample_id);
            const auto blackboxes = load_blackboxes({task});
            const auto local =
                cbsm::local_explanation(s.model, s.head, task, image, *opt_.sample_id, blackboxes.front().get());
            write_json(dir / "local.json", local.to_json(cbsm::find_task(task).class_names));
            torch::Tensor recon;
            {
                torch::NoGradGuard no_grad;
                recon = torch::sigmoid(s.model->decode(s.model->encode(image.unsqueeze(0)).mu))[0];
            }
            cbsm::write_png(dir / "local.png",
                            cbsm::local_explanation_figure(image, recon, local.surrogate, local.blackbox));
            std::cout << local.to_json(cbsm::find_task(task).class_names).dump(2) << "\n";
        } else {
            json global = json::array();
            std::ofstream rules(dir / "rules.txt");
            const auto test_mu = cbsm::encode_means(s.model, splits.test.images.pixels);
            const auto base = test_mu[0];
            for (std::int64_t k = 0; k < s.head->num_tasks(); ++k) {
                const auto& name = names[static_cast<std::size_t>(k)];
                const auto g = cbsm::global_explanation(s.head, name);
                const auto masked = s.head->mask_apply(test_mu, k, cbsm::MaskMode::Hard);
                const auto rule_set = cbsm::extract_rules(s.head->tree(k), s.head->hard_mask().select(1, k),
                                                          cbsm::reach_mass(s.head->tree(k), masked));
                auto entry = g.to_json();
                entry["rules"] = rule_set.to_json();
                global.push_back(entry);
                rules << "== " << name << " ==\n" << rule_set.to_text() << "\n";
                if (g.related.size() == 2) {
                    cbsm::write_png(dir / ("regions_" + name + ".png"),
                                    cbsm::decision_region_plot(s.model, s.head, k, g.related[0], g.related[1], base, 9,
                                                               cfg_.traversal_lo, cfg_.traversal_hi));
                }
            }
            write_json(dir / "global.json", global);
            cbsm::write_png(dir / "mask.png", cbsm::heatmap(s.head->soft_mask(), 24, 1.0));
            const auto values = cbsm::traversal_values(cfg_.traversal_steps, cfg_.traversal_lo, cfg_.traversal_hi);
            for (std::int64_t j = 0; j < s.model->options().num_concepts; ++j) {
                const auto grid = cbsm::traverse(s.model, base, j, values, cfg_.traversal_lo, cfg_.traversal_hi);
                cbsm::write_png(dir / ("traversal_z" + std::to_string(j) + ".png"), cbsm::tile_row(grid.images));
            }
            std::cout << global.dump(2) << "\n";
        }
        finish(dir, "explain", cfg_.seed, {{"checkpoint", source}});
    }

    void traverse()
    {
        if (!opt_.concept_index) {
            throw cbsm::ConfigError("traverse needs --concept J");
        }
        const auto [source, s_const] = load_latest();
        auto s = s_const;
        const auto splits = load_data();
        const auto id = opt_.sample_id.value_or(splits.test.images.ids[0].item<std::int64_t>());
        const auto image = find_image(splits, id);
        const auto base = cbsm::encode_means(s.model, image.unsqueeze(0))[0];
        const auto values = cbsm::traversal_values(cfg_.traversal_steps, cfg_.traversal_lo, cfg_.traversal_hi);
        const auto grid = cbsm::traverse(s.model, base, *opt_.concept_index, values, cfg_.traversal_lo,
                                         cfg_.traversal_hi);
        const auto dir = fresh_dir("traverse");
        const auto name = "z" + std::to_string(*opt_.concept_index);
        cbsm::write_png(dir / ("traversal_" + name + ".png"), cbsm::tile_row(grid.images));
        std::vector<std::vector<double>> vectors;
        for (std::int64_t i = 0; i < grid.vectors.size(0); ++i) {
            const auto row = grid.vectors[i].to(torch::kFloat64).contiguous();
            vectors.emplace_back(row.data_ptr<double>(), row.data_ptr<double>() + row.numel());
        }
        write_json(dir / ("traversal_" + name + ".json"),
                   {{"sample_id", id}, {"concept", *opt_.concept_index}, {"values", values}, {"vectors", vectors}});
        finish(dir, "traverse", cfg_.seed, {{"checkpoint", source}});
    }

    void evaluate()
    {
        const auto splits = load_data();
        auto base = cbsm::load_surrogate(root_ / "surrogate");
        auto refined = cbsm::load_surrogate(root_ / "refined");
        const auto train_names = head_tasks(base.head);
        const auto blackboxes = load_blackboxes(train_names);
        const auto test = cbsm::make_surrogate_data(blackboxes, train_names, splits.test.images);
        const auto before = cbsm::fidelity_report(base.model, base.head, test);
        const auto after = cbsm::fidelity_report(refined.model, refined.head, test);

        json table = json::array();
        for (std::size_t k = 0; k < after.size(); ++k) {
            table.push_back(row(after[k], before[k].agreement, after[k].agreement));
        }

        std::optional<cbsm::Surrogate> generalized;
        if (fs::exists(root_ / "generalized" / "manifest.json")) {
            generalized = cbsm::load_surrogate(root_ / "generalized");
            const auto all_names = head_tasks(generalized->head);
            const std::vector<std::string> held(all_names.begin() + static_cast<std::ptrdiff_t>(train_names.size()),
                                                all_names.end());
            const auto held_bb = load_blackboxes(held);
            // Acc: the same extension applied to the unrefined model.
            std::vector<cbsm::NewTask> new_tasks;
            for (const auto& name : held) {
                const auto& t = generalized->head->tasks()[static_cast<std::size_t>(generalized->head->task_index(name))];
                new_tasks.push_back({t.name, t.tree});
            }
            const auto held_train = cbsm::make_surrogate_data(held_bb, held, splits.train.images);
            cbsm::generalize(base.model, base.head, new_tasks, held_train, nullptr, cfg_.generalize);
            const auto all_bb = load_blackboxes(all_names);
            const auto all_test = cbsm::make_surrogate_data(all_bb, all_names, splits.test.images);
            const auto g_before = cbsm::fidelity_report(base.model, base.head, all_test);
            const auto g_after = cbsm::fidelity_report(generalized->model, generalized->head, all_test);
            for (std::size_t k = train_names.size(); k < g_after.size(); ++k) {
                table.push_back(row(g_after[k], g_before[k].agreement, g_after[k].agreement));
            }
        }

        auto& final_model = generalized ? *generalized : refined;
        const auto mi = mi_matrix(final_model, splits.test);
        const auto hard = final_model.head->hard_mask();
        json report{{"table", table},
                    {"mi", tensor_rows(mi)},
                    {"selected_information", cbsm::selected_information(mi, hard.to(torch::kFloat64))}};

        const auto dir = fresh_dir("evaluate");
        if (opt_.baseline) {
            report["baseline"] = baseline_comparison(splits, blackboxes, refined);
        }
        if (opt_.efficacy) {
            const auto pool = cbsm::make_surrogate_data(blackboxes, train_names, splits.train.images);
            cbsm::JsonlWriter log(dir / "efficacy.jsonl");
            const auto rows = cbsm::efficacy_curve(cfg_.efficacy(), cfg_.training_tasks(), pool, test, blackboxes,
                                                   [&](const json& r) { log.write(r); });
            report["efficacy"] = cbsm::efficacy_to_json(rows);
        }
        write_json(dir / "report.json", report);
        std::ofstream md(dir / "table.md");
        md << "| task | #concept | depth | #node | acc | acc_s |\n|---|---|---|---|---|---|\n";
        for (const auto& r : table) {
            md << "| " << r["task"].get<std::string>() << " | " << r["#concept"] << " | " << r["depth"] << " | "
               << r["#node"] << " | " << percent(r["acc"].get<double>()) << " | "
               << percent(r["acc_s"].get<double>()) << " |\n";
        }
        cbsm::write_png(dir / "mi.png", cbsm::heatmap(mi, 24));
        cbsm::write_png(dir / "mask.png", cbsm::heatmap(final_model.head->soft_mask(), 24, 1.0));
        finish(dir, "evaluate", cfg_.seed);
        std::cout << std::ifstream(dir / "table.md").rdbuf();
    }

private:
    static std::string percent(double v)
    {
        std::ostringstream s;
        s.setf(std::ios::fixed);
        s.precision(2);
        s << 100.0 * v;
        return s.str();
    }

    static json row(const cbsm::TaskFidelity& f, double acc, double acc_s)
    {
        return {{"task", f.task},       {"#concept", f.num_concepts}, {"depth", f.depth},
                {"#node", f.num_nodes}, {"acc", acc},                 {"acc_s", acc_s},
                {"hard_path_acc_s", f.hard_path_agreement}};
    }

    static json tensor_rows(const torch::Tensor& m)
    {
        json rows = json::array();
        const auto d = m.to(torch::kFloat64).contiguous();
        for (std::int64_t i = 0; i < d.size(0); ++i) {
            rows.push_back(std::vector<double>(d[i].data_ptr<double>(), d[i].data_ptr<double>() + d.size(1)));
        }
        return rows;
    }

    torch::Tensor mi_matrix(cbsm::Surrogate& s, const cbsm::LabeledSet& data) const
    {
        std::vector<torch::Tensor> labels;
        for (const auto& t : s.head->tasks()) {
            labels.push_back(cbsm::task_labels(cbsm::find_task(t.name), data.labels));
        }
        return cbsm::mi_flow(cbsm::encode_means(s.model, data.images.pixels), labels, cfg_.mi_bins);
    }

    json baseline_comparison(const cbsm::Splits& splits, const cbsm::BlackBoxSet& blackboxes, cbsm::Surrogate& guided)
    {
        const auto names = head_tasks(guided.head);
        const auto train_data = cbsm::make_surrogate_data(blackboxes, names, splits.train.images);
        auto b = cbsm::build_surrogate(cfg_.model, cfg_.head, cfg_.training_tasks(), cfg_.train.seed);
        auto tc_only = cfg_.train;
        tc_only.weights.lambda1 = 0.0;
        cbsm::train(b.model, b.head, train_data, nullptr, tc_only);
        const auto guided_mi = mi_matrix(guided, splits.test);
        const auto base_mi = mi_matrix(b, splits.test);
        return {{"guided_selected_information",
                 cbsm::selected_information(guided_mi, guided.head->hard_mask().to(torch::kFloat64))},
                {"baseline_selected_information",
                 cbsm::selected_information(base_mi, b.head->hard_mask().to(torch::kFloat64))},
                {"baseline_mi", tensor_rows(base_mi)}};
    }

    fs::path fresh_dir(const std::string& name) const
    {
        const auto dir = root_ / name;
        fs::remove_all(dir);
        fs::create_directories(dir);
        return dir;
    }

    void finish(const fs::path& dir, const std::string& stage, std::uint64_t stage_seed, const json& extra = {}) const
    {
        write_json(dir / "config.json", cfg_.to_json());
        const auto m = cbsm::write_run_manifest(dir, stage, cfg_, stage_seed, extra);
        std::cout << stage << ": manifest " << (dir / "run.json").string() << " (config " << m["config_hash"].get<std::string>().substr(0, 12)
                  << ")\n";
    }

    cbsm::Splits load_data() const
    {
        return cbsm::load_dataset(root_ / "data");
    }

    cbsm::BlackBoxSet load_blackboxes(const std::vector<std::string>& names) const
    {
        cbsm::BlackBoxSet out;
        for (const auto& name : names) {
            out.push_back(cbsm::load_blackbox(root_ / "blackbox" / name));
        }
        return out;
    }

    static std::vector<std::string> head_tasks(const cbsm::ExplanationHead& head)
    {
        std::vector<std::string> names;
        for (const auto& t : head->tasks()) {
            names.push_back(t.name);
        }
        return names;
    }

    std::pair<std::string, cbsm::Surrogate> load_latest() const
    {
        if (!opt_.from.empty()) {
            return {opt_.from, cbsm::load_surrogate(root_ / opt_.from)};
        }
        for (const char* name : {"generalized", "refined", "surrogate"}) {
            if (fs::exists(root_ / name / "manifest.json")) {
                return {name, cbsm::load_surrogate(root_ / name)};
            }
        }
        throw cbsm::DependencyError("no trained surrogate under " + root_.string() + "; run `cbsm train` first");
    }

    static torch::Tensor find_image(const cbsm::Splits& splits, std::int64_t id)
    {
        for (const auto* set : {&splits.test, &splits.val, &splits.train}) {
            const auto hit = (set->images.ids == id).nonzero();
            if (hit.size(0) > 0) {
                return set->images.pixels[hit[0][0].item<std::int64_t>()];
            }
        }
        throw cbsm::ConfigError("no sample with id " + std::to_string(id));
    }

    cbsm::EpochLogger progress(cbsm::JsonlWriter& log) const
    {
        return [&log](const json& record) {
            log.write(record);
            std::cerr << record.dump() << "\n";
        };
    }

    void save(const cbsm::Surrogate& s, const fs::path& dir, const cbsm::Splits& splits,
              const cbsm::BlackBoxSet& blackboxes, const std::string& stage, std::uint64_t seed)
    {
        auto model = s.model;
        const auto names = head_tasks(s.head);
        const auto test = cbsm::make_surrogate_data(blackboxes, names, splits.test.images);
        json fidelity = json::array();
        for (const auto& f : cbsm::fidelity_report(model, s.head, test)) {
            fidelity.push_back(f.to_json());
        }
        cbsm::save_surrogate(s, dir, {{"stage", stage}});
        write_json(dir / "fidelity.json", fidelity);
        finish(dir, stage, seed);
        for (const auto& f : fidelity) {
            std::cout << f["task"].get<std::string>() << ": agreement " << percent(f["agreement"].get<double>())
                      << "% with " << f["num_concepts"] << " concepts\n";
        }
    }

    Options opt_;
    cbsm::RunConfig cfg_;
    fs::path root_;
};

int exit_code_for(const std::exception& e)
{
    if (dynamic_cast<const cbsm::DependencyError*>(&e) != nullptr) {
        return 2;
    }
    if (dynamic_cast<const cbsm::NumericalError*>(&e) != nullptr) {
        return 3;
    }
    return 1;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Concept bottleneck surrogate models: explain black-box classifiers with discovered concepts"};
    app.require_subcommand(1);
    Options opt;

    auto common = [&](CLI::App* cmd) {
        cmd->add_option("--config", opt.config, "JSON run configuration")->check(CLI::ExistingFile);
        cmd->add_option("--out", opt.out, "Run directory shared by all stages")->required();
        cmd->add_option("--seed", opt.seed, "Top-level seed; overrides the config");
        cmd->add_option("--device", opt.device, "Compute device (cpu)");
    };
    auto* make_data = app.add_subcommand("make-data", "Synthesize the TripleMNIST dataset");
    common(make_data);
    make_data->add_option("--mnist", opt.mnist, "Directory with the four MNIST IDX files");

    auto* train_bb = app.add_subcommand("train-blackbox", "Train one CNN classifier per task");
    common(train_bb);
    train_bb->add_option("--epochs", opt.epochs);

    auto* train = app.add_subcommand("train", "Jointly train the concept model and explanation head");
    common(train);
    train->add_option("--epochs", opt.epochs);
    train->add_option("--tasks", opt.tasks, "Comma-separated training tasks");

    auto* refine = app.add_subcommand("refine", "Continue training on self-generated images");
    common(refine);
    refine->add_option("--epochs", opt.epochs);
    refine->add_option("--n-r", opt.n_r, "Related-concept draws per generated batch");
    refine->add_option("--n-u", opt.n_u, "Unrelated-concept draws per related draw");
    refine->add_flag("--generated-only", opt.generated_only, "Skip the interleaved real batches");

    auto* generalize = app.add_subcommand("generalize", "Explain held-out tasks over the frozen concepts");
    common(generalize);
    generalize->add_option("--epochs", opt.epochs);
    generalize->add_option("--tasks", opt.tasks, "Comma-separated new tasks");

    auto* explain = app.add_subcommand("explain", "Global explanations, or a local one with --sample-id");
    common(explain);
    explain->add_option("--sample-id", opt.sample_id);
    explain->add_option("--task", opt.task);
    explain->add_option("--from", opt.from, "Checkpoint stage directory (surrogate, refined, generalized)");

    auto* evaluate = app.add_subcommand("evaluate", "Agreement table, MI flow and optional studies");
    common(evaluate);
    evaluate->add_flag("--efficacy", opt.efficacy, "Also run the data-efficacy study");
    evaluate->add_flag("--baseline", opt.baseline, "Also train the TC-only baseline for MI comparison");

    auto* traverse = app.add_subcommand("traverse", "Decode a sweep over one concept");
    common(traverse);
    traverse->add_option("--concept", opt.concept_index)->required();
    traverse->add_option("--sample-id", opt.sample_id);
    traverse->add_option("--from", opt.from);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const auto* cmd = app.get_subcommands().front();
        Pipeline p(opt, cmd->get_name());
        const auto& name = cmd->get_name();
        if (name == "make-data") {
            p.make_data();
        } else if (name == "train-blackbox") {
            p.train_blackbox();
        } else if (name == "train") {
            p.train();
        } else if (name == "refine") {
            p.refine();
        } else if (name == "generalize") {
            p.generalize();
        } else if (name == "explain") {
            p.explain();
        } else if (name == "evaluate") {
            p.evaluate();
        } else if (name == "traverse") {
            p.traverse();
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return 0;
}
