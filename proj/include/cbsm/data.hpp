#pragma once

// TripleMNIST synthesis: three MNIST glyphs side by side on one canvas, with
// the sampled digits kept as ground-truth factor labels.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace cbsm {

inline constexpr std::int64_t kGlyphSize = 28;

struct DatasetSpec {
    std::string name{"triple-mnist"};
    std::vector<int> digit_whitelist{0, 1, 5};
    std::int64_t height{84};
    std::int64_t width{84};
    // (row, col) of each glyph's top-left corner, left to right.
    std::vector<std::pair<std::int64_t, std::int64_t>> slots{{28, 0}, {28, 28}, {28, 56}};
    std::array<double, 3> split_fractions{0.8, 0.1, 0.1};
    std::uint64_t seed{0};

    // Throws ConfigError when an invariant is violated.
    void validate() const;

    nlohmann::json to_json() const;
    static DatasetSpec from_json(const nlohmann::json& j);
};

struct FactorLabel {
    std::array<int, 3> digits{};

    int d1() const { return digits[0]; }
    int d2() const { return digits[1]; }
    int d3() const { return digits[2]; }

    auto operator<=>(const FactorLabel&) const = default;
};

struct ImageBatch {
    torch::Tensor pixels; // float32 [n, H, W], values in [0, 1]
    torch::Tensor ids;    // int64 [n]

    std::int64_t size() const { return pixels.defined() ? pixels.size(0) : 0; }
    ImageBatch select(const torch::Tensor& index) const;
};

struct LabeledSet {
    ImageBatch images;
    std::vector<FactorLabel> labels;

    std::int64_t size() const { return images.size(); }
    LabeledSet select(const std::vector<std::int64_t>& rows) const;
    // Rows [0, n) of the set; n is clamped to the set size.
    LabeledSet head(std::int64_t n) const;
};

// digit -> float32 [m, 28, 28] glyph stack
using DigitPool = std::map<int, torch::Tensor>;

enum class MnistPart { Train, Test };

// Reads the standard IDX files from `dir`. All four files must be present and
// carry the right magic numbers; only the requested part is returned.
DigitPool ingest_mnist(const std::filesystem::path& dir, MnistPart part = MnistPart::Train);

LabeledSet synthesize_triple(const DatasetSpec& spec, const DigitPool& pool, std::int64_t n);

struct Splits {
    LabeledSet train;
    LabeledSet val;
    LabeledSet test;
};

// Stratified by factor combination so every combination lands in every split
// with a nonzero fraction; split sizes are exact (rounded) fractions of n.
Splits split(const LabeledSet& data, const DatasetSpec& spec);

// Count of each factor combination present in `labels`.
std::map<FactorLabel, std::int64_t> combination_counts(const std::vector<FactorLabel>& labels);

// Dataset directory: manifest.json plus {train,val,test}.cbt containers.
void save_dataset(const Splits& splits, const DatasetSpec& spec, const std::filesystem::path& dir);
Splits load_dataset(const std::filesystem::path& dir, DatasetSpec* spec = nullptr);

// Row order for one pass over n samples in minibatches; deterministic in rng.
std::vector<torch::Tensor> minibatch_indices(std::int64_t n, std::int64_t batch_size, std::mt19937_64& rng);

} // namespace cbsm
