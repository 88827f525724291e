#include "cbsm/data.hpp"

#include "cbsm/error.hpp"
#include "cbsm/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cbsm {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;

std::uint32_t read_be32(std::istream& in, const fs::path& path)
{
    std::array<unsigned char, 4> b{};
    in.read(reinterpret_cast<char*>(b.data()), 4);
    if (!in) {
        throw DataError("truncated IDX header in " + path.filename().string());
    }
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

std::ifstream open_idx(const fs::path& path, std::uint32_t expected_magic)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("missing file " + path.filename().string() + " in " + path.parent_path().string());
    }
    const auto magic = read_be32(in, path);
    if (magic != expected_magic) {
        throw DataError("bad magic number " + std::to_string(magic) + " in " + path.filename().string() +
                        " (expected " + std::to_string(expected_magic) + ")");
    }
    return in;
}

torch::Tensor read_idx_images(const fs::path& path)
{
    auto in = open_idx(path, kImageMagic);
    const auto n = read_be32(in, path);
    const auto rows = read_be32(in, path);
    const auto cols = read_be32(in, path);
    if (rows != kGlyphSize || cols != kGlyphSize) {
        throw DataError(path.filename().string() + ": expected 28x28 images");
    }
    auto bytes = torch::empty({n, rows, cols}, torch::kUInt8);
    in.read(reinterpret_cast<char*>(bytes.data_ptr<std::uint8_t>()), bytes.numel());
    if (!in) {
        throw DataError("truncated image data in " + path.filename().string());
    }
    return bytes;
}

torch::Tensor read_idx_labels(const fs::path& path)
{
    auto in = open_idx(path, kLabelMagic);
    const auto n = read_be32(in, path);
    auto bytes = torch::empty({n}, torch::kUInt8);
    in.read(reinterpret_cast<char*>(bytes.data_ptr<std::uint8_t>()), bytes.numel());
    if (!in) {
        throw DataError("truncated label data in " + path.filename().string());
    }
    return bytes;
}

// Byte-valued storage for [0,1] pixels that were produced as byte / 255.
torch::Tensor to_bytes(const torch::Tensor& pixels)
{
    return torch::round(pixels * 255.0f).to(torch::kUInt8);
}

torch::Tensor from_bytes(const torch::Tensor& bytes)
{
    return bytes.to(torch::kFloat32) / 255.0f;
}

torch::Tensor labels_to_tensor(const std::vector<FactorLabel>& labels)
{
    auto t = torch::empty({static_cast<std::int64_t>(labels.size()), 3}, torch::kUInt8);
    auto a = t.accessor<std::uint8_t, 2>();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (int s = 0; s < 3; ++s) {
            a[static_cast<std::int64_t>(i)][s] = static_cast<std::uint8_t>(labels[i].digits[s]);
        }
    }
    return t;
}

std::vector<FactorLabel> labels_from_tensor(const torch::Tensor& t)
{
    auto a = t.accessor<std::uint8_t, 2>();
    std::vector<FactorLabel> labels(static_cast<std::size_t>(t.size(0)));
    for (std::int64_t i = 0; i < t.size(0); ++i) {
        for (int s = 0; s < 3; ++s) {
            labels[static_cast<std::size_t>(i)].digits[s] = a[i][s];
        }
    }
    return labels;
}

void write_split(const LabeledSet& set, const fs::path& path)
{
    write_tensors(path, {{"pixels", to_bytes(set.images.pixels)},
                         {"ids", set.images.ids},
                         {"labels", labels_to_tensor(set.labels)}});
}

LabeledSet read_split(const fs::path& path)
{
    const auto stored = read_tensors(path);
    LabeledSet set;
    set.images.pixels = from_bytes(find_tensor(stored, "pixels"));
    set.images.ids = find_tensor(stored, "ids");
    set.labels = labels_from_tensor(find_tensor(stored, "labels"));
    return set;
}

} // namespace

void DatasetSpec::validate() const
{
    if (digit_whitelist.empty()) {
        throw ConfigError("dataset spec: digit whitelist is empty");
    }
    for (const int d : digit_whitelist) {
        if (d < 0 || d > 9) {
            throw ConfigError("dataset spec: whitelist digit out of range: " + std::to_string(d));
        }
    }
    if (slots.size() != 3) {
        throw ConfigError("dataset spec: exactly three glyph slots are required");
    }
    for (const auto& [row, col] : slots) {
        if (row < 0 || col < 0 || row + kGlyphSize > height || col + kGlyphSize > width) {
            throw ConfigError("dataset spec: slot (" + std::to_string(row) + ", " + std::to_string(col) +
                              ") does not keep the glyph inside the canvas");
        }
    }
    double total = 0.0;
    for (const double f : split_fractions) {
        if (f < 0.0) {
            throw ConfigError("dataset spec: negative split fraction");
        }
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError("dataset spec: split fractions must sum to 1");
    }
}

nlohmann::json DatasetSpec::to_json() const
{
    nlohmann::json slot_list = nlohmann::json::array();
    for (const auto& [row, col] : slots) {
        slot_list.push_back({row, col});
    }
    return {{"name", name},
            {"digit_whitelist", digit_whitelist},
            {"canvas", {height, width}},
            {"slots", slot_list},
            {"split_fractions", split_fractions},
            {"seed", seed}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j)
{
    DatasetSpec spec;
    spec.name = j.value("name", spec.name);
    spec.digit_whitelist = j.value("digit_whitelist", spec.digit_whitelist);
    if (j.contains("canvas")) {
        spec.height = j.at("canvas").at(0).get<std::int64_t>();
        spec.width = j.at("canvas").at(1).get<std::int64_t>();
    }
    if (j.contains("slots")) {
        spec.slots.clear();
        for (const auto& s : j.at("slots")) {
            spec.slots.emplace_back(s.at(0).get<std::int64_t>(), s.at(1).get<std::int64_t>());
        }
    }
    spec.split_fractions = j.value("split_fractions", spec.split_fractions);
    spec.seed = j.value("seed", spec.seed);
    return spec;
}

ImageBatch ImageBatch::select(const torch::Tensor& index) const
{
    return {pixels.index_select(0, index), ids.index_select(0, index)};
}

LabeledSet LabeledSet::select(const std::vector<std::int64_t>& rows) const
{
    const auto index = torch::tensor(rows, torch::kInt64);
    LabeledSet out;
    out.images = images.select(index);
    out.labels.reserve(rows.size());
    for (const auto r : rows) {
        out.labels.push_back(labels.at(static_cast<std::size_t>(r)));
    }
    return out;
}

LabeledSet LabeledSet::head(std::int64_t n) const
{
    n = std::clamp<std::int64_t>(n, 0, size());
    std::vector<std::int64_t> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    return select(rows);
}

DigitPool ingest_mnist(const fs::path& dir, MnistPart part)
{
    static constexpr std::array<const char*, 4> kFiles{
        "train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};
    for (const char* name : kFiles) {
        if (!fs::exists(dir / name)) {
            throw DataError(std::string("missing file ") + name + " in " + dir.string());
        }
    }
    const bool train = part == MnistPart::Train;
    const auto images = read_idx_images(dir / (train ? kFiles[0] : kFiles[2]));
    const auto labels = read_idx_labels(dir / (train ? kFiles[1] : kFiles[3]));
    // Validate the other pair's headers as well so a corrupt download is caught early.
    open_idx(dir / (train ? kFiles[2] : kFiles[0]), kImageMagic);
    open_idx(dir / (train ? kFiles[3] : kFiles[1]), kLabelMagic);
    if (images.size(0) != labels.size(0)) {
        throw DataError("image/label count mismatch in " + dir.string());
    }

    DigitPool pool;
    for (int digit = 0; digit < 10; ++digit) {
        const auto rows = torch::nonzero(labels == digit).flatten();
        pool[digit] = from_bytes(images.index_select(0, rows));
    }
    return pool;
}

LabeledSet synthesize_triple(const DatasetSpec& spec, const DigitPool& pool, std::int64_t n)
{
    spec.validate();
    if (n <= 0) {
        throw ConfigError("synthesize_triple: sample count must be positive");
    }
    for (const int d : spec.digit_whitelist) {
        const auto it = pool.find(d);
        if (it == pool.end() || it->second.size(0) == 0) {
            throw DataError("synthesize_triple: whitelist digit " + std::to_string(d) + " absent from pool");
        }
    }

    std::mt19937_64 rng(spec.seed);
    std::uniform_int_distribution<std::size_t> pick_digit(0, spec.digit_whitelist.size() - 1);

    LabeledSet out;
    out.images.pixels = torch::zeros({n, spec.height, spec.width}, torch::kFloat32);
    out.images.ids = torch::arange(n, torch::kInt64);
    out.labels.resize(static_cast<std::size_t>(n));

    float* canvas = out.images.pixels.data_ptr<float>();
    const std::int64_t plane = spec.height * spec.width;
    for (std::int64_t i = 0; i < n; ++i) {
        auto& label = out.labels[static_cast<std::size_t>(i)];
        for (std::size_t s = 0; s < 3; ++s) {
            const int digit = spec.digit_whitelist[pick_digit(rng)];
            const auto& glyphs = pool.at(digit);
            std::uniform_int_distribution<std::int64_t> pick_glyph(0, glyphs.size(0) - 1);
            const auto glyph = glyphs[pick_glyph(rng)].contiguous();
            const float* src = glyph.data_ptr<float>();
            const auto [row, col] = spec.slots[s];
            for (std::int64_t r = 0; r < kGlyphSize; ++r) {
                float* dst = canvas + i * plane + (row + r) * spec.width + col;
                for (std::int64_t c = 0; c < kGlyphSize; ++c) {
                    dst[c] = std::max(dst[c], src[r * kGlyphSize + c]);
                }
            }
            label.digits[s] = digit;
        }
    }
    return out;
}

std::map<FactorLabel, std::int64_t> combination_counts(const std::vector<FactorLabel>& labels)
{
    std::map<FactorLabel, std::int64_t> counts;
    for (const auto& l : labels) {
        ++counts[l];
    }
    return counts;
}

Splits split(const LabeledSet& data, const DatasetSpec& spec)
{
    spec.validate();
    const std::int64_t n = data.size();
    std::array<std::int64_t, 3> target{};
    target[0] = std::llround(spec.split_fractions[0] * static_cast<double>(n));
    target[1] = std::llround(spec.split_fractions[1] * static_cast<double>(n));
    target[2] = n - target[0] - target[1];
    if (target[2] < 0) {
        target[1] += target[2];
        target[2] = 0;
    }
    for (int s = 0; s < 3; ++s) {
        if (spec.split_fractions[s] > 0.0 && target[s] == 0) {
            throw ConfigError("split: " + std::to_string(n) + " samples are too few for a nonzero fraction");
        }
    }

    // Shuffle, then group by factor combination (stable, so the shuffle order
    // survives within each group) and deal positions so each split's share is
    // spread evenly along the grouped order.
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(spec.seed ^ 0x5eed5eed5eed5eedULL);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return data.labels[static_cast<std::size_t>(a)] < data.labels[static_cast<std::size_t>(b)];
    });

    std::array<std::vector<std::int64_t>, 3> rows;
    std::array<std::int64_t, 3> assigned{};
    for (std::int64_t p = 0; p < n; ++p) {
        int best = -1;
        double best_deficit = 0.0;
        for (int s = 0; s < 3; ++s) {
            if (assigned[s] >= target[s]) {
                continue;
            }
            const double deficit =
                static_cast<double>(target[s]) * static_cast<double>(p + 1) / static_cast<double>(n) -
                static_cast<double>(assigned[s]);
            if (best < 0 || deficit > best_deficit) {
                best = s;
                best_deficit = deficit;
            }
        }
        rows[best].push_back(order[static_cast<std::size_t>(p)]);
        ++assigned[best];
    }
    for (auto& r : rows) {
        std::sort(r.begin(), r.end());
    }
    return {data.select(rows[0]), data.select(rows[1]), data.select(rows[2])};
}

void save_dataset(const Splits& splits, const DatasetSpec& spec, const fs::path& dir)
{
    fs::create_directories(dir);
    nlohmann::json files = nlohmann::json::object();
    const std::array<std::pair<const char*, const LabeledSet*>, 3> parts{
        {{"train", &splits.train}, {"val", &splits.val}, {"test", &splits.test}}};
    nlohmann::json counts = nlohmann::json::object();
    std::vector<FactorLabel> all;
    std::string digest_input;
    for (const auto& [name, set] : parts) {
        const auto file = std::string(name) + ".cbt";
        write_split(*set, dir / file);
        const auto sha = sha256_file(dir / file);
        files[file] = sha;
        digest_input += file + ":" + sha + "\n";
        counts[name] = set->size();
        all.insert(all.end(), set->labels.begin(), set->labels.end());
    }
    nlohmann::json combos = nlohmann::json::array();
    for (const auto& [label, count] : combination_counts(all)) {
        combos.push_back({{"digits", label.digits}, {"count", count}});
    }
    const nlohmann::json manifest{{"format", "cbsm-dataset"},
                                  {"format_version", 1},
                                  {"spec", spec.to_json()},
                                  {"counts", counts},
                                  {"combinations", combos},
                                  {"files", files},
                                  {"checksum", sha256_hex(digest_input)}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

Splits load_dataset(const fs::path& dir, DatasetSpec* spec)
{
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) {
        throw DependencyError("missing dataset manifest " + manifest_path.string());
    }
    const auto manifest = nlohmann::json::parse(in);
    if (manifest.value("format", "") != "cbsm-dataset" || manifest.value("format_version", 0) != 1) {
        throw DataError(manifest_path.string() + ": unsupported dataset format");
    }
    if (spec != nullptr) {
        *spec = DatasetSpec::from_json(manifest.at("spec"));
    }
    for (const auto& [file, sha] : manifest.at("files").items()) {
        if (sha256_file(dir / file) != sha.get<std::string>()) {
            throw DataError("checksum mismatch for " + (dir / file).string());
        }
    }
    return {read_split(dir / "train.cbt"), read_split(dir / "val.cbt"), read_split(dir / "test.cbt")};
}

std::vector<torch::Tensor> minibatch_indices(std::int64_t n, std::int64_t batch_size, std::mt19937_64& rng)
{
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<torch::Tensor> batches;
    for (std::int64_t start = 0; start < n; start += batch_size) {
        const auto stop = std::min(n, start + batch_size);
        batches.push_back(torch::tensor(std::vector<std::int64_t>(order.begin() + start, order.begin() + stop),
                                        torch::kInt64));
    }
    return batches;
}

} // namespace cbsm
