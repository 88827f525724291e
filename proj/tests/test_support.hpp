#pragma once

#include "cbsm/blackbox.hpp"
#include "cbsm/concept_model.hpp"
#include "cbsm/data.hpp"
#include "cbsm/explanation_head.hpp"
#include "cbsm/training.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <random>
#include <string>

namespace cbsm::fixtures {

// Ten digits, a few glyphs each. Digit d draws a bar at row 2 + 2d, jittered
// per glyph, so digits stay distinguishable without MNIST on disk.
inline DigitPool fake_pool(std::int64_t glyphs_per_digit = 4)
{
    DigitPool pool;
    for (int d = 0; d < 10; ++d) {
        auto g = torch::zeros({glyphs_per_digit, kGlyphSize, kGlyphSize});
        for (std::int64_t i = 0; i < glyphs_per_digit; ++i) {
            g[i].narrow(0, 2 + 2 * d, 2).narrow(1, 4 + i, 16).fill_(1.0);
        }
        pool[d] = g;
    }
    return pool;
}

// One glyph row: 28 x 84 canvas with slots side by side.
inline DatasetSpec strip_spec(std::uint64_t seed = 7)
{
    DatasetSpec s;
    s.height = 28;
    s.width = 84;
    s.slots = {{0, 0}, {0, 28}, {0, 56}};
    s.seed = seed;
    return s;
}

inline ConceptModelOptions tiny_model(std::int64_t kc = 3)
{
    ConceptModelOptions o;
    o.height = 8;
    o.width = 8;
    o.num_concepts = kc;
    o.strides = {2, 2};
    o.channels1 = 3;
    o.channels2 = 4;
    o.hidden = 8;
    return o;
}

inline SoftTreeOptions tree_opts(int depth, std::int64_t classes, double init_scale = 1.0)
{
    SoftTreeOptions t;
    t.depth = depth;
    t.num_classes = classes;
    t.init_scale = init_scale;
    return t;
}

// Random class distributions, one row per sample.
inline torch::Tensor random_distribution(std::int64_t n, std::int64_t classes)
{
    return torch::softmax(torch::randn({n, classes}) * 2.0, 1);
}

class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("cbsm_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

} // namespace cbsm::fixtures
