#pragma once

// PNG rendering for traversal strips, heatmaps and decision-region plots.

#include "cbsm/concept_model.hpp"
#include "cbsm/explanation_head.hpp"

#include <torch/torch.h>

#include <filesystem>
#include <vector>

namespace cbsm {

// Grayscale [H, W] in [0, 1] or RGB uint8 [H, W, 3].
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

// Images [n, H, W] side by side with `gap` white columns in between.
torch::Tensor tile_row(const torch::Tensor& images, std::int64_t gap = 2);

// [r, c] values rendered as blocks of `cell` pixels, white (min) to dark blue
// (max), as RGB uint8. `max_value` <= 0 scales by the matrix maximum.
torch::Tensor heatmap(const torch::Tensor& matrix, std::int64_t cell = 24, double max_value = 0.0);

// Fig.-3(b)-style view for a task that uses two concepts: decoded images on a
// steps x steps grid over (z_a, z_b) in [lo, hi], all other coordinates at
// `base`, each tinted by the tree's predicted class. RGB uint8.
torch::Tensor decision_region_plot(ConceptModel& model, const ExplanationHead& head, std::int64_t task,
                                   std::int64_t concept_a, std::int64_t concept_b, const torch::Tensor& base,
                                   int steps = 9, double lo = -3.0, double hi = 3.0);

// Input image, its reconstruction and a bar panel comparing the surrogate
// (top bars) with the black box (bottom bars) class distributions. RGB uint8.
torch::Tensor local_explanation_figure(const torch::Tensor& image, const torch::Tensor& reconstruction,
                                       const std::vector<double>& surrogate, const std::vector<double>& blackbox);

} // namespace cbsm
