#include "cbsm/image_io.hpp"

#include "cbsm/error.hpp"

#include <png.h>

#include <array>
#include <vector>

namespace cbsm {

namespace {

torch::Tensor to_rgb(const torch::Tensor& image)
{
    if (image.dim() == 3 && image.size(2) == 3 && image.scalar_type() == torch::kUInt8) {
        return image.contiguous();
    }
    if (image.dim() == 2) {
        const auto gray = (image.to(torch::kFloat32).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8);
        return gray.unsqueeze(2).repeat({1, 1, 3}).contiguous();
    }
    throw ConfigError("write_png: expected [H, W] floats or [H, W, 3] bytes");
}

const std::array<std::array<double, 3>, 10> kPalette{{{0.89, 0.10, 0.11},
                                                       {0.22, 0.49, 0.72},
                                                       {0.30, 0.69, 0.29},
                                                       {0.60, 0.31, 0.64},
                                                       {1.00, 0.50, 0.00},
                                                       {0.65, 0.34, 0.16},
                                                       {0.97, 0.51, 0.75},
                                                       {0.60, 0.60, 0.60},
                                                       {0.74, 0.74, 0.13},
                                                       {0.09, 0.75, 0.81}}};

} // namespace

void write_png(const std::filesystem::path& path, const torch::Tensor& image)
{
    const auto rgb = to_rgb(image.detach().cpu());
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(rgb.size(1));
    png.height = static_cast<png_uint_32>(rgb.size(0));
    png.format = PNG_FORMAT_RGB;
    if (png_image_write_to_file(&png, path.c_str(), 0, rgb.data_ptr<std::uint8_t>(), 0, nullptr) == 0) {
        throw Error("cannot write " + path.string() + ": " + png.message);
    }
}

torch::Tensor tile_row(const torch::Tensor& images, std::int64_t gap)
{
    if (images.dim() != 3 || images.size(0) == 0) {
        throw ConfigError("tile_row: expected a non-empty [n, H, W] stack");
    }
    const auto n = images.size(0);
    const auto h = images.size(1);
    const auto w = images.size(2);
    auto out = torch::ones({h, n * w + (n - 1) * gap});
    for (std::int64_t i = 0; i < n; ++i) {
        out.narrow(1, i * (w + gap), w).copy_(images[i].to(torch::kFloat32));
    }
    return out;
}

torch::Tensor heatmap(const torch::Tensor& matrix, std::int64_t cell, double max_value)
{
    const auto m = matrix.detach().to(torch::kFloat64);
    const double top = max_value > 0.0 ? max_value : std::max(m.max().item<double>(), 1e-12);
    const auto t = (m / top).clamp(0.0, 1.0);
    // Linear ramp from white to (0.03, 0.19, 0.42).
    const auto r = 1.0 - t * 0.97;
    const auto g = 1.0 - t * 0.81;
    const auto b = 1.0 - t * 0.58;
    auto rgb = torch::stack({r, g, b}, 2);
    rgb = rgb.repeat_interleave(cell, 0).repeat_interleave(cell, 1);
    return (rgb * 255.0).round().to(torch::kUInt8).contiguous();
}

torch::Tensor decision_region_plot(ConceptModel& model, const ExplanationHead& head, std::int64_t task,
                                   std::int64_t concept_a, std::int64_t concept_b, const torch::Tensor& base,
                                   int steps, double lo, double hi)
{
    torch::NoGradGuard no_grad;
    const auto kc = model->options().num_concepts;
    if (concept_a < 0 || concept_a >= kc || concept_b < 0 || concept_b >= kc || steps < 2) {
        throw ConfigError("decision_region_plot: bad concept indices or step count");
    }
    const auto h = model->options().height;
    const auto w = model->options().width;
    const auto n = static_cast<std::int64_t>(steps);
    auto z = base.to(torch::kFloat32).flatten().unsqueeze(0).repeat({n * n, 1});
    for (std::int64_t row = 0; row < n; ++row) {
        for (std::int64_t col = 0; col < n; ++col) {
            // Concept b grows upward, concept a to the right.
            z[row * n + col][concept_a] = lo + (hi - lo) * static_cast<double>(col) / static_cast<double>(n - 1);
            z[row * n + col][concept_b] = hi - (hi - lo) * static_cast<double>(row) / static_cast<double>(n - 1);
        }
    }
    const auto images = torch::sigmoid(model->decode(z));
    const auto pred = head->tree(task)->forward(head->mask_apply(z, task, MaskMode::Hard)).argmax(1);
    auto canvas = torch::full({n * h, n * w, 3}, 1.0);
    for (std::int64_t i = 0; i < n * n; ++i) {
        const auto& c = kPalette[static_cast<std::size_t>(pred[i].item<std::int64_t>()) % kPalette.size()];
        const auto tint = torch::tensor({c[0], c[1], c[2]}, torch::kFloat64).to(torch::kFloat32);
        const auto gray = images[i].unsqueeze(2);
        // Ink stays dark, background takes 35% of the class color.
        const auto cell = (1.0 - gray) * (0.65 + 0.35 * tint) + gray * 0.05;
        canvas.narrow(0, (i / n) * h, h).narrow(1, (i % n) * w, w).copy_(cell);
    }
    return (canvas.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
}

torch::Tensor local_explanation_figure(const torch::Tensor& image, const torch::Tensor& reconstruction,
                                       const std::vector<double>& surrogate, const std::vector<double>& blackbox)
{
    const auto h = image.size(0);
    const auto w = image.size(1);
    const std::int64_t bar_w = 12;
    const auto classes = static_cast<std::int64_t>(surrogate.size());
    const auto panel_w = std::max<std::int64_t>(classes * (bar_w + 2) + 2, 8);
    auto canvas = torch::ones({h, 2 * w + 4 + panel_w + 4, 3});
    canvas.narrow(1, 0, w).copy_(image.to(torch::kFloat32).unsqueeze(2).expand({h, w, 3}));
    canvas.narrow(1, w + 2, w).copy_(reconstruction.to(torch::kFloat32).unsqueeze(2).expand({h, w, 3}));
    const auto x0 = 2 * w + 6;
    const auto half = h / 2 - 2;
    auto draw = [&](const std::vector<double>& dist, std::int64_t baseline, int color) {
        const auto& c = kPalette[static_cast<std::size_t>(color)];
        for (std::size_t k = 0; k < dist.size(); ++k) {
            const auto len = static_cast<std::int64_t>(dist[k] * static_cast<double>(half));
            if (len <= 0) {
                continue;
            }
            auto bar = canvas.narrow(0, baseline - len, len).narrow(1, x0 + static_cast<std::int64_t>(k) * (bar_w + 2), bar_w);
            bar.select(2, 0).fill_(c[0]);
            bar.select(2, 1).fill_(c[1]);
            bar.select(2, 2).fill_(c[2]);
        }
    };
    draw(surrogate, half, 1);
    if (!blackbox.empty()) {
        draw(blackbox, h - 2, 0);
    }
    return (canvas.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
}

} // namespace cbsm
