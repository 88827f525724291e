#pragma once

// Probabilistic encoder/decoder pair over k_c concepts, the ELBO pieces and
// the total-correlation estimate of the aggregate posterior.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <cstdint>

namespace cbsm {

struct ConceptModelOptions {
    std::int64_t height{84};
    std::int64_t width{84};
    std::int64_t num_concepts{6};
    // Kernel size == stride for both conv stages; height and width must be
    // divisible by their product (84 = 4 * 3 * 7).
    std::array<std::int64_t, 2> strides{4, 3};
    std::int64_t channels1{16};
    std::int64_t channels2{32};
    std::int64_t hidden{256};

    void validate() const;
    nlohmann::json to_json() const;
    static ConceptModelOptions from_json(const nlohmann::json& j);
};

// Diagonal Gaussian q(z|x) per row.
struct ConceptPosterior {
    torch::Tensor mu;      // [n, k_c]
    torch::Tensor log_var; // [n, k_c]
};

class ConceptModelImpl : public torch::nn::Module {
public:
    explicit ConceptModelImpl(const ConceptModelOptions& options);

    ConceptPosterior encode(const torch::Tensor& x); // x: [n, H, W]
    torch::Tensor decode(const torch::Tensor& z);    // Bernoulli logits [n, H, W]

    const ConceptModelOptions& options() const { return options_; }

private:
    ConceptModelOptions options_;
    std::int64_t grid_h_;
    std::int64_t grid_w_;
    torch::nn::Conv2d enc_conv1_{nullptr};
    torch::nn::Conv2d enc_conv2_{nullptr};
    torch::nn::Linear enc_fc_{nullptr};
    torch::nn::Linear enc_out_{nullptr};
    torch::nn::Linear dec_fc1_{nullptr};
    torch::nn::Linear dec_fc2_{nullptr};
    torch::nn::ConvTranspose2d dec_deconv1_{nullptr};
    torch::nn::ConvTranspose2d dec_deconv2_{nullptr};
};
TORCH_MODULE(ConceptModel);

// Reparameterized draw z = mu + exp(log_var / 2) * noise.
torch::Tensor sample(const ConceptPosterior& posterior, const torch::Tensor& noise);

// Closed-form KL(q(z|x) || N(0, I)) per row, [n].
torch::Tensor kl_to_standard_normal(const ConceptPosterior& posterior);

// Sum over pixels of log Bernoulli(x | sigmoid(logits)), per row, [n].
torch::Tensor bernoulli_log_likelihood(const torch::Tensor& logits, const torch::Tensor& x);

struct ElboTerms {
    torch::Tensor recon_log_lik; // [n]
    torch::Tensor kl;            // [n]
    ConceptPosterior posterior;
    torch::Tensor z;             // the draw used for reconstruction
};

ElboTerms elbo_terms(ConceptModel& model, const torch::Tensor& x, const torch::Tensor& noise);

// Minibatch-weighted-sampling estimate of KL(q(z) || prod_j q(z_j)), where the
// batch's own posteriors stand in for the aggregate posterior. The
// parameter-independent (k_c - 1) log N term of the dataset-size weighting is
// dropped, so the value is ~0 for independent coordinates. Requires >= 2 rows.
torch::Tensor tc_estimate(const torch::Tensor& z, const ConceptPosterior& posterior);

} // namespace cbsm
