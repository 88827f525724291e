#include "cbsm/concept_model.hpp"

#include "cbsm/error.hpp"

#include <cmath>
#include <numbers>

namespace cbsm {

void ConceptModelOptions::validate() const
{
    if (num_concepts < 1) {
        throw ConfigError("concept model: need at least one concept");
    }
    const auto cell = strides[0] * strides[1];
    if (strides[0] < 1 || strides[1] < 1 || height % cell != 0 || width % cell != 0) {
        throw ConfigError("concept model: image size must be divisible by the stride product");
    }
}

nlohmann::json ConceptModelOptions::to_json() const
{
    return {{"height", height},     {"width", width},       {"num_concepts", num_concepts},
            {"strides", strides},   {"channels1", channels1}, {"channels2", channels2},
            {"hidden", hidden}};
}

ConceptModelOptions ConceptModelOptions::from_json(const nlohmann::json& j)
{
    ConceptModelOptions o;
    o.height = j.value("height", o.height);
    o.width = j.value("width", o.width);
    o.num_concepts = j.value("num_concepts", o.num_concepts);
    o.strides = j.value("strides", o.strides);
    o.channels1 = j.value("channels1", o.channels1);
    o.channels2 = j.value("channels2", o.channels2);
    o.hidden = j.value("hidden", o.hidden);
    return o;
}

ConceptModelImpl::ConceptModelImpl(const ConceptModelOptions& options) : options_(options)
{
    using namespace torch::nn;
    options_.validate();
    const auto [s1, s2] = options_.strides;
    grid_h_ = options_.height / (s1 * s2);
    grid_w_ = options_.width / (s1 * s2);
    const auto flat = options_.channels2 * grid_h_ * grid_w_;
    const auto k = options_.num_concepts;

    enc_conv1_ = register_module("enc_conv1", Conv2d(Conv2dOptions(1, options_.channels1, s1).stride(s1)));
    enc_conv2_ = register_module("enc_conv2",
                                 Conv2d(Conv2dOptions(options_.channels1, options_.channels2, s2).stride(s2)));
    enc_fc_ = register_module("enc_fc", Linear(flat, options_.hidden));
    enc_out_ = register_module("enc_out", Linear(options_.hidden, 2 * k));

    dec_fc1_ = register_module("dec_fc1", Linear(k, options_.hidden));
    dec_fc2_ = register_module("dec_fc2", Linear(options_.hidden, flat));
    dec_deconv1_ = register_module(
        "dec_deconv1", ConvTranspose2d(ConvTranspose2dOptions(options_.channels2, options_.channels1, s2).stride(s2)));
    dec_deconv2_ =
        register_module("dec_deconv2", ConvTranspose2d(ConvTranspose2dOptions(options_.channels1, 1, s1).stride(s1)));
}

ConceptPosterior ConceptModelImpl::encode(const torch::Tensor& x)
{
    if (x.dim() != 3 || x.size(1) != options_.height || x.size(2) != options_.width) {
        throw ConfigError("encode: expected images of shape [n, " + std::to_string(options_.height) + ", " +
                          std::to_string(options_.width) + "]");
    }
    auto h = torch::relu(enc_conv1_(x.unsqueeze(1)));
    h = torch::relu(enc_conv2_(h));
    h = torch::relu(enc_fc_(h.flatten(1)));
    const auto out = enc_out_(h);
    const auto k = options_.num_concepts;
    return {out.narrow(1, 0, k), out.narrow(1, k, k)};
}

torch::Tensor ConceptModelImpl::decode(const torch::Tensor& z)
{
    if (z.dim() != 2 || z.size(1) != options_.num_concepts) {
        throw ConfigError("decode: expected concept vectors of width " + std::to_string(options_.num_concepts));
    }
    auto h = torch::relu(dec_fc1_(z));
    h = torch::relu(dec_fc2_(h));
    h = h.view({z.size(0), options_.channels2, grid_h_, grid_w_});
    h = torch::relu(dec_deconv1_(h));
    return dec_deconv2_(h).squeeze(1);
}

torch::Tensor sample(const ConceptPosterior& posterior, const torch::Tensor& noise)
{
    if (!noise.sizes().equals(posterior.mu.sizes())) {
        throw ConfigError("sample: noise shape must match the posterior");
    }
    return posterior.mu + torch::exp(0.5 * posterior.log_var) * noise;
}

torch::Tensor kl_to_standard_normal(const ConceptPosterior& posterior)
{
    const auto& mu = posterior.mu;
    const auto& lv = posterior.log_var;
    return 0.5 * (mu.pow(2) + lv.exp() - lv - 1.0).sum(1);
}

torch::Tensor bernoulli_log_likelihood(const torch::Tensor& logits, const torch::Tensor& x)
{
    // log p = x * log sigmoid(l) + (1 - x) * log sigmoid(-l)
    const auto ll = x * torch::log_sigmoid(logits) + (1.0 - x) * torch::log_sigmoid(-logits);
    return ll.flatten(1).sum(1);
}

ElboTerms elbo_terms(ConceptModel& model, const torch::Tensor& x, const torch::Tensor& noise)
{
    ElboTerms terms;
    terms.posterior = model->encode(x);
    terms.z = sample(terms.posterior, noise);
    terms.recon_log_lik = bernoulli_log_likelihood(model->decode(terms.z), x);
    terms.kl = kl_to_standard_normal(terms.posterior);
    return terms;
}

torch::Tensor tc_estimate(const torch::Tensor& z, const ConceptPosterior& posterior)
{
    const auto m = z.size(0);
    if (m < 2) {
        throw ConfigError("tc_estimate: minibatch must hold at least two samples");
    }
    if (z.size(1) == 1) {
        return torch::zeros({}, z.options());
    }
    // log q(z_i,d | x_j) for every pair (i, j) and coordinate d: [m, m, k]
    const auto zi = z.unsqueeze(1);
    const auto mu = posterior.mu.unsqueeze(0);
    const auto lv = posterior.log_var.unsqueeze(0);
    const double log_2pi = std::log(2.0 * std::numbers::pi);
    const auto log_density = -0.5 * (log_2pi + lv + (zi - mu).pow(2) * torch::exp(-lv));

    const double log_m = std::log(static_cast<double>(m));
    const auto log_joint = torch::logsumexp(log_density.sum(2), 1) - log_m;
    const auto log_marginals = (torch::logsumexp(log_density, 1) - log_m).sum(1);
    return (log_joint - log_marginals).mean();
}

} // namespace cbsm
