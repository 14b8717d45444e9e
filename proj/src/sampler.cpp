#include "partdiff/sampler.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace partdiff {

TransformSamplerImpl::TransformSamplerImpl(const SamplerConfig& cfg) : cfg_(cfg) {
    project_ = register_module("project", torch::nn::Linear(cfg.latent_dim + cfg.noise_dim, cfg.token_dim));
    label_embedding_ = register_module("label_embedding", torch::nn::Embedding(cfg.m, cfg.token_dim));
    for (int64_t i = 0; i < cfg.layers; ++i) {
        blocks_.push_back(register_module("block" + std::to_string(i),
                                          AttentionBlock(cfg.token_dim, cfg.heads, cfg.head_dim, cfg.ff_dim, cfg.dropout)));
    }
    head_ = register_module("head", torch::nn::Linear(cfg.token_dim, kTauDim));
}

torch::Tensor TransformSamplerImpl::forward(const torch::Tensor& z, const torch::Tensor& y, const torch::Tensor& present) {
    const auto b = z.size(0);
    auto noise = (cfg_.lambda * y).unsqueeze(1).expand({b, cfg_.m, cfg_.noise_dim});
    auto labels = torch::arange(cfg_.m, torch::TensorOptions().dtype(torch::kInt64));
    auto tokens = project_(torch::cat({z, noise}, -1)) + label_embedding_(labels).unsqueeze(0);
    for (auto& block : blocks_) tokens = block->forward(tokens, tokens, present);
    auto tau = head_(tokens);
    return torch::where(present.unsqueeze(-1), tau, torch::zeros_like(tau));
}

torch::Tensor fit_loss(const torch::Tensor& tau, const torch::Tensor& tau_ref, const torch::Tensor& present) {
    auto per_part = (tau - tau_ref).pow(2).sum(-1);
    return torch::where(present, per_part, torch::zeros_like(per_part)).sum(-1);
}

double fit_loss(const TransformSet& tau, const TransformSet& tau_ref) {
    if (tau.present != tau_ref.present || tau.transforms.size() != tau_ref.transforms.size()) {
        throw std::invalid_argument("presence mismatch");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < tau.transforms.size(); ++j) {
        if (!tau.present[j]) continue;
        for (int a = 0; a < 3; ++a) {
            const double dc = tau.transforms[j].shift[a] - tau_ref.transforms[j].shift[a];
            const double ds = std::log(tau.transforms[j].scale[a]) - std::log(tau_ref.transforms[j].scale[a]);
            total += dc * dc + ds * ds;
        }
    }
    return total;
}

CimleSelection cimle_select(TransformSampler& sampler, const torch::Tensor& z, const torch::Tensor& present,
                            const torch::Tensor& tau_ref, int k, at::Generator& gen) {
    if (k < 1) throw std::invalid_argument("cimle_select needs K >= 1");
    torch::NoGradGuard guard;
    const auto b = z.size(0);
    const auto noise_dim = sampler->config().noise_dim;
    auto codes = torch::randn({k, b, noise_dim}, gen, z.options());
    auto rep = [&](const torch::Tensor& t) {
        auto sizes = t.sizes().vec();
        std::vector<int64_t> expanded{k};
        expanded.insert(expanded.end(), sizes.begin(), sizes.end());
        sizes[0] = k * b;
        return t.unsqueeze(0).expand(expanded).reshape(sizes);
    };
    auto tau = sampler->forward(rep(z), codes.reshape({k * b, noise_dim}), rep(present));
    auto losses = fit_loss(tau, rep(tau_ref), rep(present)).view({k, b}).to(torch::kFloat64).contiguous();
    auto acc = losses.accessor<double, 2>();
    auto index = torch::zeros({b}, torch::TensorOptions().dtype(torch::kInt64));
    auto best = torch::empty({b, noise_dim}, z.options());
    for (int64_t i = 0; i < b; ++i) {
        int64_t arg = 0;
        for (int64_t c = 1; c < k; ++c) {
            if (acc[c][i] < acc[arg][i]) arg = c;
        }
        index[i] = arg;
        best[i] = codes[arg][i];
    }
    return {best, losses, index};
}

torch::Tensor tau_tensor(const TransformSet& set) {
    const auto m = static_cast<int64_t>(set.transforms.size());
    auto out = torch::zeros({m, kTauDim}, torch::TensorOptions().dtype(torch::kFloat64));
    auto acc = out.accessor<double, 2>();
    for (int64_t j = 0; j < m; ++j) {
        if (!set.present[static_cast<std::size_t>(j)]) continue;
        const auto& tr = set.transforms[static_cast<std::size_t>(j)];
        for (int a = 0; a < 3; ++a) {
            acc[j][a] = tr.shift[a];
            acc[j][3 + a] = std::log(tr.scale[a]);
        }
    }
    return out;
}

torch::Tensor presence_tensor(const std::vector<bool>& present) {
    auto out = torch::zeros({static_cast<int64_t>(present.size())}, torch::TensorOptions().dtype(torch::kBool));
    for (std::size_t j = 0; j < present.size(); ++j) out[static_cast<int64_t>(j)] = static_cast<bool>(present[j]);
    return out;
}

TransformSet transform_set(const torch::Tensor& tau, const std::vector<bool>& present) {
    auto t = tau.to(torch::kFloat64).contiguous();
    auto acc = t.accessor<double, 2>();
    TransformSet out(static_cast<int>(t.size(0)));
    for (int64_t j = 0; j < t.size(0); ++j) {
        const auto ju = static_cast<std::size_t>(j);
        out.present[ju] = present[ju];
        if (!present[ju]) continue;
        for (int a = 0; a < 3; ++a) {
            out.transforms[ju].shift[a] = acc[j][a];
            out.transforms[ju].scale[a] = std::exp(acc[j][3 + a]);
        }
    }
    return out;
}

}  // namespace partdiff
