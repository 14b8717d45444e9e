#include "partdiff/stylizer.hpp"

#include "partdiff/layers.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace partdiff {

namespace {

void require_finite(const torch::Tensor& t) {
    if (!torch::isfinite(t).all().item<bool>()) {
        throw std::runtime_error("flow overflow");
    }
}

}  // namespace

PartEncoderImpl::PartEncoderImpl(const StylizerConfig& cfg) : m_(cfg.m), latent_dim_(cfg.latent_dim) {
    std::vector<int64_t> dims{3};
    dims.insert(dims.end(), cfg.point_widths.begin(), cfg.point_widths.end());
    point_net_ = register_module("point_net", make_mlp(dims, true, true));
    heads_ = register_module("heads", torch::nn::ModuleList());
    for (int j = 0; j < m_; ++j) {
        std::vector<int64_t> head{dims.back()};
        head.insert(head.end(), cfg.head_widths.begin(), cfg.head_widths.end());
        head.push_back(2 * latent_dim_);
        heads_->push_back(make_mlp(head));
    }
}

std::pair<torch::Tensor, torch::Tensor> PartEncoderImpl::forward(const torch::Tensor& canonical,
                                                                 const torch::Tensor& labels,
                                                                 const torch::Tensor& present) {
    const auto b = canonical.size(0);
    const auto n = canonical.size(1);
    auto feats = point_net_->forward(canonical.reshape({b * n, 3})).view({b, n, -1});
    std::vector<torch::Tensor> mus, sigmas;
    for (int j = 0; j < m_; ++j) {
        auto member = labels.eq(j).unsqueeze(-1);
        auto pooled = std::get<0>(feats.masked_fill(member.logical_not(), -std::numeric_limits<double>::infinity()).max(1));
        auto has = present.select(1, j).unsqueeze(-1);
        // Pooling an absent part yields -inf; zero it before the head so no NaN reaches the gradients.
        pooled = torch::where(has, pooled, torch::zeros_like(pooled));
        auto out = heads_[static_cast<std::size_t>(j)]->as<torch::nn::Sequential>()->forward(pooled);
        auto mu = out.narrow(1, 0, latent_dim_);
        auto sigma = torch::exp(0.5 * out.narrow(1, latent_dim_, latent_dim_));
        mus.push_back(torch::where(has, mu, torch::zeros_like(mu)));
        sigmas.push_back(torch::where(has, sigma, torch::ones_like(sigma)));
    }
    return {torch::stack(mus, 1), torch::stack(sigmas, 1)};
}

MovingBatchNormImpl::MovingBatchNormImpl(int64_t dim, double momentum, double eps) : momentum_(momentum), eps_(eps) {
    log_gamma = register_parameter("log_gamma", torch::zeros({dim}));
    beta = register_parameter("beta", torch::zeros({dim}));
    running_mean = register_buffer("running_mean", torch::zeros({dim}));
    running_var = register_buffer("running_var", torch::ones({dim}));
}

std::pair<torch::Tensor, torch::Tensor> MovingBatchNormImpl::density(const torch::Tensor& x) {
    torch::Tensor mean = running_mean;
    torch::Tensor var = running_var;
    if (is_training() && x.size(0) > 1) {
        mean = x.mean(0);
        var = x.var(0, false) + eps_;
        torch::NoGradGuard guard;
        running_mean.mul_(momentum_).add_((1.0 - momentum_) * mean.detach());
        running_var.mul_(momentum_).add_((1.0 - momentum_) * var.detach());
    }
    auto y = (x - mean) * torch::rsqrt(var) * torch::exp(log_gamma) + beta;
    auto logdet = (log_gamma - 0.5 * torch::log(var)).sum().expand({x.size(0)});
    return {y, logdet};
}

std::pair<torch::Tensor, torch::Tensor> MovingBatchNormImpl::sample(const torch::Tensor& y) {
    auto x = (y - beta) * torch::exp(-log_gamma) * torch::sqrt(running_var) + running_mean;
    auto logdet = (0.5 * torch::log(running_var) - log_gamma).sum().expand({y.size(0)});
    return {x, logdet};
}

AffineCouplingImpl::AffineCouplingImpl(int64_t dim, const std::vector<int64_t>& hidden, int parity)
    : dim_(dim), first_(dim / 2), parity_(parity % 2) {
    const int64_t fixed = parity_ == 0 ? first_ : dim_ - first_;
    const int64_t free = dim_ - fixed;
    std::vector<int64_t> dims{fixed};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(free);
    scale_net_ = register_module("scale_net", make_mlp(dims));
    shift_net_ = register_module("shift_net", make_mlp(dims));
    for (auto* net : {&scale_net_, &shift_net_}) {
        auto last = (*net)[(*net)->size() - 1]->as<torch::nn::Linear>();
        torch::NoGradGuard guard;
        last->weight.zero_();
        last->bias.zero_();
    }
}

torch::Tensor AffineCouplingImpl::split_fixed(const torch::Tensor& x) const {
    return parity_ == 0 ? x.narrow(1, 0, first_) : x.narrow(1, first_, dim_ - first_);
}

torch::Tensor AffineCouplingImpl::split_free(const torch::Tensor& x) const {
    return parity_ == 0 ? x.narrow(1, first_, dim_ - first_) : x.narrow(1, 0, first_);
}

torch::Tensor AffineCouplingImpl::join(const torch::Tensor& fixed, const torch::Tensor& free) const {
    return parity_ == 0 ? torch::cat({fixed, free}, 1) : torch::cat({free, fixed}, 1);
}

std::pair<torch::Tensor, torch::Tensor> AffineCouplingImpl::shift_scale(const torch::Tensor& cond) {
    return {shift_net_->forward(cond), torch::tanh(scale_net_->forward(cond))};
}

std::pair<torch::Tensor, torch::Tensor> AffineCouplingImpl::density(const torch::Tensor& z) {
    auto fixed = split_fixed(z);
    auto [shift, log_scale] = shift_scale(fixed);
    auto free = (split_free(z) - shift) * torch::exp(-log_scale);
    return {join(fixed, free), -log_scale.sum(1)};
}

std::pair<torch::Tensor, torch::Tensor> AffineCouplingImpl::sample(const torch::Tensor& xi) {
    auto fixed = split_fixed(xi);
    auto [shift, log_scale] = shift_scale(fixed);
    auto free = split_free(xi) * torch::exp(log_scale) + shift;
    return {join(fixed, free), log_scale.sum(1)};
}

PriorFlowImpl::PriorFlowImpl(int64_t dim, int layers, const std::vector<int64_t>& hidden, double momentum, double eps)
    : dim_(dim) {
    for (int i = 0; i < layers; ++i) {
        couplings_.push_back(register_module("coupling" + std::to_string(i), AffineCoupling(dim, hidden, i % 2)));
        norms_.push_back(register_module("norm" + std::to_string(i), MovingBatchNorm(dim, momentum, eps)));
    }
}

std::pair<torch::Tensor, torch::Tensor> PriorFlowImpl::forward(const torch::Tensor& xi) {
    auto x = xi;
    auto logdet = torch::zeros({xi.size(0)}, xi.options());
    for (auto i = couplings_.size(); i-- > 0;) {
        auto [a, da] = norms_[i]->sample(x);
        auto [b, db] = couplings_[i]->sample(a);
        x = b;
        logdet = logdet + da + db;
    }
    require_finite(x);
    return {x, logdet};
}

std::pair<torch::Tensor, torch::Tensor> PriorFlowImpl::inverse(const torch::Tensor& z) {
    auto x = z;
    auto logdet = torch::zeros({z.size(0)}, z.options());
    for (std::size_t i = 0; i < couplings_.size(); ++i) {
        auto [a, da] = couplings_[i]->density(x);
        auto [b, db] = norms_[i]->density(a);
        x = b;
        logdet = logdet + da + db;
    }
    require_finite(x);
    return {x, logdet};
}

torch::Tensor PriorFlowImpl::log_prob(const torch::Tensor& z) {
    auto [xi, logdet] = inverse(z);
    return standard_normal_log_prob(xi) + logdet;
}

StylizerImpl::StylizerImpl(const StylizerConfig& cfg) : cfg_(cfg) {
    encoder = register_module("encoder", PartEncoder(cfg));
    for (int j = 0; j < cfg.m; ++j) {
        flows.push_back(register_module(
            "flow" + std::to_string(j),
            PriorFlow(cfg.latent_dim, cfg.flow_layers, cfg.flow_hidden, cfg.bn_momentum, cfg.bn_eps)));
    }
}

torch::Tensor standard_normal_log_prob(const torch::Tensor& x) {
    const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
    return (-0.5 * x.pow(2) - half_log_2pi).sum(-1);
}

torch::Tensor reparam_sample(const torch::Tensor& mu, const torch::Tensor& sigma, const torch::Tensor& noise) {
    return mu + sigma.clamp_min(kMinSigma) * noise;
}

torch::Tensor gaussian_entropy(const torch::Tensor& sigma) {
    const double d = static_cast<double>(sigma.size(-1));
    return torch::log(sigma).sum(-1) + 0.5 * d * (1.0 + std::log(2.0 * M_PI));
}

torch::Tensor prior_log_prob(Stylizer& stylizer, const torch::Tensor& z, const torch::Tensor& present) {
    const auto b = z.size(0);
    std::vector<torch::Tensor> cols;
    for (int j = 0; j < stylizer->config().m; ++j) {
        auto col = torch::zeros({b}, z.options());
        auto rows = present.select(1, j).nonzero().squeeze(1);
        if (rows.numel() > 0) {
            auto lp = stylizer->flows[static_cast<std::size_t>(j)]->log_prob(z.select(1, j).index_select(0, rows));
            col = col.index_put({rows}, lp);
        }
        cols.push_back(col);
    }
    return torch::stack(cols, 1);
}

torch::Tensor prior_sample(Stylizer& stylizer, const torch::Tensor& xi, const torch::Tensor& present) {
    std::vector<torch::Tensor> parts;
    for (int j = 0; j < stylizer->config().m; ++j) {
        auto z = stylizer->flows[static_cast<std::size_t>(j)]->forward(xi.select(1, j)).first;
        auto has = present.select(1, j).unsqueeze(-1);
        parts.push_back(torch::where(has, z, torch::zeros_like(z)));
    }
    return torch::stack(parts, 1);
}

torch::Tensor kl_loss(Stylizer& stylizer, const torch::Tensor& mu, const torch::Tensor& sigma,
                      const torch::Tensor& present, const torch::Tensor& noise) {
    auto z = reparam_sample(mu, sigma, noise);
    auto per_part = -prior_log_prob(stylizer, z, present) - gaussian_entropy(sigma);
    per_part = torch::where(present, per_part, torch::zeros_like(per_part));
    return per_part.sum(1).mean();
}

}  // namespace partdiff
