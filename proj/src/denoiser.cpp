#include "partdiff/denoiser.hpp"

#include "partdiff/tensor_kernel.hpp"

#include <stdexcept>
#include <string>

namespace partdiff {

CrossDenoiserImpl::CrossDenoiserImpl(const DenoiserConfig& cfg) : cfg_(cfg) {
    // point token: x_t, (x_t - c)/s, c, log s, one-hot label
    point_in_ = register_module("point_in", torch::nn::Linear(12 + cfg.m, cfg.point_dim));
    // context token: z, c, log s, one-hot part, time embedding
    context_in_ = register_module("context_in", torch::nn::Linear(cfg.latent_dim + 6 + cfg.m + cfg.time_dim, cfg.point_dim));
    for (int64_t i = 0; i < cfg.layers; ++i) {
        blocks_.push_back(register_module("block" + std::to_string(i),
                                          AttentionBlock(cfg.point_dim, cfg.heads, cfg.head_dim, cfg.ff_dim, cfg.dropout)));
    }
    head_ = register_module("head", torch::nn::Linear(cfg.point_dim, 3));
}

torch::Tensor CrossDenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& labels, const torch::Tensor& tau,
                                         const torch::Tensor& z, const torch::Tensor& present, const torch::Tensor& t) {
    const auto b = z.size(0);
    const auto opts = x_t.options();
    auto [shift, sd] = point_kernel(tau, labels);
    auto onehot = torch::one_hot(labels, cfg_.m).to(opts.dtype());
    auto points = point_in_(torch::cat({x_t, (x_t - shift) / sd, shift, torch::log(sd), onehot}, -1));

    auto part_ids = torch::eye(cfg_.m, opts).unsqueeze(0).expand({b, cfg_.m, cfg_.m});
    auto temb = timestep_embedding(t, cfg_.time_dim).to(opts.dtype()).unsqueeze(1).expand({b, cfg_.m, cfg_.time_dim});
    auto context = context_in_(torch::cat({z, tau, part_ids, temb}, -1));

    for (auto& block : blocks_) points = block->forward(points, context, present);
    return head_(points);
}

torch::Tensor predict_noise(CrossDenoiser& net, const torch::Tensor& x_t, const torch::Tensor& labels,
                            const torch::Tensor& tau, const torch::Tensor& z, const torch::Tensor& present,
                            const torch::Tensor& t) {
    if (labels.numel() > 0) {
        if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= net->config().m) {
            throw std::invalid_argument("label out of range");
        }
        if (!present.gather(1, labels).all().item<bool>()) {
            throw std::invalid_argument("label references an absent part");
        }
    }
    return net->forward(x_t, labels, tau, z, present, t);
}

std::pair<torch::Tensor, torch::Tensor> point_kernel(const torch::Tensor& tau, const torch::Tensor& labels) {
    auto idx = labels.unsqueeze(-1).expand({labels.size(0), labels.size(1), 6});
    auto per_point = tau.gather(1, idx);
    return {per_point.narrow(-1, 0, 3), torch::exp(per_point.narrow(-1, 3, 3))};
}

torch::Tensor diffusion_loss(const NoisePredictor& predict, const torch::Tensor& x0, const torch::Tensor& labels,
                             const torch::Tensor& tau, const torch::Tensor& present, const DiffusionSchedule& sched,
                             const torch::Tensor& t, const torch::Tensor& eps) {
    const auto m = tau.size(1);
    auto [mu, sd] = point_kernel(tau, labels);
    auto x_t = q_sample(x0, t, mu, sd, sched, eps);
    auto err = (eps - predict(x_t, t)).pow(2).sum(-1);
    auto onehot = torch::one_hot(labels, m).to(err.scalar_type());
    auto sums = torch::einsum("bn,bnj->bj", {err, onehot});
    auto counts = onehot.sum(1);
    auto per_part = sums / counts.clamp_min(1.0);
    per_part = torch::where(present & counts.gt(0), per_part, torch::zeros_like(per_part));
    return (per_part.sum(1) / static_cast<double>(m)).mean();
}

torch::Tensor diffusion_loss(const NoisePredictor& predict, const torch::Tensor& x0, const torch::Tensor& labels,
                             const torch::Tensor& tau, const torch::Tensor& present, const DiffusionSchedule& sched,
                             at::Generator& gen) {
    auto t = torch::randint(1, sched.steps() + 1, {x0.size(0)}, gen, torch::TensorOptions().dtype(torch::kInt64));
    auto eps = torch::randn(x0.sizes(), gen, x0.options());
    return diffusion_loss(predict, x0, labels, tau, present, sched, t, eps);
}

}  // namespace partdiff
