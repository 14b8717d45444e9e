#pragma once

#include <torch/torch.h>

#include "partdiff/kernel.hpp"
#include "partdiff/layers.hpp"

#include <functional>
#include <vector>

namespace partdiff {

struct DenoiserConfig {
    int m = 4;
    int64_t latent_dim = 256;
    int64_t point_dim = 128;
    int64_t layers = 5;
    int64_t heads = 8;
    int64_t head_dim = 16;
    int64_t ff_dim = 256;
    int64_t time_dim = 64;
    double dropout = 0.2;
};

/// Noise estimator: every point attends to the m part context tokens, never to
/// other points.
class CrossDenoiserImpl : public torch::nn::Module {
public:
    explicit CrossDenoiserImpl(const DenoiserConfig& cfg);

    /// x_t [B,N,3], labels [B,N] int64, tau [B,m,6], z [B,m,d], present [B,m],
    /// t [B] int64 -> eps_hat [B,N,3].
    torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& labels, const torch::Tensor& tau,
                          const torch::Tensor& z, const torch::Tensor& present, const torch::Tensor& t);

    const DenoiserConfig& config() const { return cfg_; }

private:
    DenoiserConfig cfg_;
    torch::nn::Linear point_in_{nullptr}, context_in_{nullptr}, head_{nullptr};
    std::vector<AttentionBlock> blocks_;
};
TORCH_MODULE(CrossDenoiser);

/// Checks that every label names a present part, then runs the network.
torch::Tensor predict_noise(CrossDenoiser& net, const torch::Tensor& x_t, const torch::Tensor& labels,
                            const torch::Tensor& tau, const torch::Tensor& z, const torch::Tensor& present,
                            const torch::Tensor& t);

/// (x_t [B,N,3], t [B]) -> eps_hat. Lets losses and samplers run with oracle
/// or untrained estimators as well as the network.
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& x_t, const torch::Tensor& t)>;

/// Per-point shift and std gathered from tau [B,m,6] by labels [B,N].
std::pair<torch::Tensor, torch::Tensor> point_kernel(const torch::Tensor& tau, const torch::Tensor& labels);

/// (1/m) sum_j mean_{x in S_j} |eps - eps_hat|^2, averaged over the batch, with
/// the caller's timesteps t [B] and noise eps [B,N,3].
torch::Tensor diffusion_loss(const NoisePredictor& predict, const torch::Tensor& x0, const torch::Tensor& labels,
                             const torch::Tensor& tau, const torch::Tensor& present, const DiffusionSchedule& sched,
                             const torch::Tensor& t, const torch::Tensor& eps);

/// Same loss drawing t ~ U{1..T} per shape and then eps per point from gen.
torch::Tensor diffusion_loss(const NoisePredictor& predict, const torch::Tensor& x0, const torch::Tensor& labels,
                             const torch::Tensor& tau, const torch::Tensor& present, const DiffusionSchedule& sched,
                             at::Generator& gen);

}  // namespace partdiff
