#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

namespace partdiff {

struct StylizerConfig {
    int m = 4;
    int64_t latent_dim = 256;
    std::vector<int64_t> point_widths{128, 256, 512};
    std::vector<int64_t> head_widths{256, 128};
    int flow_layers = 14;
    std::vector<int64_t> flow_hidden{256, 256};
    double bn_momentum = 0.9;
    double bn_eps = 1e-5;
};

/// Smallest posterior std; reparam_sample clamps to it.
inline constexpr double kMinSigma = 1e-6;

/// Shared PointNet point features, max-pooled per part, then one head per part.
class PartEncoderImpl : public torch::nn::Module {
public:
    explicit PartEncoderImpl(const StylizerConfig& cfg);

    /// canonical [B,N,3], labels [B,N] int64, present [B,m] bool ->
    /// (mu, sigma), each [B,m,d]. Absent parts report mu = 0, sigma = 1.
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& canonical, const torch::Tensor& labels,
                                                    const torch::Tensor& present);

private:
    int m_;
    int64_t latent_dim_;
    torch::nn::Sequential point_net_{nullptr};
    torch::nn::ModuleList heads_{nullptr};
};
TORCH_MODULE(PartEncoder);

/// Batch normalization used inside the prior flow. Applied in the density
/// direction (z -> xi); the buffer keeps the regularized variance var + eps.
class MovingBatchNormImpl : public torch::nn::Module {
public:
    MovingBatchNormImpl(int64_t dim, double momentum, double eps);

    /// x [B,d] -> (normalized, logdet [B]). Training mode with B > 1 uses and
    /// tracks batch statistics; otherwise running statistics.
    std::pair<torch::Tensor, torch::Tensor> density(const torch::Tensor& x);
    /// Exact inverse of density() under running statistics, with its logdet.
    std::pair<torch::Tensor, torch::Tensor> sample(const torch::Tensor& y);

    torch::Tensor log_gamma, beta, running_mean, running_var;

private:
    double momentum_;
    double eps_;
};
TORCH_MODULE(MovingBatchNorm);

/// Affine coupling over one half of the coordinates; parity picks the half.
class AffineCouplingImpl : public torch::nn::Module {
public:
    AffineCouplingImpl(int64_t dim, const std::vector<int64_t>& hidden, int parity);

    /// z -> xi with logdet [B] of that direction.
    std::pair<torch::Tensor, torch::Tensor> density(const torch::Tensor& z);
    /// xi -> z with logdet [B] of that direction.
    std::pair<torch::Tensor, torch::Tensor> sample(const torch::Tensor& xi);

private:
    std::pair<torch::Tensor, torch::Tensor> shift_scale(const torch::Tensor& cond);
    torch::Tensor split_fixed(const torch::Tensor& x) const;
    torch::Tensor split_free(const torch::Tensor& x) const;
    torch::Tensor join(const torch::Tensor& fixed, const torch::Tensor& free) const;

    int64_t dim_;
    int64_t first_;
    int parity_;
    torch::nn::Sequential scale_net_{nullptr}, shift_net_{nullptr};
};
TORCH_MODULE(AffineCoupling);

/// Coupling layers, each followed by moving batch norm, mapping base noise xi
/// to a style latent z. Freshly constructed, the flow is the identity.
class PriorFlowImpl : public torch::nn::Module {
public:
    PriorFlowImpl(int64_t dim, int layers, const std::vector<int64_t>& hidden, double momentum, double eps);

    /// xi -> (z, log|dz/dxi|)
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& xi);
    /// z -> (xi, log|dxi/dz|)
    std::pair<torch::Tensor, torch::Tensor> inverse(const torch::Tensor& z);
    /// log density of z [B,d] -> [B].
    torch::Tensor log_prob(const torch::Tensor& z);

    int64_t dim() const { return dim_; }

private:
    int64_t dim_;
    std::vector<AffineCoupling> couplings_;
    std::vector<MovingBatchNorm> norms_;
};
TORCH_MODULE(PriorFlow);

class StylizerImpl : public torch::nn::Module {
public:
    explicit StylizerImpl(const StylizerConfig& cfg);

    PartEncoder encoder{nullptr};
    std::vector<PriorFlow> flows;
    const StylizerConfig& config() const { return cfg_; }

private:
    StylizerConfig cfg_;
};
TORCH_MODULE(Stylizer);

torch::Tensor standard_normal_log_prob(const torch::Tensor& x);

torch::Tensor reparam_sample(const torch::Tensor& mu, const torch::Tensor& sigma, const torch::Tensor& noise);

/// Entropy of N(mu, diag(sigma^2)) summed over the last dimension.
torch::Tensor gaussian_entropy(const torch::Tensor& sigma);

/// Per-part prior log density: z [B,m,d] -> [B,m]; absent entries are 0.
torch::Tensor prior_log_prob(Stylizer& stylizer, const torch::Tensor& z, const torch::Tensor& present);

/// Maps base noise xi [B,m,d] through each part's flow; absent parts get the
/// zero dummy latent.
torch::Tensor prior_sample(Stylizer& stylizer, const torch::Tensor& xi, const torch::Tensor& present);

/// Batch mean of sum over present parts of -log p(z) - H(Q), z = mu + sigma * noise.
torch::Tensor kl_loss(Stylizer& stylizer, const torch::Tensor& mu, const torch::Tensor& sigma,
                      const torch::Tensor& present, const torch::Tensor& noise);

}  // namespace partdiff
