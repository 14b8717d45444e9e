#pragma once

#include <torch/torch.h>

#include "partdiff/data.hpp"
#include "partdiff/layers.hpp"

#include <vector>

namespace partdiff {

struct SamplerConfig {
    int m = 4;
    int64_t latent_dim = 256;
    int64_t noise_dim = 32;
    int64_t token_dim = 256;
    int64_t layers = 5;
    int64_t heads = 8;
    int64_t head_dim = 32;
    int64_t ff_dim = 512;
    double dropout = 0.0;
    double lambda = 10.0;
};

/// Transform tensors hold 6 numbers per part: shift (3) then log-scale (3).
inline constexpr int64_t kTauDim = 6;

/// Self-attention network T(z, y): style latents plus a noise code to a
/// transform per part.
class TransformSamplerImpl : public torch::nn::Module {
public:
    explicit TransformSamplerImpl(const SamplerConfig& cfg);

    /// z [B,m,d], y [B,noise_dim], present [B,m] -> tau [B,m,6]. Absent parts
    /// are masked as keys and receive the placeholder (shift 0, log-scale 0).
    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& y, const torch::Tensor& present);

    const SamplerConfig& config() const { return cfg_; }

private:
    SamplerConfig cfg_;
    torch::nn::Linear project_{nullptr};
    torch::nn::Embedding label_embedding_{nullptr};
    std::vector<AttentionBlock> blocks_;
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(TransformSampler);

/// Per-shape sum over present parts of |dc|^2 + |d log s|^2: [B,m,6] x2 -> [B].
torch::Tensor fit_loss(const torch::Tensor& tau, const torch::Tensor& tau_ref, const torch::Tensor& present);

/// Same quantity on TransformSets; presence masks must agree.
double fit_loss(const TransformSet& tau, const TransformSet& tau_ref);

struct CimleSelection {
    torch::Tensor codes;   // [B, noise_dim], best code per shape
    torch::Tensor losses;  // [K, B], fit loss of every candidate
    torch::Tensor index;   // [B] int64, chosen candidate
};

/// Draws K codes per shape (tensor [K,B,noise_dim] from `gen`) and keeps the
/// one whose transforms fit tau_ref best, lowest index on ties.
CimleSelection cimle_select(TransformSampler& sampler, const torch::Tensor& z, const torch::Tensor& present,
                            const torch::Tensor& tau_ref, int k, at::Generator& gen);

/// TransformSet <-> [m,6] tensor.
torch::Tensor tau_tensor(const TransformSet& set);
torch::Tensor presence_tensor(const std::vector<bool>& present);
TransformSet transform_set(const torch::Tensor& tau, const std::vector<bool>& present);

}  // namespace partdiff
