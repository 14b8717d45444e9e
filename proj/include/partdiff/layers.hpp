#pragma once

#include <torch/torch.h>

#include <vector>

namespace partdiff {

/// Linear layers of widths dims[0] -> dims[1] -> ... with ReLU between them.
/// `batch_norm` inserts BatchNorm1d after every linear layer (inputs must be
/// flattened to [rows, features]); `last_activation` adds ReLU after the last.
torch::nn::Sequential make_mlp(const std::vector<int64_t>& dims, bool batch_norm = false,
                               bool last_activation = false);

/// Zeroes weight and bias of a linear layer.
void zero_linear(torch::nn::Linear& layer);

/// Transformer block of the attention networks: multi-head attention against
/// `context` followed by a feed-forward layer, each with a residual and a
/// post-layer-norm. Self-attention when context is the input itself.
class AttentionBlockImpl : public torch::nn::Module {
public:
    AttentionBlockImpl(int64_t dim, int64_t heads, int64_t head_dim, int64_t ff_dim, double dropout);

    /// query: [B, L, dim]; context: [B, S, dim]; key_valid: [B, S] bool, false
    /// entries receive zero attention weight. Every row needs one valid key.
    torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& context, const torch::Tensor& key_valid);

private:
    int64_t heads_;
    int64_t head_dim_;
    torch::nn::Linear to_q_{nullptr}, to_k_{nullptr}, to_v_{nullptr}, to_out_{nullptr};
    torch::nn::Linear ff_in_{nullptr}, ff_out_{nullptr};
    torch::nn::LayerNorm norm_attn_{nullptr}, norm_ff_{nullptr};
    torch::nn::Dropout dropout_{nullptr};
};
TORCH_MODULE(AttentionBlock);

/// Sinusoidal embedding of integer timesteps t [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

}  // namespace partdiff
