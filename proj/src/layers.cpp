#include "partdiff/layers.hpp"

#include <cmath>
#include <limits>

namespace partdiff {

torch::nn::Sequential make_mlp(const std::vector<int64_t>& dims, bool batch_norm, bool last_activation) {
    torch::nn::Sequential seq;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        seq->push_back(torch::nn::Linear(dims[i], dims[i + 1]));
        if (batch_norm) {
            seq->push_back(torch::nn::BatchNorm1d(dims[i + 1]));
        }
        if (i + 2 < dims.size() || last_activation) {
            seq->push_back(torch::nn::ReLU());
        }
    }
    return seq;
}

void zero_linear(torch::nn::Linear& layer) {
    torch::NoGradGuard guard;
    layer->weight.zero_();
    if (layer->bias.defined()) layer->bias.zero_();
}

AttentionBlockImpl::AttentionBlockImpl(int64_t dim, int64_t heads, int64_t head_dim, int64_t ff_dim, double dropout)
    : heads_(heads), head_dim_(head_dim) {
    const int64_t inner = heads * head_dim;
    to_q_ = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(dim, inner).bias(false)));
    to_k_ = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(dim, inner).bias(false)));
    to_v_ = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(dim, inner).bias(false)));
    to_out_ = register_module("to_out", torch::nn::Linear(inner, dim));
    ff_in_ = register_module("ff_in", torch::nn::Linear(dim, ff_dim));
    ff_out_ = register_module("ff_out", torch::nn::Linear(ff_dim, dim));
    norm_attn_ = register_module("norm_attn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    norm_ff_ = register_module("norm_ff", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    dropout_ = register_module("dropout", torch::nn::Dropout(dropout));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& query, const torch::Tensor& context,
                                          const torch::Tensor& key_valid) {
    const auto b = query.size(0);
    const auto l = query.size(1);
    const auto s = context.size(1);
    // [B, H, L, hd] x [B, H, hd, S]
    auto q = to_q_(query).view({b, l, heads_, head_dim_}).transpose(1, 2);
    auto k = to_k_(context).view({b, s, heads_, head_dim_}).transpose(1, 2);
    auto v = to_v_(context).view({b, s, heads_, head_dim_}).transpose(1, 2);
    auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim_));
    scores = scores.masked_fill(key_valid.logical_not().view({b, 1, 1, s}), -std::numeric_limits<double>::infinity());
    auto weights = torch::softmax(scores, -1);
    auto attended = torch::matmul(weights, v).transpose(1, 2).reshape({b, l, heads_ * head_dim_});
    auto x = norm_attn_(query + dropout_(to_out_(attended)));
    auto ff = ff_out_(dropout_(torch::relu(ff_in_(x))));
    return norm_ff_(x + dropout_(ff));
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
    const int64_t half = dim / 2;
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / static_cast<double>(half));
    auto args = t.to(torch::kFloat64).unsqueeze(-1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::sin(args), torch::cos(args)}, -1);
    if (dim % 2 == 1) {
        emb = torch::cat({emb, torch::zeros({t.size(0), 1}, opts)}, -1);
    }
    return emb;
}

}  // namespace partdiff
