#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>

namespace testing_support {

/// Adds N(0, scale^2) noise to every parameter.
inline void perturb(torch::nn::Module& module, double scale, uint64_t seed) {
    torch::NoGradGuard guard;
    auto gen = at::detail::createCPUGenerator(seed);
    for (auto& p : module.parameters()) p.add_(scale * torch::randn(p.sizes(), gen, p.options()));
}

/// Central finite differences of a scalar function at x (double tensor).
inline torch::Tensor numeric_grad(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                                  double h = 1e-6) {
    auto g = torch::zeros_like(x);
    auto flat = x.reshape({-1});
    auto gf = g.reshape({-1});
    for (int64_t i = 0; i < flat.numel(); ++i) {
        auto xp = flat.clone();
        auto xm = flat.clone();
        xp[i] += h;
        xm[i] -= h;
        gf[i] = (f(xp.view(x.sizes())) - f(xm.view(x.sizes()))) / (2 * h);
    }
    return g;
}

/// max |a - b| / max(max |b|, floor)
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b, double floor = 1e-12) {
    const double diff = (a - b).abs().max().item<double>();
    return diff / std::max(b.abs().max().item<double>(), floor);
}

}  // namespace testing_support
