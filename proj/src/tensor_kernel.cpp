#include "partdiff/tensor_kernel.hpp"

#include <cmath>

namespace partdiff {

namespace {

torch::Tensor per_shape(const std::vector<double>& table, const torch::Tensor& t, const torch::Tensor& like) {
    auto values = torch::tensor(table, torch::TensorOptions().dtype(torch::kFloat64));
    return values.index_select(0, t.to(torch::kInt64) - 1).to(like.scalar_type()).view({-1, 1, 1});
}

}  // namespace

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& mu,
                       const torch::Tensor& sd, const DiffusionSchedule& sched, const torch::Tensor& noise) {
    if (t.numel() > 0 && (t.min().item<int64_t>() < 1 || t.max().item<int64_t>() > sched.steps())) {
        throw std::out_of_range("timestep outside schedule");
    }
    auto keep = torch::sqrt(per_shape(sched.alpha_bars(), t, x0));
    auto spread = torch::sqrt(1.0 - per_shape(sched.alpha_bars(), t, x0));
    return keep * x0 + (1.0 - keep) * mu + spread * sd * noise;
}

torch::Tensor noise_to_mean(const torch::Tensor& xt, const torch::Tensor& eps_hat, int t, const torch::Tensor& mu,
                            const torch::Tensor& sd, const DiffusionSchedule& sched) {
    const double a = sched.alpha(t);
    const double abar = sched.alpha_bar(t);
    const double root_a = std::sqrt(a);
    const double eps_coef = (1.0 - a) / std::sqrt(a * (1.0 - abar));
    return xt / root_a - (1.0 - root_a) / root_a * mu - eps_coef * sd * eps_hat;
}

torch::Tensor reverse_step(const torch::Tensor& xt, const torch::Tensor& eps_hat, int t, const torch::Tensor& mu,
                           const torch::Tensor& sd, const DiffusionSchedule& sched, const torch::Tensor& noise) {
    auto mean = noise_to_mean(xt, eps_hat, t, mu, sd, sched);
    if (t == 1) return mean;
    return mean + std::sqrt(sched.eta2(t)) * sd * noise;
}

torch::Tensor true_noise(const torch::Tensor& xt, const torch::Tensor& x0, int t, const torch::Tensor& mu,
                         const torch::Tensor& sd, const DiffusionSchedule& sched) {
    const double abar = sched.alpha_bar(t);
    const double keep = std::sqrt(abar);
    return (xt - keep * x0 - (1.0 - keep) * mu) / (std::sqrt(1.0 - abar) * sd);
}

torch::Tensor clip_noise(const torch::Tensor& xt, const torch::Tensor& eps_hat, int t, const torch::Tensor& mu,
                         const torch::Tensor& sd, const DiffusionSchedule& sched, double bound) {
    const double abar = sched.alpha_bar(t);
    const double keep = std::sqrt(abar);
    auto x0 = (xt - std::sqrt(1.0 - abar) * sd * eps_hat - (1.0 - keep) * mu) / keep;
    auto canonical = (x0 - mu) / sd;
    auto inside = canonical.abs() <= bound;
    auto clipped = mu + sd * canonical.clamp(-bound, bound);
    return torch::where(inside, eps_hat, true_noise(xt, clipped, t, mu, sd, sched));
}

}  // namespace partdiff
