#pragma once

#include <span>
#include <vector>

namespace partdiff {

/// Variance schedule of a T-step diffusion. Timesteps are 1-based: alpha(1) is
/// the first forward step, and alpha_bar(0) is defined as 1.
class DiffusionSchedule {
public:
    /// Linear interpolation of alpha from `alpha_start` (t = 1) to `alpha_end`
    /// (t = T). Requires T >= 1 and 0 < alpha_end <= alpha_start < 1.
    static DiffusionSchedule linear(int steps, double alpha_start, double alpha_end);

    int steps() const { return static_cast<int>(alpha_.size()); }
    double alpha_start() const { return alpha_start_; }
    double alpha_end() const { return alpha_end_; }

    double alpha(int t) const;
    double beta(int t) const { return 1.0 - alpha(t); }
    double alpha_bar(int t) const;
    /// Posterior variance factor; eta2(1) is 0.
    double eta2(int t) const;

    const std::vector<double>& alphas() const { return alpha_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }
    const std::vector<double>& eta2s() const { return eta2_; }

private:
    void check(int t) const;

    double alpha_start_ = 0.0;
    double alpha_end_ = 0.0;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
    std::vector<double> eta2_;
};

/// Shift prior mu and diagonal covariance of the generalized kernel. The
/// covariance is held as per-axis standard deviations; variance = stddev^2.
struct KernelCondition {
    std::vector<double> mu;
    std::vector<double> stddev;

    static KernelCondition standard(std::size_t dim);
    std::size_t dim() const { return mu.size(); }
};

/// Sample of q(x_t | x_0): sqrt(abar) x0 + (1 - sqrt(abar)) mu + sqrt(1 - abar) stddev * noise.
std::vector<double> forward_marginal(std::span<const double> x0, int t, const KernelCondition& cond,
                                     const DiffusionSchedule& sched, std::span<const double> noise);

/// One forward transition q(x_t | x_{t-1}).
std::vector<double> forward_step(std::span<const double> x_prev, int t, const KernelCondition& cond,
                                 const DiffusionSchedule& sched, std::span<const double> noise);

struct PosteriorParams {
    std::vector<double> mean;
    /// Covariance is eta2 * diag(stddev^2).
    double eta2 = 0.0;
};

/// Coefficients of the posterior mean on x0, x_t and mu.
struct PosteriorCoefficients {
    double x0 = 0.0;
    double xt = 0.0;
    double mu = 0.0;
};

PosteriorCoefficients posterior_coefficients(int t, const DiffusionSchedule& sched);

/// q(x_{t-1} | x_t, x_0). Requires t >= 2.
PosteriorParams posterior_params(std::span<const double> x0, std::span<const double> xt, int t,
                                 const KernelCondition& cond, const DiffusionSchedule& sched);

/// Posterior mean rewritten in terms of a noise estimate instead of x0.
std::vector<double> noise_to_mean(std::span<const double> xt, std::span<const double> eps_hat, int t,
                                  const KernelCondition& cond, const DiffusionSchedule& sched);

/// Ancestral step: noise_to_mean + eta_t * stddev * noise for t >= 2, the mean
/// alone for t = 1.
std::vector<double> reverse_step(std::span<const double> xt, std::span<const double> eps_hat, int t,
                                 const KernelCondition& cond, const DiffusionSchedule& sched,
                                 std::span<const double> noise);

}  // namespace partdiff
