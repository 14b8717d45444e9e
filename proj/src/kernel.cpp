#include "partdiff/kernel.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace partdiff {

DiffusionSchedule DiffusionSchedule::linear(int steps, double alpha_start, double alpha_end) {
    if (steps < 1) {
        throw std::invalid_argument("schedule needs at least one step");
    }
    if (!(alpha_end > 0.0 && alpha_end <= alpha_start && alpha_start < 1.0)) {
        throw std::invalid_argument("schedule requires 0 < alpha_end <= alpha_start < 1");
    }
    DiffusionSchedule s;
    s.alpha_start_ = alpha_start;
    s.alpha_end_ = alpha_end;
    s.alpha_.resize(static_cast<std::size_t>(steps));
    s.alpha_bar_.resize(static_cast<std::size_t>(steps));
    s.eta2_.resize(static_cast<std::size_t>(steps));
    double running = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        const double a = alpha_start + (alpha_end - alpha_start) * frac;
        s.alpha_[static_cast<std::size_t>(i)] = a;
        const double prev = running;
        running *= a;
        s.alpha_bar_[static_cast<std::size_t>(i)] = running;
        s.eta2_[static_cast<std::size_t>(i)] = i == 0 ? 0.0 : (1.0 - a) * (1.0 - prev) / (1.0 - running);
    }
    return s;
}

void DiffusionSchedule::check(int t) const {
    if (t < 1 || t > steps()) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    }
}

double DiffusionSchedule::alpha(int t) const {
    check(t);
    return alpha_[static_cast<std::size_t>(t - 1)];
}

double DiffusionSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    check(t);
    return alpha_bar_[static_cast<std::size_t>(t - 1)];
}

double DiffusionSchedule::eta2(int t) const {
    check(t);
    return eta2_[static_cast<std::size_t>(t - 1)];
}

KernelCondition KernelCondition::standard(std::size_t dim) {
    return KernelCondition{std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
}

namespace {

void check_dims(const KernelCondition& cond, std::size_t a, std::size_t b) {
    if (cond.stddev.size() != cond.dim() || a != cond.dim() || b != cond.dim()) {
        throw std::invalid_argument("kernel dimension mismatch");
    }
}

}  // namespace

std::vector<double> forward_marginal(std::span<const double> x0, int t, const KernelCondition& cond,
                                     const DiffusionSchedule& sched, std::span<const double> noise) {
    check_dims(cond, x0.size(), noise.size());
    if (t < 1) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps()) + "]");
    }
    const double abar = sched.alpha_bar(t);
    const double keep = std::sqrt(abar);
    const double spread = std::sqrt(1.0 - abar);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        out[i] = keep * x0[i] + (1.0 - keep) * cond.mu[i] + spread * cond.stddev[i] * noise[i];
    }
    return out;
}

std::vector<double> forward_step(std::span<const double> x_prev, int t, const KernelCondition& cond,
                                 const DiffusionSchedule& sched, std::span<const double> noise) {
    check_dims(cond, x_prev.size(), noise.size());
    const double a = sched.alpha(t);
    const double keep = std::sqrt(a);
    const double spread = std::sqrt(1.0 - a);
    std::vector<double> out(x_prev.size());
    for (std::size_t i = 0; i < x_prev.size(); ++i) {
        out[i] = keep * x_prev[i] + (1.0 - keep) * cond.mu[i] + spread * cond.stddev[i] * noise[i];
    }
    return out;
}

PosteriorCoefficients posterior_coefficients(int t, const DiffusionSchedule& sched) {
    if (t < 2) {
        throw std::out_of_range("posterior defined for t >= 2");
    }
    const double a = sched.alpha(t);
    const double abar = sched.alpha_bar(t);
    const double abar_prev = sched.alpha_bar(t - 1);
    const double denom = 1.0 - abar;
    PosteriorCoefficients c;
    c.x0 = (1.0 - a) * std::sqrt(abar_prev) / denom;
    c.xt = (1.0 - abar_prev) * std::sqrt(a) / denom;
    c.mu = 1.0 + (std::sqrt(abar) - 1.0) * (std::sqrt(a) + std::sqrt(abar_prev)) / denom;
    return c;
}

PosteriorParams posterior_params(std::span<const double> x0, std::span<const double> xt, int t,
                                 const KernelCondition& cond, const DiffusionSchedule& sched) {
    check_dims(cond, x0.size(), xt.size());
    const auto c = posterior_coefficients(t, sched);
    PosteriorParams out;
    out.eta2 = sched.eta2(t);
    out.mean.resize(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        out.mean[i] = c.x0 * x0[i] + c.xt * xt[i] + c.mu * cond.mu[i];
    }
    return out;
}

std::vector<double> noise_to_mean(std::span<const double> xt, std::span<const double> eps_hat, int t,
                                  const KernelCondition& cond, const DiffusionSchedule& sched) {
    check_dims(cond, xt.size(), eps_hat.size());
    const double a = sched.alpha(t);
    const double abar = sched.alpha_bar(t);
    const double root_a = std::sqrt(a);
    const double eps_coef = (1.0 - a) / std::sqrt(a * (1.0 - abar));
    std::vector<double> out(xt.size());
    for (std::size_t i = 0; i < xt.size(); ++i) {
        out[i] = xt[i] / root_a - (1.0 - root_a) / root_a * cond.mu[i] - eps_coef * cond.stddev[i] * eps_hat[i];
    }
    return out;
}

std::vector<double> reverse_step(std::span<const double> xt, std::span<const double> eps_hat, int t,
                                 const KernelCondition& cond, const DiffusionSchedule& sched,
                                 std::span<const double> noise) {
    auto out = noise_to_mean(xt, eps_hat, t, cond, sched);
    if (t == 1) return out;
    if (noise.size() != out.size()) {
        throw std::invalid_argument("kernel dimension mismatch");
    }
    const double eta = std::sqrt(sched.eta2(t));
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += eta * cond.stddev[i] * noise[i];
    }
    return out;
}

}  // namespace partdiff
