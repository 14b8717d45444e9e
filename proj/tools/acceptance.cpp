// Acceptance suite: one PASS/FAIL line per criterion. Criteria 5, 6, 8 and 9
// share one desk-scale model trained on the synthetic two-mode chairs.

#include <CLI11.hpp>

#include "partdiff/dataset.hpp"
#include "partdiff/kernel.hpp"
#include "partdiff/metrics.hpp"
#include "partdiff/pipeline.hpp"
#include "partdiff/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace partdiff;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Verdict {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

int failures = 0;

void report(int id, const std::string& name, Verdict& v, double secs) {
    if (!v.pass) ++failures;
    std::printf("%s %d %s:%s (%.1f s)\n", v.pass ? "PASS" : "FAIL", id, name.c_str(), v.detail.str().c_str(), secs);
    std::fflush(stdout);
}

std::string sci(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", x);
    return buf;
}

torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

// ---------------------------------------------------------------------------
// 1-2: kernel algebra against independent scalar oracles.

const DiffusionSchedule& schedule100() {
    static const auto s = DiffusionSchedule::linear(100, 0.9999, 0.08);
    return s;
}

std::vector<double> normals(std::mt19937_64& rng, std::size_t n) {
    std::normal_distribution<double> g;
    std::vector<double> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

KernelCondition random_condition(std::mt19937_64& rng, std::size_t d) {
    std::uniform_real_distribution<double> mu(-2.0, 2.0), sd(0.05, 3.0);
    KernelCondition c;
    for (std::size_t i = 0; i < d; ++i) {
        c.mu.push_back(mu(rng));
        c.stddev.push_back(sd(rng));
    }
    return c;
}

double log_normal(double x, double mean, double var) {
    return -0.5 * (x - mean) * (x - mean) / var - 0.5 * std::log(2.0 * M_PI * var);
}

// Posterior moments from the Bayes product of the step likelihood and the
// marginal at t-1, integrated by the trapezoid rule (coarse pass, then fine).
std::pair<double, double> grid_posterior(double x0, double xt, double mu, double sd, int t, const DiffusionSchedule& s) {
    const double a = s.alpha(t);
    const double abp = s.alpha_bar(t - 1);
    auto log_density = [&](double x) {
        return log_normal(xt, std::sqrt(a) * x + (1 - std::sqrt(a)) * mu, (1 - a) * sd * sd) +
               log_normal(x, std::sqrt(abp) * x0 + (1 - std::sqrt(abp)) * mu, (1 - abp) * sd * sd);
    };
    auto moments = [&](double lo, double hi, int n) {
        const double h = (hi - lo) / (n - 1);
        std::vector<double> logs(n);
        double peak = -1e300;
        for (int i = 0; i < n; ++i) peak = std::max(peak, logs[i] = log_density(lo + i * h));
        double z = 0, m1 = 0, m2 = 0;
        for (int i = 0; i < n; ++i) {
            const double w = std::exp(logs[i] - peak) * ((i == 0 || i == n - 1) ? 0.5 : 1.0);
            const double x = lo + i * h;
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        return std::pair{m1 / z, m2 / z - (m1 / z) * (m1 / z)};
    };
    const double prior_mean = std::sqrt(abp) * x0 + (1 - std::sqrt(abp)) * mu;
    const double prior_sd = std::sqrt(1 - abp) * sd;
    auto [m0, v0] = moments(prior_mean - 12 * prior_sd, prior_mean + 12 * prior_sd, 200001);
    return moments(m0 - 14 * std::sqrt(v0), m0 + 14 * std::sqrt(v0), 200001);
}

void criterion1() {
    const auto start = Clock::now();
    Verdict v;
    const auto& s = schedule100();
    std::mt19937_64 rng(101);

    // moments of t chained single-step kernels vs the closed-form marginal
    double compose_err = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto c = random_condition(rng, 3);
        const auto x0 = normals(rng, 3);
        const std::vector<double> zero(3, 0.0), one(3, 1.0);
        for (int t = 1; t <= s.steps(); ++t) {
            const auto mean = forward_marginal(x0, t, c, s, zero);
            const auto spread = forward_marginal(x0, t, c, s, one);
            for (int i = 0; i < 3; ++i) {
                double m = x0[i], var = 0.0;
                for (int k = 1; k <= t; ++k) {
                    const double a = s.alpha(k);
                    m = std::sqrt(a) * m + (1 - std::sqrt(a)) * c.mu[i];
                    var = a * var + (1 - a) * c.stddev[i] * c.stddev[i];
                }
                compose_err = std::max(compose_err, std::abs(mean[i] - m));
                compose_err = std::max(compose_err, std::abs((spread[i] - mean[i]) * (spread[i] - mean[i]) - var));
                if (t == 1) {
                    const auto step = forward_step(x0, 1, c, s, zero);
                    compose_err = std::max(compose_err, std::abs(step[i] - m));
                }
            }
        }
    }
    v.require(compose_err < 1e-12, "composition error " + sci(compose_err));
    v.detail << " composition " << sci(compose_err);

    double post_err = 0.0;
    for (int t : {2, 3, 5, 10, 20, 50, 75, 99, 100}) {
        const auto c = random_condition(rng, 1);
        const std::vector<double> x0{std::uniform_real_distribution<double>(-1, 1)(rng)};
        const auto xt = forward_marginal(x0, t, c, s, normals(rng, 1));
        const auto post = posterior_params(x0, xt, t, c, s);
        const auto [m, var] = grid_posterior(x0[0], xt[0], c.mu[0], c.stddev[0], t, s);
        post_err = std::max(post_err, std::abs(post.mean[0] - m));
        post_err = std::max(post_err, std::abs(post.eta2 * c.stddev[0] * c.stddev[0] - var) / var);
    }
    v.require(post_err < 1e-4, "grid posterior error " + sci(post_err));
    v.detail << ", grid posterior " << sci(post_err);

    double ddpm_err = 0.0;
    const auto std_c = KernelCondition::standard(3);
    for (int t = 2; t <= s.steps(); ++t) {
        const double a = s.alpha(t), ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1), b = 1 - a;
        const auto x0 = normals(rng, 3), xt = normals(rng, 3), eps = normals(rng, 3), z = normals(rng, 3);
        const auto post = posterior_params(x0, xt, t, std_c, s);
        const auto from_noise = noise_to_mean(xt, eps, t, std_c, s);
        const auto step = reverse_step(xt, eps, t, std_c, s, z);
        const auto marg = forward_marginal(x0, t, std_c, s, eps);
        const double beta_tilde = (1 - abp) / (1 - ab) * b;
        ddpm_err = std::max(ddpm_err, std::abs(post.eta2 - beta_tilde));
        for (int i = 0; i < 3; ++i) {
            ddpm_err = std::max(ddpm_err, std::abs(marg[i] - (std::sqrt(ab) * x0[i] + std::sqrt(1 - ab) * eps[i])));
            const double mean = std::sqrt(abp) * b / (1 - ab) * x0[i] + std::sqrt(a) * (1 - abp) / (1 - ab) * xt[i];
            ddpm_err = std::max(ddpm_err, std::abs(post.mean[i] - mean));
            const double eps_mean = (xt[i] - b / std::sqrt(1 - ab) * eps[i]) / std::sqrt(a);
            ddpm_err = std::max(ddpm_err, std::abs(from_noise[i] - eps_mean));
            ddpm_err = std::max(ddpm_err, std::abs(step[i] - (eps_mean + std::sqrt(beta_tilde) * z[i])));
        }
    }
    v.require(ddpm_err < 1e-12, "standard reduction error " + sci(ddpm_err));
    v.detail << ", standard reduction " << sci(ddpm_err);
    const double secs = seconds_since(start);
    v.require(secs < 10.0, "runtime over 10 s");
    report(1, "kernel exactness", v, secs);
}

void criterion2() {
    const auto start = Clock::now();
    Verdict v;
    const auto& s = schedule100();
    std::mt19937_64 rng(202);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto c = random_condition(rng, 3);
        const auto x0 = normals(rng, 3);
        const auto eps = normals(rng, 3);
        for (int t = 2; t <= s.steps(); ++t) {
            const auto xt = forward_marginal(x0, t, c, s, eps);
            const auto direct = posterior_params(x0, xt, t, c, s).mean;
            const auto via_noise = noise_to_mean(xt, eps, t, c, s);
            for (int i = 0; i < 3; ++i) worst = std::max(worst, std::abs(direct[i] - via_noise[i]));
        }
    }
    v.require(worst < 1e-8, "max error " + sci(worst));
    v.detail << " max error " << sci(worst) << " over 1000 draws, t = 2..100";
    const double secs = seconds_since(start);
    v.require(secs < 5.0, "runtime over 5 s");
    report(2, "reparameterization identity", v, secs);
}

// ---------------------------------------------------------------------------
// 3-4: flow and loss gradients in double precision.

void perturb(torch::nn::Module& module, double scale, std::uint64_t seed) {
    torch::NoGradGuard guard;
    auto gen = make_generator(seed);
    for (auto& p : module.parameters()) p.add_(scale * torch::randn(p.sizes(), gen, p.options()));
}

PriorFlow random_flow(int64_t d, int layers, std::uint64_t seed) {
    torch::manual_seed(seed);
    PriorFlow flow(d, layers, std::vector<int64_t>{32, 32}, 0.9, 1e-5);
    flow->to(torch::kFloat64);
    perturb(*flow, 0.3, seed);
    torch::NoGradGuard guard;
    auto gen = make_generator(seed + 1);
    for (auto& b : flow->buffers()) b.copy_(0.5 + torch::rand(b.sizes(), gen, b.options()));
    flow->eval();
    return flow;
}

void criterion3() {
    const auto start = Clock::now();
    Verdict v;
    torch::NoGradGuard guard;

    auto flow = random_flow(16, 8, 301);
    auto gen = make_generator(302);
    auto xi = torch::randn({256, 16}, gen, f64());
    auto z = flow->forward(xi).first;
    const double trip = (flow->inverse(z).first - xi).abs().max().item<double>();
    v.require(trip < 1e-5, "round trip " + sci(trip));
    v.detail << " round trip " << sci(trip);

    auto small = random_flow(4, 6, 303);
    double ld_err = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        auto x = torch::randn({1, 4}, gen, f64());
        auto jac = torch::zeros({4, 4}, f64());
        const double h = 1e-6;
        for (int i = 0; i < 4; ++i) {
            auto xp = x.clone(), xm = x.clone();
            xp[0][i] += h;
            xm[0][i] -= h;
            jac.select(1, i).copy_((small->forward(xp).first - small->forward(xm).first)[0] / (2 * h));
        }
        const double fd = std::log(std::abs(torch::det(jac).item<double>()));
        ld_err = std::max(ld_err, std::abs(fd - small->forward(x).second.item<double>()));
    }
    v.require(ld_err < 1e-3, "logdet error " + sci(ld_err));
    v.detail << ", logdet vs FD " << sci(ld_err);

    torch::manual_seed(304);
    PriorFlow fresh(16, 8, std::vector<int64_t>{32, 32}, 0.9, 1e-5);
    fresh->to(torch::kFloat64);
    fresh->eval();
    auto x = torch::randn({64, 16}, gen, f64());
    // standard normal log density written out per coordinate
    auto expected = (-0.5 * x.pow(2) - 0.5 * std::log(2 * M_PI)).sum(1);
    const auto lp = fresh->log_prob(x);
    const bool exact = torch::equal(lp, standard_normal_log_prob(x));
    const double formula_err = (lp - expected).abs().max().item<double>();
    v.require(exact && formula_err < 1e-12, "identity flow log density differs");
    v.detail << ", identity log density " << (exact ? "exact" : "inexact") << " (" << sci(formula_err) << " from the formula)";
    const double secs = seconds_since(start);
    v.require(secs < 30.0, "runtime over 30 s");
    report(3, "flow correctness", v, secs);
}

double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
    return (a - b).abs().max().item<double>() / std::max(b.abs().max().item<double>(), 1e-12);
}

torch::Tensor central_difference(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x) {
    const double h = 1e-6;
    auto g = torch::zeros_like(x);
    auto flat = x.reshape({-1});
    for (int64_t i = 0; i < flat.numel(); ++i) {
        auto xp = flat.clone(), xm = flat.clone();
        xp[i] += h;
        xm[i] -= h;
        g.view({-1})[i] = (f(xp.view(x.sizes())) - f(xm.view(x.sizes()))) / (2 * h);
    }
    return g;
}

void criterion4() {
    const auto start = Clock::now();
    Verdict v;

    StylizerConfig sc;
    sc.m = 2;
    sc.latent_dim = 4;
    sc.point_widths = {16, 32};
    sc.head_widths = {16};
    sc.flow_layers = 4;
    sc.flow_hidden = {16, 16};
    torch::manual_seed(401);
    Stylizer sty(sc);
    sty->to(torch::kFloat64);
    for (auto& flow : sty->flows) perturb(*flow, 0.3, 402);
    sty->eval();
    auto gen = make_generator(403);
    auto mu = torch::randn({3, 2, 4}, gen, f64());
    auto sigma = 0.5 + torch::rand({3, 2, 4}, gen, f64());
    auto noise = torch::randn({3, 2, 4}, gen, f64());
    auto present = torch::tensor({true, true, true, false, true, true}).view({3, 2});
    auto mu_v = mu.clone().requires_grad_(true);
    auto sigma_v = sigma.clone().requires_grad_(true);
    kl_loss(sty, mu_v, sigma_v, present, noise).backward();
    torch::Tensor fd_mu, fd_sigma;
    {
        torch::NoGradGuard guard;
        fd_mu = central_difference([&](const torch::Tensor& x) { return kl_loss(sty, x, sigma, present, noise).item<double>(); }, mu);
        fd_sigma = central_difference([&](const torch::Tensor& x) { return kl_loss(sty, mu, x, present, noise).item<double>(); }, sigma);
    }
    const double kl_err = std::max(relative_error(mu_v.grad(), fd_mu), relative_error(sigma_v.grad(), fd_sigma));
    v.require(kl_err < 1e-3, "kl gradient error " + sci(kl_err));
    v.detail << " kl " << sci(kl_err);

    DenoiserConfig dc;
    dc.m = 3;
    dc.latent_dim = 8;
    dc.point_dim = 16;
    dc.layers = 2;
    dc.heads = 2;
    dc.head_dim = 8;
    dc.ff_dim = 32;
    dc.time_dim = 8;
    dc.dropout = 0.0;
    torch::manual_seed(404);
    CrossDenoiser net(dc);
    net->to(torch::kFloat64);
    perturb(*net, 0.1, 405);
    net->eval();
    const auto sched = DiffusionSchedule::linear(20, 0.9999, 0.08);
    auto x0 = torch::randn({2, 12, 3}, gen, f64());
    auto labels = torch::randint(0, 3, {2, 12}, gen, torch::TensorOptions().dtype(torch::kInt64));
    labels.narrow(1, 0, 3).copy_(torch::arange(3).expand({2, 3}));
    auto tau = torch::randn({2, 3, 6}, gen, f64()) * 0.3;
    auto zz = torch::randn({2, 3, 8}, gen, f64());
    auto pres = torch::ones({2, 3}, torch::TensorOptions().dtype(torch::kBool));
    auto t = torch::tensor({3, 17}, torch::TensorOptions().dtype(torch::kInt64));
    auto eps = torch::randn({2, 12, 3}, gen, f64());
    auto loss = [&]() {
        NoisePredictor p = [&](const torch::Tensor& x_t, const torch::Tensor& tt) {
            return net->forward(x_t, labels, tau, zz, pres, tt);
        };
        return diffusion_loss(p, x0, labels, tau, pres, sched, t, eps);
    };
    double diff_err = 0.0;
    for (auto& item : net->named_parameters()) {
        auto w = item.value();
        net->zero_grad();
        loss().backward();
        const int64_t count = std::min<int64_t>(6, w.numel());
        auto analytic = w.grad().view({-1}).narrow(0, 0, count).clone();
        auto numeric = torch::zeros({count}, f64());
        torch::NoGradGuard guard;
        auto flat = w.view({-1});
        for (int64_t i = 0; i < count; ++i) {
            const double orig = flat[i].item<double>(), h = 1e-6;
            flat[i] = orig + h;
            const double up = loss().item<double>();
            flat[i] = orig - h;
            const double down = loss().item<double>();
            flat[i] = orig;
            numeric[i] = (up - down) / (2 * h);
        }
        if (numeric.abs().max().item<double>() > 1e-8) diff_err = std::max(diff_err, relative_error(analytic, numeric));
    }
    v.require(diff_err < 1e-3, "diffusion gradient error " + sci(diff_err));
    v.detail << ", diffusion " << sci(diff_err) << " (worst parameter tensor)";
    const double secs = seconds_since(start);
    v.require(secs < 60.0, "runtime over 60 s");
    report(4, "loss gradients", v, secs);
}

// ---------------------------------------------------------------------------
// 7: metrics against brute force.

double cd_oracle(const PointSet& a, const PointSet& b) {
    auto one_way = [](const PointSet& x, const PointSet& y) {
        double total = 0;
        for (const auto& p : x) {
            double best = 1e300;
            for (const auto& q : y) {
                const double d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]);
                best = std::min(best, d);
            }
            total += best;
        }
        return total / x.size();
    };
    return one_way(a, b) + one_way(b, a);
}

PointSet random_box(std::mt19937_64& rng, int n, Vec3 size, Vec3 offset = {0, 0, 0}) {
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    PointSet out;
    for (int i = 0; i < n; ++i) out.push_back({size[0] * u(rng) + offset[0], size[1] * u(rng) + offset[1], size[2] * u(rng) + offset[2]});
    return out;
}

std::vector<PointSet> box_family(std::mt19937_64& rng, int count, int n) {
    std::uniform_real_distribution<double> dim(0.3, 1.0);
    std::vector<PointSet> out;
    for (int i = 0; i < count; ++i) out.push_back(random_box(rng, n, {dim(rng), dim(rng), dim(rng)}));
    return out;
}

PointSet nearest_to(const PointSet& from, const PointSet& to, int n) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t i = 0; i < from.size(); ++i) {
        double best = 1e300;
        for (const auto& q : to) {
            const auto& p = from[i];
            best = std::min(best, (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]));
        }
        d.emplace_back(best, i);
    }
    std::sort(d.begin(), d.end());
    PointSet out;
    for (int i = 0; i < std::min<int>(n, static_cast<int>(d.size())); ++i) out.push_back(from[d[i].second]);
    return out;
}

SegmentedCloud two_parts(const PointSet& a, const PointSet& b) {
    PointSet pts = a;
    pts.insert(pts.end(), b.begin(), b.end());
    std::vector<int> labels(a.size(), 0);
    labels.insert(labels.end(), b.size(), 1);
    return SegmentedCloud(pts, labels, 2);
}

void criterion7() {
    const auto start = Clock::now();
    Verdict v;
    std::mt19937_64 rng(701);
    int mismatches = 0;
    for (int trial = 0; trial < 4; ++trial) {
        PartSetPair pr;
        pr.generated = box_family(rng, 12 + trial, 24);
        pr.reference = box_family(rng, 20 - trial, 24);
        const auto ng = pr.generated.size(), nr = pr.reference.size();
        std::vector<std::vector<double>> gr(ng, std::vector<double>(nr));
        for (std::size_t g = 0; g < ng; ++g)
            for (std::size_t r = 0; r < nr; ++r) gr[g][r] = cd_oracle(pr.generated[g], pr.reference[r]);
        double mmd = 0;
        for (std::size_t r = 0; r < nr; ++r) {
            double best = 1e300;
            for (std::size_t g = 0; g < ng; ++g) best = std::min(best, gr[g][r]);
            mmd += best;
        }
        mmd /= nr;
        std::set<std::size_t> covered;
        for (std::size_t g = 0; g < ng; ++g) covered.insert(std::min_element(gr[g].begin(), gr[g].end()) - gr[g].begin());
        const double cov = static_cast<double>(covered.size()) / nr;
        std::vector<PointSet> all = pr.generated;
        all.insert(all.end(), pr.reference.begin(), pr.reference.end());
        int correct = 0;
        for (std::size_t i = 0; i < all.size(); ++i) {
            double best = 1e300;
            std::size_t arg = 0;
            for (std::size_t k = 0; k < all.size(); ++k) {
                if (k == i) continue;
                const double d = cd_oracle(all[i], all[k]);
                if (d < best) best = d, arg = k;
            }
            if ((arg < ng) == (i < ng)) ++correct;
        }
        const double nna = static_cast<double>(correct) / all.size();
        if (std::abs(mmd_p(pr) - mmd) > 1e-9 || cov_p(pr) != cov || one_nna_p(pr) != nna) ++mismatches;

        const auto a = random_box(rng, 20, {1, 1, 1});
        const auto b = random_box(rng, 20, {1, 1, 1}, {0.9, 0, 0});
        const double expected = cd_oracle(nearest_to(b, a, 8), nearest_to(a, b, 8));
        if (std::abs(snap(two_parts(a, b), ConnectionSpec{{{0, {1}}}}, 8).value - expected) > 1e-9) ++mismatches;
    }
    v.require(mismatches == 0, std::to_string(mismatches) + " brute-force mismatches");
    v.detail << " brute force " << (mismatches == 0 ? "equal" : "differs");

    double lo = 1.0, hi = 0.0;
    for (std::uint64_t seed = 702; seed < 707; ++seed) {
        std::mt19937_64 r(seed);
        const auto pool = box_family(r, 100, 48);
        PartSetPair pr;
        pr.generated.assign(pool.begin(), pool.begin() + 50);
        pr.reference.assign(pool.begin() + 50, pool.end());
        const double acc = one_nna_p(pr);
        lo = std::min(lo, acc);
        hi = std::max(hi, acc);
    }
    v.require(lo >= 0.35 && hi <= 0.65, "1NNA split outside [0.35, 0.65]");
    v.detail << ", 1NNA on pool splits in [" << sci(lo) << ", " << sci(hi) << "]";

    bool increases = true;
    for (int trial = 0; trial < 5; ++trial) {
        const auto seat = random_box(rng, 200, {1, 0.1, 1});
        const auto leg = random_box(rng, 100, {0.1, 0.8, 0.1}, {0.3, -0.45, 0.3});
        PointSet moved = leg;
        for (auto& p : moved) p[1] -= 0.5;
        const ConnectionSpec spec{{{1, {0}}}};
        increases = increases && snap(two_parts(seat, moved), spec).value > snap(two_parts(seat, leg), spec).value;
    }
    v.require(increases, "SNAP did not increase under translation");
    v.detail << ", SNAP grows under a 0.5 translation";
    const double secs = seconds_since(start);
    v.require(secs < 60.0, "runtime over 60 s");
    report(7, "metric oracles", v, secs);
}

// ---------------------------------------------------------------------------
// Desk-scale model shared by 5, 6, 8 and 9.

struct Settings {
    fs::path work;
    fs::path cli;
    int train_shapes = 256;
    int test_shapes = 64;
    int points = 256;
    int stage1_epochs = 300;
    int stage2_epochs = 400;
    std::uint64_t seed = 17;
    bool reuse = false;
};

struct DeskRun {
    Dataset data;
    std::vector<int> train_modes, test_modes;
    std::unique_ptr<PartModel> model;       // stage 1 + cIMLE sampler
    std::unique_ptr<PartModel> regression;  // stage 1 + direct regression
    double stage1_minutes = 0.0;
    double stage2_minutes = 0.0;
};

std::unique_ptr<PartModel> copy_model(const PartModel& model) { return checkpoint_from_bytes(checkpoint_bytes(model)); }

DeskRun& desk_run(const Settings& st) {
    static std::unique_ptr<DeskRun> run;
    if (run) return *run;
    run = std::make_unique<DeskRun>();
    SynthTemplate tmpl;
    tmpl.points_per_shape = st.points;
    std::vector<int> modes;
    run->data = synthesize_dataset(st.seed, st.train_shapes, tmpl, st.test_shapes, &modes);
    run->train_modes.assign(modes.begin(), modes.begin() + st.train_shapes);
    run->test_modes.assign(modes.begin() + st.train_shapes, modes.end());
    const auto& cls = run->data.manifest.class_id;

    fs::create_directories(st.work);
    const auto s1 = st.work / "desk_stage1.ckpt", s2 = st.work / "desk.ckpt", reg = st.work / "desk_regression.ckpt";
    auto cfg = TrainConfig::desk(cls);
    cfg.stage1_epochs = st.stage1_epochs;
    cfg.stage2_epochs = st.stage2_epochs;
    cfg.seed = st.seed;

    std::unique_ptr<PartModel> stage1;
    if (st.reuse && fs::exists(s1)) {
        stage1 = load_checkpoint(s1);
    } else {
        auto mc = ModelConfig::desk(tmpl.part_count(), default_noise_amplifier(cls));
        mc.class_id = cls;
        mc.part_names = run->data.manifest.part_names;
        mc.point_budget = st.points;
        mc.sync();
        torch::manual_seed(st.seed);
        stage1 = std::make_unique<PartModel>(mc);
        const auto start = Clock::now();
        train_stage1(*stage1, run->data.train, cfg, [&](const EpochStats& e) {
            if (e.epoch % 25 == 0 || e.epoch + 1 == cfg.stage1_epochs)
                std::fprintf(stderr, "  stage 1 epoch %d recon %.4f kl %.2f (%.0f s)\n", e.epoch, e.recon, e.kl, seconds_since(start));
        });
        run->stage1_minutes = seconds_since(start) / 60.0;
        save_checkpoint(*stage1, s1);
    }
    if (st.reuse && fs::exists(s2) && fs::exists(reg)) {
        run->model = load_checkpoint(s2);
        run->regression = load_checkpoint(reg);
    } else {
        const auto start = Clock::now();
        run->model = copy_model(*stage1);
        train_stage2(*run->model, run->data.train, cfg, [&](const EpochStats& e) {
            if (e.epoch % 50 == 0 || e.epoch + 1 == cfg.stage2_epochs)
                std::fprintf(stderr, "  stage 2 epoch %d fit %.4f (%.0f s)\n", e.epoch, e.fit, seconds_since(start));
        });
        run->stage2_minutes = seconds_since(start) / 60.0;
        run->regression = copy_model(*stage1);
        train_direct_regression(*run->regression, run->data.train, cfg, [&](const EpochStats& e) {
            if (e.epoch % 50 == 0 || e.epoch + 1 == cfg.stage2_epochs)
                std::fprintf(stderr, "  regression epoch %d fit %.4f\n", e.epoch, e.fit);
        });
        save_checkpoint(*run->model, s2);
        save_checkpoint(*run->regression, reg);
    }
    return *run;
}

// Mean transform of each mode over the training set: [m*6] in (shift, log-scale).
std::array<torch::Tensor, 2> mode_templates(const DeskRun& run) {
    const auto batch = make_batch(run.data.train, torch::kFloat64);
    std::array<torch::Tensor, 2> out;
    auto modes = torch::tensor(std::vector<int64_t>(run.train_modes.begin(), run.train_modes.end()));
    for (int k = 0; k < 2; ++k) out[k] = batch.tau.index({modes == k}).mean(0).reshape({-1});
    return out;
}

void criterion5(const Settings& st) {
    const auto start = Clock::now();
    Verdict v;
    auto& run = desk_run(st);
    const auto templates = mode_templates(run);
    const double separation = (templates[0] - templates[1]).norm().item<double>();
    // a draw is in a mode's core when it lies within a quarter of the template separation
    const double core = 0.25 * separation;

    auto draws = [&](PartModel& model) {
        torch::NoGradGuard guard;
        const auto session = encode_shape(model, run.data.train.front());
        const int n = 200;
        auto z = session.latents.unsqueeze(0).expand({n, -1, -1});
        auto present = presence_tensor(session.present).unsqueeze(0).expand({n, -1});
        auto gen = make_generator(st.seed + 5);
        auto y = torch::randn({n, model.config.sampler.noise_dim}, gen);
        auto tau = model.sampler->forward(z, y, present).to(torch::kFloat64).reshape({n, -1});
        std::array<int, 2> nearest{0, 0}, in_core{0, 0};
        for (int i = 0; i < n; ++i) {
            const double d0 = (tau[i] - templates[0]).norm().item<double>();
            const double d1 = (tau[i] - templates[1]).norm().item<double>();
            ++nearest[d0 <= d1 ? 0 : 1];
            if (d0 < core) ++in_core[0];
            if (d1 < core) ++in_core[1];
        }
        return std::pair{nearest, in_core};
    };
    const auto [cimle_nearest, cimle_core] = draws(*run.model);
    const auto [reg_nearest, reg_core] = draws(*run.regression);
    const double f0 = cimle_nearest[0] / 200.0, f1 = cimle_nearest[1] / 200.0;
    const double r0 = reg_core[0] / 200.0, r1 = reg_core[1] / 200.0;
    v.require(f0 >= 0.10 && f1 >= 0.10, "cIMLE mode shares below 10%");
    v.require(r0 < 0.05 && r1 < 0.05, "regression lands in a mode core");
    v.detail << " cIMLE modes " << 100 * f0 << "% / " << 100 * f1 << "% (cores " << cimle_core[0] / 2.0 << "% / "
             << cimle_core[1] / 2.0 << "%), regression cores " << 100 * r0 << "% / " << 100 * r1 << "%";
    const double secs = seconds_since(start);
    const double training = run.stage1_minutes + run.stage2_minutes;
    v.detail << ", training " << sci(training) << " min";
    v.require(secs < 20 * 60 + 60 * run.stage1_minutes, "runtime over 20 min beyond stage 1");
    report(5, "cIMLE multimodality", v, secs);
}

double eval_recon(PartModel& model, const ShapeBatch& batch, std::uint64_t seed) {
    torch::NoGradGuard guard;
    model.train(false);
    auto gen = make_generator(seed);
    auto mu = model.stylizer->encoder->forward(batch.canonical, batch.labels, batch.present).first;
    double total = 0.0;
    const int repeats = 8;
    for (int r = 0; r < repeats; ++r) {
        NoisePredictor predict = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
            return model.denoiser->forward(x_t, batch.labels, batch.tau, mu, batch.present, t);
        };
        total += diffusion_loss(predict, batch.world, batch.labels, batch.tau, batch.present, model.schedule, gen).item<double>();
    }
    return total / repeats;
}

void criterion6(const Settings& st) {
    const auto start = Clock::now();
    Verdict v;

    // smoke run: 64 shapes, 128 points, 200 epochs
    SynthTemplate tmpl;
    tmpl.points_per_shape = 128;
    const auto smoke = synthesize_dataset(st.seed + 1, 64, tmpl).train;
    auto mc = ModelConfig::desk(tmpl.part_count(), default_noise_amplifier(tmpl.class_id));
    mc.class_id = tmpl.class_id;
    mc.point_budget = 128;
    mc.sync();
    torch::manual_seed(st.seed + 1);
    PartModel model(mc);
    auto cfg = TrainConfig::desk(tmpl.class_id);
    cfg.stage1_epochs = 200;
    cfg.seed = st.seed + 1;
    const auto batch = make_batch(smoke);
    const double before = eval_recon(model, batch, 61);
    const auto smoke_start = Clock::now();
    const auto history = train_stage1(model, smoke, cfg);
    const double smoke_secs = seconds_since(smoke_start);
    const double after = eval_recon(model, batch, 61);
    v.require(after <= 0.5 * before, "recon " + sci(before) + " -> " + sci(after));
    v.detail << " smoke recon " << sci(before) << " -> " << sci(after) << " (" << sci(smoke_secs) << " s)";

    auto& run = desk_run(st);
    double chamfer_sum = 0.0;
    const int n = 16;
    for (int i = 0; i < n; ++i) {
        const auto& shape = run.data.train[i];
        const auto session = encode_shape(*run.model, shape);
        auto gen = make_generator(st.seed + 100 + i);
        const auto out = resample_parts(*run.model, session, {}, gen);
        chamfer_sum += chamfer(out.cloud.points(), shape.points());
    }
    const double recon_cd = chamfer_sum / n;
    v.require(recon_cd < 0.05, "reconstruction Chamfer " + sci(recon_cd));
    v.detail << ", reconstruction Chamfer " << sci(recon_cd);
    if (run.stage1_minutes > 0) {
        v.require(run.stage1_minutes + run.stage2_minutes < 120.0, "desk profile over 2 h");
        v.detail << " after " << sci(run.stage1_minutes + run.stage2_minutes) << " min of training";
    }

    // oracle noise: generation must return the source points
    const auto& source = run.data.test.front();
    auto sb = make_batch({source}, torch::kFloat32);
    auto order = torch::argsort(sb.labels[0], /*stable=*/true, /*dim=*/0, /*descending=*/false);
    auto x0 = sb.world.index_select(1, order).to(torch::kFloat64);
    auto labels = sb.labels.index_select(1, order);
    auto tau = sb.tau.to(torch::kFloat64);
    auto shift = tau.index({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(0, 3)});
    auto sd = tau.index({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(3, 6)}).exp();
    auto mu_p = shift.gather(1, labels.unsqueeze(-1).expand({-1, -1, 3}));
    auto sd_p = sd.gather(1, labels.unsqueeze(-1).expand({-1, -1, 3}));
    const auto& sched = run.model->schedule;
    GenerateOptions o;
    o.part_counts = source.part_sizes();
    o.present = source.presence();
    o.tau = sb.tau;
    o.predictor = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
        const double ab = sched.alpha_bar(static_cast<int>(t[0].item<int64_t>()));
        auto x = x_t.to(torch::kFloat64);
        auto e = (x - std::sqrt(ab) * x0 - (1 - std::sqrt(ab)) * mu_p) / (std::sqrt(1 - ab) * sd_p);
        return e.to(x_t.scalar_type());
    };
    auto gen = make_generator(st.seed + 7);
    const auto out = make_batch(generate(*run.model, o, gen).clouds, torch::kFloat64);
    const double rms = torch::sqrt((out.world - x0).pow(2).sum(-1).mean()).item<double>();
    v.require(rms < 0.05, "oracle RMS " + sci(rms));
    v.detail << ", oracle RMS " << sci(rms);
    report(6, "end-to-end desk training", v, seconds_since(start));
}

// Part j of `donor` placed as observed in the donor, the rest from `target`.
SegmentedCloud naive_mix(const SegmentedCloud& target, const SegmentedCloud& donor, const std::set<int>& from_donor) {
    PointSet pts;
    std::vector<int> labels;
    for (int j = 0; j < target.part_count(); ++j) {
        const auto part = from_donor.count(j) ? donor.part(j) : target.part(j);
        pts.insert(pts.end(), part.begin(), part.end());
        labels.insert(labels.end(), part.size(), j);
    }
    return SegmentedCloud(pts, labels, target.part_count(), target.class_id());
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void criterion8(const Settings& st) {
    const auto start = Clock::now();
    Verdict v;
    auto& run = desk_run(st);
    auto& model = *run.model;
    const auto spec = ConnectionSpec::from_pairs(run.data.manifest.connections);
    // seat and back from a donor in the other configuration mode, legs kept
    const std::set<int> donated{0, 1};
    std::vector<double> mixed, naive;
    const auto& test = run.data.test;
    std::size_t donor = 0;
    for (std::size_t i = 0; i < test.size() && mixed.size() < 20; ++i) {
        if (run.test_modes[i] != 0) continue;
        while (donor < test.size() && run.test_modes[donor] != 1) ++donor;
        if (donor >= test.size()) break;
        const auto a = encode_shape(model, test[i]);
        const auto b = encode_shape(model, test[donor]);
        std::map<int, int> assignment;
        for (int j : donated) assignment[j] = 1;
        auto gen = make_generator(st.seed + 800 + i);
        const auto out = mix_parts(model, {&a, &b}, assignment, gen);
        mixed.push_back(snap(out.cloud, spec).value);
        naive.push_back(snap(naive_mix(test[i], test[donor], donated), spec).value);
        ++donor;
    }
    v.require(mixed.size() == 20, "only " + std::to_string(mixed.size()) + " mixes");
    const double mm = median(mixed), nm = median(naive);
    v.require(mm <= 2 * nm, "mixed SNAP above twice naive");
    v.detail << " median SNAP mixed " << sci(mm) << " vs naive " << sci(nm) << " over " << mixed.size() << " mixes";

    const auto s0 = encode_shape(model, test[0]);
    const auto s1 = encode_shape(model, test[1]);
    const int part = 2, steps = 6;
    const auto frames = interpolate_part(model, s0, part, s1.latents[part], steps, st.seed + 9);
    bool endpoints = torch::equal(frames.front().latents, s0.latents) && torch::equal(frames.back().latents[part], s1.latents[part]);
    bool isolated = true;
    for (const auto& f : frames) {
        for (int j = 0; j < s0.part_count(); ++j) {
            if (j != part) isolated = isolated && torch::equal(f.latents[j], s0.latents[j]);
        }
    }
    v.require(endpoints, "interpolation endpoints differ");
    v.require(isolated, "non-selected latents changed");
    v.detail << ", interpolation endpoints " << (endpoints ? "exact" : "inexact") << ", other parts "
             << (isolated ? "bit-identical" : "changed");
    report(8, "editing coherence", v, seconds_since(start));
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criterion9(const Settings& st) {
    const auto start = Clock::now();
    Verdict v;
    auto& run = desk_run(st);
    const auto ckpt = st.work / "desk.ckpt";
    save_checkpoint(*run.model, ckpt);
    const int n = 4;
    const std::uint64_t seed = 4242;

    GenerateOptions o;
    o.n = n;
    auto gen = make_generator(seed);
    const auto in_process = generate(*run.model, o, gen);
    const auto dir0 = st.work / "gen_in_process";
    fs::remove_all(dir0);
    fs::create_directories(dir0);
    for (int i = 0; i < n; ++i) write_shape_record(dir0 / ("sample_00" + std::to_string(i) + ".txt"), in_process.clouds[i]);

    bool same = true;
    for (int r = 1; r <= 2; ++r) {
        const auto dir = st.work / ("gen_process_" + std::to_string(r));
        fs::remove_all(dir);
        const std::string cmd = "\"" + st.cli.string() + "\" sample --ckpt \"" + ckpt.string() + "\" --n " + std::to_string(n) +
                                " --seed " + std::to_string(seed) + " --out \"" + dir.string() + "\" > /dev/null";
        if (std::system(cmd.c_str()) != 0) {
            v.require(false, "CLI sample failed");
            same = false;
            break;
        }
        for (int i = 0; i < n; ++i) {
            const auto name = "sample_00" + std::to_string(i) + ".txt";
            same = same && fs::exists(dir / name) && read_bytes(dir / name) == read_bytes(dir0 / name);
        }
    }
    v.require(same, "outputs differ across processes");
    v.detail << " " << n << " shapes byte-identical across two fresh processes and the training process";
    report(9, "determinism and persistence", v, seconds_since(start));
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Acceptance suite"};
    Settings st;
    std::vector<int> only;
    std::string work = "acceptance_work";
    std::string cli;
    app.add_option("--work", work, "Scratch directory for data and checkpoints")->capture_default_str();
    app.add_option("--cli", cli, "partdiff executable (default: next to this one)");
    app.add_option("--only", only, "Criteria to run")->delimiter(',');
    app.add_option("--stage1-epochs", st.stage1_epochs)->capture_default_str();
    app.add_option("--stage2-epochs", st.stage2_epochs)->capture_default_str();
    app.add_option("--train-shapes", st.train_shapes)->capture_default_str();
    app.add_option("--seed", st.seed)->capture_default_str();
    app.add_flag("--reuse", st.reuse, "Reuse checkpoints already in the work directory");
    CLI11_PARSE(app, argc, argv);
    st.work = fs::absolute(work);
    st.cli = cli.empty() ? fs::absolute(argv[0]).parent_path() / "partdiff" : fs::path(cli);

    auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
    const std::vector<std::pair<int, std::function<void()>>> criteria{
        {1, criterion1},
        {2, criterion2},
        {3, criterion3},
        {4, criterion4},
        {5, [&] { criterion5(st); }},
        {6, [&] { criterion6(st); }},
        {7, criterion7},
        {8, [&] { criterion8(st); }},
        {9, [&] { criterion9(st); }},
    };
    for (const auto& [id, run] : criteria) {
        if (!wanted(id)) continue;
        try {
            run();
        } catch (const std::exception& e) {
            ++failures;
            std::printf("FAIL %d: exception: %s\n", id, e.what());
        }
    }
    return failures == 0 ? 0 : 1;
}
