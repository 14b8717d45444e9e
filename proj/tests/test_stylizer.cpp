#include "torch_doctest.hpp"

#include <cmath>

#include "partdiff/stylizer.hpp"
#include "support.hpp"

using namespace partdiff;
using testing_support::numeric_grad;
using testing_support::perturb;
using testing_support::relative_error;

namespace {

StylizerConfig toy_config(int m, int64_t d) {
    StylizerConfig c;
    c.m = m;
    c.latent_dim = d;
    c.point_widths = {16, 32};
    c.head_widths = {16};
    c.flow_layers = 4;
    c.flow_hidden = {16, 16};
    return c;
}

torch::Tensor f64(std::initializer_list<int64_t> shape, at::Generator& gen) {
    return torch::randn(shape, gen, torch::TensorOptions().dtype(torch::kFloat64));
}

// Flow with non-trivial couplings and normalization statistics, in evaluation mode.
PriorFlow random_flow(int64_t d, int layers, uint64_t seed) {
    torch::manual_seed(seed);
    PriorFlow flow(d, layers, std::vector<int64_t>{16, 16}, 0.9, 1e-5);
    flow->to(torch::kFloat64);
    perturb(*flow, 0.3, seed);
    torch::NoGradGuard guard;
    auto gen = at::detail::createCPUGenerator(seed + 1);
    for (auto& b : flow->buffers()) b.copy_(0.5 + torch::rand(b.sizes(), gen, b.options()));
    flow->eval();
    return flow;
}

}  // namespace

TEST_CASE("encoder is invariant to point order and duplication") {
    torch::manual_seed(1);
    PartEncoder enc(toy_config(3, 8));
    enc->eval();
    auto gen = at::detail::createCPUGenerator(2);
    auto pts = torch::randn({2, 40, 3}, gen);
    auto labels = torch::randint(0, 3, {2, 40}, gen, torch::TensorOptions().dtype(torch::kInt64));
    labels.index_put_({torch::indexing::Slice(), torch::indexing::Slice(0, 3)}, torch::arange(3));
    auto present = torch::ones({2, 3}, torch::TensorOptions().dtype(torch::kBool));
    auto [mu, sigma] = enc->forward(pts, labels, present);

    auto perm = torch::randperm(40, gen, torch::TensorOptions().dtype(torch::kInt64));
    auto [mu_p, sigma_p] = enc->forward(pts.index_select(1, perm), labels.index_select(1, perm), present);
    CHECK(torch::equal(mu, mu_p));
    CHECK(torch::equal(sigma, sigma_p));

    auto [mu_d, sigma_d] = enc->forward(torch::cat({pts, pts}, 1), torch::cat({labels, labels}, 1), present);
    CHECK(torch::equal(mu, mu_d));
    CHECK(torch::equal(sigma, sigma_d));
}

TEST_CASE("encoder reports positive sigma and the dummy for absent parts") {
    torch::manual_seed(3);
    PartEncoder enc(toy_config(2, 8));
    enc->eval();
    auto gen = at::detail::createCPUGenerator(4);
    auto pts = 5.0 * torch::randn({1000, 16, 3}, gen);
    auto labels = torch::zeros({1000, 16}, torch::TensorOptions().dtype(torch::kInt64));
    labels.narrow(1, 8, 8).fill_(1);
    auto present = torch::ones({1000, 2}, torch::TensorOptions().dtype(torch::kBool));
    auto [mu, sigma] = enc->forward(pts, labels, present);
    CHECK(sigma.gt(0).all().item<bool>());
    CHECK(torch::isfinite(mu).all().item<bool>());

    labels.fill_(0);
    present.select(1, 1).fill_(false);
    auto [mu_a, sigma_a] = enc->forward(pts.narrow(0, 0, 4), labels.narrow(0, 0, 4), present.narrow(0, 0, 4));
    CHECK(mu_a.select(1, 1).eq(0).all().item<bool>());
    CHECK(sigma_a.select(1, 1).eq(1).all().item<bool>());
    CHECK(torch::isfinite(mu_a).all().item<bool>());
}

TEST_CASE("reparam_sample") {
    auto gen = at::detail::createCPUGenerator(5);
    auto mu = f64({6}, gen);
    auto sigma = torch::rand({6}, gen, torch::TensorOptions().dtype(torch::kFloat64)) + 0.1;
    CHECK(torch::equal(reparam_sample(mu, sigma, torch::zeros({6}, torch::kFloat64)), mu));
    auto tiny = reparam_sample(mu, torch::zeros({6}, torch::kFloat64), f64({6}, gen));
    CHECK((tiny - mu).abs().max().item<double>() < 1e-5);

    const int64_t n = 100000;
    auto z = reparam_sample(mu.expand({n, 6}), sigma.expand({n, 6}), f64({n, 6}, gen));
    auto mean = z.mean(0);
    auto var = z.var(0);
    auto se_mean = sigma / std::sqrt(static_cast<double>(n));
    auto se_var = sigma.pow(2) * std::sqrt(2.0 / (n - 1));
    CHECK(((mean - mu).abs() < 3 * se_mean).all().item<bool>());
    CHECK(((var - sigma.pow(2)).abs() < 3 * se_var).all().item<bool>());
}

TEST_CASE("fresh flow is the identity") {
    torch::manual_seed(6);
    PriorFlow flow(8, 6, std::vector<int64_t>{16, 16}, 0.9, 1e-5);
    flow->eval();
    auto gen = at::detail::createCPUGenerator(7);
    auto x = torch::randn({10, 8}, gen);
    auto [z, logdet] = flow->forward(x);
    CHECK(torch::equal(z, x));
    CHECK(logdet.eq(0).all().item<bool>());
    auto [xi, logdet_inv] = flow->inverse(x);
    CHECK(torch::equal(xi, x));
    CHECK(logdet_inv.eq(0).all().item<bool>());
    CHECK(torch::equal(flow->log_prob(x), standard_normal_log_prob(x)));

    // the mode of the density sits at forward(0) = 0
    auto lp0 = flow->log_prob(torch::zeros({1, 8})).item<double>();
    CHECK(flow->log_prob(x).lt(lp0).all().item<bool>());
}

TEST_CASE("flow round trip after perturbation") {
    auto flow = random_flow(8, 6, 8);
    auto gen = at::detail::createCPUGenerator(9);
    auto xi = f64({100, 8}, gen);
    auto [z, ld_fwd] = flow->forward(xi);
    auto [back, ld_inv] = flow->inverse(z);
    CHECK((back - xi).abs().max().item<double>() < 1e-5);
    CHECK((ld_fwd + ld_inv).abs().max().item<double>() < 1e-9);
    CHECK((z - xi).abs().max().item<double>() > 1e-2);
}

TEST_CASE("flow logdet equals the log-determinant of a finite-difference Jacobian") {
    auto flow = random_flow(4, 4, 10);
    auto gen = at::detail::createCPUGenerator(11);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = f64({1, 4}, gen);
        auto jac = torch::zeros({4, 4}, torch::kFloat64);
        const double h = 1e-6;
        for (int i = 0; i < 4; ++i) {
            auto xp = x.clone();
            auto xm = x.clone();
            xp[0][i] += h;
            xm[0][i] -= h;
            jac.select(1, i).copy_((flow->forward(xp).first - flow->forward(xm).first)[0] / (2 * h));
        }
        const double fd = std::log(std::abs(torch::det(jac).item<double>()));
        const double ld = flow->forward(x).second.item<double>();
        CHECK(std::abs(fd - ld) < 1e-3);
        CHECK(std::abs(ld) > 1e-2);
    }
}

TEST_CASE("2-D flow density integrates to one") {
    auto flow = random_flow(2, 4, 12);
    const int n = 801;
    const double lo = -10.0, hi = 10.0, step = (hi - lo) / (n - 1);
    auto axis = torch::linspace(lo, hi, n, torch::kFloat64);
    auto grid = torch::stack(torch::meshgrid({axis, axis}, "ij"), -1).reshape({-1, 2});
    auto density = torch::exp(flow->log_prob(grid));
    const double mass = density.sum().item<double>() * step * step;
    CHECK(std::abs(mass - 1.0) < 1e-2);
}

TEST_CASE("non-finite values raise flow overflow") {
    torch::manual_seed(13);
    PriorFlow flow(4, 2, std::vector<int64_t>{8}, 0.9, 1e-5);
    flow->eval();
    auto bad = torch::full({1, 4}, std::numeric_limits<float>::infinity());
    CHECK_THROWS_WITH(flow->forward(bad), "flow overflow");
    CHECK_THROWS_WITH(flow->inverse(bad), "flow overflow");
}

TEST_CASE("moving batch norm tracks statistics with momentum 0.9") {
    MovingBatchNorm bn(3, 0.9, 1e-5);
    bn->to(torch::kFloat64);
    auto gen = at::detail::createCPUGenerator(14);
    auto x = 2.0 + 3.0 * f64({64, 3}, gen);
    auto [y, logdet] = bn->density(x);
    CHECK(y.mean(0).abs().max().item<double>() < 1e-9);
    auto expect_mean = 0.1 * x.mean(0);
    auto expect_var = 0.9 + 0.1 * (x.var(0, false) + 1e-5);
    CHECK((bn->running_mean - expect_mean).abs().max().item<double>() < 1e-12);
    CHECK((bn->running_var - expect_var).abs().max().item<double>() < 1e-12);
    CHECK(std::abs(logdet[0].item<double>() + 0.5 * torch::log(x.var(0, false) + 1e-5).sum().item<double>()) < 1e-9);

    bn->eval();
    auto [ye, le] = bn->density(x);
    auto back = bn->sample(ye).first;
    CHECK((back - x).abs().max().item<double>() < 1e-9);
}

TEST_CASE("gaussian entropy matches 1-D quadrature") {
    for (double s : {0.3, 1.0, 2.5}) {
        const int n = 200001;
        const double lim = 12 * s, step = 2 * lim / (n - 1);
        double h = 0.0;
        for (int i = 0; i < n; ++i) {
            const double x = -lim + i * step;
            const double p = std::exp(-0.5 * x * x / (s * s)) / (s * std::sqrt(2 * M_PI));
            if (p > 0) h -= p * std::log(p) * step;
        }
        auto sigma = torch::full({1}, s, torch::kFloat64);
        CHECK(std::abs(gaussian_entropy(sigma).item<double>() - h) < 1e-8);
    }
}

TEST_CASE("kl_loss against closed-form Gaussian KL") {
    torch::manual_seed(15);
    Stylizer sty(toy_config(1, 4));
    sty->to(torch::kFloat64);
    sty->eval();
    auto gen = at::detail::createCPUGenerator(16);
    const int64_t n = 10000;
    auto present = torch::ones({n, 1}, torch::TensorOptions().dtype(torch::kBool));
    auto sigma = torch::ones({n, 1, 4}, torch::kFloat64);

    auto zero_mu = torch::zeros({n, 1, 4}, torch::kFloat64);
    CHECK(std::abs(kl_loss(sty, zero_mu, sigma, present, f64({n, 1, 4}, gen)).item<double>()) < 0.05);

    auto mu0 = torch::tensor({0.5, -1.0, 1.5, 0.25}, torch::kFloat64);
    const double expected = 0.5 * mu0.pow(2).sum().item<double>();
    auto shifted = mu0.view({1, 1, 4}).expand({n, 1, 4});
    CHECK(std::abs(kl_loss(sty, shifted, sigma, present, f64({n, 1, 4}, gen)).item<double>() - expected) < 0.05);

    auto absent = torch::zeros({n, 1}, torch::TensorOptions().dtype(torch::kBool));
    CHECK(kl_loss(sty, shifted, sigma, absent, f64({n, 1, 4}, gen)).item<double>() == 0.0);
}

TEST_CASE("kl_loss gradient matches finite differences") {
    torch::manual_seed(17);
    Stylizer sty(toy_config(2, 4));
    sty->to(torch::kFloat64);
    for (auto& flow : sty->flows) perturb(*flow, 0.3, 18);
    sty->eval();
    auto gen = at::detail::createCPUGenerator(19);
    auto mu = f64({3, 2, 4}, gen);
    auto sigma = 0.5 + torch::rand({3, 2, 4}, gen, torch::TensorOptions().dtype(torch::kFloat64));
    auto noise = f64({3, 2, 4}, gen);
    auto present = torch::tensor({true, true, true, false, true, true}).view({3, 2});

    auto mu_v = mu.clone().requires_grad_(true);
    auto sigma_v = sigma.clone().requires_grad_(true);
    kl_loss(sty, mu_v, sigma_v, present, noise).backward();

    auto f_mu = [&](const torch::Tensor& x) { return kl_loss(sty, x, sigma, present, noise).item<double>(); };
    auto f_sigma = [&](const torch::Tensor& x) { return kl_loss(sty, mu, x, present, noise).item<double>(); };
    CHECK(relative_error(mu_v.grad(), numeric_grad(f_mu, mu)) < 1e-3);
    CHECK(relative_error(sigma_v.grad(), numeric_grad(f_sigma, sigma)) < 1e-3);
    // the absent entry receives no gradient
    CHECK(mu_v.grad()[1][1].abs().max().item<double>() == 0.0);
}

TEST_CASE("prior_sample maps noise through each part's flow and zeroes absent parts") {
    torch::manual_seed(20);
    Stylizer sty(toy_config(2, 4));
    for (auto& flow : sty->flows) perturb(*flow, 0.3, 21);
    sty->eval();
    auto gen = at::detail::createCPUGenerator(22);
    auto xi = torch::randn({3, 2, 4}, gen);
    auto present = torch::tensor({true, true, true, false, true, true}).view({3, 2});
    auto z = prior_sample(sty, xi, present);
    CHECK(torch::equal(z.select(1, 0), sty->flows[0]->forward(xi.select(1, 0)).first));
    CHECK(z[1][1].eq(0).all().item<bool>());
    auto lp = prior_log_prob(sty, z, present);
    CHECK(lp[1][1].item<double>() == 0.0);
    CHECK(std::abs(lp[0][0].item<double>() - sty->flows[0]->log_prob(z[0][0].unsqueeze(0)).item<double>()) < 1e-6);
}
