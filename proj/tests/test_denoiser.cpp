#include "torch_doctest.hpp"

#include <cmath>
#include <vector>

#include "partdiff/denoiser.hpp"
#include "partdiff/tensor_kernel.hpp"
#include "support.hpp"

using namespace partdiff;
using testing_support::perturb;
using testing_support::relative_error;

namespace {

const auto kInt64 = torch::TensorOptions().dtype(torch::kInt64);

DenoiserConfig toy_config(int64_t layers = 2, int64_t dim = 16) {
    DenoiserConfig c;
    c.m = 3;
    c.latent_dim = 8;
    c.point_dim = dim;
    c.layers = layers;
    c.heads = 2;
    c.head_dim = dim / 2;
    c.ff_dim = 2 * dim;
    c.time_dim = 8;
    return c;
}

CrossDenoiser toy_net(uint64_t seed, DenoiserConfig cfg = toy_config()) {
    torch::manual_seed(seed);
    CrossDenoiser net(cfg);
    net->eval();
    return net;
}

struct Inputs {
    torch::Tensor x, labels, tau, z, present, t;
};

Inputs random_inputs(at::Generator& gen, int64_t b, int64_t n, torch::Dtype dtype = torch::kFloat32) {
    auto opts = torch::TensorOptions().dtype(dtype);
    Inputs in;
    in.x = torch::randn({b, n, 3}, gen, opts);
    in.labels = torch::randint(0, 3, {b, n}, gen, kInt64);
    in.tau = 0.5 * torch::randn({b, 3, 6}, gen, opts);
    in.z = torch::randn({b, 3, 8}, gen, opts);
    in.present = torch::ones({b, 3}, torch::kBool);
    in.t = torch::randint(1, 101, {b}, gen, kInt64);
    return in;
}

torch::Tensor run(CrossDenoiser& net, const Inputs& in) {
    torch::NoGradGuard guard;
    return net->forward(in.x, in.labels, in.tau, in.z, in.present, in.t);
}

const DiffusionSchedule& schedule() {
    static const auto s = DiffusionSchedule::linear(100, 0.9999, 0.08);
    return s;
}

}  // namespace

TEST_CASE("permuting points permutes predictions exactly") {
    auto net = toy_net(1);
    auto gen = at::detail::createCPUGenerator(2);
    auto in = random_inputs(gen, 2, 50);
    auto out = run(net, in);
    CHECK(out.sizes() == std::vector<int64_t>{2, 50, 3});

    auto perm = torch::randperm(50, gen, kInt64);
    auto permuted = in;
    permuted.x = in.x.index_select(1, perm);
    permuted.labels = in.labels.index_select(1, perm);
    CHECK(torch::equal(run(net, permuted), out.index_select(1, perm)));

    // points are independent: any subset, down to one point, gives the same rows
    auto one = in;
    one.x = in.x.narrow(1, 7, 1);
    one.labels = in.labels.narrow(1, 7, 1);
    auto single = run(net, one);
    CHECK(single.sizes() == std::vector<int64_t>{2, 1, 3});
    CHECK((single - out.narrow(1, 7, 1)).abs().max().item<double>() < 1e-6);
}

TEST_CASE("content of a masked context token never reaches the output") {
    auto net = toy_net(3);
    auto gen = at::detail::createCPUGenerator(4);
    auto in = random_inputs(gen, 2, 40);
    in.present[0][1] = false;
    in.labels.masked_fill_(in.labels.eq(1), 0);
    in.z[0][1].zero_();
    in.tau[0][1].zero_();
    auto out = run(net, in);

    auto changed = in;
    changed.z = in.z.clone();
    changed.tau = in.tau.clone();
    changed.z[0][1] = 100.0 * torch::randn({8}, gen);
    changed.tau[0][1] = torch::randn({6}, gen);
    CHECK(torch::equal(run(net, changed), out));
}

TEST_CASE("a masked key behaves as if it were removed") {
    torch::manual_seed(5);
    AttentionBlock block(16, 2, 8, 32, 0.0);
    block->eval();
    auto gen = at::detail::createCPUGenerator(6);
    auto query = torch::randn({1, 10, 16}, gen, torch::TensorOptions().dtype(torch::kFloat64));
    auto context = torch::randn({1, 4, 16}, gen, torch::TensorOptions().dtype(torch::kFloat64));
    block->to(torch::kFloat64);
    auto valid = torch::tensor({1, 0, 1, 1}).to(torch::kBool).view({1, 4});
    auto masked = block->forward(query, context, valid);
    auto kept = torch::tensor({0, 2, 3}, kInt64);
    auto removed = block->forward(query, context.index_select(1, kept), torch::ones({1, 3}, torch::kBool));
    CHECK((masked - removed).abs().max().item<double>() < 1e-12);
    CHECK(torch::isfinite(masked).all().item<bool>());
}

TEST_CASE("predict_noise validates labels") {
    auto net = toy_net(7);
    auto gen = at::detail::createCPUGenerator(8);
    auto in = random_inputs(gen, 1, 12);
    in.labels[0][0] = 2;
    in.present[0][2] = false;
    CHECK_THROWS_WITH(predict_noise(net, in.x, in.labels, in.tau, in.z, in.present, in.t),
                      "label references an absent part");
    in.present[0][2] = true;
    in.labels[0][0] = 3;
    CHECK_THROWS_WITH(predict_noise(net, in.x, in.labels, in.tau, in.z, in.present, in.t), "label out of range");
    in.labels[0][0] = 1;
    CHECK(predict_noise(net, in.x, in.labels, in.tau, in.z, in.present, in.t).sizes() == std::vector<int64_t>{1, 12, 3});
}

TEST_CASE("changing one part's latent moves the predictions of every part") {
    auto net = toy_net(9);
    auto gen = at::detail::createCPUGenerator(10);
    auto in = random_inputs(gen, 1, 60);
    in.labels.copy_(torch::arange(60, kInt64).remainder(3).view({1, 60}));
    auto out = run(net, in);
    auto changed = in;
    changed.z = in.z.clone();
    changed.z[0][0] += torch::randn({8}, gen);
    auto delta = (run(net, changed) - out).abs().sum(-1)[0];
    for (int j = 0; j < 3; ++j) {
        CHECK(delta.masked_select(in.labels[0].eq(j)).min().item<double>() > 0.0);
    }
}

TEST_CASE("dropout is active only in training mode") {
    auto cfg = toy_config();
    cfg.dropout = 0.5;
    auto net = toy_net(11, cfg);
    auto gen = at::detail::createCPUGenerator(12);
    auto in = random_inputs(gen, 1, 20);
    CHECK(torch::equal(run(net, in), run(net, in)));
    net->train();
    CHECK_FALSE(torch::equal(run(net, in), run(net, in)));
}

TEST_CASE("time embedding") {
    auto t = torch::tensor({0, 1, 50}, kInt64);
    auto emb = timestep_embedding(t, 8);
    CHECK(emb.sizes() == std::vector<int64_t>{3, 8});
    CHECK(emb[0].narrow(0, 0, 4).abs().max().item<double>() == 0.0);
    CHECK(emb[0].narrow(0, 4, 4).eq(1).all().item<bool>());
    CHECK(emb[1][0].item<double>() == doctest::Approx(std::sin(1.0)));
    CHECK(emb[2][1].item<double>() == doctest::Approx(std::sin(50.0 * std::pow(10000.0, -0.25))));
    CHECK_FALSE(torch::equal(emb[1], emb[2]));
}

TEST_CASE("batched kernel agrees with the scalar kernel") {
    const auto& s = schedule();
    auto gen = at::detail::createCPUGenerator(13);
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    for (int t : {1, 2, 37, 100}) {
        auto x0 = torch::randn({1, 1, 3}, gen, opts);
        auto mu = torch::randn({1, 1, 3}, gen, opts);
        auto sd = torch::rand({1, 1, 3}, gen, opts) + 0.1;
        auto eps = torch::randn({1, 1, 3}, gen, opts);
        auto noise = torch::randn({1, 1, 3}, gen, opts);
        auto vec = [](const torch::Tensor& v) {
            auto c = v.reshape({-1}).contiguous();
            return std::vector<double>(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
        };
        KernelCondition cond{vec(mu), vec(sd)};
        auto xt = q_sample(x0, torch::tensor({t}, kInt64), mu, sd, s, eps);
        auto xt_ref = forward_marginal(vec(x0), t, cond, s, vec(eps));
        auto mean = noise_to_mean(xt, eps, t, mu, sd, s);
        auto mean_ref = noise_to_mean(vec(xt), vec(eps), t, cond, s);
        auto step = reverse_step(xt, eps, t, mu, sd, s, noise);
        auto step_ref = reverse_step(vec(xt), vec(eps), t, cond, s, vec(noise));
        for (int a = 0; a < 3; ++a) {
            CHECK(std::abs(vec(xt)[a] - xt_ref[a]) < 1e-12);
            CHECK(std::abs(vec(mean)[a] - mean_ref[a]) < 1e-12);
            CHECK(std::abs(vec(step)[a] - step_ref[a]) < 1e-12);
        }
        CHECK((true_noise(xt, x0, t, mu, sd, s) - eps).abs().max().item<double>() < 1e-8);
    }
    CHECK_THROWS(q_sample(torch::zeros({1, 1, 3}), torch::tensor({0}, kInt64), torch::zeros({1, 1, 3}),
                          torch::ones({1, 1, 3}), s, torch::zeros({1, 1, 3})));
}

TEST_CASE("diffusion loss with oracle and zero predictors") {
    const auto& s = schedule();
    auto gen = at::detail::createCPUGenerator(14);
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    const int64_t b = 10, n = 1000;
    auto x0 = torch::randn({b, n, 3}, gen, opts);
    auto labels = torch::randint(0, 3, {b, n}, gen, kInt64);
    auto tau = 0.5 * torch::randn({b, 3, 6}, gen, opts);
    auto present = torch::ones({b, 3}, torch::kBool);
    auto t = torch::randint(1, 101, {b}, gen, kInt64);
    auto eps = torch::randn({b, n, 3}, gen, opts);

    NoisePredictor oracle = [&](const torch::Tensor& x_t, const torch::Tensor& tt) {
        auto [mu, sd] = point_kernel(tau, labels);
        std::vector<torch::Tensor> rows;
        for (int64_t i = 0; i < b; ++i) {
            rows.push_back(true_noise(x_t.narrow(0, i, 1), x0.narrow(0, i, 1), static_cast<int>(tt[i].item<int64_t>()),
                                      mu.narrow(0, i, 1), sd.narrow(0, i, 1), s));
        }
        return torch::cat(rows, 0);
    };
    CHECK(diffusion_loss(oracle, x0, labels, tau, present, s, t, eps).item<double>() < 1e-12);

    NoisePredictor zero = [](const torch::Tensor& x_t, const torch::Tensor&) { return torch::zeros_like(x_t); };
    const double zero_loss = diffusion_loss(zero, x0, labels, tau, present, s, gen).item<double>();
    CHECK(zero_loss >= 2.8);
    CHECK(zero_loss <= 3.2);
}

TEST_CASE("diffusion loss averages per part and skips absent parts") {
    const auto& s = schedule();
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    // part 0 has 1 point with error 4, part 1 has 3 points with error 1, part 2 absent
    auto x0 = torch::zeros({1, 4, 3}, opts);
    auto labels = torch::tensor({0, 1, 1, 1}, kInt64).view({1, 4});
    auto tau = torch::zeros({1, 3, 6}, opts);
    auto present = torch::tensor({1, 1, 0}).to(torch::kBool).view({1, 3});
    auto eps = torch::zeros({1, 4, 3}, opts);
    eps[0][0][0] = 2.0;
    for (int i = 1; i < 4; ++i) eps[0][i][1] = 1.0;
    NoisePredictor zero = [](const torch::Tensor& x_t, const torch::Tensor&) { return torch::zeros_like(x_t); };
    auto loss = diffusion_loss(zero, x0, labels, tau, present, s, torch::tensor({5}, kInt64), eps);
    CHECK(loss.item<double>() == doctest::Approx((4.0 + 1.0) / 3.0).epsilon(1e-12));
}

TEST_CASE("diffusion loss is invariant to point order and deterministic") {
    auto net = toy_net(15);
    const auto& s = schedule();
    auto gen = at::detail::createCPUGenerator(16);
    auto in = random_inputs(gen, 2, 30);
    auto eps = torch::randn({2, 30, 3}, gen);
    auto perm = torch::randperm(30, gen, kInt64);
    auto loss_of = [&](const torch::Tensor& x0, const torch::Tensor& labels, const torch::Tensor& e) {
        NoisePredictor p = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
            return net->forward(x_t, labels, in.tau, in.z, in.present, t);
        };
        torch::NoGradGuard guard;
        return diffusion_loss(p, x0, labels, in.tau, in.present, s, in.t, e).item<double>();
    };
    const double base = loss_of(in.x, in.labels, eps);
    const double permuted = loss_of(in.x.index_select(1, perm), in.labels.index_select(1, perm), eps.index_select(1, perm));
    CHECK(permuted == doctest::Approx(base).epsilon(1e-6));

    NoisePredictor p = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
        return net->forward(x_t, in.labels, in.tau, in.z, in.present, t);
    };
    torch::NoGradGuard guard;
    auto g1 = at::detail::createCPUGenerator(99);
    auto g2 = at::detail::createCPUGenerator(99);
    CHECK(diffusion_loss(p, in.x, in.labels, in.tau, in.present, s, g1).item<double>() ==
          diffusion_loss(p, in.x, in.labels, in.tau, in.present, s, g2).item<double>());
}

TEST_CASE("diffusion loss gradient matches finite differences") {
    auto net = toy_net(17, toy_config(2, 8));
    net->to(torch::kFloat64);
    perturb(*net, 0.1, 18);
    const auto& s = schedule();
    auto gen = at::detail::createCPUGenerator(19);
    auto in = random_inputs(gen, 2, 12, torch::kFloat64);
    auto eps = torch::randn({2, 12, 3}, gen, torch::TensorOptions().dtype(torch::kFloat64));
    auto loss = [&]() {
        NoisePredictor p = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
            return net->forward(x_t, in.labels, in.tau, in.z, in.present, t);
        };
        return diffusion_loss(p, in.x, in.labels, in.tau, in.present, s, in.t, eps);
    };
    auto params = net->named_parameters();
    for (const char* name : {"head.weight", "block0.to_q.weight", "context_in.weight"}) {
        auto w = params[name];
        net->zero_grad();
        loss().backward();
        auto analytic = w.grad().clone();
        // a small subset of entries
        auto flat = w.detach().view({-1});
        const int64_t count = std::min<int64_t>(8, flat.numel());
        auto numeric = torch::zeros({count}, torch::kFloat64);
        auto expected = analytic.view({-1}).narrow(0, 0, count);
        torch::NoGradGuard guard;
        for (int64_t i = 0; i < count; ++i) {
            const double h = 1e-6;
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double up = loss().item<double>();
            flat[i] = orig - h;
            const double down = loss().item<double>();
            flat[i] = orig;
            numeric[i] = (up - down) / (2 * h);
        }
        CAPTURE(name);
        CHECK(relative_error(expected, numeric) < 1e-3);
    }
}
