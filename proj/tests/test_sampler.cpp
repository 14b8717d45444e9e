#include "torch_doctest.hpp"

#include <cmath>

#include "partdiff/sampler.hpp"
#include "support.hpp"

using namespace partdiff;

namespace {

SamplerConfig toy_config() {
    SamplerConfig c;
    c.m = 3;
    c.latent_dim = 8;
    c.noise_dim = 4;
    c.token_dim = 16;
    c.layers = 2;
    c.heads = 2;
    c.head_dim = 8;
    c.ff_dim = 32;
    return c;
}

TransformSampler toy_sampler(uint64_t seed) {
    torch::manual_seed(seed);
    TransformSampler s(toy_config());
    s->eval();
    return s;
}

torch::Tensor bools(std::initializer_list<bool> values, std::vector<int64_t> shape) {
    return torch::tensor(std::vector<uint8_t>(values.begin(), values.end())).to(torch::kBool).view(shape);
}

TransformSet one_part(PartTransform t) {
    TransformSet s(1);
    s.transforms[0] = t;
    s.present[0] = true;
    return s;
}

}  // namespace

TEST_CASE("sampled scales are positive and finite") {
    auto sampler = toy_sampler(1);
    auto gen = at::detail::createCPUGenerator(2);
    auto z = 10.0 * torch::randn({1000, 3, 8}, gen);
    auto y = torch::randn({1000, 4}, gen);
    auto present = torch::rand({1000, 3}, gen).gt(0.3);
    present.select(1, 0).fill_(true);
    torch::NoGradGuard guard;
    auto tau = sampler->forward(z, y, present);
    CHECK(torch::isfinite(tau).all().item<bool>());
    auto scale = torch::exp(tau.narrow(-1, 3, 3));
    CHECK(scale.gt(0).all().item<bool>());
    CHECK(torch::isfinite(scale).all().item<bool>());
}

TEST_CASE("sampler output stays finite for large latents and noise amplifier") {
    torch::manual_seed(3);
    auto cfg = toy_config();
    cfg.lambda = 100.0;
    TransformSampler sampler(cfg);
    sampler->eval();
    auto gen = at::detail::createCPUGenerator(4);
    auto z = torch::randn({64, 3, 8}, gen);
    z = 100.0 * z / z.norm(2, -1, true);
    torch::NoGradGuard guard;
    auto tau = sampler->forward(z, torch::randn({64, 4}, gen), torch::ones({64, 3}, torch::kBool));
    CHECK(torch::isfinite(tau).all().item<bool>());
}

TEST_CASE("sampler is batch equivariant and deterministic") {
    auto sampler = toy_sampler(5);
    auto gen = at::detail::createCPUGenerator(6);
    auto z = torch::randn({5, 3, 8}, gen);
    auto y = torch::randn({5, 4}, gen);
    auto present = bools({1, 1, 1, 1, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1}, {5, 3});
    torch::NoGradGuard guard;
    auto tau = sampler->forward(z, y, present);
    CHECK(torch::equal(tau, sampler->forward(z, y, present)));

    auto perm = torch::tensor({3, 0, 4, 2, 1}, torch::kInt64);
    auto tau_p = sampler->forward(z.index_select(0, perm), y.index_select(0, perm), present.index_select(0, perm));
    CHECK((tau_p - tau.index_select(0, perm)).abs().max().item<double>() < 1e-6);
    // one shape at a time
    for (int64_t i = 0; i < 5; ++i) {
        auto single = sampler->forward(z.narrow(0, i, 1), y.narrow(0, i, 1), present.narrow(0, i, 1));
        CHECK((single[0] - tau[i]).abs().max().item<double>() < 1e-6);
    }
}

TEST_CASE("absent parts get the placeholder and do not influence present ones") {
    auto sampler = toy_sampler(7);
    auto gen = at::detail::createCPUGenerator(8);
    auto z = torch::randn({1, 3, 8}, gen);
    auto y = torch::randn({1, 4}, gen);
    auto present = bools({1, 0, 1}, {1, 3});
    torch::NoGradGuard guard;
    auto tau = sampler->forward(z, y, present);
    CHECK(tau[0][1].eq(0).all().item<bool>());
    auto other = z.clone();
    other[0][1] = 50.0 * torch::randn({8}, gen);
    CHECK(torch::equal(sampler->forward(other, y, present), tau));
}

TEST_CASE("fit_loss examples") {
    PartTransform ref{{0.1, -0.2, 0.3}, {0.5, 1.0, 2.0}};
    CHECK(fit_loss(one_part(ref), one_part(ref)) == 0.0);

    auto shifted = ref;
    shifted.shift[0] += 1.0;
    CHECK(fit_loss(one_part(shifted), one_part(ref)) == doctest::Approx(1.0).epsilon(1e-12));

    auto doubled = ref;
    for (auto& s : doubled.scale) s *= 2.0;
    CHECK(fit_loss(one_part(doubled), one_part(ref)) == doctest::Approx(3 * std::log(2.0) * std::log(2.0)).epsilon(1e-12));
    CHECK(fit_loss(one_part(doubled), one_part(ref)) == doctest::Approx(1.4413).epsilon(1e-4));

    // the tensor form agrees
    auto a = tau_tensor(one_part(doubled)).unsqueeze(0);
    auto b = tau_tensor(one_part(ref)).unsqueeze(0);
    CHECK(fit_loss(a, b, torch::ones({1, 1}, torch::kBool)).item<double>() == doctest::Approx(3 * std::log(2.0) * std::log(2.0)));
}

TEST_CASE("fit_loss rejects presence mismatch and ignores absent parts") {
    TransformSet a(2), b(2);
    a.present = {true, true};
    b.present = {true, false};
    CHECK_THROWS_WITH(fit_loss(a, b), "presence mismatch");

    TransformSet c(3), d(3);
    c.present = d.present = {true, false, true};
    c.transforms[0].shift = {1, 2, 3};
    d.transforms[2].scale = {2, 2, 2};
    const double base = fit_loss(c, d);
    CHECK(base > 0.0);
    c.transforms[1].shift = {9, 9, 9};
    d.transforms[1].scale = {7, 7, 7};
    CHECK(fit_loss(c, d) == base);

    // zero iff equal on present parts
    CHECK(fit_loss(c, c) == 0.0);
}

TEST_CASE("tau_tensor and transform_set round trip") {
    TransformSet s(3);
    s.present = {true, false, true};
    s.transforms[0] = {{0.1, 0.2, 0.3}, {1.5, 0.25, 3.0}};
    s.transforms[2] = {{-1.0, 0.0, 2.0}, {0.1, 0.2, 0.3}};
    auto back = transform_set(tau_tensor(s), s.present);
    for (int j : {0, 2}) {
        for (int a = 0; a < 3; ++a) {
            CHECK(back.transforms[j].shift[a] == s.transforms[j].shift[a]);
            CHECK(back.transforms[j].scale[a] == doctest::Approx(s.transforms[j].scale[a]).epsilon(1e-14));
        }
    }
    CHECK(back.present == s.present);
}

TEST_CASE("cimle_select with K = 1 returns the single drawn code") {
    auto sampler = toy_sampler(9);
    auto gen = at::detail::createCPUGenerator(10);
    auto z = torch::randn({4, 3, 8}, gen);
    auto present = torch::ones({4, 3}, torch::kBool);
    auto tau_ref = torch::randn({4, 3, 6}, gen);
    auto sel = cimle_select(sampler, z, present, tau_ref, 1, gen);

    auto replay = at::detail::createCPUGenerator(10);
    torch::randn({4, 3, 8}, replay);
    torch::randn({4, 3, 6}, replay);
    auto drawn = torch::randn({1, 4, 4}, replay);
    CHECK(torch::equal(sel.codes, drawn[0]));
    CHECK(sel.index.eq(0).all().item<bool>());
    CHECK_THROWS(cimle_select(sampler, z, present, tau_ref, 0, gen));
}

TEST_CASE("cimle_select picks the best of all candidates") {
    auto sampler = toy_sampler(11);
    auto gen = at::detail::createCPUGenerator(12);
    auto z = torch::randn({6, 3, 8}, gen);
    auto present = bools({1, 1, 1, 1, 0, 1, 1, 1, 0, 1, 1, 1, 0, 1, 1, 1, 1, 1}, {6, 3});
    auto tau_ref = torch::randn({6, 3, 6}, gen);
    const int k = 20;
    auto replay = gen.clone();
    auto sel = cimle_select(sampler, z, present, tau_ref, k, gen);
    auto codes = torch::randn({k, 6, 4}, replay);

    torch::NoGradGuard guard;
    for (int64_t i = 0; i < 6; ++i) {
        std::vector<double> losses;
        for (int c = 0; c < k; ++c) {
            auto tau = sampler->forward(z.narrow(0, i, 1), codes[c].narrow(0, i, 1), present.narrow(0, i, 1));
            losses.push_back(fit_loss(tau, tau_ref.narrow(0, i, 1), present.narrow(0, i, 1)).item<double>());
        }
        const auto chosen = sel.index[i].item<int64_t>();
        CHECK(torch::equal(sel.codes[i], codes[chosen][i]));
        for (int c = 0; c < k; ++c) CHECK(losses[chosen] <= losses[c] + 1e-5);
        CHECK(sel.losses[chosen][i].item<double>() == doctest::Approx(losses[chosen]).epsilon(1e-5));
    }
}

TEST_CASE("cimle_select breaks ties by the lowest index") {
    // With the noise amplifier at 0 every code produces the same transforms.
    torch::manual_seed(13);
    auto cfg = toy_config();
    cfg.lambda = 0.0;
    TransformSampler sampler(cfg);
    sampler->eval();
    auto gen = at::detail::createCPUGenerator(14);
    auto z = torch::randn({3, 3, 8}, gen);
    auto present = torch::ones({3, 3}, torch::kBool);
    auto sel = cimle_select(sampler, z, present, torch::zeros({3, 3, 6}), 7, gen);
    CHECK(sel.index.eq(0).all().item<bool>());
}
