#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "partdiff/metrics.hpp"

using namespace partdiff;

namespace {

PointSet random_cloud(std::mt19937_64& rng, int n, double sx, double sy, double sz, Vec3 offset = {0, 0, 0}) {
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    PointSet out;
    for (int i = 0; i < n; ++i) out.push_back({sx * u(rng) + offset[0], sy * u(rng) + offset[1], sz * u(rng) + offset[2]});
    return out;
}

std::vector<PointSet> random_family(std::mt19937_64& rng, int count, int n) {
    std::uniform_real_distribution<double> dim(0.3, 1.0);
    std::vector<PointSet> out;
    for (int i = 0; i < count; ++i) out.push_back(random_cloud(rng, n, dim(rng), dim(rng), dim(rng)));
    return out;
}

double cd(const PointSet& a, const PointSet& b) {
    double ab = 0, ba = 0;
    for (const auto& p : a) {
        double best = 1e300;
        for (const auto& q : b) best = std::min(best, squared_distance(p, q));
        ab += best;
    }
    for (const auto& q : b) {
        double best = 1e300;
        for (const auto& p : a) best = std::min(best, squared_distance(p, q));
        ba += best;
    }
    return ab / a.size() + ba / b.size();
}

double mmd_oracle(const PartSetPair& pr) {
    double total = 0;
    for (const auto& r : pr.reference) {
        double best = 1e300;
        for (const auto& g : pr.generated) best = std::min(best, cd(g, r));
        total += best;
    }
    return total / pr.reference.size();
}

double cov_oracle(const PartSetPair& pr) {
    std::vector<int> hit(pr.reference.size(), 0);
    for (const auto& g : pr.generated) {
        std::size_t arg = 0;
        for (std::size_t r = 1; r < pr.reference.size(); ++r)
            if (cd(g, pr.reference[r]) < cd(g, pr.reference[arg])) arg = r;
        hit[arg] = 1;
    }
    return std::accumulate(hit.begin(), hit.end(), 0.0) / pr.reference.size();
}

double nna_oracle(const PartSetPair& pr) {
    std::vector<std::pair<PointSet, bool>> all;
    for (const auto& g : pr.generated) all.emplace_back(g, true);
    for (const auto& r : pr.reference) all.emplace_back(r, false);
    int correct = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        std::size_t arg = i == 0 ? 1 : 0;
        for (std::size_t k = 0; k < all.size(); ++k) {
            if (k == i) continue;
            if (cd(all[i].first, all[k].first) < cd(all[i].first, all[arg].first)) arg = k;
        }
        if (all[arg].second == all[i].second) ++correct;
    }
    return static_cast<double>(correct) / all.size();
}

// N closest points of Y to the set X by full sort of (distance, index).
PointSet closest_oracle(const PointSet& y, const PointSet& x, int n) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t i = 0; i < y.size(); ++i) {
        double best = 1e300;
        for (const auto& p : x) best = std::min(best, squared_distance(y[i], p));
        d.emplace_back(best, i);
    }
    std::sort(d.begin(), d.end());
    PointSet out;
    for (int i = 0; i < std::min<int>(n, d.size()); ++i) out.push_back(y[d[i].second]);
    return out;
}

PointSet unit_square(int per_side, double x_offset, double y) {
    PointSet out;
    for (int i = 0; i < per_side; ++i)
        for (int k = 0; k < per_side; ++k)
            out.push_back({x_offset + static_cast<double>(i) / (per_side - 1), y, static_cast<double>(k) / (per_side - 1)});
    return out;
}

}  // namespace

TEST_CASE("mmd_p, cov_p, one_nna_p equal brute-force oracles on small sets") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 3; ++trial) {
        PartSetPair pr;
        pr.generated = random_family(rng, 10, 24);
        pr.reference = random_family(rng, 10, 24);
        CHECK(mmd_p(pr) == mmd_oracle(pr));
        CHECK(cov_p(pr) == cov_oracle(pr));
        CHECK(one_nna_p(pr) == nna_oracle(pr));
        CHECK(mmd_p(pr, 3) == mmd_p(pr, 1));
    }
}

TEST_CASE("metric degenerate cases") {
    std::mt19937_64 rng(2);
    const auto pool = random_family(rng, 8, 32);
    PartSetPair same{pool, pool, 0};
    CHECK(mmd_p(same) == 0.0);
    CHECK(cov_p(same) == 1.0);

    PartSetPair junk{random_family(rng, 5, 32), {pool[0]}, 0};
    junk.generated.push_back(pool[0]);
    CHECK(mmd_p(junk) == 0.0);

    PartSetPair collapsed{std::vector<PointSet>(6, pool[3]), pool, 0};
    CHECK(cov_p(collapsed) <= 1.0 / pool.size());

    PartSetPair far{{}, pool, 0};
    for (const auto& c : pool) {
        PointSet moved = c;
        for (auto& p : moved) p[0] += 10.0;
        far.generated.push_back(moved);
    }
    CHECK(one_nna_p(far) == 1.0);
    CHECK_THROWS(mmd_p(PartSetPair{pool, {}, 0}));
}

TEST_CASE("1NNA of a disjoint split of one pool is near chance") {
    for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
        std::mt19937_64 rng(seed);
        const auto pool = random_family(rng, 100, 48);
        PartSetPair pr;
        pr.generated.assign(pool.begin(), pool.begin() + 50);
        pr.reference.assign(pool.begin() + 50, pool.end());
        const double acc = one_nna_p(pr);
        CHECK(acc >= 0.35);
        CHECK(acc <= 0.65);
        CHECK(mmd_p(pr) > 0.0);
    }
}

TEST_CASE("closest_points and snap match the brute-force oracle") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const auto a = random_cloud(rng, 20, 1, 1, 1);
        const auto b = random_cloud(rng, 20, 1, 1, 1, {0.8, 0, 0});
        const auto c = random_cloud(rng, 20, 1, 1, 1, {0, 1.5, 0});
        CHECK(closest_points(b, a, 7) == closest_oracle(b, a, 7));
        const auto shape = assemble_cloud({a, b, c});
        ConnectionSpec spec{{{0, {1, 2}}, {2, {0}}}};
        const auto s = snap(shape, spec, 7);
        const double c0 = std::min(cd(closest_oracle(b, a, 7), closest_oracle(a, b, 7)),
                                   cd(closest_oracle(c, a, 7), closest_oracle(a, c, 7)));
        const double c2 = cd(closest_oracle(a, c, 7), closest_oracle(c, a, 7));
        CHECK(s.evaluated == 2);
        CHECK(std::abs(s.value - 0.5 * (c0 + c2)) < 1e-9);
    }
}

TEST_CASE("snap: touching squares beat separated ones, translation invariance, duplicates") {
    const auto left = unit_square(12, 0.0, 0.0);
    const auto touching = unit_square(12, 1.0, 0.0);
    const auto apart = unit_square(12, 1.5, 0.0);
    ConnectionSpec spec{{{0, {1}}}};
    const double near = snap(assemble_cloud({left, touching}), spec).value;
    const double far = snap(assemble_cloud({left, apart}), spec).value;
    CHECK(near < far);

    PointSet l2 = left, t2 = touching;
    for (auto* ps : {&l2, &t2})
        for (auto& p : *ps) p = {p[0] + 3.0, p[1] - 2.0, p[2] + 0.5};
    CHECK(std::abs(snap(assemble_cloud({l2, t2}), spec).value - near) < 1e-9);

    CHECK(snap(assemble_cloud({left, left}), spec).value == 0.0);
}

TEST_CASE("snap skips missing parts and reports truncation") {
    std::mt19937_64 rng(4);
    const auto a = random_cloud(rng, 10, 1, 1, 1);
    const auto shape = assemble_cloud({a, {}, random_cloud(rng, 40, 1, 1, 1)});
    ConnectionSpec spec{{{0, {1}}, {1, {0}}, {0, {2}}}};
    const auto s = snap(shape, spec, 30);
    CHECK(s.evaluated == 1);
    CHECK(s.skipped == 2);
    CHECK(s.truncated);
}

TEST_CASE("chair connection spec") {
    const auto spec = ConnectionSpec::chair(0, 1, 2, 3);
    REQUIRE(spec.connections.size() == 3);
    CHECK(spec.connections[0].part == 0);
    CHECK(spec.connections[0].partners == std::vector<int>{2, 1});
    CHECK(spec.connections[1].part == 1);
    CHECK(spec.connections[1].partners == std::vector<int>{2});
    CHECK(spec.connections[2].part == 3);
    CHECK(spec.connections[2].partners == std::vector<int>{0, 1});

    const auto grouped = ConnectionSpec::from_pairs({{0, 1}, {2, 1}, {0, 2}, {0, 1}});
    REQUIRE(grouped.connections.size() == 2);
    CHECK(grouped.connections[0].partners == std::vector<int>{1, 2});
}

TEST_CASE("evaluate: identical sets score perfectly and the report formats") {
    std::mt19937_64 rng(5);
    std::vector<SegmentedCloud> shapes;
    for (int i = 0; i < 6; ++i) {
        shapes.push_back(assemble_cloud({random_cloud(rng, 40, 1, 0.5, 0.3), random_cloud(rng, 30, 0.2, 1, 0.2, {0, 0.8, 0})}));
    }
    EvaluationOptions opt;
    opt.points_per_part = 64;
    const auto spec = ConnectionSpec::from_pairs({{0, 1}});
    const auto report = evaluate(shapes, shapes, spec, opt);
    CHECK(report.parts.size() == 2);
    CHECK(report.cov >= 0.5);
    CHECK(report.snap_connections == 6);
    CHECK(format_report(report).find("SNAP") != std::string::npos);
    opt.workers = 4;
    CHECK(evaluate(shapes, shapes, spec, opt).mmd == report.mmd);
}
