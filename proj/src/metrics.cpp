#include "partdiff/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

namespace partdiff {

std::vector<double> chamfer_matrix(const std::vector<PointSet>& rows, const std::vector<PointSet>& cols, int workers) {
    const std::size_t n = rows.size() * cols.size();
    std::vector<double> out(n);
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t k = begin; k < end; ++k) {
            out[k] = chamfer(rows[k / cols.size()], cols[k % cols.size()]);
        }
    };
    workers = std::max(1, workers);
    if (workers == 1 || n < 2) {
        work(0, n);
        return out;
    }
    std::vector<std::jthread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        pool.emplace_back(work, begin, std::min(n, begin + chunk));
    }
    return out;
}

namespace {

void require_reference(const PartSetPair& pair) {
    if (pair.reference.empty()) {
        throw std::invalid_argument("reference set is empty");
    }
    if (pair.generated.empty()) {
        throw std::invalid_argument("generated set is empty");
    }
}

std::size_t argmin(const double* values, std::size_t count, std::size_t skip = static_cast<std::size_t>(-1)) {
    std::size_t best = static_cast<std::size_t>(-1);
    double best_value = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < count; ++i) {
        if (i == skip) continue;
        if (best == static_cast<std::size_t>(-1) || values[i] < best_value) {
            best = i;
            best_value = values[i];
        }
    }
    return best;
}

}  // namespace

double mmd_p(const PartSetPair& pair, int workers) {
    require_reference(pair);
    const auto d = chamfer_matrix(pair.reference, pair.generated, workers);
    const std::size_t g = pair.generated.size();
    double total = 0.0;
    for (std::size_t r = 0; r < pair.reference.size(); ++r) {
        total += *std::min_element(d.begin() + static_cast<long>(r * g), d.begin() + static_cast<long>((r + 1) * g));
    }
    return total / static_cast<double>(pair.reference.size());
}

double cov_p(const PartSetPair& pair, int workers) {
    require_reference(pair);
    const auto d = chamfer_matrix(pair.generated, pair.reference, workers);
    const std::size_t r = pair.reference.size();
    std::vector<bool> covered(r, false);
    for (std::size_t g = 0; g < pair.generated.size(); ++g) {
        covered[argmin(d.data() + g * r, r)] = true;
    }
    return static_cast<double>(std::count(covered.begin(), covered.end(), true)) / static_cast<double>(r);
}

double one_nna_p(const PartSetPair& pair, int workers) {
    require_reference(pair);
    std::vector<PointSet> all = pair.generated;
    all.insert(all.end(), pair.reference.begin(), pair.reference.end());
    const std::size_t n = all.size();
    const std::size_t g = pair.generated.size();
    const auto d = chamfer_matrix(all, all, workers);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t nn = argmin(d.data() + i * n, n, i);
        if ((i < g) == (nn < g)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

ConnectionSpec ConnectionSpec::from_pairs(const std::vector<std::pair<int, int>>& pairs) {
    ConnectionSpec spec;
    for (const auto& [j, k] : pairs) {
        auto it = std::find_if(spec.connections.begin(), spec.connections.end(),
                               [j = j](const Connection& c) { return c.part == j; });
        if (it == spec.connections.end()) {
            spec.connections.push_back({j, {k}});
        } else if (std::find(it->partners.begin(), it->partners.end(), k) == it->partners.end()) {
            it->partners.push_back(k);
        }
    }
    return spec;
}

ConnectionSpec ConnectionSpec::chair(int back, int seat, int legs, int arms) {
    ConnectionSpec spec;
    spec.connections.push_back({back, {legs, seat}});
    spec.connections.push_back({seat, {legs}});
    spec.connections.push_back({arms, {back, seat}});
    return spec;
}

PointSet closest_points(std::span<const Vec3> from, std::span<const Vec3> to, int count) {
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) best = std::min(best, squared_distance(from[i], q));
        dist.emplace_back(best, i);
    }
    const std::size_t keep = std::min(from.size(), static_cast<std::size_t>(std::max(count, 0)));
    std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(keep), dist.end());
    PointSet out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(from[dist[i].second]);
    return out;
}

SnapResult snap(const SegmentedCloud& shape, const ConnectionSpec& spec, int n_snap) {
    SnapResult result;
    std::vector<PointSet> parts;
    for (int j = 0; j < shape.part_count(); ++j) parts.push_back(shape.part(j));
    auto present = [&](int j) { return j >= 0 && j < shape.part_count() && !parts[static_cast<std::size_t>(j)].empty(); };

    double total = 0.0;
    for (const auto& conn : spec.connections) {
        if (!present(conn.part)) {
            ++result.skipped;
            continue;
        }
        const auto& own = parts[static_cast<std::size_t>(conn.part)];
        double best = std::numeric_limits<double>::infinity();
        for (int k : conn.partners) {
            if (!present(k)) continue;
            const auto& other = parts[static_cast<std::size_t>(k)];
            if (static_cast<int>(own.size()) < n_snap || static_cast<int>(other.size()) < n_snap) {
                result.truncated = true;
            }
            const auto a = closest_points(other, own, n_snap);
            const auto b = closest_points(own, other, n_snap);
            best = std::min(best, chamfer(a, b));
        }
        if (best == std::numeric_limits<double>::infinity()) {
            ++result.skipped;
            continue;
        }
        total += best;
        ++result.evaluated;
    }
    result.value = result.evaluated > 0 ? total / result.evaluated : 0.0;
    return result;
}

namespace {

PointSet resample_points(const PointSet& points, int count, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, points.size() - 1);
    PointSet out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(points[pick(rng)]);
    return out;
}

}  // namespace

EvaluationReport evaluate(const std::vector<SegmentedCloud>& generated, const std::vector<SegmentedCloud>& reference,
                          const ConnectionSpec& spec, const EvaluationOptions& options) {
    if (generated.empty() || reference.empty()) {
        throw std::invalid_argument("evaluation needs non-empty generated and reference sets");
    }
    const int m = reference.front().part_count();
    std::mt19937_64 rng(options.seed);
    EvaluationReport report;
    double weight_total = 0.0;
    for (int j = 0; j < m; ++j) {
        PartSetPair pair;
        pair.part = j;
        for (int side = 0; side < 2; ++side) {
            auto& dst = side == 0 ? pair.generated : pair.reference;
            for (const auto& shape : side == 0 ? generated : reference) {
                if (j >= shape.part_count()) continue;
                const auto part = shape.part(j);
                if (part.empty()) continue;
                dst.push_back(resample_points(unit_cube_canonicalize(part), options.points_per_part, rng));
            }
        }
        if (pair.reference.empty() || pair.generated.empty()) continue;
        PartScores scores;
        scores.part = j;
        scores.reference_count = static_cast<int>(pair.reference.size());
        scores.mmd = mmd_p(pair, options.workers);
        scores.cov = cov_p(pair, options.workers);
        scores.nna = one_nna_p(pair, options.workers);
        const double w = scores.reference_count;
        report.mmd += w * scores.mmd;
        report.cov += w * scores.cov;
        report.nna += w * scores.nna;
        weight_total += w;
        report.parts.push_back(scores);
    }
    if (weight_total > 0.0) {
        report.mmd /= weight_total;
        report.cov /= weight_total;
        report.nna /= weight_total;
    }
    double snap_total = 0.0;
    for (const auto& shape : generated) {
        const auto s = snap(shape, spec, options.n_snap);
        report.snap_skipped += s.skipped;
        report.snap_connections += s.evaluated;
        snap_total += s.value * s.evaluated;
    }
    report.snap = report.snap_connections > 0 ? snap_total / report.snap_connections : 0.0;
    return report;
}

std::string format_report(const EvaluationReport& report) {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-8s %8s %10s %10s %10s\n", "part", "refs", "MMD-P", "COV-P", "1NNA-P");
    out += line;
    for (const auto& p : report.parts) {
        std::snprintf(line, sizeof(line), "%-8d %8d %10.3f %9.2f%% %9.2f%%\n", p.part, p.reference_count, p.mmd * 1e2,
                      p.cov * 1e2, p.nna * 1e2);
        out += line;
    }
    std::snprintf(line, sizeof(line), "%-8s %8s %10.3f %9.2f%% %9.2f%%\n", "all", "", report.mmd * 1e2,
                  report.cov * 1e2, report.nna * 1e2);
    out += line;
    std::snprintf(line, sizeof(line), "SNAP x1e2: %.3f over %d connections (%d skipped)\n", report.snap * 1e2,
                  report.snap_connections, report.snap_skipped);
    out += line;
    return out;
}

}  // namespace partdiff
