#include "partdiff/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace partdiff {

namespace {

constexpr int kMinPartPoints = 8;

}  // namespace

SegmentedCloud::SegmentedCloud(PointSet points, std::vector<int> labels, int m, std::string class_id)
    : points_(std::move(points)), labels_(std::move(labels)), m_(m), class_id_(std::move(class_id)) {
    if (m_ < 1) {
        throw std::invalid_argument("part count must be positive");
    }
    if (points_.size() != labels_.size()) {
        throw std::invalid_argument("labels length " + std::to_string(labels_.size()) +
                                    " does not match point count " + std::to_string(points_.size()));
    }
    for (std::size_t i = 0; i < points_.size(); ++i) {
        if (labels_[i] < 0 || labels_[i] >= m_) {
            throw std::invalid_argument("label out of range: " + std::to_string(labels_[i]) + " at point " +
                                        std::to_string(i) + " (m = " + std::to_string(m_) + ")");
        }
        for (double c : points_[i]) {
            if (!std::isfinite(c)) {
                throw std::invalid_argument("non-finite coordinate at point " + std::to_string(i));
            }
        }
    }
}

PointSet SegmentedCloud::part(int j) const {
    PointSet out;
    for (std::size_t i = 0; i < points_.size(); ++i) {
        if (labels_[i] == j) {
            out.push_back(points_[i]);
        }
    }
    return out;
}

int SegmentedCloud::part_size(int j) const {
    return static_cast<int>(std::count(labels_.begin(), labels_.end(), j));
}

std::vector<int> SegmentedCloud::part_sizes() const {
    std::vector<int> sizes(static_cast<std::size_t>(m_), 0);
    for (int label : labels_) {
        ++sizes[static_cast<std::size_t>(label)];
    }
    return sizes;
}

std::vector<bool> SegmentedCloud::presence() const {
    std::vector<bool> present(static_cast<std::size_t>(m_), false);
    for (int label : labels_) {
        present[static_cast<std::size_t>(label)] = true;
    }
    return present;
}

SegmentedCloud assemble_cloud(const std::vector<PointSet>& parts, std::string class_id) {
    PointSet points;
    std::vector<int> labels;
    for (std::size_t j = 0; j < parts.size(); ++j) {
        points.insert(points.end(), parts[j].begin(), parts[j].end());
        labels.insert(labels.end(), parts[j].size(), static_cast<int>(j));
    }
    return SegmentedCloud(std::move(points), std::move(labels), static_cast<int>(parts.size()), std::move(class_id));
}

CanonicalPart canonicalize_part(std::span<const Vec3> points) {
    if (points.empty()) {
        throw std::invalid_argument("empty part");
    }
    const double n = static_cast<double>(points.size());
    Vec3 mean{0.0, 0.0, 0.0};
    for (const auto& p : points) {
        for (int a = 0; a < 3; ++a) mean[a] += p[a];
    }
    for (double& v : mean) v /= n;

    Vec3 var{0.0, 0.0, 0.0};
    for (const auto& p : points) {
        for (int a = 0; a < 3; ++a) {
            const double d = p[a] - mean[a];
            var[a] += d * d;
        }
    }
    CanonicalPart out;
    out.transform.shift = mean;
    for (int a = 0; a < 3; ++a) {
        out.transform.scale[a] = std::max(std::sqrt(var[a] / n), kMinPartScale);
    }
    out.points.reserve(points.size());
    for (const auto& p : points) {
        Vec3 q;
        for (int a = 0; a < 3; ++a) q[a] = (p[a] - mean[a]) / out.transform.scale[a];
        out.points.push_back(q);
    }
    return out;
}

PointSet apply_transform(std::span<const Vec3> canonical, const PartTransform& transform) {
    PointSet out;
    out.reserve(canonical.size());
    for (const auto& p : canonical) {
        Vec3 q;
        for (int a = 0; a < 3; ++a) q[a] = transform.scale[a] * p[a] + transform.shift[a];
        out.push_back(q);
    }
    return out;
}

PointSet unit_cube_canonicalize(std::span<const Vec3> points) {
    if (points.empty()) {
        return {};
    }
    Vec3 lo = points.front();
    Vec3 hi = points.front();
    for (const auto& p : points) {
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    }
    PointSet out;
    out.reserve(points.size());
    for (const auto& p : points) {
        Vec3 q;
        for (int a = 0; a < 3; ++a) {
            const double extent = hi[a] - lo[a];
            q[a] = extent > 0.0 ? (p[a] - lo[a]) / extent - 0.5 : 0.0;
        }
        out.push_back(q);
    }
    return out;
}

TransformSet observed_transforms(const SegmentedCloud& cloud) {
    TransformSet out(cloud.part_count());
    for (int j = 0; j < cloud.part_count(); ++j) {
        const PointSet part = cloud.part(j);
        if (part.empty()) continue;
        out.transforms[static_cast<std::size_t>(j)] = canonicalize_part(part).transform;
        out.present[static_cast<std::size_t>(j)] = true;
    }
    return out;
}

double squared_distance(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0];
    const double dy = a[1] - b[1];
    const double dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

namespace {

double mean_nearest(std::span<const Vec3> from, std::span<const Vec3> to) {
    double total = 0.0;
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            best = std::min(best, squared_distance(p, q));
        }
        total += best;
    }
    return total / static_cast<double>(from.size());
}

}  // namespace

double chamfer(std::span<const Vec3> a, std::span<const Vec3> b) {
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("chamfer distance of an empty point set");
    }
    return mean_nearest(a, b) + mean_nearest(b, a);
}

std::vector<int> allocate_part_budget(std::span<const int> part_sizes, int budget) {
    const int present = static_cast<int>(std::count_if(part_sizes.begin(), part_sizes.end(), [](int n) { return n > 0; }));
    if (present == 0) {
        throw std::invalid_argument("shape has no points");
    }
    const int spare = budget - kMinPartPoints * present;
    if (spare < 0) {
        throw std::invalid_argument("point budget " + std::to_string(budget) + " below the minimum for " +
                                    std::to_string(present) + " parts");
    }
    const long total = std::accumulate(part_sizes.begin(), part_sizes.end(), 0L);
    std::vector<int> counts(part_sizes.size(), 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    int assigned = 0;
    for (std::size_t j = 0; j < part_sizes.size(); ++j) {
        if (part_sizes[j] <= 0) continue;
        const double share = static_cast<double>(spare) * part_sizes[j] / static_cast<double>(total);
        const int whole = static_cast<int>(std::floor(share));
        counts[j] = kMinPartPoints + whole;
        assigned += whole;
        remainders.emplace_back(share - whole, j);
    }
    // Largest remainder first; equal remainders resolve by part index.
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < spare; ++k, ++assigned) {
        ++counts[remainders[k % remainders.size()].second];
    }
    return counts;
}

SegmentedCloud resample_cloud(const SegmentedCloud& cloud, int budget, std::mt19937_64& rng) {
    const auto sizes = cloud.part_sizes();
    const auto counts = allocate_part_budget(sizes, budget);
    std::vector<PointSet> parts(static_cast<std::size_t>(cloud.part_count()));
    for (int j = 0; j < cloud.part_count(); ++j) {
        const int want = counts[static_cast<std::size_t>(j)];
        if (want == 0) continue;
        const PointSet source = cloud.part(j);
        std::uniform_int_distribution<std::size_t> pick(0, source.size() - 1);
        auto& dst = parts[static_cast<std::size_t>(j)];
        dst.reserve(static_cast<std::size_t>(want));
        for (int k = 0; k < want; ++k) {
            dst.push_back(source[pick(rng)]);
        }
    }
    return assemble_cloud(parts, cloud.class_id());
}

}  // namespace partdiff
