#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace partdiff {

using Vec3 = std::array<double, 3>;
using PointSet = std::vector<Vec3>;

/// Smallest per-axis scale produced by canonicalization. Planar and linear
/// parts have zero spread along some axis.
inline constexpr double kMinPartScale = 1e-8;

/// Per-part instancing transformation: world = scale * canonical + shift.
struct PartTransform {
    Vec3 shift{0.0, 0.0, 0.0};
    Vec3 scale{1.0, 1.0, 1.0};

    friend bool operator==(const PartTransform&, const PartTransform&) = default;
};

/// Transformations for all m parts of a category, with a presence mask.
struct TransformSet {
    std::vector<PartTransform> transforms;
    std::vector<bool> present;

    TransformSet() = default;
    explicit TransformSet(int m) : transforms(static_cast<std::size_t>(m)), present(static_cast<std::size_t>(m), false) {}

    int size() const { return static_cast<int>(transforms.size()); }

    friend bool operator==(const TransformSet&, const TransformSet&) = default;
};

/// Point cloud with one semantic part label per point.
class SegmentedCloud {
public:
    SegmentedCloud() = default;

    /// Throws std::invalid_argument when labels and points disagree in length,
    /// a label is outside [0, m), or a coordinate is not finite.
    SegmentedCloud(PointSet points, std::vector<int> labels, int m, std::string class_id = {});

    const PointSet& points() const { return points_; }
    const std::vector<int>& labels() const { return labels_; }
    int part_count() const { return m_; }
    const std::string& class_id() const { return class_id_; }
    std::size_t size() const { return points_.size(); }

    PointSet part(int j) const;
    int part_size(int j) const;
    bool has_part(int j) const { return part_size(j) > 0; }
    std::vector<bool> presence() const;
    std::vector<int> part_sizes() const;

    friend bool operator==(const SegmentedCloud&, const SegmentedCloud&) = default;

private:
    PointSet points_;
    std::vector<int> labels_;
    int m_ = 0;
    std::string class_id_;
};

/// Builds a cloud from per-part point sets; part j gets label j.
SegmentedCloud assemble_cloud(const std::vector<PointSet>& parts, std::string class_id = {});

struct CanonicalPart {
    PointSet points;
    PartTransform transform;
};

/// Shifts by the per-axis mean and divides by the per-axis population standard
/// deviation (clamped to kMinPartScale). Throws std::invalid_argument("empty part").
CanonicalPart canonicalize_part(std::span<const Vec3> points);

PointSet apply_transform(std::span<const Vec3> canonical, const PartTransform& transform);

/// Fits the bounding box of a part into [-0.5, 0.5]^3, each axis scaled on its
/// own. Axes without extent map to 0. Used by the evaluation metrics only.
PointSet unit_cube_canonicalize(std::span<const Vec3> points);

/// Transformations observed on a segmented shape (mean/std canonicalization per part).
TransformSet observed_transforms(const SegmentedCloud& cloud);

double squared_distance(const Vec3& a, const Vec3& b);

/// Symmetric sum of mean nearest-neighbour squared distances.
/// Throws std::invalid_argument when either set is empty.
double chamfer(std::span<const Vec3> a, std::span<const Vec3> b);

/// Per-part point counts for a budget: every present part gets 8 points and the
/// remainder is split proportionally to part size (largest remainder).
std::vector<int> allocate_part_budget(std::span<const int> part_sizes, int budget);

/// Resamples each present part uniformly with replacement to the allocated count.
SegmentedCloud resample_cloud(const SegmentedCloud& cloud, int budget, std::mt19937_64& rng);

}  // namespace partdiff
