#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "partdiff/data.hpp"

namespace partdiff {

/// Canonicalized part clouds of one part index from generated and reference shapes.
struct PartSetPair {
    std::vector<PointSet> generated;
    std::vector<PointSet> reference;
    int part = 0;
};

/// rows x cols matrix of Chamfer distances, row-major. Work is split over
/// `workers` threads; the result does not depend on the worker count.
std::vector<double> chamfer_matrix(const std::vector<PointSet>& rows, const std::vector<PointSet>& cols,
                                   int workers = 1);

/// Mean over reference clouds of the smallest Chamfer distance to any generated cloud.
double mmd_p(const PartSetPair& pair, int workers = 1);

/// Fraction of reference clouds that are the nearest reference of at least one
/// generated cloud. Ties resolve to the lowest reference index.
double cov_p(const PartSetPair& pair, int workers = 1);

/// Leave-one-out 1-NN accuracy over generated and reference clouds combined.
/// Ties resolve to the lowest index in [generated..., reference...] order.
double one_nna_p(const PartSetPair& pair, int workers = 1);

/// For SNAP: part `part` is considered attached to any of `partners`.
struct Connection {
    int part = 0;
    std::vector<int> partners;
};

struct ConnectionSpec {
    std::vector<Connection> connections;

    /// Groups (j, k) pairs by j, keeping first-appearance order.
    static ConnectionSpec from_pairs(const std::vector<std::pair<int, int>>& pairs);
    /// Chair convention with part indices back, seat, legs, arms.
    static ConnectionSpec chair(int back = 0, int seat = 1, int legs = 2, int arms = 3);
};

struct SnapResult {
    double value = 0.0;   ///< mean over evaluated connections, 0 when none
    int evaluated = 0;
    int skipped = 0;      ///< connections whose part or every partner was absent
    bool truncated = false;  ///< some part had fewer than n_snap points
};

/// The `count` points of `from` closest to the set `to`, in order of
/// increasing distance (ties by index).
PointSet closest_points(std::span<const Vec3> from, std::span<const Vec3> to, int count);

/// Snapping distance of one connection: min over partners k of
/// Chamfer(closest_points(S_k, S_j), closest_points(S_j, S_k)).
SnapResult snap(const SegmentedCloud& shape, const ConnectionSpec& spec, int n_snap = 30);

struct PartScores {
    int part = 0;
    int reference_count = 0;
    double mmd = 0.0;
    double cov = 0.0;
    double nna = 0.0;
};

struct EvaluationReport {
    std::vector<PartScores> parts;
    /// Averages weighted by reference part counts.
    double mmd = 0.0;
    double cov = 0.0;
    double nna = 0.0;
    double snap = 0.0;
    int snap_connections = 0;
    int snap_skipped = 0;
};

struct EvaluationOptions {
    int points_per_part = 512;
    int n_snap = 30;
    int workers = 1;
    std::uint64_t seed = 0;
};

/// Canonicalizes every present part into the unit cube, resamples it to
/// `points_per_part` and scores each part index; SNAP is averaged over the
/// generated shapes.
EvaluationReport evaluate(const std::vector<SegmentedCloud>& generated, const std::vector<SegmentedCloud>& reference,
                          const ConnectionSpec& spec, const EvaluationOptions& options = {});

/// Text table with MMD-P x1e2, COV-P %, 1NNA-P %, SNAP x1e2.
std::string format_report(const EvaluationReport& report);

}  // namespace partdiff
