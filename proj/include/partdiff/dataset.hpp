#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "partdiff/data.hpp"

namespace partdiff {

struct DatasetManifest {
    std::filesystem::path root;
    std::string class_id;
    int m = 0;
    std::vector<std::string> part_names;
    std::vector<std::string> train;
    std::vector<std::string> test;
    /// Pairs (j, k): part j is considered attached to part k for SNAP.
    std::vector<std::pair<int, int>> connections;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<SegmentedCloud> train;
    std::vector<SegmentedCloud> test;
};

/// Reads "x y z label" lines. Blank lines and lines starting with '#' are skipped.
SegmentedCloud read_shape_record(const std::filesystem::path& path, int m, const std::string& class_id = {});
void write_shape_record(const std::filesystem::path& path, const SegmentedCloud& cloud);

/// Record paths in the manifest are relative to its "root" key, which is itself
/// resolved against the manifest's directory when relative.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Loads every record and resamples it to `point_budget` points. The resampling
/// stream for record i is seeded from (seed, split, i), so the result does not
/// depend on load order.
Dataset load_dataset(const std::filesystem::path& manifest_path, int point_budget, std::uint64_t seed);

/// Writes records as <root>/<name>.txt plus manifest.json in `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);

// ---------------------------------------------------------------------------
// Synthetic "box furniture" shapes.

enum class SynthPart : int { Back = 0, Seat = 1, LeftLegs = 2, RightLegs = 3, Arms = 4 };

/// Axis-aligned box, min/max corners.
struct Box {
    Vec3 lo;
    Vec3 hi;
};

/// Parameters of the procedural chair family. Two configuration modes share
/// the same part-style distribution: a tall back on short legs (mode 0) and a
/// low back on tall legs (mode 1).
struct SynthTemplate {
    std::string class_id = "boxchair";
    double mode1_probability = 0.5;
    std::array<double, 2> leg_height{0.40, 0.62};
    std::array<double, 2> back_height{0.56, 0.20};
    double height_jitter = 0.06;   ///< relative, uniform in [1 - j, 1 + j]
    double seat_width = 0.50;
    double seat_depth = 0.46;
    double size_jitter = 0.04;
    std::array<double, 2> seat_thickness{0.05, 0.07};
    std::array<double, 2> leg_thickness{0.04, 0.09};
    std::array<double, 2> back_thickness{0.04, 0.06};
    bool with_arms = false;
    double arm_probability = 0.5;
    int points_per_shape = 512;

    int part_count() const { return with_arms ? 5 : 4; }
    std::vector<std::string> part_names() const;
    /// back -> seat, left legs -> seat, right legs -> seat, arms -> back / seat.
    std::vector<std::pair<int, int>> connections() const;
};

struct SynthShape {
    SegmentedCloud cloud;
    int mode = 0;
    /// Boxes per part (legs and arms parts hold two boxes each).
    std::vector<std::vector<Box>> boxes;
};

/// One procedural shape. Deterministic in the state of `rng`.
SynthShape synthesize_shape(const SynthTemplate& tmpl, std::mt19937_64& rng);

/// `n_train` training and `n_test` test shapes, deterministic per seed. The
/// returned manifest has an empty root; save_dataset fills in record names.
Dataset synthesize_dataset(std::uint64_t seed, int n_train, const SynthTemplate& tmpl = {}, int n_test = 0,
                           std::vector<int>* modes = nullptr);

}  // namespace partdiff
