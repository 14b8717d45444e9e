#include "partdiff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace partdiff {

using nlohmann::json;

SegmentedCloud read_shape_record(const std::filesystem::path& path, int m, const std::string& class_id) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open shape record: " + path.string());
    }
    PointSet points;
    std::vector<int> labels;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream fields(line);
        Vec3 p;
        long label = -1;
        if (!(fields >> p[0] >> p[1] >> p[2] >> label)) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 'x y z label'");
        }
        std::string extra;
        if (fields >> extra) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": trailing field '" + extra + "'");
        }
        if (label < 0 || label >= m) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": label out of range (" +
                                     std::to_string(label) + ", m = " + std::to_string(m) + ")");
        }
        for (double c : p) {
            if (!std::isfinite(c)) {
                throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": non-finite coordinate");
            }
        }
        points.push_back(p);
        labels.push_back(static_cast<int>(label));
    }
    return SegmentedCloud(std::move(points), std::move(labels), m, class_id);
}

void write_shape_record(const std::filesystem::path& path, const SegmentedCloud& cloud) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write shape record: " + path.string());
    }
    char buf[128];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& p = cloud.points()[i];
        const int n = std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %d\n", p[0], p[1], p[2], cloud.labels()[i]);
        out.write(buf, n);
    }
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open manifest: " + path.string());
    }
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest manifest;
    try {
        std::filesystem::path root = j.at("root").get<std::string>();
        manifest.root = root.is_relative() ? path.parent_path() / root : root;
        manifest.class_id = j.at("class_id").get<std::string>();
        manifest.m = j.at("m").get<int>();
        manifest.train = j.at("train").get<std::vector<std::string>>();
        manifest.test = j.value("test", std::vector<std::string>{});
        manifest.part_names = j.value("part_names", std::vector<std::string>{});
        for (const auto& pair : j.value("connections", json::array())) {
            manifest.connections.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("malformed manifest " + path.string() + ": " + e.what());
    }
    if (manifest.m < 1) {
        throw std::runtime_error("manifest part count must be positive");
    }
    for (const auto& [a, b] : manifest.connections) {
        if (a < 0 || a >= manifest.m || b < 0 || b >= manifest.m) {
            throw std::runtime_error("connection references an invalid part index");
        }
    }
    for (const auto* split : {&manifest.train, &manifest.test}) {
        for (const auto& name : *split) {
            if (!std::filesystem::exists(manifest.root / (name + ".txt"))) {
                throw std::runtime_error("missing shape record: " + (manifest.root / (name + ".txt")).string());
            }
        }
    }
    return manifest;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    json j;
    j["root"] = manifest.root.string();
    j["class_id"] = manifest.class_id;
    j["m"] = manifest.m;
    j["part_names"] = manifest.part_names;
    j["train"] = manifest.train;
    j["test"] = manifest.test;
    json connections = json::array();
    for (const auto& [a, b] : manifest.connections) connections.push_back({a, b});
    j["connections"] = connections;
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write manifest: " + path.string());
    }
    out << j.dump(2) << "\n";
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t split, std::uint64_t index) {
    // splitmix64 finalizer over the combined key
    std::uint64_t z = seed ^ (split * 0x9E3779B97F4A7C15ULL) ^ (index * 0xBF58476D1CE4E5B9ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& manifest_path, int point_budget, std::uint64_t seed) {
    Dataset dataset;
    dataset.manifest = read_manifest(manifest_path);
    const auto& mf = dataset.manifest;
    auto load_split = [&](const std::vector<std::string>& names, std::uint64_t split, std::vector<SegmentedCloud>& out) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto raw = read_shape_record(mf.root / (names[i] + ".txt"), mf.m, mf.class_id);
            std::mt19937_64 rng(mix_seed(seed, split, i));
            out.push_back(point_budget > 0 ? resample_cloud(raw, point_budget, rng) : raw);
        }
    };
    load_split(mf.train, 0, dataset.train);
    load_split(mf.test, 1, dataset.test);
    return dataset;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    std::filesystem::create_directories(dir / "shapes");
    DatasetManifest manifest = dataset.manifest;
    manifest.root = "shapes";
    manifest.train.clear();
    manifest.test.clear();
    char name[32];
    for (std::size_t i = 0; i < dataset.train.size(); ++i) {
        std::snprintf(name, sizeof(name), "train_%05zu", i);
        write_shape_record(dir / "shapes" / (std::string(name) + ".txt"), dataset.train[i]);
        manifest.train.emplace_back(name);
    }
    for (std::size_t i = 0; i < dataset.test.size(); ++i) {
        std::snprintf(name, sizeof(name), "test_%05zu", i);
        write_shape_record(dir / "shapes" / (std::string(name) + ".txt"), dataset.test[i]);
        manifest.test.emplace_back(name);
    }
    write_manifest(dir / "manifest.json", manifest);
}

// ---------------------------------------------------------------------------

std::vector<std::string> SynthTemplate::part_names() const {
    std::vector<std::string> names{"back", "seat", "left_legs", "right_legs"};
    if (with_arms) names.emplace_back("arms");
    return names;
}

std::vector<std::pair<int, int>> SynthTemplate::connections() const {
    std::vector<std::pair<int, int>> c{{0, 1}, {2, 1}, {3, 1}};
    if (with_arms) {
        c.emplace_back(4, 0);
        c.emplace_back(4, 1);
    }
    return c;
}

namespace {

double box_volume(const Box& b) {
    return (b.hi[0] - b.lo[0]) * (b.hi[1] - b.lo[1]) * (b.hi[2] - b.lo[2]);
}

// Point share of a part follows the area of its two largest box faces so thin
// slabs and slender posts both receive a sensible number of points.
double box_weight(const Box& b) {
    std::array<double, 3> e{b.hi[0] - b.lo[0], b.hi[1] - b.lo[1], b.hi[2] - b.lo[2]};
    std::sort(e.begin(), e.end());
    return e[1] * e[2];
}

PointSet sample_boxes(const std::vector<Box>& boxes, int count, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> volumes;
    double total = 0.0;
    for (const auto& b : boxes) {
        volumes.push_back(box_volume(b));
        total += volumes.back();
    }
    PointSet out;
    out.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
        double pick = unit(rng) * total;
        std::size_t bi = 0;
        while (bi + 1 < boxes.size() && pick > volumes[bi]) {
            pick -= volumes[bi];
            ++bi;
        }
        const Box& b = boxes[bi];
        Vec3 p;
        for (int a = 0; a < 3; ++a) p[a] = b.lo[a] + unit(rng) * (b.hi[a] - b.lo[a]);
        out.push_back(p);
    }
    return out;
}

}  // namespace

SynthShape synthesize_shape(const SynthTemplate& tmpl, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto jitter = [&](double base, double rel) { return base * (1.0 - rel + 2.0 * rel * unit(rng)); };
    auto range = [&](const std::array<double, 2>& r) { return r[0] + (r[1] - r[0]) * unit(rng); };

    SynthShape shape;
    shape.mode = unit(rng) < tmpl.mode1_probability ? 1 : 0;
    const double leg_h = jitter(tmpl.leg_height[shape.mode], tmpl.height_jitter);
    const double back_h = jitter(tmpl.back_height[shape.mode], tmpl.height_jitter);
    const double w = jitter(tmpl.seat_width, tmpl.size_jitter);
    const double d = jitter(tmpl.seat_depth, tmpl.size_jitter);
    const double seat_t = range(tmpl.seat_thickness);
    const double leg_t = range(tmpl.leg_thickness);
    const double back_t = range(tmpl.back_thickness);
    const bool arms = tmpl.with_arms && unit(rng) < tmpl.arm_probability;
    const double arm_t = 0.04;
    const double arm_rise = 0.18;

    const double seat_top = leg_h + seat_t;
    const double height = seat_top + back_h;
    const double y0 = -0.5 * height;  // centre the shape vertically

    const int m = tmpl.part_count();
    shape.boxes.resize(static_cast<std::size_t>(m));
    shape.boxes[0] = {Box{{-w / 2, y0 + seat_top, -d / 2}, {w / 2, y0 + height, -d / 2 + back_t}}};
    shape.boxes[1] = {Box{{-w / 2, y0 + leg_h, -d / 2}, {w / 2, y0 + seat_top, d / 2}}};
    for (int side = 0; side < 2; ++side) {
        const double x_lo = side == 0 ? -w / 2 : w / 2 - leg_t;
        auto& legs = shape.boxes[static_cast<std::size_t>(2 + side)];
        legs.push_back(Box{{x_lo, y0, -d / 2}, {x_lo + leg_t, y0 + leg_h, -d / 2 + leg_t}});
        legs.push_back(Box{{x_lo, y0, d / 2 - leg_t}, {x_lo + leg_t, y0 + leg_h, d / 2}});
    }
    if (arms) {
        const double y_lo = y0 + seat_top + arm_rise;
        shape.boxes[4] = {Box{{-w / 2, y_lo, -d / 2 + back_t}, {-w / 2 + arm_t, y_lo + arm_t, d / 2}},
                          Box{{w / 2 - arm_t, y_lo, -d / 2 + back_t}, {w / 2, y_lo + arm_t, d / 2}}};
    }

    std::vector<int> sizes;
    for (const auto& boxes : shape.boxes) {
        double weight = 0.0;
        for (const auto& b : boxes) weight += box_weight(b);
        sizes.push_back(static_cast<int>(std::lround(weight * 1e6)));
    }
    const auto counts = allocate_part_budget(sizes, tmpl.points_per_shape);
    std::vector<PointSet> parts;
    for (int j = 0; j < m; ++j) {
        const auto& boxes = shape.boxes[static_cast<std::size_t>(j)];
        parts.push_back(boxes.empty() ? PointSet{} : sample_boxes(boxes, counts[static_cast<std::size_t>(j)], rng));
    }
    shape.cloud = assemble_cloud(parts, tmpl.class_id);
    return shape;
}

Dataset synthesize_dataset(std::uint64_t seed, int n_train, const SynthTemplate& tmpl, int n_test,
                           std::vector<int>* modes) {
    Dataset dataset;
    dataset.manifest.class_id = tmpl.class_id;
    dataset.manifest.m = tmpl.part_count();
    dataset.manifest.part_names = tmpl.part_names();
    dataset.manifest.connections = tmpl.connections();
    std::mt19937_64 rng(seed);
    for (int i = 0; i < n_train + n_test; ++i) {
        auto shape = synthesize_shape(tmpl, rng);
        if (modes) modes->push_back(shape.mode);
        (i < n_train ? dataset.train : dataset.test).push_back(std::move(shape.cloud));
    }
    return dataset;
}

}  // namespace partdiff
