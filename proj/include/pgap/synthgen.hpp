#pragma once

// Synthetic orchard sequences: parallel tree rows, a serpentine traversal
// repeated for several laps, and one segment per row plus the two field
// extremities (headlands).
//
// Geometry: tree row r runs along +y at x = r * row_spacing, trees centred
// in [0, row_length]. The lane of row r is at x = (r + 0.5) * row_spacing.
// Lanes are driven alternately north and south; the turn between two lanes
// runs through the headland half a row spacing beyond the row ends. Every
// lap restarts at the south end of lane 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "pgap/dataio.hpp"
#include "pgap/error.hpp"
#include "pgap/rng.hpp"

namespace pgap {

struct OrchardSpec {
    int rows = 3;
    double row_length = 20.0;
    double row_spacing = 3.0;
    int trees_per_row = 13;
    int points_per_tree = 120;
    double noise_sigma = 0.02;
    int laps = 2;
    double scan_spacing = 0.5;
    double sensor_range = 10.0;
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw ValidationError("invalid orchard spec: " + m); };
        if (rows < 1) fail("rows must be >= 1");
        if (trees_per_row < 1) fail("trees_per_row must be >= 1");
        if (points_per_tree < 1) fail("points_per_tree must be >= 1");
        if (laps < 2) fail("laps must be >= 2 so every place is revisited");
        if (!(row_length > 0.0)) fail("row_length must be > 0");
        if (!(row_spacing > 0.0)) fail("row_spacing must be > 0");
        if (!(scan_spacing > 0.0)) fail("scan_spacing must be > 0");
        if (!(sensor_range > 0.0)) fail("sensor_range must be > 0");
        if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
    }

    int num_segments() const { return rows + 2; }
    int south_segment() const { return rows + 1; }
    int north_segment() const { return rows + 2; }
    double headland_offset() const { return row_spacing / 2.0; }
    double lane_x(int row) const { return (row + 0.5) * row_spacing; }

    double path_length() const {
        return rows * row_length + (rows - 1) * (2.0 * headland_offset() + row_spacing);
    }
    std::size_t frames_per_lap() const {
        return static_cast<std::size_t>(std::ceil(path_length() / scan_spacing));
    }
};

struct Tree {
    double x = 0.0;
    double y = 0.0;
    double height = 0.0;
    double canopy_radius = 0.0;
    int row = 0;
};

struct PlantMap {
    PointCloud cloud;                            // world frame, points_per_tree per tree, tree by tree
    std::vector<Tree> trees;                     // row-major: row * trees_per_row + t
    std::vector<std::array<Point3, 2>> row_lines; // trunk line of each row
};

/// Trees are cones of height 2-3 m around their trunk.
inline PlantMap plant_map(const OrchardSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, {0x7472656573ULL}));
    PlantMap map;
    const double tree_step = spec.row_length / spec.trees_per_row;
    for (int r = 0; r < spec.rows; ++r) {
        const double x = r * spec.row_spacing;
        map.row_lines.push_back({Point3{x, 0.0, 0.0}, Point3{x, spec.row_length, 0.0}});
        for (int t = 0; t < spec.trees_per_row; ++t) {
            Tree tree;
            tree.row = r;
            tree.x = x;
            tree.y = (t + 0.5) * tree_step;
            tree.height = rng.uniform(2.0, 3.0);
            tree.canopy_radius = rng.uniform(0.4, 0.9);
            for (int k = 0; k < spec.points_per_tree; ++k) {
                // volume-uniform sample of a cone with its base on the ground
                const double z = tree.height * (1.0 - std::cbrt(1.0 - rng.uniform()));
                const double radius_at_z = tree.canopy_radius * (1.0 - z / tree.height);
                const double rho = radius_at_z * std::sqrt(rng.uniform());
                const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
                map.cloud.points.push_back({tree.x + rho * std::cos(phi), tree.y + rho * std::sin(phi), z});
            }
            map.trees.push_back(tree);
        }
    }
    return map;
}

struct PathPiece {
    double x0, y0, x1, y1;
    int segment;
    double length() const { return std::hypot(x1 - x0, y1 - y0); }
};

inline std::vector<PathPiece> traversal_path(const OrchardSpec& spec) {
    std::vector<PathPiece> path;
    const double north = spec.row_length + spec.headland_offset();
    const double south = -spec.headland_offset();
    for (int r = 0; r < spec.rows; ++r) {
        const double x = spec.lane_x(r);
        const bool heading_north = r % 2 == 0;
        if (heading_north) {
            path.push_back({x, 0.0, x, spec.row_length, r + 1});
        } else {
            path.push_back({x, spec.row_length, x, 0.0, r + 1});
        }
        if (r + 1 == spec.rows) break;
        const double nx = spec.lane_x(r + 1);
        const double edge = heading_north ? spec.row_length : 0.0;
        const double turn = heading_north ? north : south;
        const int seg = heading_north ? spec.north_segment() : spec.south_segment();
        path.push_back({x, edge, x, turn, seg});
        path.push_back({x, turn, nx, turn, seg});
        path.push_back({nx, turn, nx, edge, seg});
    }
    return path;
}

struct PathSample {
    double x, y, yaw;
    int segment;
};

inline PathSample sample_path(const std::vector<PathPiece>& path, double s) {
    for (std::size_t i = 0; i < path.size(); ++i) {
        const auto& p = path[i];
        const double len = p.length();
        if (s <= len || i + 1 == path.size()) {
            const double f = len > 0.0 ? std::clamp(s / len, 0.0, 1.0) : 0.0;
            return {p.x0 + f * (p.x1 - p.x0), p.y0 + f * (p.y1 - p.y0), std::atan2(p.y1 - p.y0, p.x1 - p.x0),
                    p.segment};
        }
        s -= len;
    }
    throw ContractError("empty traversal path");
}

/// Points of the map within sensor_range of the pose, in the sensor frame,
/// with isotropic Gaussian noise. Coordinates are rounded to float32 so a
/// saved and reloaded sequence is bit-identical.
inline PointCloud render_scan(const PlantMap& map, const Pose& pose, double sensor_range, double noise_sigma,
                              std::uint64_t seed) {
    Rng rng(seed);
    PointCloud cloud;
    const auto& R = pose.rotation;
    const auto& t = pose.position;
    const double r2 = sensor_range * sensor_range;
    for (const auto& p : map.cloud.points) {
        const double dx = p[0] - t[0];
        const double dy = p[1] - t[1];
        const double dz = p[2] - t[2];
        if (dx * dx + dy * dy + dz * dz > r2) continue;
        Point3 local{R[0] * dx + R[3] * dy + R[6] * dz, R[1] * dx + R[4] * dy + R[7] * dz,
                     R[2] * dx + R[5] * dy + R[8] * dz};
        for (auto& v : local) v = static_cast<double>(static_cast<float>(v + rng.normal(0.0, noise_sigma)));
        cloud.points.push_back(local);
    }
    if (cloud.points.empty()) cloud.points.push_back({0.0, 0.0, 0.0});
    return cloud;
}

inline constexpr double kLateralJitter = 0.05; // m
inline constexpr double kHeadingJitter = 0.02; // rad

inline Sequence generate(const OrchardSpec& spec) {
    spec.validate();
    const PlantMap map = plant_map(spec);
    const auto path = traversal_path(spec);
    const double total = spec.path_length();
    const std::size_t per_lap = spec.frames_per_lap();

    Sequence seq;
    seq.meta.name = "orchard-" + std::to_string(spec.seed);
    seq.meta.num_segments = spec.num_segments();
    Rng traj(derive_seed(spec.seed, {0x7472616aULL}));
    std::size_t frame = 0;
    for (int lap = 0; lap < spec.laps; ++lap) {
        const double phase = traj.uniform();
        for (std::size_t i = 0; i < per_lap; ++i, ++frame) {
            const double s = std::min((static_cast<double>(i) + phase) * spec.scan_spacing, total);
            const PathSample at = sample_path(path, s);
            const double lateral = traj.normal(0.0, kLateralJitter);
            const double yaw = at.yaw + traj.normal(0.0, kHeadingJitter);
            const double x = at.x - std::sin(at.yaw) * lateral;
            const double y = at.y + std::cos(at.yaw) * lateral;

            ScanRecord rec;
            rec.pose = Pose::planar(x, y, yaw);
            rec.cloud = render_scan(map, rec.pose, spec.sensor_range, spec.noise_sigma,
                                    derive_seed(spec.seed, {0x7363616eULL, frame}));
            rec.cloud.frame_index = static_cast<int>(frame);
            rec.segment = at.segment;
            rec.timestamp = static_cast<double>(frame) * 0.5;
            seq.meta.segment_of[static_cast<int>(frame)] = at.segment;
            seq.records.push_back(std::move(rec));
        }
    }
    seq.meta.frame_count = seq.records.size();
    return seq;
}

} // namespace pgap
