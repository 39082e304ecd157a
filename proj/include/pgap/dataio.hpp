#pragma once

// Sequence directories in a KITTI-compatible layout:
//
//   scans/%06d.bin   float32 little-endian, stride 4 (x, y, z, intensity)
//   poses.txt        one row-major 3x4 [R|t] per line, 12 numbers
//   segments.csv     header "frame,segment", 1-based segment ids
//   times.txt        optional, one timestamp in seconds per line
//
// Intensity is read and discarded; clouds are xyz only.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pgap/error.hpp"
#include "pgap/rng.hpp"
#include "pgap/tensor.hpp"

namespace pgap {

namespace fs = std::filesystem;

using Point3 = std::array<double, 3>;

struct PointCloud {
    std::vector<Point3> points;
    int frame_index = 0;

    std::size_t size() const noexcept { return points.size(); }

    /// n x 3 tensor for the model.
    Tensor to_tensor() const {
        if (points.empty()) throw EmptyInputError("point cloud is empty");
        std::vector<double> data;
        data.reserve(points.size() * 3);
        for (const auto& p : points) data.insert(data.end(), p.begin(), p.end());
        return Tensor({points.size(), 3}, std::move(data));
    }

    bool operator==(const PointCloud&) const = default;
};

struct Pose {
    Point3 position{0.0, 0.0, 0.0};
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1}; // row-major

    static Pose planar(double x, double y, double yaw) {
        Pose p;
        p.position = {x, y, 0.0};
        const double c = std::cos(yaw);
        const double s = std::sin(yaw);
        p.rotation = {c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0};
        return p;
    }

    double determinant() const {
        const auto& r = rotation;
        return r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
               r[2] * (r[3] * r[7] - r[4] * r[6]);
    }

    double distance_to(const Pose& other) const {
        const double dx = position[0] - other.position[0];
        const double dy = position[1] - other.position[1];
        const double dz = position[2] - other.position[2];
        return std::sqrt(dx * dx + dy * dy + dz * dz);
    }

    bool operator==(const Pose&) const = default;
};

struct ScanRecord {
    PointCloud cloud;
    Pose pose;
    int segment = 1;
    std::optional<double> timestamp;

    bool operator==(const ScanRecord&) const = default;
};

struct SequenceMeta {
    std::string name;
    std::size_t frame_count = 0;
    std::map<int, int> segment_of;
    int num_segments = 0;

    bool operator==(const SequenceMeta&) const = default;
};

struct Sequence {
    SequenceMeta meta;
    std::vector<ScanRecord> records;

    std::size_t size() const noexcept { return records.size(); }
    double distance(std::size_t a, std::size_t b) const { return records[a].pose.distance_to(records[b].pose); }
    int segment(std::size_t i) const { return records[i].segment; }
};

inline constexpr double kRotationDetTolerance = 1e-6;

inline std::string scan_filename(std::size_t frame) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu.bin", frame);
    return buf;
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "scan IO assumes a little-endian host");

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Line {
    std::string_view text;
    std::uint64_t offset;
};

inline std::vector<Line> split_lines(std::string_view content) {
    std::vector<Line> lines;
    std::size_t start = 0;
    while (start < content.size()) {
        std::size_t end = content.find('\n', start);
        if (end == std::string_view::npos) end = content.size();
        std::string_view line = content.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") != std::string_view::npos) lines.push_back({line, start});
        start = end + 1;
    }
    return lines;
}

inline std::vector<double> parse_numbers(const Line& line, const fs::path& file) {
    std::vector<double> out;
    const char* p = line.text.data();
    const char* end = p + line.text.size();
    while (p < end) {
        while (p < end && (*p == ' ' || *p == '\t' || *p == ',')) ++p;
        if (p >= end) break;
        double v = 0.0;
        auto [next, ec] = std::from_chars(p, end, v);
        if (ec != std::errc() || !std::isfinite(v)) {
            throw ParseError(file.filename().string() + ": malformed number",
                             line.offset + static_cast<std::uint64_t>(p - line.text.data()));
        }
        out.push_back(v);
        p = next;
    }
    return out;
}

inline void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path.string());
    out << content;
}

inline std::string format_double(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v); // shortest round-trip form
    return std::string(buf, ptr);
}

} // namespace detail

inline PointCloud read_scan(const fs::path& path, int frame_index = 0) {
    if (!fs::exists(path)) throw LoadError("missing scan file " + path.string());
    const std::string bytes = detail::read_file(path);
    constexpr std::size_t stride = 4 * sizeof(float);
    if (bytes.size() % stride != 0) {
        throw ParseError(path.filename().string() + ": size is not a multiple of 16 bytes",
                         bytes.size() - bytes.size() % stride);
    }
    PointCloud cloud;
    cloud.frame_index = frame_index;
    cloud.points.reserve(bytes.size() / stride);
    for (std::size_t off = 0; off < bytes.size(); off += stride) {
        float xyzi[4];
        std::memcpy(xyzi, bytes.data() + off, stride);
        for (int k = 0; k < 3; ++k) {
            if (!std::isfinite(xyzi[k])) {
                throw ParseError(path.filename().string() + ": non-finite coordinate", off + 4 * k);
            }
        }
        cloud.points.push_back({xyzi[0], xyzi[1], xyzi[2]});
    }
    if (cloud.points.empty()) throw ParseError(path.filename().string() + ": scan has no points", 0);
    return cloud;
}

/// Coordinates are stored as float32; intensity is written as zero.
inline void write_scan(const fs::path& path, const PointCloud& cloud) {
    std::string bytes(cloud.points.size() * 16, '\0');
    std::size_t off = 0;
    for (const auto& p : cloud.points) {
        const float xyzi[4] = {static_cast<float>(p[0]), static_cast<float>(p[1]), static_cast<float>(p[2]), 0.0f};
        std::memcpy(bytes.data() + off, xyzi, sizeof xyzi);
        off += sizeof xyzi;
    }
    detail::write_text(path, bytes);
}

inline std::vector<Pose> read_poses(const fs::path& path) {
    if (!fs::exists(path)) throw LoadError("missing poses file " + path.string());
    const std::string content = detail::read_file(path);
    std::vector<Pose> poses;
    for (const auto& line : detail::split_lines(content)) {
        const auto v = detail::parse_numbers(line, path);
        if (v.size() != 12) {
            throw ParseError("poses.txt: expected 12 numbers, found " + std::to_string(v.size()), line.offset);
        }
        Pose p;
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) p.rotation[r * 3 + c] = v[r * 4 + c];
            p.position[r] = v[r * 4 + 3];
        }
        if (std::abs(p.determinant() - 1.0) >= kRotationDetTolerance) {
            throw ParseError("poses.txt: rotation is not proper (det " + std::to_string(p.determinant()) + ")",
                             line.offset);
        }
        poses.push_back(p);
    }
    return poses;
}

inline void write_poses(const fs::path& path, const std::vector<Pose>& poses) {
    std::string out;
    for (const auto& p : poses) {
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) out += detail::format_double(p.rotation[r * 3 + c]) + ' ';
            out += detail::format_double(p.position[r]);
            out += r < 2 ? ' ' : '\n';
        }
    }
    detail::write_text(path, out);
}

/// frame -> segment id, in file order.
inline std::vector<std::pair<int, int>> read_segments(const fs::path& path) {
    if (!fs::exists(path)) throw LoadError("missing segment file " + path.string());
    const std::string content = detail::read_file(path);
    const auto lines = detail::split_lines(content);
    if (lines.empty() || lines.front().text != "frame,segment") {
        throw ParseError("segments.csv: expected header 'frame,segment'", 0);
    }
    std::vector<std::pair<int, int>> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto& line = lines[i];
        const auto comma = line.text.find(',');
        auto parse_int = [&](std::string_view s, std::uint64_t offset) {
            int v = 0;
            auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            if (ec != std::errc() || ptr != s.data() + s.size()) {
                throw ParseError("segments.csv: malformed integer", offset);
            }
            return v;
        };
        if (comma == std::string_view::npos) throw ParseError("segments.csv: missing comma", line.offset);
        const int frame = parse_int(line.text.substr(0, comma), line.offset);
        const int seg = parse_int(line.text.substr(comma + 1), line.offset + comma + 1);
        if (seg < 1) throw ParseError("segments.csv: segment ids are 1-based", line.offset + comma + 1);
        rows.emplace_back(frame, seg);
    }
    return rows;
}

inline void write_segments(const fs::path& path, const std::vector<int>& segments) {
    std::string out = "frame,segment\n";
    for (std::size_t i = 0; i < segments.size(); ++i) {
        out += std::to_string(i) + ',' + std::to_string(segments[i]) + '\n';
    }
    detail::write_text(path, out);
}

inline Sequence load_sequence(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw LoadError("sequence directory not found: " + dir.string());
    const fs::path scans_dir = dir / "scans";
    if (!fs::is_directory(scans_dir)) throw LoadError("missing scans directory " + scans_dir.string());

    const auto poses = read_poses(dir / "poses.txt");
    const auto segment_rows = read_segments(dir / "segments.csv");

    std::size_t scan_count = 0;
    for (const auto& entry : fs::directory_iterator(scans_dir)) {
        if (entry.path().extension() == ".bin") ++scan_count;
    }
    if (scan_count != poses.size() || scan_count != segment_rows.size()) {
        throw ConsistencyError("frame count mismatch in " + dir.string() + ": " + std::to_string(scan_count) +
                               " scans, " + std::to_string(poses.size()) + " poses, " +
                               std::to_string(segment_rows.size()) + " segment labels");
    }

    std::optional<std::vector<double>> times;
    if (fs::exists(dir / "times.txt")) {
        times.emplace();
        const std::string content = detail::read_file(dir / "times.txt");
        for (const auto& line : detail::split_lines(content)) {
            const auto v = detail::parse_numbers(line, dir / "times.txt");
            if (v.size() != 1) throw ParseError("times.txt: expected one number per line", line.offset);
            times->push_back(v[0]);
        }
        if (times->size() != scan_count) {
            throw ConsistencyError("times.txt has " + std::to_string(times->size()) + " entries for " +
                                   std::to_string(scan_count) + " scans");
        }
    }

    Sequence seq;
    seq.meta.name = fs::absolute(dir).lexically_normal().filename().string();
    if (seq.meta.name.empty()) seq.meta.name = fs::absolute(dir).lexically_normal().parent_path().filename().string();
    seq.meta.frame_count = scan_count;

    std::vector<int> segment_by_frame(scan_count, 0);
    for (const auto& [frame, seg] : segment_rows) {
        if (frame < 0 || static_cast<std::size_t>(frame) >= scan_count || segment_by_frame[frame] != 0) {
            throw ConsistencyError("segments.csv: frame " + std::to_string(frame) +
                                   " is out of range or listed twice");
        }
        segment_by_frame[frame] = seg;
        seq.meta.segment_of[frame] = seg;
        seq.meta.num_segments = std::max(seq.meta.num_segments, seg);
    }

    seq.records.reserve(scan_count);
    for (std::size_t i = 0; i < scan_count; ++i) {
        ScanRecord rec;
        rec.cloud = read_scan(scans_dir / scan_filename(i), static_cast<int>(i));
        rec.pose = poses[i];
        rec.segment = segment_by_frame[i];
        if (times) rec.timestamp = (*times)[i];
        seq.records.push_back(std::move(rec));
    }
    return seq;
}

inline void save_sequence(const fs::path& dir, const Sequence& seq) {
    fs::create_directories(dir / "scans");
    std::vector<Pose> poses;
    std::vector<int> segments;
    bool has_times = !seq.records.empty();
    for (std::size_t i = 0; i < seq.records.size(); ++i) {
        const auto& rec = seq.records[i];
        write_scan(dir / "scans" / scan_filename(i), rec.cloud);
        poses.push_back(rec.pose);
        segments.push_back(rec.segment);
        has_times = has_times && rec.timestamp.has_value();
    }
    write_poses(dir / "poses.txt", poses);
    write_segments(dir / "segments.csv", segments);
    if (has_times) {
        std::string out;
        for (const auto& rec : seq.records) out += detail::format_double(*rec.timestamp) + '\n';
        detail::write_text(dir / "times.txt", out);
    }
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Exactly target_n points: sampling without replacement when the cloud is
/// large enough, otherwise every point plus uniform draws with replacement.
inline PointCloud downsample(const PointCloud& cloud, std::size_t target_n, std::uint64_t seed) {
    if (cloud.points.empty()) throw EmptyInputError("cannot downsample an empty cloud");
    if (target_n == 0) throw ContractError("downsample target must be at least 1");
    Rng rng(seed);
    PointCloud out;
    out.frame_index = cloud.frame_index;
    out.points.reserve(target_n);
    const std::size_t n = cloud.points.size();
    if (n >= target_n) {
        std::vector<std::uint32_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i);
        for (std::size_t i = 0; i < target_n; ++i) {
            std::swap(idx[i], idx[i + rng.index(n - i)]);
            out.points.push_back(cloud.points[idx[i]]);
        }
    } else {
        out.points = cloud.points;
        while (out.points.size() < target_n) out.points.push_back(cloud.points[rng.index(n)]);
    }
    return out;
}

inline PointCloud rotate_z(const PointCloud& cloud, double angle) {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    PointCloud out;
    out.frame_index = cloud.frame_index;
    out.points.reserve(cloud.points.size());
    for (const auto& p : cloud.points) out.points.push_back({c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]});
    return out;
}

} // namespace pgap
