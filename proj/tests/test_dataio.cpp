#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "pgap/dataio.hpp"
#include "pgap/synthgen.hpp"
#include "test_support.hpp"

using namespace pgap;
using pgap::test::TempDir;

namespace {

PointCloud random_cloud(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    PointCloud c;
    for (std::size_t i = 0; i < n; ++i) c.points.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 3)});
    return c;
}

/// Float32-representable cloud so it survives the scan file format.
PointCloud float_cloud(std::size_t n, std::uint64_t seed) {
    PointCloud c = random_cloud(n, seed);
    for (auto& p : c.points) {
        for (auto& v : p) v = static_cast<float>(v);
    }
    return c;
}

Sequence three_frame_sequence() {
    Sequence seq;
    for (int i = 0; i < 3; ++i) {
        ScanRecord r;
        r.cloud = float_cloud(10 + i, static_cast<std::uint64_t>(i));
        r.cloud.frame_index = i;
        r.pose = Pose::planar(i * 1.5, 0.25 * i, 0.1 * i);
        r.segment = i + 1;
        seq.records.push_back(r);
        seq.meta.segment_of[i] = i + 1;
    }
    seq.meta.frame_count = 3;
    seq.meta.num_segments = 3;
    return seq;
}

void write_raw(const fs::path& p, const std::string& content) {
    std::ofstream(p, std::ios::binary) << content;
}

} // namespace

TEST(LoadSequence, ThreeValidFrames) {
    TempDir dir("dataio");
    save_sequence(dir.path(), three_frame_sequence());
    const Sequence seq = load_sequence(dir.path());
    EXPECT_EQ(seq.size(), 3u);
    EXPECT_EQ(seq.meta.frame_count, 3u);
    EXPECT_EQ(seq.meta.num_segments, 3);
    EXPECT_EQ(seq.segment(2), 3);
}

TEST(LoadSequence, PoseCountMismatchIsConsistencyError) {
    TempDir dir("dataio");
    save_sequence(dir.path(), three_frame_sequence());
    std::ifstream in(dir / "poses.txt");
    std::string l1, l2;
    std::getline(in, l1);
    std::getline(in, l2);
    in.close();
    write_raw(dir / "poses.txt", l1 + "\n" + l2 + "\n");
    EXPECT_THROW(load_sequence(dir.path()), ConsistencyError);
}

TEST(LoadSequence, MissingPieces) {
    TempDir dir("dataio");
    EXPECT_THROW(load_sequence(dir / "nope"), LoadError);
    save_sequence(dir.path(), three_frame_sequence());
    fs::remove(dir / "segments.csv");
    EXPECT_THROW(load_sequence(dir.path()), LoadError);
}

TEST(LoadSequence, SyntheticRoundTripIsBitExact) {
    OrchardSpec spec;
    spec.seed = 11;
    spec.rows = 2;
    spec.row_length = 8.0;
    const Sequence original = generate(spec);
    TempDir dir("dataio");
    // the sequence name is taken from the directory name
    const fs::path where = dir / original.meta.name;
    save_sequence(where, original);
    const Sequence loaded = load_sequence(where);
    EXPECT_EQ(loaded.meta, original.meta);
    ASSERT_EQ(loaded.records.size(), original.records.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) EXPECT_EQ(loaded.records[i], original.records[i]) << "frame " << i;

    // load -> save -> load is the identity
    const fs::path again = dir / "again" / original.meta.name;
    save_sequence(again, loaded);
    const Sequence reloaded = load_sequence(again);
    EXPECT_EQ(reloaded.meta, loaded.meta);
    EXPECT_EQ(reloaded.records, loaded.records);
}

TEST(ReadScan, RejectsTruncatedFileWithOffset) {
    TempDir dir("dataio");
    write_raw(dir / "bad.bin", std::string(36, '\0'));
    try {
        read_scan(dir / "bad.bin");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 32u);
    }
}

TEST(ReadScan, RejectsNonFiniteCoordinates) {
    TempDir dir("dataio");
    const float xyzi[8] = {1, 2, 3, 0, 4, NAN, 6, 0};
    write_raw(dir / "nan.bin", std::string(reinterpret_cast<const char*>(xyzi), sizeof xyzi));
    try {
        read_scan(dir / "nan.bin");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 20u);
    }
}

TEST(ReadScan, IntensityIsDiscarded) {
    TempDir dir("dataio");
    const float xyzi[4] = {1.5f, -2.0f, 3.25f, 99.0f};
    write_raw(dir / "one.bin", std::string(reinterpret_cast<const char*>(xyzi), sizeof xyzi));
    const PointCloud c = read_scan(dir / "one.bin");
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c.points[0], (Point3{1.5, -2.0, 3.25}));
}

TEST(ReadPoses, RejectsImproperRotationAndBadLines) {
    TempDir dir("dataio");
    write_raw(dir / "p1.txt", "1 0 0 0 0 1 0 0 0 0 1 0\n2 0 0 0 0 1 0 0 0 0 1 0\n");
    try {
        read_poses(dir / "p1.txt");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 24u);
    }
    write_raw(dir / "p2.txt", "1 0 0 0 0 1 0 0 0 0 1\n");
    EXPECT_THROW(read_poses(dir / "p2.txt"), ParseError);
    write_raw(dir / "p3.txt", "1 0 0 0 0 1 x 0 0 0 1 0\n");
    EXPECT_THROW(read_poses(dir / "p3.txt"), ParseError);
}

TEST(ReadSegments, HeaderAndOneBasedIds) {
    TempDir dir("dataio");
    write_raw(dir / "s1.csv", "frame,seg\n0,1\n");
    EXPECT_THROW(read_segments(dir / "s1.csv"), ParseError);
    write_raw(dir / "s2.csv", "frame,segment\n0,0\n");
    EXPECT_THROW(read_segments(dir / "s2.csv"), ParseError);
    write_raw(dir / "s3.csv", "frame,segment\n0,2\n1,1\n");
    EXPECT_EQ(read_segments(dir / "s3.csv"), (std::vector<std::pair<int, int>>{{0, 2}, {1, 1}}));
}

TEST(Downsample, LargeCloudToTenThousand) {
    const PointCloud big = random_cloud(20000, 1);
    const PointCloud d = downsample(big, 10000, 42);
    ASSERT_EQ(d.size(), 10000u);
    std::set<Point3> original(big.points.begin(), big.points.end());
    std::set<Point3> chosen(d.points.begin(), d.points.end());
    EXPECT_EQ(chosen.size(), 10000u) << "sampling is without replacement";
    for (const auto& p : d.points) EXPECT_TRUE(original.contains(p));
}

TEST(Downsample, ExactSizeKeepsEveryPoint) {
    const PointCloud c = random_cloud(5, 2);
    PointCloud d = downsample(c, 5, 3);
    auto a = c.points, b = d.points;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
}

TEST(Downsample, PadsSmallCloudWithOriginalPoints) {
    const PointCloud c = random_cloud(3, 4);
    const PointCloud d = downsample(c, 6, 5);
    ASSERT_EQ(d.size(), 6u);
    for (const auto& p : d.points) EXPECT_NE(std::find(c.points.begin(), c.points.end(), p), c.points.end());
}

TEST(Downsample, SeededAndReproducible) {
    const PointCloud c = random_cloud(500, 6);
    EXPECT_EQ(downsample(c, 100, 9), downsample(c, 100, 9));
    EXPECT_NE(downsample(c, 100, 9), downsample(c, 100, 10));
    EXPECT_THROW(downsample(PointCloud{}, 10, 1), EmptyInputError);
}

TEST(RotateZ, KnownValues) {
    const PointCloud c = random_cloud(20, 7);
    EXPECT_EQ(rotate_z(c, 0.0), c);
    PointCloud one;
    one.points.push_back({1, 0, 5});
    const auto r = rotate_z(one, std::numbers::pi).points[0];
    EXPECT_NEAR(r[0], -1.0, 1e-12);
    EXPECT_NEAR(r[1], 0.0, 1e-12);
    EXPECT_EQ(r[2], 5.0);
}

TEST(RotateZ, PreservesNormsAndInverts) {
    const PointCloud c = random_cloud(200, 8);
    Rng rng(9);
    for (int k = 0; k < 20; ++k) {
        const double theta = rng.uniform(-10.0, 10.0);
        const PointCloud r = rotate_z(c, theta);
        const PointCloud back = rotate_z(r, -theta);
        for (std::size_t i = 0; i < c.size(); ++i) {
            const auto& p = c.points[i];
            const auto& q = r.points[i];
            EXPECT_NEAR(std::hypot(p[0], p[1], p[2]), std::hypot(q[0], q[1], q[2]), 1e-12);
            for (int a = 0; a < 3; ++a) EXPECT_NEAR(back.points[i][a], p[a], 1e-9);
        }
    }
}
