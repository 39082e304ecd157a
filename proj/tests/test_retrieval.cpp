#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>

#include "pgap/retrieval.hpp"
#include "pgap/synthgen.hpp"
#include "test_support.hpp"

using namespace pgap;
using pgap::test::TempDir;

namespace {

Descriptor unit_descriptor(std::size_t dim, Rng& rng, int frame, int segment = 1) {
    Descriptor d;
    d.values.resize(dim);
    double n = 0.0;
    for (auto& v : d.values) {
        v = rng.normal();
        n += v * v;
    }
    for (auto& v : d.values) v /= std::sqrt(n);
    d.frame_index = frame;
    d.segment = segment;
    return d;
}

/// Two passes along a line: frame i and frame i + 50 share a place.
Sequence two_pass_track(std::size_t per_pass) {
    Sequence seq;
    for (std::size_t lap = 0; lap < 2; ++lap) {
        for (std::size_t i = 0; i < per_pass; ++i) {
            ScanRecord r;
            r.cloud.points.push_back({0, 0, 0});
            r.pose = Pose::planar(0.0, 2.0 * static_cast<double>(i), 0.0);
            r.segment = i < per_pass / 2 ? 1 : 2;
            seq.records.push_back(r);
        }
    }
    seq.meta.frame_count = seq.records.size();
    seq.meta.num_segments = 2;
    return seq;
}

} // namespace

TEST(Knn, SingleEntryDatabaseClampsK) {
    Rng rng(1);
    DescriptorDatabase db;
    db.append(unit_descriptor(8, rng, 0));
    const auto q = unit_descriptor(8, rng, 1);
    const auto r = knn(db, q.values, 5);
    ASSERT_EQ(r.neighbors.size(), 1u);
    EXPECT_EQ(r.neighbors[0].frame, 0);
    EXPECT_EQ(r.candidates, 1u);
}

TEST(Knn, ExactMatchRanksFirst) {
    Rng rng(2);
    DescriptorDatabase db;
    std::vector<Descriptor> ds;
    for (int i = 0; i < 30; ++i) {
        ds.push_back(unit_descriptor(16, rng, i));
        db.append(ds.back());
    }
    const auto r = knn(db, ds[17].values, 3);
    EXPECT_EQ(r.neighbors[0].frame, 17);
    EXPECT_EQ(r.neighbors[0].distance, 0.0);
}

TEST(Knn, AgreesWithFullSortOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        DescriptorDatabase db;
        std::vector<Descriptor> ds;
        for (int i = 0; i < 200; ++i) {
            ds.push_back(unit_descriptor(32, rng, i));
            db.append(ds.back());
        }
        const auto q = unit_descriptor(32, rng, 1000);
        std::vector<std::pair<double, int>> oracle;
        for (const auto& d : ds) {
            double s = 0.0;
            for (std::size_t k = 0; k < 32; ++k) s += (q.values[k] - d.values[k]) * (q.values[k] - d.values[k]);
            oracle.emplace_back(std::sqrt(s), d.frame_index);
        }
        std::sort(oracle.begin(), oracle.end());
        for (std::size_t k : {1u, 5u, 25u, 200u}) {
            const auto r = knn(db, q.values, k);
            ASSERT_EQ(r.neighbors.size(), k);
            for (std::size_t i = 0; i < k; ++i) {
                EXPECT_EQ(r.neighbors[i].frame, oracle[i].second);
                EXPECT_NEAR(r.neighbors[i].distance, oracle[i].first, 1e-12);
            }
        }
    }
}

TEST(Knn, EuclideanRankingEqualsCosineRankingForUnitVectors) {
    Rng rng(4);
    DescriptorDatabase db;
    std::vector<Descriptor> ds;
    for (int i = 0; i < 100; ++i) {
        ds.push_back(unit_descriptor(16, rng, i));
        db.append(ds.back());
    }
    const auto q = unit_descriptor(16, rng, 100);
    std::vector<std::pair<double, int>> by_cos;
    for (const auto& d : ds) {
        double dot = 0.0;
        for (std::size_t k = 0; k < 16; ++k) dot += q.values[k] * d.values[k];
        by_cos.emplace_back(-dot, d.frame_index);
    }
    std::sort(by_cos.begin(), by_cos.end());
    const auto r = knn(db, q.values, 100);
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(r.neighbors[i].frame, by_cos[i].second);
}

TEST(Knn, MaskAndContracts) {
    Rng rng(5);
    DescriptorDatabase db;
    for (int i = 0; i < 10; ++i) db.append(unit_descriptor(8, rng, i));
    const auto q = unit_descriptor(8, rng, 10);
    const auto none = knn(db, q.values, 3, [](std::size_t) { return false; });
    EXPECT_TRUE(none.skipped);
    const auto even = knn(db, q.values, 10, [](std::size_t i) { return i % 2 == 0; });
    EXPECT_EQ(even.candidates, 5u);
    for (const auto& n : even.neighbors) EXPECT_EQ(n.frame % 2, 0);
    EXPECT_THROW(knn(db, q.values, 0), ContractError);
    const std::vector<double> short_query(4, 0.5);
    EXPECT_THROW(knn(db, short_query, 1), DimensionError);
}

TEST(Database, RejectsMismatchedOrUnorderedEntries) {
    Rng rng(6);
    DescriptorDatabase db;
    db.append(unit_descriptor(8, rng, 3));
    EXPECT_THROW(db.append(unit_descriptor(16, rng, 4)), DimensionError);
    EXPECT_THROW(db.append(unit_descriptor(8, rng, 3)), ContractError);
    Descriptor unnormalised = unit_descriptor(8, rng, 5);
    unnormalised.values[0] += 0.1;
    EXPECT_THROW(db.append(unnormalised), DegenerateError);
    EXPECT_NO_THROW(db.append(unit_descriptor(8, rng, 5)));
    EXPECT_EQ(db.size(), 2u);
}

TEST(Recall, PerfectDescriptorsGiveFullRecall) {
    const Sequence seq = two_pass_track(50);
    Rng rng(7);
    std::vector<Descriptor> ds;
    for (std::size_t i = 0; i < 100; ++i) {
        // the second pass reuses the first-pass descriptor of the same place
        ds.push_back(i < 50 ? unit_descriptor(16, rng, static_cast<int>(i), seq.segment(i)) : ds[i - 50]);
        ds.back().frame_index = static_cast<int>(i);
    }
    const auto db = build_database(seq, ds);
    const auto gt = build_ground_truth(seq, MiningConfig{}, true);
    const auto r = evaluate(db, ds, gt);
    EXPECT_EQ(r.query_count, 50u);
    EXPECT_EQ(r.excluded_queries, 50u);
    for (double v : r.recall_at_k) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(r.recall_at_1pct, 1.0);
}

TEST(Recall, MatchesPerQueryRecomputation) {
    const Sequence seq = two_pass_track(50);
    const MiningConfig cfg;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        std::vector<Descriptor> ds;
        for (std::size_t i = 0; i < 100; ++i) ds.push_back(unit_descriptor(4, rng, static_cast<int>(i), seq.segment(i)));
        const auto db = build_database(seq, ds);
        for (bool aware : {true, false}) {
            const auto gt = build_ground_truth(seq, cfg, aware);
            const auto r = evaluate(db, ds, gt, {25, aware});

            // independent recomputation: rank every older candidate by brute force
            std::vector<std::size_t> hits(25, 0);
            std::size_t hits_1pct = 0, queries = 0;
            for (std::size_t q = 0; q < 100; ++q) {
                const auto& truth = gt.true_sets[q];
                if (truth.empty()) continue;
                std::vector<std::pair<double, std::size_t>> ranked;
                for (std::size_t j = 0; j + cfg.revisit_exclusion_window <= q; ++j) {
                    double s = 0.0;
                    for (std::size_t k = 0; k < 4; ++k) s += std::pow(ds[q].values[k] - ds[j].values[k], 2);
                    ranked.emplace_back(std::sqrt(s), j);
                }
                std::sort(ranked.begin(), ranked.end());
                ++queries;
                std::size_t first = ranked.size();
                for (std::size_t i = 0; i < ranked.size(); ++i) {
                    if (std::find(truth.begin(), truth.end(), ranked[i].second) != truth.end()) {
                        first = i;
                        break;
                    }
                }
                for (std::size_t k = 1; k <= 25; ++k) hits[k - 1] += first < k;
                const auto k1 = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.01 * ranked.size())));
                hits_1pct += first < k1;
            }
            ASSERT_EQ(r.query_count, queries);
            for (std::size_t k = 0; k < 25; ++k) {
                EXPECT_EQ(r.recall_at_k[k], static_cast<double>(hits[k]) / static_cast<double>(queries));
                if (k > 0) EXPECT_GE(r.recall_at_k[k], r.recall_at_k[k - 1]);
            }
            EXPECT_EQ(r.recall_at_1pct, static_cast<double>(hits_1pct) / static_cast<double>(queries));
        }
    }
}

TEST(Recall, PlainHitsIncludeSegmentAwareHits) {
    // a retrieval that is correct under the segment-aware rule is also correct without it
    const Sequence seq = two_pass_track(50);
    const MiningConfig cfg;
    Rng rng(8);
    std::vector<Descriptor> ds;
    for (std::size_t i = 0; i < 100; ++i) ds.push_back(unit_descriptor(4, rng, static_cast<int>(i), seq.segment(i)));
    const auto db = build_database(seq, ds);
    const auto aware = build_ground_truth(seq, cfg, true);
    const auto plain = build_ground_truth(seq, cfg, false);
    for (std::size_t q = 0; q < 100; ++q) {
        if (aware.true_sets[q].empty()) continue;
        const auto r = knn(db, ds[q].values, 1, [&](std::size_t i) { return i + cfg.revisit_exclusion_window <= q; });
        const auto top = static_cast<std::size_t>(r.neighbors[0].frame);
        const bool aware_hit = std::ranges::binary_search(aware.true_sets[q], top);
        const bool plain_hit = std::ranges::binary_search(plain.true_sets[q], top);
        EXPECT_TRUE(!aware_hit || plain_hit);
    }
}

TEST(Recall, ProtocolMismatchIsAConfigError) {
    const Sequence seq = two_pass_track(50);
    Rng rng(9);
    std::vector<Descriptor> ds;
    for (std::size_t i = 0; i < 100; ++i) ds.push_back(unit_descriptor(4, rng, static_cast<int>(i)));
    const auto db = build_database(seq, ds);
    const auto gt = build_ground_truth(seq, MiningConfig{}, true);
    EXPECT_THROW(evaluate(db, ds, gt, {25, false}), ConfigError);
    EXPECT_THROW(evaluate(db, ds, gt, {0, true}), ConfigError);
}

TEST(DescribeSequence, DatabaseIsOrderedUnitNormAndThreadIndependent) {
    OrchardSpec spec;
    spec.rows = 1;
    const Sequence seq = generate(spec);
    const auto model = PointNetPGAP::init({}, 1);
    const DescribeOptions opt{64, 3};
    ::setenv("PGAP_THREADS", "4", 1);
    const auto ds = describe_sequence(model, seq, opt);
    const auto db = build_database(seq, ds);
    ASSERT_EQ(db.size(), seq.size());
    EXPECT_EQ(db.dim(), 256u);
    for (std::size_t i = 0; i < db.size(); ++i) {
        EXPECT_EQ(db[i].descriptor.frame_index, static_cast<int>(i));
        double n = 0.0;
        for (double v : db[i].descriptor.values) n += v * v;
        EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    }
    ::setenv("PGAP_THREADS", "0", 1);
    const auto single = describe_sequence(model, seq, opt);
    ::unsetenv("PGAP_THREADS");
    for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds[i].values, single[i].values);
}

TEST(DescriptorDump, RoundTrip) {
    Rng rng(10);
    std::vector<Descriptor> ds;
    for (int i = 0; i < 12; ++i) ds.push_back(unit_descriptor(256, rng, i, 1 + i % 3));
    TempDir dir("dump");
    write_descriptor_dump(dir / "d.bin", "orchard", ds);
    const auto back = read_descriptor_dump(dir / "d.bin");
    EXPECT_EQ(back.sequence, "orchard");
    ASSERT_EQ(back.descriptors.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.descriptors[i].frame_index, ds[i].frame_index);
        EXPECT_EQ(back.descriptors[i].segment, ds[i].segment);
        for (std::size_t k = 0; k < 256; ++k) {
            EXPECT_EQ(back.descriptors[i].values[k], static_cast<double>(static_cast<float>(ds[i].values[k])));
        }
    }
    std::ofstream(dir / "bad.bin") << "garbage";
    EXPECT_THROW(read_descriptor_dump(dir / "bad.bin"), ParseError);
}

TEST(Benchmark, ReportShape) {
    const auto model = PointNetPGAP::init({}, 11);
    Rng rng(12);
    std::vector<PointCloud> batch(20);
    for (auto& c : batch) {
        for (int i = 0; i < 64; ++i) c.points.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 3)});
    }
    const auto one = benchmark_runtime(model, batch, 1);
    EXPECT_EQ(one.stddev_ms, 0.0);
    EXPECT_EQ(one.samples_ms.size(), 1u);
    EXPECT_EQ(one.batch_size, 20u);
    EXPECT_EQ(one.points_per_scan, 64u);
    const auto many = benchmark_runtime(model, batch, 5);
    EXPECT_EQ(many.parameter_count, one.parameter_count);
    EXPECT_EQ(many.parameter_count, model.parameter_count());
    EXPECT_GT(many.mean_ms, 0.0);
    const auto j = to_json(many);
    EXPECT_EQ(j.at("parameter_count").get<std::size_t>(), model.parameter_count());
    EXPECT_EQ(j.at("samples_ms").size(), 5u);
    EXPECT_THROW(benchmark_runtime(model, {}, 1), EmptyInputError);
    EXPECT_THROW(benchmark_runtime(model, batch, 0), ContractError);
}

TEST(Describe, IdenticalScansGiveIdenticalDescriptors) {
    const auto model = PointNetPGAP::init({}, 13);
    Rng rng(14);
    PointCloud c;
    for (int i = 0; i < 100; ++i) c.points.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0, 3)});
    const auto first = model.describe(c);
    for (int k = 0; k < 20; ++k) EXPECT_EQ(model.describe(c).values, first.values);
}

TEST(Report, JsonAndCsvFiles) {
    const Sequence seq = two_pass_track(50);
    Rng rng(15);
    std::vector<Descriptor> ds;
    for (std::size_t i = 0; i < 100; ++i) ds.push_back(unit_descriptor(4, rng, static_cast<int>(i), seq.segment(i)));
    const auto r = evaluate(build_database(seq, ds), ds, build_ground_truth(seq, MiningConfig{}, true));
    TempDir dir("report");
    write_report(dir / "eval", r);
    const auto j = nlohmann::json::parse(detail::read_file(dir / "eval.json"));
    EXPECT_EQ(j.at("recall_at_k").size(), 25u);
    EXPECT_EQ(j.at("query_count").get<std::size_t>(), r.query_count);
    EXPECT_TRUE(fs::exists(dir / "eval.csv"));
    EXPECT_TRUE(fs::exists(dir / "eval_segments.csv"));
}
