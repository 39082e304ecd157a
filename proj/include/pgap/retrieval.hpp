#pragma once

// Descriptor database, exact KNN search and recall metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgap/dataio.hpp"
#include "pgap/error.hpp"
#include "pgap/losses.hpp"
#include "pgap/mining.hpp"
#include "pgap/model.hpp"
#include "pgap/parallel.hpp"

namespace pgap {

inline constexpr double kUnitNormTolerance = 1e-6;

struct DatabaseEntry {
    Descriptor descriptor;
    Point3 position{0.0, 0.0, 0.0};
};

class DescriptorDatabase {
public:
    /// Entries must arrive in frame order and share one dimension.
    void append(Descriptor d, Point3 position = {0.0, 0.0, 0.0}) {
        if (!entries_.empty()) {
            if (d.dim() != dim()) {
                throw DimensionError("descriptor of size " + std::to_string(d.dim()) + " appended to a database of " +
                                     std::to_string(dim()));
            }
            if (d.frame_index <= entries_.back().descriptor.frame_index) {
                throw ContractError("database entries must be appended in increasing frame order");
            }
        }
        double sq = 0.0;
        for (double v : d.values) sq += v * v;
        if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance) {
            throw DegenerateError("database descriptors must have unit norm");
        }
        entries_.push_back({std::move(d), position});
    }

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    std::size_t dim() const noexcept { return entries_.empty() ? 0 : entries_.front().descriptor.dim(); }
    const DatabaseEntry& operator[](std::size_t i) const { return entries_[i]; }
    const std::vector<DatabaseEntry>& entries() const noexcept { return entries_; }

private:
    std::vector<DatabaseEntry> entries_;
};

struct Neighbor {
    int frame = 0;
    double distance = 0.0;
};

struct KnnResult {
    std::vector<Neighbor> neighbors;
    std::size_t candidates = 0;
    bool skipped = false; // no candidate passed the mask
};

/// Exhaustive k-nearest-neighbour search over the entries accepted by
/// `mask(entry_index)`. Ascending Euclidean distance, ties to the lower frame.
template <class Mask>
KnnResult knn(const DescriptorDatabase& db, std::span<const double> query, std::size_t k, Mask&& mask) {
    if (k < 1) throw ContractError("knn needs k >= 1");
    if (!db.empty() && query.size() != db.dim()) {
        throw DimensionError("query of size " + std::to_string(query.size()) + " against database of " +
                             std::to_string(db.dim()));
    }
    KnnResult r;
    std::vector<Neighbor> all;
    for (std::size_t i = 0; i < db.size(); ++i) {
        if (!mask(i)) continue;
        all.push_back({db[i].descriptor.frame_index, euclidean_distance(query, db[i].descriptor.values)});
    }
    r.candidates = all.size();
    if (all.empty()) {
        r.skipped = true;
        return r;
    }
    const auto less = [](const Neighbor& a, const Neighbor& b) {
        return a.distance < b.distance || (a.distance == b.distance && a.frame < b.frame);
    };
    const std::size_t take = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), less);
    all.resize(take);
    r.neighbors = std::move(all);
    return r;
}

inline KnnResult knn(const DescriptorDatabase& db, std::span<const double> query, std::size_t k) {
    return knn(db, query, k, [](std::size_t) { return true; });
}

struct SegmentRecall {
    std::size_t queries = 0;
    std::size_t hits = 0;
    double recall() const { return queries ? static_cast<double>(hits) / static_cast<double>(queries) : 0.0; }
};

struct RecallReport {
    std::vector<double> recall_at_k; // index k-1
    double recall_at_1pct = 0.0;
    std::map<int, SegmentRecall> per_segment; // recall@1 by query segment
    std::size_t query_count = 0;              // queries with a non-empty true set
    std::size_t excluded_queries = 0;         // queries without any true revisit
    bool segment_aware = true;
    double radius = 0.0;
    std::size_t window = 0;

    double recall_at(std::size_t k) const { return recall_at_k.at(k - 1); }

    std::string protocol() const {
        return segment_aware ? "within radius and same segment" : "within radius";
    }
};

struct EvalOptions {
    std::size_t max_k = 25;
    bool segment_aware = true;
};

/// Recall over every query whose ground-truth set is non-empty. The
/// candidate set of a query is the database entries at least `window`
/// frames older (incremental database).
inline RecallReport evaluate(const DescriptorDatabase& db, const std::vector<Descriptor>& queries,
                             const GroundTruthTable& gt, const EvalOptions& options = {}) {
    if (gt.segment_aware != options.segment_aware) {
        throw ConfigError(std::string("ground truth was built ") +
                          (gt.segment_aware ? "segment-aware" : "without segments") +
                          " but the evaluation requested the other protocol");
    }
    if (options.max_k < 1) throw ConfigError("max_k must be >= 1");
    RecallReport report;
    report.segment_aware = gt.segment_aware;
    report.radius = gt.radius;
    report.window = gt.window;
    std::vector<std::size_t> hits_at_k(options.max_k, 0);
    std::size_t hits_1pct = 0;

    for (const auto& q : queries) {
        const auto qf = static_cast<std::size_t>(q.frame_index);
        if (qf >= gt.true_sets.size()) throw ContractError("query frame outside the ground-truth table");
        const auto& truth = gt.true_sets[qf];
        if (truth.empty()) {
            ++report.excluded_queries;
            continue;
        }
        const auto mask = [&](std::size_t i) {
            return is_older_revisit(qf, static_cast<std::size_t>(db[i].descriptor.frame_index), gt.window);
        };
        std::size_t candidates = 0;
        for (std::size_t i = 0; i < db.size(); ++i) candidates += mask(i);
        const std::size_t k_1pct =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(candidates))));
        const auto result = knn(db, q.values, std::max(options.max_k, k_1pct), mask);
        if (result.skipped) {
            ++report.excluded_queries;
            continue;
        }
        ++report.query_count;
        auto is_true = [&](int frame) {
            return std::binary_search(truth.begin(), truth.end(), static_cast<std::size_t>(frame));
        };
        std::size_t first_hit = result.neighbors.size();
        for (std::size_t r = 0; r < result.neighbors.size(); ++r) {
            if (is_true(result.neighbors[r].frame)) {
                first_hit = r;
                break;
            }
        }
        for (std::size_t k = 1; k <= options.max_k; ++k) hits_at_k[k - 1] += first_hit < k;
        hits_1pct += first_hit < k_1pct;
        auto& seg = report.per_segment[q.segment];
        ++seg.queries;
        seg.hits += first_hit < 1;
    }
    const double denom = static_cast<double>(report.query_count);
    report.recall_at_k.resize(options.max_k, 0.0);
    if (report.query_count > 0) {
        for (std::size_t k = 0; k < options.max_k; ++k) report.recall_at_k[k] = static_cast<double>(hits_at_k[k]) / denom;
        report.recall_at_1pct = static_cast<double>(hits_1pct) / denom;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Descriptor extraction over a sequence

/// Options controlling how scans are prepared before description.
struct DescribeOptions {
    std::size_t num_points = 10000;
    std::uint64_t seed = 0;
};

inline PointCloud prepare_scan(const PointCloud& cloud, std::size_t num_points, std::uint64_t seed,
                               std::uint64_t frame) {
    return downsample(cloud, num_points, derive_seed(seed, {0x646f776eULL, frame}));
}

/// Descriptors for every frame; thread count does not change the result.
inline std::vector<Descriptor> describe_sequence(const PointNetPGAP& model, const Sequence& seq,
                                                 const DescribeOptions& options) {
    std::vector<Descriptor> out(seq.size());
    parallel_for(seq.size(), [&](std::size_t i) {
        const PointCloud scan = prepare_scan(seq.records[i].cloud, options.num_points, options.seed, i);
        out[i] = model.describe(scan);
        out[i].frame_index = static_cast<int>(i);
        out[i].segment = seq.records[i].segment;
    });
    return out;
}

inline DescriptorDatabase build_database(const Sequence& seq, const std::vector<Descriptor>& descriptors) {
    DescriptorDatabase db;
    for (std::size_t i = 0; i < descriptors.size(); ++i) db.append(descriptors[i], seq.records[i].pose.position);
    return db;
}

inline RecallReport evaluate_sequence(const PointNetPGAP& model, const Sequence& seq, const MiningConfig& mining,
                                      bool segment_aware, const DescribeOptions& options) {
    const auto descriptors = describe_sequence(model, seq, options);
    const auto db = build_database(seq, descriptors);
    const auto gt = build_ground_truth(seq, mining, segment_aware);
    return evaluate(db, descriptors, gt, {25, segment_aware});
}

// ---------------------------------------------------------------------------
// Runtime

struct RuntimeReport {
    double mean_ms = 0.0;
    double stddev_ms = 0.0;
    std::size_t repetitions = 0;
    std::size_t batch_size = 0;
    std::size_t points_per_scan = 0;
    std::size_t parameter_count = 0;
    std::vector<double> samples_ms;
};

/// Wall-clock time to describe the whole batch, after one warm-up pass.
/// Retrieval is not timed.
inline RuntimeReport benchmark_runtime(const PointNetPGAP& model, const std::vector<PointCloud>& batch,
                                       std::size_t repetitions) {
    if (batch.empty()) throw EmptyInputError("benchmark batch is empty");
    if (repetitions < 1) throw ContractError("benchmark needs at least one repetition");
    RuntimeReport r;
    r.repetitions = repetitions;
    r.batch_size = batch.size();
    r.points_per_scan = batch.front().size();
    r.parameter_count = model.parameter_count();
    for (const auto& scan : batch) (void)model.describe(scan);
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        parallel_for(batch.size(), [&](std::size_t i) { (void)model.describe(batch[i]); });
        const auto t1 = std::chrono::steady_clock::now();
        r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    double s = 0.0;
    for (double v : r.samples_ms) s += v;
    r.mean_ms = s / static_cast<double>(repetitions);
    if (repetitions > 1) {
        double ss = 0.0;
        for (double v : r.samples_ms) ss += (v - r.mean_ms) * (v - r.mean_ms);
        r.stddev_ms = std::sqrt(ss / static_cast<double>(repetitions - 1));
    }
    return r;
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::json to_json(const RecallReport& r) {
    nlohmann::json j;
    j["recall_at_k"] = r.recall_at_k;
    j["recall_at_1pct"] = r.recall_at_1pct;
    j["query_count"] = r.query_count;
    j["excluded_queries"] = r.excluded_queries;
    j["true_positive"] = r.protocol();
    j["segment_aware"] = r.segment_aware;
    j["radius_m"] = r.radius;
    j["exclusion_window"] = r.window;
    nlohmann::json seg = nlohmann::json::array();
    for (const auto& [id, s] : r.per_segment) {
        seg.push_back({{"segment", id}, {"queries", s.queries}, {"hits", s.hits}, {"recall_at_1", s.recall()}});
    }
    j["per_segment_recall_at_1"] = seg;
    return j;
}

inline nlohmann::json to_json(const RuntimeReport& r) {
    return {{"mean_ms", r.mean_ms},
            {"stddev_ms", r.stddev_ms},
            {"repetitions", r.repetitions},
            {"batch_size", r.batch_size},
            {"points_per_scan", r.points_per_scan},
            {"parameter_count", r.parameter_count},
            {"parameters_millions", static_cast<double>(r.parameter_count) / 1e6},
            {"samples_ms", r.samples_ms}};
}

/// Writes <prefix>.json, <prefix>.csv (k,recall) and <prefix>_segments.csv.
inline void write_report(const fs::path& prefix, const RecallReport& r) {
    const auto with = [&](const std::string& suffix) { return fs::path(prefix.string() + suffix); };
    {
        std::ofstream out(with(".json"));
        if (!out) throw LoadError("cannot write " + with(".json").string());
        out << to_json(r).dump(2) << '\n';
    }
    {
        std::ofstream out(with(".csv"));
        out << "k,recall\n";
        for (std::size_t k = 0; k < r.recall_at_k.size(); ++k) {
            out << k + 1 << ',' << detail::format_double(r.recall_at_k[k]) << '\n';
        }
        out << "1%," << detail::format_double(r.recall_at_1pct) << '\n';
    }
    {
        std::ofstream out(with("_segments.csv"));
        out << "segment,queries,recall_at_1\n";
        for (const auto& [id, s] : r.per_segment) {
            out << id << ',' << s.queries << ',' << detail::format_double(s.recall()) << '\n';
        }
    }
}

inline constexpr char kDescriptorMagic[8] = {'P', 'G', 'A', 'P', 'D', 'E', 'S', 'C'};

/// "PGAPDESC", uint64 LE header length, JSON header, then count x dim float32 rows.
inline void write_descriptor_dump(const fs::path& path, const std::string& sequence_name,
                                  const std::vector<Descriptor>& descriptors) {
    const std::size_t dim = descriptors.empty() ? 0 : descriptors.front().dim();
    nlohmann::json header{{"dim", dim}, {"count", descriptors.size()}, {"sequence", sequence_name}};
    std::vector<int> frames, segments;
    for (const auto& d : descriptors) {
        frames.push_back(d.frame_index);
        segments.push_back(d.segment);
    }
    header["frames"] = frames;
    header["segments"] = segments;
    const std::string h = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write " + path.string());
    out.write(kDescriptorMagic, 8);
    const std::uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& d : descriptors) {
        if (d.dim() != dim) throw DimensionError("descriptor dump rows differ in size");
        for (double v : d.values) {
            const float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), sizeof f);
        }
    }
}

struct DescriptorDump {
    std::string sequence;
    std::vector<Descriptor> descriptors; // values widened from float32
};

inline DescriptorDump read_descriptor_dump(const fs::path& path) {
    const std::string bytes = detail::read_file(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kDescriptorMagic, 8) != 0) {
        throw ParseError(path.filename().string() + ": not a descriptor dump", 0);
    }
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 8, sizeof len);
    if (16 + len > bytes.size()) throw ParseError("descriptor dump header truncated", 8);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("descriptor dump header: ") + e.what(), 16);
    }
    DescriptorDump dump;
    dump.sequence = header.at("sequence").get<std::string>();
    const auto dim = header.at("dim").get<std::size_t>();
    const auto count = header.at("count").get<std::size_t>();
    const auto frames = header.value("frames", std::vector<int>{});
    const auto segments = header.value("segments", std::vector<int>{});
    const std::size_t body = 16 + len;
    if (bytes.size() != body + count * dim * sizeof(float)) {
        throw ParseError("descriptor dump body has the wrong size", body);
    }
    for (std::size_t i = 0; i < count; ++i) {
        Descriptor d;
        d.values.resize(dim);
        for (std::size_t k = 0; k < dim; ++k) {
            float f = 0.0f;
            std::memcpy(&f, bytes.data() + body + (i * dim + k) * sizeof(float), sizeof f);
            d.values[k] = f;
        }
        d.frame_index = i < frames.size() ? frames[i] : static_cast<int>(i);
        d.segment = i < segments.size() ? segments[i] : 0;
        dump.descriptors.push_back(std::move(d));
    }
    return dump;
}

} // namespace pgap
