#pragma once

// Training tuples and evaluation ground truth from poses and segment labels.
//
// A positive pair (anchor a, candidate p) satisfies three constraints:
//   1. ||pos(a) - pos(p)|| <= r_th
//   2. p is at least revisit_exclusion_window frames older than a
//   3. seg(a) == seg(p)
// Negatives are drawn from frames that break constraint 1 or 3. Frames that
// only break constraint 2 (the same place seen moments ago) are neither.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "pgap/dataio.hpp"
#include "pgap/error.hpp"
#include "pgap/rng.hpp"

namespace pgap {

struct MiningConfig {
    double r_th = 2.0;
    double anchor_min_spacing = 0.5;
    std::size_t num_negatives = 20;
    std::size_t revisit_exclusion_window = 50;
    double eval_radius = 10.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(r_th > 0.0)) throw ConfigError("r_th must be > 0");
        if (num_negatives < 1) throw ConfigError("num_negatives must be >= 1");
        if (!(anchor_min_spacing >= 0.0)) throw ConfigError("anchor_min_spacing must be >= 0");
        if (!(eval_radius >= r_th)) throw ConfigError("eval_radius must be >= r_th");
    }
};

struct TrainingTuple {
    std::size_t sequence = 0; // index into the list of training sequences
    std::size_t anchor = 0;
    std::size_t positive = 0;
    std::vector<std::size_t> negatives;
    int anchor_segment = 0;
    int positive_segment = 0;
    std::vector<int> negative_segments;

    bool operator==(const TrainingTuple&) const = default;
};

/// Candidate is at least `window` frames older than the reference frame.
inline bool is_older_revisit(std::size_t reference, std::size_t candidate, std::size_t window) {
    return candidate + window <= reference && candidate < reference;
}

inline bool is_positive_pair(const Sequence& seq, std::size_t anchor, std::size_t candidate,
                             const MiningConfig& config) {
    return is_older_revisit(anchor, candidate, config.revisit_exclusion_window) &&
           seq.distance(anchor, candidate) <= config.r_th && seq.segment(anchor) == seq.segment(candidate);
}

/// Frames that may serve as negatives for the anchor.
inline bool is_negative_candidate(const Sequence& seq, std::size_t anchor, std::size_t candidate,
                                  const MiningConfig& config) {
    if (candidate == anchor) return false;
    return seq.distance(anchor, candidate) > config.r_th || seq.segment(anchor) != seq.segment(candidate);
}

/// Closest (Euclidean, ties to the lower frame) frame forming a positive pair.
inline std::optional<std::size_t> closest_positive(const Sequence& seq, std::size_t anchor,
                                                   const MiningConfig& config) {
    std::optional<std::size_t> best;
    double best_d = 0.0;
    for (std::size_t j = 0; j < seq.size(); ++j) {
        if (!is_positive_pair(seq, anchor, j, config)) continue;
        const double d = seq.distance(anchor, j);
        if (!best || d < best_d) {
            best = j;
            best_d = d;
        }
    }
    return best;
}

struct MiningResult {
    std::vector<TrainingTuple> tuples;
    std::size_t frames_without_positive = 0;
};

/// Anchor/positive pairs, anchors thinned so consecutive anchors are at
/// least anchor_min_spacing apart. Negatives are left empty.
inline MiningResult mine_pairs(const Sequence& seq, const MiningConfig& config, std::size_t sequence_index = 0) {
    config.validate();
    MiningResult result;
    std::optional<std::size_t> last_anchor;
    for (std::size_t a = 0; a < seq.size(); ++a) {
        const auto pos = closest_positive(seq, a, config);
        if (!pos) {
            ++result.frames_without_positive;
            continue;
        }
        if (last_anchor && seq.distance(*last_anchor, a) < config.anchor_min_spacing) continue;
        last_anchor = a;
        TrainingTuple t;
        t.sequence = sequence_index;
        t.anchor = a;
        t.positive = *pos;
        t.anchor_segment = seq.segment(a);
        t.positive_segment = seq.segment(*pos);
        result.tuples.push_back(std::move(t));
    }
    return result;
}

/// Draws num_negatives distinct negatives for every tuple. The stream is
/// keyed by (seed, epoch, sequence, anchor) so each epoch resamples.
inline void sample_negatives(const Sequence& seq, std::vector<TrainingTuple>& tuples, const MiningConfig& config,
                             std::uint64_t epoch) {
    std::vector<std::size_t> pool;
    for (auto& t : tuples) {
        pool.clear();
        for (std::size_t j = 0; j < seq.size(); ++j) {
            if (is_negative_candidate(seq, t.anchor, j, config)) pool.push_back(j);
        }
        if (config.num_negatives > pool.size()) {
            throw ConfigError("num_negatives = " + std::to_string(config.num_negatives) + " exceeds the " +
                              std::to_string(pool.size()) + " negative candidates of anchor " +
                              std::to_string(t.anchor));
        }
        Rng rng(derive_seed(config.seed, {epoch, t.sequence, t.anchor}));
        t.negatives.clear();
        t.negative_segments.clear();
        for (std::size_t i = 0; i < config.num_negatives; ++i) {
            std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
            t.negatives.push_back(pool[i]);
            t.negative_segments.push_back(seq.segment(pool[i]));
        }
    }
}

inline MiningResult mine_tuples(const Sequence& seq, const MiningConfig& config, std::uint64_t epoch = 0,
                                std::size_t sequence_index = 0) {
    MiningResult r = mine_pairs(seq, config, sequence_index);
    sample_negatives(seq, r.tuples, config, epoch);
    return r;
}

struct GroundTruthTable {
    bool segment_aware = true;
    double radius = 0.0;
    std::size_t window = 0;
    std::vector<std::vector<std::size_t>> true_sets; // indexed by query frame

    std::size_t queries_with_revisits() const {
        std::size_t n = 0;
        for (const auto& s : true_sets) n += !s.empty();
        return n;
    }
};

/// For every frame, the older frames (outside the exclusion window) within
/// eval_radius, restricted to the same segment when segment_aware.
inline GroundTruthTable build_ground_truth(const Sequence& seq, const MiningConfig& config, bool segment_aware) {
    GroundTruthTable gt;
    gt.segment_aware = segment_aware;
    gt.radius = config.eval_radius;
    gt.window = config.revisit_exclusion_window;
    gt.true_sets.resize(seq.size());
    for (std::size_t q = 0; q < seq.size(); ++q) {
        for (std::size_t j = 0; j < q; ++j) {
            if (!is_older_revisit(q, j, gt.window)) continue;
            if (seq.distance(q, j) > gt.radius) continue;
            if (segment_aware && seq.segment(q) != seq.segment(j)) continue;
            gt.true_sets[q].push_back(j);
        }
    }
    return gt;
}

inline void write_tuples_csv(const fs::path& path, const std::vector<TrainingTuple>& tuples) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    const std::size_t m = tuples.empty() ? 0 : tuples.front().negatives.size();
    out << "anchor,positive";
    for (std::size_t i = 1; i <= m; ++i) out << ",neg" << i;
    out << '\n';
    for (const auto& t : tuples) {
        out << t.anchor << ',' << t.positive;
        for (auto n : t.negatives) out << ',' << n;
        out << '\n';
    }
}

inline void write_ground_truth_csv(const fs::path& path, const GroundTruthTable& gt) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    out << "query,true\n";
    for (std::size_t q = 0; q < gt.true_sets.size(); ++q) {
        out << q << ',';
        for (std::size_t i = 0; i < gt.true_sets[q].size(); ++i) out << (i ? " " : "") << gt.true_sets[q][i];
        out << '\n';
    }
}

} // namespace pgap
