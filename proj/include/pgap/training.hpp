#pragma once

// One optimisation step per training tuple: every member scan (anchor,
// positive, negatives) gets its own tape, the descriptor losses are computed
// on the resulting values and each tape is seeded with the gradient of the
// combined loss with respect to its outputs.

#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pgap/dataio.hpp"
#include "pgap/error.hpp"
#include "pgap/losses.hpp"
#include "pgap/mining.hpp"
#include "pgap/model.hpp"
#include "pgap/optim.hpp"
#include "pgap/parallel.hpp"
#include "pgap/retrieval.hpp"
#include "pgap/rng.hpp"

namespace pgap {

struct DataConfig {
    std::size_t num_points = 10000;
    bool augment_rotation = true;
    double rotation_range = 2.0 * std::numbers::pi; // angles drawn from [-range/2, range/2)
    bool segment_aware_validation = true;

    void validate() const {
        if (num_points < 1) throw ConfigError("num_points must be >= 1");
        if (!(rotation_range >= 0.0)) throw ConfigError("rotation_range must be >= 0");
    }
};

struct TrainConfig {
    ModelConfig model;
    MiningConfig mining;
    LossConfig loss;
    OptimConfig optim;
    DataConfig data;

    void validate() const {
        model.validate();
        mining.validate();
        loss.validate();
        optim.validate();
        data.validate();
    }
};

struct TupleLoss {
    double total = 0.0;
    double triplet = 0.0;
    double slc = 0.0;
    double d_ap = 0.0;
    double d_an = 0.0;
    std::size_t hardest = 0;
};

/// Forward pass over a tuple (members ordered anchor, positive, negatives)
/// and, when requested, accumulation of parameter gradients.
inline TupleLoss tuple_loss(PointNetPGAP& model, const std::vector<PointCloud>& members, std::span<const int> labels,
                            const LossConfig& config, bool accumulate_gradients) {
    if (members.size() < 3) throw ContractError("a tuple needs an anchor, a positive and at least one negative");
    if (labels.size() != members.size()) throw ContractError("one segment label per tuple member is required");
    const std::size_t n = members.size();
    const bool slc_forward = config.slc_enabled;
    const bool slc_backward = config.slc_enabled && config.alpha < 1.0;

    std::vector<Tape> tapes(n);
    std::vector<Var> desc(n), logp(n);
    parallel_for(n, [&](std::size_t i) {
        desc[i] = model.describe(tapes[i], members[i]);
        if (slc_forward) logp[i] = model.predict_segment(tapes[i], desc[i]);
    });

    std::vector<std::span<const double>> negatives;
    for (std::size_t i = 2; i < n; ++i) negatives.push_back(tapes[i].value(desc[i]).data());
    const auto trip = lazy_triplet_loss(tapes[0].value(desc[0]).data(), tapes[1].value(desc[1]).data(), negatives,
                                        config.margin);

    TupleLoss out;
    out.triplet = trip.value;
    out.d_ap = trip.d_ap;
    out.d_an = trip.d_an;
    out.hardest = trip.hardest;

    std::optional<SlcLossResult> slc;
    if (slc_forward) {
        std::vector<std::span<const double>> lps;
        for (std::size_t i = 0; i < n; ++i) lps.push_back(tapes[i].value(logp[i]).data());
        slc = slc_loss(lps, labels);
        out.slc = slc->value;
        out.total = combined_loss(out.triplet, out.slc, config.alpha);
    } else {
        out.total = out.triplet;
    }
    if (!accumulate_gradients) return out;

    const double triplet_weight = slc_forward ? config.alpha : 1.0;
    const std::size_t hardest_member = 2 + trip.hardest;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::pair<Var, Tensor>> seeds;
        if (trip.value > 0.0 && (i == 0 || i == 1 || i == hardest_member)) {
            const auto& g = i == 0 ? trip.grad_anchor : (i == 1 ? trip.grad_positive : trip.grad_hardest);
            Tensor seed({g.size()});
            for (std::size_t k = 0; k < g.size(); ++k) seed[k] = triplet_weight * g[k];
            seeds.emplace_back(desc[i], std::move(seed));
        }
        if (slc_backward) {
            const auto& g = slc->grads[i];
            Tensor seed({g.size()});
            for (std::size_t k = 0; k < g.size(); ++k) seed[k] = (1.0 - config.alpha) * g[k];
            seeds.emplace_back(logp[i], std::move(seed));
        }
        if (!seeds.empty()) tapes[i].backward(seeds);
    }
    return out;
}

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double triplet = 0.0;
    double slc = 0.0;
    double val_recall_at_1 = 0.0;
};

struct TrainResult {
    PointNetPGAP best_model;
    int best_epoch = 0;
    double best_recall = -1.0;
    std::vector<EpochStats> history;
    std::size_t tuples_per_epoch = 0;
    std::size_t frames_without_positive = 0;
    PointNetPGAP final_model;
};

/// Scan as fed to the network during training: downsampled and, if enabled,
/// rotated about z. Keyed by (seed, epoch, sequence, frame).
inline PointCloud training_view(const PointCloud& cloud, const DataConfig& data, std::uint64_t seed,
                                std::uint64_t epoch, std::uint64_t sequence, std::uint64_t frame) {
    PointCloud view = downsample(cloud, data.num_points, derive_seed(seed, {0x7669657764ULL, epoch, sequence, frame}));
    if (data.augment_rotation && data.rotation_range > 0.0) {
        Rng rng(derive_seed(seed, {0x726f74ULL, epoch, sequence, frame}));
        view = rotate_z(view, rng.uniform(-0.5 * data.rotation_range, 0.5 * data.rotation_range));
    }
    return view;
}

using EpochCallback = std::function<void(const EpochStats&)>;

inline TrainResult train(const std::vector<Sequence>& sequences, const Sequence& validation, TrainConfig config,
                         const EpochCallback& on_epoch = {}) {
    if (sequences.empty()) throw TrainingError("no training sequences");
    int max_segments = 0;
    for (const auto& s : sequences) {
        for (const auto& r : s.records) max_segments = std::max(max_segments, r.segment);
    }
    config.model.num_segments = static_cast<std::size_t>(std::max(2, max_segments));
    config.validate();

    const std::uint64_t seed = config.optim.seed;
    PointNetPGAP model = PointNetPGAP::init(config.model, derive_seed(seed, {0x696e6974ULL}));
    AdamW optimizer(config.optim);
    auto params = model.parameters();

    std::vector<std::vector<TrainingTuple>> per_sequence;
    TrainResult result;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        auto mined = mine_pairs(sequences[s], config.mining, s);
        result.frames_without_positive += mined.frames_without_positive;
        result.tuples_per_epoch += mined.tuples.size();
        per_sequence.push_back(std::move(mined.tuples));
    }
    if (result.tuples_per_epoch == 0) {
        throw TrainingError("no training tuples: " + std::to_string(result.frames_without_positive) +
                            " frames have no positive within r_th = " + std::to_string(config.mining.r_th) +
                            " m, at least " + std::to_string(config.mining.revisit_exclusion_window) +
                            " frames older and in the same segment");
    }

    int since_best = 0;
    for (int epoch = 1; epoch <= config.optim.max_epochs; ++epoch) {
        const auto e = static_cast<std::uint64_t>(epoch);
        std::vector<TrainingTuple> tuples;
        for (std::size_t s = 0; s < sequences.size(); ++s) {
            sample_negatives(sequences[s], per_sequence[s], config.mining, e);
            tuples.insert(tuples.end(), per_sequence[s].begin(), per_sequence[s].end());
        }
        Rng order(derive_seed(seed, {0x73687566ULL, e}));
        order.shuffle(tuples);

        EpochStats stats;
        stats.epoch = epoch;
        for (const auto& t : tuples) {
            const Sequence& seq = sequences[t.sequence];
            std::vector<std::size_t> frames{t.anchor, t.positive};
            frames.insert(frames.end(), t.negatives.begin(), t.negatives.end());
            std::vector<PointCloud> members(frames.size());
            std::vector<int> labels(frames.size());
            parallel_for(frames.size(), [&](std::size_t i) {
                members[i] = training_view(seq.records[frames[i]].cloud, config.data, seed, e, t.sequence, frames[i]);
                labels[i] = seq.records[frames[i]].segment;
            });
            model.zero_grad();
            const TupleLoss loss = tuple_loss(model, members, labels, config.loss, true);
            if (!std::isfinite(loss.total)) {
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", anchor " +
                                    std::to_string(t.anchor));
            }
            optimizer.step(params);
            stats.loss += loss.total;
            stats.triplet += loss.triplet;
            stats.slc += loss.slc;
        }
        const double count = static_cast<double>(tuples.size());
        stats.loss /= count;
        stats.triplet /= count;
        stats.slc /= count;

        const PointNetPGAP& frozen = model;
        const auto report = evaluate_sequence(frozen, validation, config.mining, config.data.segment_aware_validation,
                                              {config.data.num_points, seed});
        stats.val_recall_at_1 = report.recall_at_k.empty() ? 0.0 : report.recall_at_k[0];
        result.history.push_back(stats);
        if (on_epoch) on_epoch(stats);

        if (stats.val_recall_at_1 > result.best_recall) {
            result.best_recall = stats.val_recall_at_1;
            result.best_epoch = epoch;
            result.best_model = model;
            since_best = 0;
        } else if (++since_best >= config.optim.patience) {
            break;
        }
    }
    result.final_model = std::move(model);
    return result;
}

} // namespace pgap
