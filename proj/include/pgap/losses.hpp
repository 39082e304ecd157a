#pragma once

// Training losses over descriptor values. Each loss returns its value
// together with the gradient with respect to its inputs; the trainer seeds
// the per-scan tapes with those gradients.

#include <cmath>
#include <span>
#include <vector>

#include "pgap/error.hpp"

namespace pgap {

struct LossConfig {
    double margin = 0.5;
    double alpha = 0.5;
    bool slc_enabled = true;

    void validate() const {
        if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    }
};

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

struct TripletLossResult {
    double value = 0.0;
    double d_ap = 0.0;
    double d_an = 0.0;
    std::size_t hardest = 0;
    std::vector<double> grad_anchor;
    std::vector<double> grad_positive;
    std::vector<double> grad_hardest; // gradient of the hardest negative; all others are zero
};

/// max(d_AP - d_AN + margin, 0) with d_AN taken to the hardest (nearest)
/// negative; ties go to the lowest index and the kink has zero subgradient.
inline TripletLossResult lazy_triplet_loss(std::span<const double> anchor, std::span<const double> positive,
                                           const std::vector<std::span<const double>>& negatives, double margin) {
    if (negatives.empty()) throw ContractError("lazy triplet loss needs at least one negative");
    const std::size_t d = anchor.size();
    if (positive.size() != d) throw DimensionError("anchor and positive descriptors differ in size");
    for (const auto& n : negatives) {
        if (n.size() != d) throw DimensionError("negative descriptor differs in size from the anchor");
    }

    TripletLossResult r;
    r.d_ap = euclidean_distance(anchor, positive);
    r.d_an = euclidean_distance(anchor, negatives[0]);
    for (std::size_t j = 1; j < negatives.size(); ++j) {
        const double dj = euclidean_distance(anchor, negatives[j]);
        if (dj < r.d_an) {
            r.d_an = dj;
            r.hardest = j;
        }
    }
    const double hinge = r.d_ap - r.d_an + margin;
    r.value = hinge > 0.0 ? hinge : 0.0;
    r.grad_anchor.assign(d, 0.0);
    r.grad_positive.assign(d, 0.0);
    r.grad_hardest.assign(d, 0.0);
    if (hinge > 0.0) {
        const auto& neg = negatives[r.hardest];
        // d||a-b||/da = (a-b)/||a-b||, zero when the points coincide
        for (std::size_t i = 0; i < d; ++i) {
            const double up = r.d_ap > 0.0 ? (anchor[i] - positive[i]) / r.d_ap : 0.0;
            const double un = r.d_an > 0.0 ? (anchor[i] - neg[i]) / r.d_an : 0.0;
            r.grad_anchor[i] = up - un;
            r.grad_positive[i] = -up;
            r.grad_hardest[i] = un;
        }
    }
    return r;
}

struct SlcLossResult {
    double value = 0.0;
    std::vector<std::vector<double>> grads; // per member, w.r.t. its log-probabilities
};

/// Sum over tuple members of the negative log-likelihood of the true segment.
/// Labels are 1-based.
inline SlcLossResult slc_loss(const std::vector<std::span<const double>>& log_probs, std::span<const int> labels) {
    if (log_probs.size() != labels.size()) {
        throw ContractError("slc loss: " + std::to_string(log_probs.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
    }
    SlcLossResult r;
    r.grads.reserve(log_probs.size());
    for (std::size_t i = 0; i < log_probs.size(); ++i) {
        const int s = labels[i];
        if (s < 1 || static_cast<std::size_t>(s) > log_probs[i].size()) {
            throw LabelError("segment label " + std::to_string(s) + " outside 1.." +
                             std::to_string(log_probs[i].size()));
        }
        r.value -= log_probs[i][static_cast<std::size_t>(s - 1)];
        std::vector<double> g(log_probs[i].size(), 0.0);
        g[static_cast<std::size_t>(s - 1)] = -1.0;
        r.grads.push_back(std::move(g));
    }
    return r;
}

/// alpha * triplet + (1 - alpha) * slc.
inline double combined_loss(double triplet, double slc, double alpha) { return alpha * triplet + (1.0 - alpha) * slc; }

} // namespace pgap
