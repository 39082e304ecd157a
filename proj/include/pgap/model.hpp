#pragma once

// PointNetPGAP: a per-point shared MLP (PointNet without T-Net) produces
// local features F (n x c); F is aggregated by concatenating the flattened
// Gram matrix (1/n) F^T F with the column means of F, projected by one fully
// connected layer and L2-normalised. A separate MLP head classifies the field
// segment of a descriptor during training.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pgap/dataio.hpp"
#include "pgap/error.hpp"
#include "pgap/rng.hpp"
#include "pgap/tensor.hpp"

namespace pgap {

enum class Aggregation {
    kGapPfi, // [flatten(G), mean]
    kGap,    // mean only
    kPfi,    // flatten(G) only
};

inline std::string to_string(Aggregation a) {
    switch (a) {
    case Aggregation::kGap: return "gap";
    case Aggregation::kPfi: return "pfi";
    default: return "gap+pfi";
    }
}

inline Aggregation parse_aggregation(const std::string& s) {
    if (s == "gap+pfi" || s == "pgap") return Aggregation::kGapPfi;
    if (s == "gap") return Aggregation::kGap;
    if (s == "pfi") return Aggregation::kPfi;
    throw ConfigError("unknown aggregation '" + s + "' (expected gap+pfi, gap or pfi)");
}

struct ModelConfig {
    std::size_t local_dim = 16;
    std::size_t descriptor_dim = 256;
    std::vector<std::size_t> pointnet_widths{64, 128, 16};
    std::vector<std::size_t> slc_hidden{256, 64};
    std::size_t num_segments = 6;
    Aggregation aggregation = Aggregation::kGapPfi;

    void validate() const {
        if (local_dim < 1) throw ConfigError("local_dim must be >= 1");
        if (descriptor_dim < 1) throw ConfigError("descriptor_dim must be >= 1");
        if (num_segments < 2) throw ConfigError("num_segments must be >= 2");
        if (pointnet_widths.empty() || pointnet_widths.back() != local_dim) {
            throw ConfigError("the last PointNet width must equal local_dim");
        }
        for (auto w : pointnet_widths) {
            if (w < 1) throw ConfigError("PointNet widths must be >= 1");
        }
        for (auto w : slc_hidden) {
            if (w < 1) throw ConfigError("SLC hidden widths must be >= 1");
        }
    }

    /// Size of the pre-FC descriptor D*.
    std::size_t aggregate_dim() const {
        switch (aggregation) {
        case Aggregation::kGap: return local_dim;
        case Aggregation::kPfi: return local_dim * local_dim;
        default: return local_dim + local_dim * local_dim;
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

struct Descriptor {
    std::vector<double> values;
    int frame_index = 0;
    int segment = 0;

    std::size_t dim() const noexcept { return values.size(); }
};

struct SegmentPrediction {
    std::vector<double> log_probs;
};

struct DenseLayer {
    Parameter weight;
    Parameter bias;
};

class PointNetPGAP {
public:
    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    static PointNetPGAP init(const ModelConfig& config, std::uint64_t seed) {
        config.validate();
        PointNetPGAP m;
        m.config_ = config;
        Rng rng(seed);
        auto make = [&rng](const std::string& name, std::size_t in, std::size_t out) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(in));
            Tensor w({in, out});
            for (auto& v : w.data()) v = rng.uniform(-bound, bound);
            return DenseLayer{Parameter(name + ".weight", std::move(w)), Parameter(name + ".bias", Tensor({out}))};
        };
        std::size_t in = 3;
        for (std::size_t i = 0; i < config.pointnet_widths.size(); ++i) {
            m.pointnet_.push_back(make("pointnet." + std::to_string(i), in, config.pointnet_widths[i]));
            in = config.pointnet_widths[i];
        }
        m.fc_ = make("fc", config.aggregate_dim(), config.descriptor_dim);
        in = config.descriptor_dim;
        for (std::size_t i = 0; i < config.slc_hidden.size(); ++i) {
            m.slc_.push_back(make("slc." + std::to_string(i), in, config.slc_hidden[i]));
            in = config.slc_hidden[i];
        }
        m.slc_.push_back(make("slc." + std::to_string(config.slc_hidden.size()), in, config.num_segments));
        return m;
    }

    const ModelConfig& config() const noexcept { return config_; }

    /// Parameters in declaration order: PointNet layers, FC, SLC head.
    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& l : pointnet_) out.insert(out.end(), {&l.weight, &l.bias});
        out.insert(out.end(), {&fc_.weight, &fc_.bias});
        for (auto& l : slc_) out.insert(out.end(), {&l.weight, &l.bias});
        return out;
    }
    std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        for (auto* p : const_cast<PointNetPGAP*>(this)->parameters()) out.push_back(p);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* p : parameters()) n += p->value().size();
        return n;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

    // Taped forward passes. The non-const overloads bind parameters as
    // trainable leaves, the const overloads as frozen constants.

    Var extract_local(Tape& tape, const PointCloud& cloud) { return extract_local_impl(*this, tape, cloud); }
    Var extract_local(Tape& tape, const PointCloud& cloud) const { return extract_local_impl(*this, tape, cloud); }

    Var aggregate(Tape& tape, Var features) const {
        switch (config_.aggregation) {
        case Aggregation::kGap: return mean_rows(tape, features);
        case Aggregation::kPfi: return concat(tape, {gram(tape, features)});
        default: {
            const Var g = gram(tape, features);
            const Var m = mean_rows(tape, features);
            return concat(tape, {g, m});
        }
        }
    }

    Var describe(Tape& tape, const PointCloud& cloud) { return describe_impl(*this, tape, cloud); }
    Var describe(Tape& tape, const PointCloud& cloud) const { return describe_impl(*this, tape, cloud); }

    Var predict_segment(Tape& tape, Var descriptor) { return predict_impl(*this, tape, descriptor); }
    Var predict_segment(Tape& tape, Var descriptor) const { return predict_impl(*this, tape, descriptor); }

    // Untaped conveniences over frozen parameters.

    Descriptor describe(const PointCloud& cloud) const {
        Tape tape;
        const Var d = describe(tape, cloud);
        Descriptor out;
        out.values = tape.value(d).values();
        out.frame_index = cloud.frame_index;
        return out;
    }

    SegmentPrediction predict_segment(const Descriptor& descriptor) const {
        if (descriptor.dim() != config_.descriptor_dim) {
            throw DimensionError("descriptor has " + std::to_string(descriptor.dim()) + " entries, model expects " +
                                 std::to_string(config_.descriptor_dim));
        }
        Tape tape;
        const Var d = tape.constant(Tensor({descriptor.dim()}, descriptor.values));
        const Var lp = predict_segment(tape, d);
        return {tape.value(lp).values()};
    }

    const std::vector<DenseLayer>& pointnet_layers() const noexcept { return pointnet_; }
    const DenseLayer& fc_layer() const noexcept { return fc_; }
    const std::vector<DenseLayer>& slc_layers() const noexcept { return slc_; }

private:
    template <class Self>
    static Var extract_local_impl(Self& self, Tape& tape, const PointCloud& cloud) {
        if (cloud.points.empty()) throw EmptyInputError("cannot describe an empty cloud");
        for (const auto& p : cloud.points) {
            if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
                throw InputError("point cloud contains a non-finite coordinate");
            }
        }
        Var x = tape.constant(cloud.to_tensor());
        const std::size_t last = self.pointnet_.size() - 1;
        for (std::size_t i = 0; i <= last; ++i) {
            auto& layer = self.pointnet_[i];
            x = linear(tape, x, tape.parameter(layer.weight), tape.parameter(layer.bias));
            if (i != last) x = relu(tape, x);
        }
        return x;
    }

    template <class Self>
    static Var describe_impl(Self& self, Tape& tape, const PointCloud& cloud) {
        const Var f = self.extract_local(tape, cloud);
        const Var agg = self.aggregate(tape, f);
        const Var fc = linear(tape, agg, tape.parameter(self.fc_.weight), tape.parameter(self.fc_.bias));
        return l2_normalize(tape, fc);
    }

    template <class Self>
    static Var predict_impl(Self& self, Tape& tape, Var descriptor) {
        const auto& head_out = self.slc_.back().bias.value();
        if (head_out.size() != self.config_.num_segments) {
            throw ConfigError("SLC head has " + std::to_string(head_out.size()) + " outputs, config expects " +
                              std::to_string(self.config_.num_segments) + " segments");
        }
        Var x = descriptor;
        const std::size_t last = self.slc_.size() - 1;
        for (std::size_t i = 0; i <= last; ++i) {
            auto& layer = self.slc_[i];
            x = linear(tape, x, tape.parameter(layer.weight), tape.parameter(layer.bias));
            if (i != last) x = relu(tape, x);
        }
        return log_softmax(tape, x);
    }

    ModelConfig config_;
    std::vector<DenseLayer> pointnet_;
    DenseLayer fc_{Parameter("fc.weight", Tensor({1})), Parameter("fc.bias", Tensor({1}))};
    std::vector<DenseLayer> slc_;
};

} // namespace pgap
