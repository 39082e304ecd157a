#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pgap/error.hpp"
#include "pgap/tensor.hpp"

namespace pgap {

struct OptimConfig {
    double learning_rate = 1e-4;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int max_epochs = 200;
    int patience = 20;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("betas must lie in [0, 1)");
        }
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (patience < 1) throw ConfigError("patience must be >= 1");
    }
};

/// Adam with decoupled weight decay. The decay term uses the parameter value
/// from before the step:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
class AdamW {
public:
    explicit AdamW(OptimConfig config) : config_(config) {}

    void step(const std::vector<Parameter*>& params) {
        if (first_.empty()) {
            for (auto* p : params) {
                first_.emplace_back(p->value().size(), 0.0);
                second_.emplace_back(p->value().size(), 0.0);
            }
        }
        if (first_.size() != params.size()) throw ContractError("AdamW: parameter set changed between steps");
        for (const auto* p : params) {
            for (double g : p->grad().data()) {
                if (!std::isfinite(g)) {
                    throw TrainingError("non-finite gradient in parameter '" + p->name() + "' at step " +
                                        std::to_string(step_ + 1));
                }
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
        const double lr = config_.learning_rate;
        const double decay = lr * config_.weight_decay;
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto value = params[k]->value().data();
            const auto grad = params[k]->grad().data();
            auto& m = first_[k];
            auto& v = second_[k];
            for (std::size_t i = 0; i < value.size(); ++i) {
                const double g = grad[i];
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
                const double m_hat = m[i] / bc1;
                const double v_hat = v[i] / bc2;
                value[i] = value[i] - decay * value[i] - lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
            }
        }
    }

    std::uint64_t steps() const noexcept { return step_; }
    const OptimConfig& config() const noexcept { return config_; }

private:
    OptimConfig config_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::uint64_t step_ = 0;
};

} // namespace pgap
