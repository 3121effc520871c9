#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "calcscore/nn/layers.hpp"

namespace calcscore::nn {

struct AdamConfig {
    double learning_rate = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;  // L2 coefficient, added to the gradient as decay * param
};

template <typename T>
struct OptimizerState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<std::vector<T>> m, v;

    OptimizerState() = default;
    explicit OptimizerState(AdamConfig c) : config(c) {}
};

/// One Adam update with bias correction over every trainable parameter.
/// Gradients are left untouched; callers zero them between steps.
template <typename T>
void adam_step(OptimizerState<T>& state, std::span<Parameter<T>* const> params) {
    if (state.m.empty()) {
        for (auto* p : params) {
            state.m.emplace_back(p->value.size(), T{0});
            state.v.emplace_back(p->value.size(), T{0});
        }
    }
    require(state.m.size() == params.size(), ErrorKind::size_mismatch, "optimizer state does not match parameters");
    const auto& cfg = state.config;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto* p = params[k];
        if (!p->trainable) continue;
        require(p->grad.size() == p->value.size() && state.m[k].size() == p->value.size(), ErrorKind::size_mismatch,
                p->name + ": optimizer accumulator shape mismatch");
        require(p->grad.all_finite(), ErrorKind::numeric, "non-finite gradient in " + p->name);
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto* p = params[k];
        if (!p->trainable) continue;
        auto& m = state.m[k];
        auto& v = state.v[k];
        const double decay = p->decay ? cfg.weight_decay : 0.0;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double g = static_cast<double>(p->grad[i]) + decay * static_cast<double>(p->value[i]);
            double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * g;
            double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double update = cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon);
            p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - update);
        }
    }
}

template <typename T>
void zero_grad(std::span<Parameter<T>* const> params) {
    for (auto* p : params) p->zero_grad();
}

}  // namespace calcscore::nn
