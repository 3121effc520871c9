#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "calcscore/nn/adam.hpp"

namespace calcscore::nn {

struct GradCheckOptions {
    double step = 1e-5;
    /// Entries probed per parameter tensor; 0 probes every entry.
    std::size_t samples_per_tensor = 0;
    /// Denominator floor of the relative error, so that gradients at
    /// round-off scale are compared absolutely.
    double floor = 1e-6;
    std::uint64_t seed = 1;
    /// Entries above this error are re-probed at step/10 and step/100. A wrong
    /// gradient disagrees at every step; a probe interval straddling a kink of
    /// the second derivative (ELU at 0) disagrees by O(step) and converges.
    double refine_above = 1e-6;
    /// Tensors whose analytic entries all lie within this bound count as
    /// numeric-zero (e.g. a bias cancelled by a following batchnorm).
    double zero_bound = 1e-12;
};

struct GradCheckReport {
    double max_rel_error = 0;
    std::string worst;                      // parameter[entry] with the largest error
    std::size_t checked = 0;
    std::vector<std::string> disconnected;  // never reached by backward
    std::vector<std::string> numeric_zero;  // reached, but every entry within zero_bound
    double max_abs_numeric_of_zero = 0;     // largest finite difference on numeric-zero tensors
    std::size_t refined = 0;                // entries whose error fell under a smaller step
};

inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients with central finite differences.
/// `evaluate(with_grad)` must run a deterministic forward pass returning the
/// scalar loss; with_grad additionally runs backward, accumulating into the
/// (already zeroed) parameter gradients.
inline GradCheckReport grad_check(std::span<Parameter<double>* const> params,
                                  const std::function<double(bool)>& evaluate,
                                  const GradCheckOptions& opt = {}) {
    zero_grad(params);
    evaluate(true);
    std::vector<std::vector<double>> analytic;
    GradCheckReport rep;
    for (auto* p : params) {
        analytic.push_back(p->grad.values());
        if (!p->trainable) continue;
        if (!p->touched)
            rep.disconnected.push_back(p->name);
        else if (std::all_of(p->grad.values().begin(), p->grad.values().end(),
                             [&](double g) { return std::abs(g) <= opt.zero_bound; }))
            rep.numeric_zero.push_back(p->name);
    }
    auto is_zero = [&](const Parameter<double>* p) {
        return std::find(rep.numeric_zero.begin(), rep.numeric_zero.end(), p->name) != rep.numeric_zero.end();
    };
    std::mt19937_64 rng(opt.seed);
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto* p = params[k];
        if (!p->trainable || !p->touched) continue;
        std::vector<std::size_t> idx(p->value.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (opt.samples_per_tensor && idx.size() > opt.samples_per_tensor) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(opt.samples_per_tensor);
        }
        for (std::size_t i : idx) {
            const double orig = p->value[i];
            auto numeric = [&](double h) {
                p->value[i] = orig + h;
                double up = evaluate(false);
                p->value[i] = orig - h;
                double down = evaluate(false);
                p->value[i] = orig;
                return (up - down) / (2 * h);
            };
            auto central = [&](double h) { return relative_error(analytic[k][i], numeric(h), opt.floor); };
            ++rep.checked;
            if (is_zero(p)) {
                rep.max_abs_numeric_of_zero = std::max(rep.max_abs_numeric_of_zero, std::abs(numeric(opt.step)));
                continue;
            }
            double e = central(opt.step);
            if (e > opt.refine_above) {
                double fine = std::min(central(opt.step / 10), central(opt.step / 100));
                if (fine < e) {
                    e = fine;
                    ++rep.refined;
                }
            }
            if (e > rep.max_rel_error) {
                rep.max_rel_error = e;
                rep.worst = p->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

/// Finite-difference check of d loss / d input for a single layer.
template <typename L>
double layer_input_grad_check(L& layer, Tensor<double> x, const Tensor<double>& upstream, Mode mode,
                              double step = 1e-5, double floor = 1e-6) {
    auto loss = [&](const Tensor<double>& in) {
        Tensor<double> y = layer.forward(in, mode, false);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * upstream[i];
        return s;
    };
    layer.forward(x, mode, true);
    Tensor<double> dx = layer.backward(upstream);
    double worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        double up = loss(x);
        x[i] = orig - step;
        double down = loss(x);
        x[i] = orig;
        worst = std::max(worst, relative_error(dx[i], (up - down) / (2 * step), floor));
    }
    return worst;
}

}  // namespace calcscore::nn
