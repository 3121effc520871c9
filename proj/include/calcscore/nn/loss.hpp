#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "calcscore/nn/tensor.hpp"

namespace calcscore::nn {

inline constexpr double kProbFloor = 1e-12;

template <typename T>
struct LossResult {
    double value = 0;
    Tensor<T> grad;  // d loss / d probabilities
};

/// Mean categorical cross-entropy over every sample (and pixel, for rank-4
/// input). `targets` is ordered (n, y, x). Probabilities are clamped at
/// kProbFloor; clamped entries contribute no gradient. Optional per-class
/// weights scale each term; the mean still divides by the term count.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& probs, std::span<const int> targets,
                            std::span<const double> class_weights = {}) {
    require(probs.rank() == 2 || probs.rank() == 4, ErrorKind::invalid_argument,
            "cross_entropy expects rank 2 or 4 probabilities");
    const int n = probs.dim(0), c = probs.dim(1);
    const std::size_t inner = probs.rank() == 4 ? static_cast<std::size_t>(probs.dim(2)) * probs.dim(3) : 1;
    const std::size_t terms = static_cast<std::size_t>(n) * inner;
    require(targets.size() == terms, ErrorKind::size_mismatch, "cross_entropy target count mismatch");
    require(class_weights.empty() || class_weights.size() == static_cast<std::size_t>(c),
            ErrorKind::invalid_argument, "class weight count mismatch");
    LossResult<T> r;
    r.grad = Tensor<T>(probs.shape());
    double total = 0;
    for (int b = 0; b < n; ++b)
        for (std::size_t p = 0; p < inner; ++p) {
            int t = targets[static_cast<std::size_t>(b) * inner + p];
            require(t >= 0 && t < c, ErrorKind::invalid_argument,
                    "target class " + std::to_string(t) + " outside [0," + std::to_string(c) + ")");
            double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(t)];
            std::size_t off = (static_cast<std::size_t>(b) * c + t) * inner + p;
            double pt = static_cast<double>(probs[off]);
            if (pt >= kProbFloor) {
                total -= w * std::log(pt);
                r.grad[off] = static_cast<T>(-w / (pt * static_cast<double>(terms)));
            } else {
                total -= w * std::log(kProbFloor);
            }
        }
    r.value = total / static_cast<double>(terms);
    return r;
}

template <typename T>
int argmax(std::span<const T> v) {
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

}  // namespace calcscore::nn
