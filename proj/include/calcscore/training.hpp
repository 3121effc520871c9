#pragma once

// Shared training utilities: stratified minibatch sampling and the per-epoch log.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "calcscore/common.hpp"

namespace calcscore {

/// ceil(b/2) draws from `positive` followed by floor(b/2) draws from
/// `negative`, uniformly with replacement.
template <typename Item>
std::vector<Item> balanced_minibatch(std::span<const Item> positive, std::span<const Item> negative, int batch_size,
                                     std::mt19937_64& rng, const std::string& positive_name = "calcium",
                                     const std::string& negative_name = "background") {
    require(batch_size >= 2, ErrorKind::invalid_argument, "batch size must be >= 2");
    require(!positive.empty(), ErrorKind::domain, "empty " + positive_name + " stratum");
    require(!negative.empty(), ErrorKind::domain, "empty " + negative_name + " stratum");
    std::vector<Item> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    const int npos = (batch_size + 1) / 2;
    std::uniform_int_distribution<std::size_t> pick_pos(0, positive.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_neg(0, negative.size() - 1);
    for (int i = 0; i < npos; ++i) out.push_back(positive[pick_pos(rng)]);
    for (int i = npos; i < batch_size; ++i) out.push_back(negative[pick_neg(rng)]);
    return out;
}

struct EpochRecord {
    std::string stage;
    int epoch = 0;
    std::uint64_t step = 0;  // optimizer steps completed
    double train_loss = 0;
    double validation_loss = 0;
};

}  // namespace calcscore
