#pragma once

#include <span>

#include "calcscore/nn/layers.hpp"

namespace calcscore::nn {

struct ReceptiveField {
    int rf = 1;    // pixels along one axis
    int jump = 1;  // input pixels per output step
    friend bool operator==(const ReceptiveField&, const ReceptiveField&) = default;
};

/// rf <- rf + (effective_kernel - 1) * jump; jump <- jump * stride.
/// Pointwise layers leave both unchanged.
inline ReceptiveField receptive_field(std::span<const LayerSpec> specs) {
    ReceptiveField r;
    for (const auto& s : specs) {
        switch (s.kind) {
        case LayerKind::conv2d:
            r.rf += s.dilation * (s.kernel - 1) * r.jump;
            r.jump *= s.stride;
            break;
        case LayerKind::maxpool2d:
            r.rf += (s.pool - 1) * r.jump;
            r.jump *= s.stride;
            break;
        case LayerKind::dense:
        case LayerKind::flatten:
            fail(ErrorKind::invalid_argument, "receptive_field: non-spatial layer " + s.describe());
        default: break;
        }
    }
    return r;
}

}  // namespace calcscore::nn
