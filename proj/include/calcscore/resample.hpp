#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "calcscore/imagegrid.hpp"

namespace calcscore {

namespace detail {

inline constexpr double kGridEps = 1e-9;

/// Snaps a continuous index to the nearest integer when it is within
/// floating-point noise of it.
inline double snap_index(double u) {
    double r = std::round(u);
    return std::abs(u - r) < 1e-9 ? r : u;
}

/// Linear interpolation weights along one axis with edge clamping.
struct Tap {
    int lo = 0, hi = 0;
    double w = 0;  // weight of `hi`
};

inline Tap linear_tap(double u, int n) {
    u = snap_index(u);
    if (u <= 0) return {0, 0, 0};
    if (u >= n - 1) return {n - 1, n - 1, 0};
    int lo = static_cast<int>(std::floor(u));
    return {lo, lo + 1, u - lo};
}

/// Nearest centre along one axis; ties go to the lower index.
inline int nearest_index(double u, int n) {
    int i = static_cast<int>(std::ceil(snap_index(u) - 0.5));
    return std::clamp(i, 0, n - 1);
}

}  // namespace detail

/// Averages thin axial slices into thick slabs. Slab k averages every input
/// slice whose centre lies in [k*spacing, k*spacing + thickness) measured from
/// the first input centre; the trailing slab may be partial.
inline CtVolume reconstruct_slabs(const CtVolume& v, double thickness, double spacing) {
    require(thickness > 0 && spacing > 0, ErrorKind::invalid_argument,
            "slab thickness and spacing must be positive");
    const double sz = v.spacing().z;
    require(sz <= thickness + detail::kGridEps, ErrorKind::invalid_argument,
            "input slice spacing exceeds slab thickness");
    const int nz = v.dims().z;
    require(nz * sz + detail::kGridEps >= thickness, ErrorKind::domain, "volume too thin");

    const double last = (nz - 1) * sz;
    int n_out = 1;
    if (last >= thickness - detail::kGridEps)
        n_out = static_cast<int>(std::floor((last - thickness) / spacing + detail::kGridEps)) + 2;
    // the rule above guarantees the last slab reaches the last slice; drop
    // slabs that would start past it
    while (n_out > 1 && (n_out - 1) * spacing > last + detail::kGridEps) --n_out;

    const Dims in = v.dims();
    Dims out_dims{n_out, in.y, in.x};
    Vec3 origin = v.origin();
    origin.z += thickness / 2 - sz / 2;
    CtVolume out(out_dims, Vec3{spacing, v.spacing().y, v.spacing().x}, origin, thickness);

    const std::size_t plane = static_cast<std::size_t>(in.y) * static_cast<std::size_t>(in.x);
    std::vector<double> acc(plane);
    for (int k = 0; k < n_out; ++k) {
        const double a = k * spacing;
        std::fill(acc.begin(), acc.end(), 0.0);
        int count = 0;
        for (int s = 0; s < nz; ++s) {
            double c = s * sz;
            if (c < a - detail::kGridEps || c >= a + thickness - detail::kGridEps) continue;
            const float* src = v.data().data() + static_cast<std::size_t>(s) * plane;
            for (std::size_t i = 0; i < plane; ++i) acc[i] += src[i];
            ++count;
        }
        require(count > 0, ErrorKind::domain, "empty slab");
        float* dst = out.data().data() + static_cast<std::size_t>(k) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<float>(acc[i] / count);
    }
    return out;
}

/// Bilinear in-plane resampling to an isotropic target spacing. The output
/// grid starts at the same physical edge as the input and covers the input
/// extent rounded to whole output voxels. Samples outside the input clamp to
/// the border.
inline CtVolume resample_inplane(const CtVolume& v, double target) {
    require(target > 0, ErrorKind::invalid_argument, "target spacing must be positive");
    const Dims in = v.dims();
    const Vec3 s = v.spacing();
    if (s.y == target && s.x == target) return v;

    const int ny = std::max(1, static_cast<int>(std::lround(in.y * s.y / target)));
    const int nx = std::max(1, static_cast<int>(std::lround(in.x * s.x / target)));
    Vec3 origin = v.origin();
    origin.y = origin.y - s.y / 2 + target / 2;
    origin.x = origin.x - s.x / 2 + target / 2;
    CtVolume out(Dims{in.z, ny, nx}, Vec3{s.z, target, target}, origin, v.slice_thickness());

    std::vector<detail::Tap> ty(static_cast<std::size_t>(ny)), tx(static_cast<std::size_t>(nx));
    for (int j = 0; j < ny; ++j)
        ty[static_cast<std::size_t>(j)] =
            detail::linear_tap((origin.y + j * target - v.origin().y) / s.y, in.y);
    for (int i = 0; i < nx; ++i)
        tx[static_cast<std::size_t>(i)] =
            detail::linear_tap((origin.x + i * target - v.origin().x) / s.x, in.x);

    parallel_for(in.z, default_threads(), [&](int z) {
        for (int j = 0; j < ny; ++j) {
            const auto& a = ty[static_cast<std::size_t>(j)];
            for (int i = 0; i < nx; ++i) {
                const auto& b = tx[static_cast<std::size_t>(i)];
                double v00 = v(z, a.lo, b.lo), v01 = v(z, a.lo, b.hi);
                double v10 = v(z, a.hi, b.lo), v11 = v(z, a.hi, b.hi);
                double top = v00 + (v01 - v00) * b.w;
                double bot = v10 + (v11 - v10) * b.w;
                out(z, j, i) = static_cast<float>(top + (bot - top) * a.w);
            }
        }
    });
    return out;
}

/// Nearest-neighbour transfer of a label map onto another grid, in physical
/// coordinates. Codes are copied, never blended.
template <typename G>
LabelMap resample_labels_to(const LabelMap& l, const G& target_grid) {
    auto sb = l.bounds();
    auto tb = target_grid.bounds();
    bool overlap = sb[0].z < tb[1].z && tb[0].z < sb[1].z && sb[0].y < tb[1].y && tb[0].y < sb[1].y &&
                   sb[0].x < tb[1].x && tb[0].x < sb[1].x;
    require(overlap, ErrorKind::domain, "label map and target grid do not overlap");

    LabelMap out = target_grid.template like<std::uint8_t>(0);
    if (l.same_grid(target_grid)) {
        out.data() = l.data();
        return out;
    }
    const Dims td = target_grid.dims();
    const Dims sd = l.dims();
    auto map_axis = [](int n, double t_origin, double t_step, double s_origin, double s_step, int sn) {
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            idx[static_cast<std::size_t>(i)] =
                detail::nearest_index((t_origin + i * t_step - s_origin) / s_step, sn);
        return idx;
    };
    const Vec3 to = target_grid.origin(), ts = target_grid.spacing();
    const Vec3 so = l.origin(), ss = l.spacing();
    auto iz = map_axis(td.z, to.z, ts.z, so.z, ss.z, sd.z);
    auto iy = map_axis(td.y, to.y, ts.y, so.y, ss.y, sd.y);
    auto ix = map_axis(td.x, to.x, ts.x, so.x, ss.x, sd.x);
    for (int z = 0; z < td.z; ++z)
        for (int y = 0; y < td.y; ++y)
            for (int x = 0; x < td.x; ++x)
                out(z, y, x) = l(iz[static_cast<std::size_t>(z)], iy[static_cast<std::size_t>(y)],
                                 ix[static_cast<std::size_t>(x)]);
    return out;
}

}  // namespace calcscore
