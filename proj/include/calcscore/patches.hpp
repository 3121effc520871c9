#pragma once

#include <algorithm>
#include <array>
#include <vector>

#include "calcscore/imagegrid.hpp"
#include "calcscore/nn/tensor.hpp"

namespace calcscore {

/// HU assigned outside the volume when patches or padded slices cross the border.
inline constexpr float kPaddingHu = -1000.f;

/// Network input scaling: clamp to [-1000, 3000] HU, then map linearly to [0, 1].
inline float normalize_hu(float hu) { return (std::clamp(hu, -1000.f, 3000.f) + 1000.f) / 4000.f; }

/// Plane orientations. Axial planes are indexed (y, x) at fixed z; sagittal
/// (z, y) at fixed x; coronal (z, x) at fixed y.
enum class Orientation { axial = 0, sagittal = 1, coronal = 2 };
inline constexpr std::array<Orientation, 3> kOrientations = {Orientation::axial, Orientation::sagittal,
                                                               Orientation::coronal};
inline constexpr std::array<const char*, 3> kOrientationNames = {"axial", "sagittal", "coronal"};

/// Volume index of in-plane position (r, c) on the plane through `at`.
inline Index3 plane_to_volume(Orientation o, const Index3& at, int r, int c) {
    switch (o) {
    case Orientation::axial: return {at.z, r, c};
    case Orientation::sagittal: return {r, c, at.x};
    case Orientation::coronal: return {r, at.y, c};
    }
    return at;
}

/// (rows, cols) of a plane and the in-plane coordinates of a voxel.
inline std::array<int, 2> plane_extent(Orientation o, const Dims& d) {
    switch (o) {
    case Orientation::axial: return {d.y, d.x};
    case Orientation::sagittal: return {d.z, d.y};
    case Orientation::coronal: return {d.z, d.x};
    }
    return {0, 0};
}

inline std::array<int, 2> in_plane(Orientation o, const Index3& p) {
    switch (o) {
    case Orientation::axial: return {p.y, p.x};
    case Orientation::sagittal: return {p.z, p.y};
    case Orientation::coronal: return {p.z, p.x};
    }
    return {0, 0};
}

inline int plane_count(Orientation o, const Dims& d) {
    switch (o) {
    case Orientation::axial: return d.z;
    case Orientation::sagittal: return d.x;
    case Orientation::coronal: return d.y;
    }
    return 0;
}

inline Index3 plane_anchor(Orientation o, int slice) {
    switch (o) {
    case Orientation::axial: return {slice, 0, 0};
    case Orientation::sagittal: return {0, 0, slice};
    case Orientation::coronal: return {0, slice, 0};
    }
    return {};
}

/// size x size square sampled on the plane of orientation `o` through
/// `center`, centred on it. Out-of-volume samples take `outside`.
template <typename V>
std::vector<V> extract_plane_patch(const Volume<V>& v, Orientation o, const Index3& center, int size, V outside) {
    std::vector<V> out(static_cast<std::size_t>(size) * static_cast<std::size_t>(size));
    const int half = size / 2;
    auto [cr, cc] = in_plane(o, center);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            Index3 p = plane_to_volume(o, center, cr - half + r, cc - half + c);
            out[static_cast<std::size_t>(r) * size + c] = v.get_or(p.z, p.y, p.x, outside);
        }
    return out;
}

/// Three orthogonal HU patches of equal odd size intersecting at one voxel.
struct OrthoPatchSet {
    Index3 center;
    int size = 0;
    std::array<std::vector<float>, 3> planes;  // axial, sagittal, coronal; row-major

    float at(Orientation o, int r, int c) const {
        return planes[static_cast<std::size_t>(o)][static_cast<std::size_t>(r) * size + c];
    }
};

inline OrthoPatchSet extract_ortho_patches(const CtVolume& v, const Index3& center, int size) {
    require(size >= 1 && size % 2 == 1, ErrorKind::invalid_argument, "patch size must be odd");
    OrthoPatchSet s{center, size, {}};
    for (auto o : kOrientations)
        s.planes[static_cast<std::size_t>(o)] = extract_plane_patch(v, o, center, size, kPaddingHu);
    return s;
}

/// Stacks one orientation of a batch of patch sets into [B, 1, P, P], normalised.
template <typename T>
nn::Tensor<T> stack_patches(std::span<const OrthoPatchSet> batch, Orientation o) {
    require(!batch.empty(), ErrorKind::invalid_argument, "empty patch batch");
    const int p = batch[0].size;
    nn::Tensor<T> t({static_cast<int>(batch.size()), 1, p, p});
    T* dst = t.data();
    for (const auto& s : batch) {
        require(s.size == p, ErrorKind::invalid_argument, "patch sizes differ within a batch");
        for (float hu : s.planes[static_cast<std::size_t>(o)]) *dst++ = static_cast<T>(normalize_hu(hu));
    }
    return t;
}

/// Padded, normalised plane through the volume: [1, 1, rows + 2*pad, cols + 2*pad].
template <typename T>
nn::Tensor<T> padded_plane(const CtVolume& v, Orientation o, int slice, int pad) {
    auto [rows, cols] = plane_extent(o, v.dims());
    nn::Tensor<T> t({1, 1, rows + 2 * pad, cols + 2 * pad}, static_cast<T>(normalize_hu(kPaddingHu)));
    const Index3 anchor = plane_anchor(o, slice);
    const int width = cols + 2 * pad;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            Index3 p = plane_to_volume(o, anchor, r, c);
            t[static_cast<std::size_t>(r + pad) * width + c + pad] = static_cast<T>(normalize_hu(v[p]));
        }
    return t;
}

}  // namespace calcscore
