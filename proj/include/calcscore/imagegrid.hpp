#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "calcscore/common.hpp"

namespace calcscore {

/// Anatomical label codes. The numeric values are part of the file format.
enum class ClassCode : std::uint8_t {
    background = 0,
    lad = 1,  // includes the left main artery
    lcx = 2,
    rca = 3,
    tac = 4,
    aortic_valve = 5,
    mitral_valve = 6,
};

inline constexpr int kNumClasses = 7;

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "background", "lad", "lcx", "rca", "tac", "aortic_valve", "mitral_valve"};

inline std::string_view class_name(int code) {
    require(code >= 0 && code < kNumClasses, ErrorKind::unknown_class_code,
            "unknown class code " + std::to_string(code));
    return kClassNames[static_cast<std::size_t>(code)];
}

inline int class_code(std::string_view name) {
    for (int c = 0; c < kNumClasses; ++c)
        if (kClassNames[static_cast<std::size_t>(c)] == name) return c;
    fail(ErrorKind::unknown_class_code, "unknown class name '" + std::string(name) + "'");
}

inline bool is_calcium(int code) { return code >= 1 && code < kNumClasses; }
inline bool is_coronary(int code) { return code >= 1 && code <= 3; }

/// Physical triple in (z, y, x) order, millimetres.
struct Vec3 {
    double z = 0, y = 0, x = 0;
    friend bool operator==(const Vec3&, const Vec3&) = default;
};

struct Dims {
    int z = 0, y = 0, x = 0;
    std::size_t count() const {
        return static_cast<std::size_t>(z) * static_cast<std::size_t>(y) *
               static_cast<std::size_t>(x);
    }
    friend bool operator==(const Dims&, const Dims&) = default;
};

struct Index3 {
    int z = 0, y = 0, x = 0;
    friend bool operator==(const Index3&, const Index3&) = default;
    friend auto operator<=>(const Index3&, const Index3&) = default;
};

/// Regular voxel grid. Voxel (k, j, i) has its centre at
/// origin + (k * spacing.z, j * spacing.y, i * spacing.x); the origin is the
/// centre of the first voxel. Storage is x-fastest, then y, then z.
template <typename V>
class Volume {
public:
    using value_type = V;

    Volume() = default;

    Volume(Dims dims, Vec3 spacing, Vec3 origin = {}, double slice_thickness = 0.0, V fill = V{})
        : dims_(dims), spacing_(spacing), origin_(origin),
          slice_thickness_(slice_thickness > 0 ? slice_thickness : spacing.z),
          data_(dims.count(), fill) {
        check_geometry();
    }

    Volume(Dims dims, Vec3 spacing, Vec3 origin, double slice_thickness, std::vector<V> data)
        : dims_(dims), spacing_(spacing), origin_(origin),
          slice_thickness_(slice_thickness > 0 ? slice_thickness : spacing.z),
          data_(std::move(data)) {
        check_geometry();
        require(data_.size() == dims_.count(), ErrorKind::size_mismatch,
                "voxel payload does not match dims");
    }

    const Dims& dims() const { return dims_; }
    const Vec3& spacing() const { return spacing_; }
    const Vec3& origin() const { return origin_; }
    double slice_thickness() const { return slice_thickness_; }
    double voxel_volume() const { return spacing_.z * spacing_.y * spacing_.x; }

    std::size_t size() const { return data_.size(); }
    const std::vector<V>& data() const { return data_; }
    std::vector<V>& data() { return data_; }

    std::size_t index(int z, int y, int x) const {
        return (static_cast<std::size_t>(z) * static_cast<std::size_t>(dims_.y) +
                static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(dims_.x) +
               static_cast<std::size_t>(x);
    }
    Index3 unravel(std::size_t i) const {
        Index3 r;
        r.x = static_cast<int>(i % static_cast<std::size_t>(dims_.x));
        i /= static_cast<std::size_t>(dims_.x);
        r.y = static_cast<int>(i % static_cast<std::size_t>(dims_.y));
        r.z = static_cast<int>(i / static_cast<std::size_t>(dims_.y));
        return r;
    }

    bool contains(int z, int y, int x) const {
        return z >= 0 && y >= 0 && x >= 0 && z < dims_.z && y < dims_.y && x < dims_.x;
    }

    V& at(int z, int y, int x) { return data_[index(z, y, x)]; }
    const V& at(int z, int y, int x) const { return data_[index(z, y, x)]; }
    V& operator()(int z, int y, int x) { return at(z, y, x); }
    const V& operator()(int z, int y, int x) const { return at(z, y, x); }
    V& operator[](const Index3& p) { return at(p.z, p.y, p.x); }
    const V& operator[](const Index3& p) const { return at(p.z, p.y, p.x); }

    /// Value at (z, y, x), or `outside` when the index is out of bounds.
    V get_or(int z, int y, int x, V outside) const {
        return contains(z, y, x) ? at(z, y, x) : outside;
    }

    Vec3 physical(double k, double j, double i) const {
        return {origin_.z + k * spacing_.z, origin_.y + j * spacing_.y, origin_.x + i * spacing_.x};
    }

    /// Physical extent [first centre - half voxel, last centre + half voxel].
    std::array<Vec3, 2> bounds() const {
        return {Vec3{origin_.z - spacing_.z / 2, origin_.y - spacing_.y / 2, origin_.x - spacing_.x / 2},
                Vec3{origin_.z + (dims_.z - 0.5) * spacing_.z, origin_.y + (dims_.y - 0.5) * spacing_.y,
                     origin_.x + (dims_.x - 0.5) * spacing_.x}};
    }

    bool same_grid(const auto& other) const {
        return dims_ == other.dims() && spacing_ == other.spacing() && origin_ == other.origin();
    }

    /// A volume of a different element type sharing this grid.
    template <typename W>
    Volume<W> like(W fill = W{}) const {
        return Volume<W>(dims_, spacing_, origin_, slice_thickness_, fill);
    }

private:
    void check_geometry() const {
        require(dims_.z >= 1 && dims_.y >= 1 && dims_.x >= 1, ErrorKind::invalid_argument,
                "volume dimensions must be >= 1");
        require(spacing_.z > 0 && spacing_.y > 0 && spacing_.x > 0, ErrorKind::invalid_argument,
                "voxel spacing must be positive");
        require(slice_thickness_ > 0, ErrorKind::invalid_argument, "slice thickness must be positive");
    }

    Dims dims_{};
    Vec3 spacing_{1, 1, 1};
    Vec3 origin_{};
    double slice_thickness_ = 1.0;
    std::vector<V> data_;
};

/// HU intensities.
using CtVolume = Volume<float>;
/// Class codes 0..6 aligned to a CtVolume grid.
using LabelMap = Volume<std::uint8_t>;

inline void validate(const CtVolume& v) {
    for (float f : v.data())
        require(std::isfinite(f), ErrorKind::invalid_argument, "non-finite HU value");
}

inline void validate(const LabelMap& l) {
    for (auto c : l.data())
        require(c < kNumClasses, ErrorKind::unknown_class_code,
                "unknown class code " + std::to_string(static_cast<int>(c)));
}

}  // namespace calcscore
