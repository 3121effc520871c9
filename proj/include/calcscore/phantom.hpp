#pragma once

// Synthetic chest-CT phantoms with exact ground truth. The anatomy is a
// handful of geometric primitives on the standard grid: body ellipse, two
// lungs, a heart disc wrapped in epicardial fat, a descending aorta tube and
// a vertebral column. Calcified lesions are planted at class-specific loci.
// These are simplistic test objects, not realistic CT simulations.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "calcscore/imagegrid.hpp"

namespace calcscore {

enum class NoisePreset { soft, sharp };

inline std::string_view to_string(NoisePreset p) { return p == NoisePreset::soft ? "soft" : "sharp"; }
inline NoisePreset noise_preset(std::string_view s) {
    if (s == "soft") return NoisePreset::soft;
    if (s == "sharp") return NoisePreset::sharp;
    fail(ErrorKind::schema_violation, "unknown noise preset '" + std::string(s) + "'");
}

enum class BridgeTarget { spine, blob };

inline std::string_view to_string(BridgeTarget b) { return b == BridgeTarget::spine ? "spine" : "blob"; }
inline BridgeTarget bridge_target(std::string_view s) {
    if (s == "spine") return BridgeTarget::spine;
    if (s == "blob") return BridgeTarget::blob;
    fail(ErrorKind::schema_violation, "unknown bridge target '" + std::string(s) + "'");
}

struct LesionSpec {
    int count_min = 0, count_max = 0;
    double volume_min_mm3 = 20, volume_max_mm3 = 60;
    double hu_min = 250, hu_max = 500;
};

/// Coronary burden tier: lesions spread over LAD, LCX and RCA.
struct BurdenLevel {
    int lesions = 0;
    double volume_min_mm3 = 0, volume_max_mm3 = 0;
    double hu_min = 250, hu_max = 350;
};

/// Positions are fractions of the in-plane extent (row, column); radii are
/// fractions of the row extent.
struct PhantomLayout {
    double body_ry = 0.46, body_rx = 0.48;
    double lung_cy = 0.42, lung_dx = 0.24, lung_ry = 0.30, lung_rx = 0.17;
    double heart_cy = 0.42, heart_cx = 0.54, heart_r = 0.20;
    double fat_width_px = 3;
    double aorta_cy = 0.70, aorta_cx = 0.64, aorta_r = 0.06;
    double spine_cy = 0.84, spine_cx = 0.50, spine_r = 0.08;
};

struct PhantomConfig {
    Dims dims{24, 128, 128};
    Vec3 spacing{1.5, 0.66, 0.66};
    double slice_thickness = 3.0;
    NoisePreset preset = NoisePreset::soft;
    double sigma_soft = 20;
    double sigma_sharp = 35;
    double sharp_highpass = 0.6;  // fraction of the local 3x3 mean subtracted from the sharp noise field
    std::array<LesionSpec, kNumClasses> lesions = default_lesions();
    int burden_level = -1;  // 0..3 overrides the coronary lesion specs
    std::array<BurdenLevel, 4> burden_levels = {BurdenLevel{0, 0, 0, 250, 350},
                                                BurdenLevel{1, 25, 45, 220, 290},
                                                BurdenLevel{2, 90, 150, 320, 390},
                                                BurdenLevel{4, 260, 320, 450, 650}};
    PhantomLayout layout;
    int bridges = 0;
    BridgeTarget bridge_target = BridgeTarget::spine;
    int bridge_blob_voxels = 30;
    double bridge_hu = 250;
    bool isolate_lesions = true;  // clamp the 6-neighbour shell of every lesion below 130 HU
    int max_retries = 200;
    std::uint64_t seed = 0;

    static std::array<LesionSpec, kNumClasses> default_lesions() {
        std::array<LesionSpec, kNumClasses> l{};
        l[1] = {0, 1, 20, 80, 200, 500};
        l[2] = {0, 1, 20, 80, 200, 500};
        l[3] = {0, 1, 20, 80, 200, 500};
        l[4] = {1, 2, 40, 150, 250, 600};
        l[5] = {0, 1, 20, 60, 200, 450};
        l[6] = {0, 1, 20, 60, 200, 450};
        return l;
    }

    double sigma() const { return preset == NoisePreset::soft ? sigma_soft : sigma_sharp; }

    void validate() const {
        require(dims.z >= 1 && dims.y >= 8 && dims.x >= 8, ErrorKind::invalid_argument, "phantom grid too small");
        require(spacing.z > 0 && spacing.y > 0 && spacing.x > 0 && slice_thickness > 0, ErrorKind::invalid_argument,
                "phantom spacing and thickness must be positive");
        require(sigma_soft >= 0 && sigma_sharp >= 0, ErrorKind::invalid_argument, "noise sigma must be >= 0");
        require(sharp_highpass >= 0 && sharp_highpass <= 1, ErrorKind::invalid_argument,
                "sharp_highpass must be in [0,1]");
        for (int c = 1; c < kNumClasses; ++c) {
            const auto& s = lesions[static_cast<std::size_t>(c)];
            require(s.count_min >= 0 && s.count_max >= s.count_min, ErrorKind::invalid_argument,
                    "lesion counts of " + std::string(class_name(c)) + " invalid");
            require(s.volume_min_mm3 > 0 && s.volume_max_mm3 >= s.volume_min_mm3, ErrorKind::invalid_argument,
                    "lesion volumes of " + std::string(class_name(c)) + " invalid");
            require(s.hu_min >= 130 && s.hu_max >= s.hu_min && s.hu_max <= 3000, ErrorKind::invalid_argument,
                    "lesion HU range of " + std::string(class_name(c)) + " must lie in [130, 3000]");
        }
        for (const auto& b : burden_levels)
            require(b.lesions >= 0 && b.hu_min >= 130 && b.hu_max >= b.hu_min && b.hu_max <= 3000 &&
                        (b.lesions == 0 || (b.volume_min_mm3 > 0 && b.volume_max_mm3 >= b.volume_min_mm3)),
                    ErrorKind::invalid_argument, "invalid burden level");
        require(burden_level >= -1 && burden_level <= 3, ErrorKind::invalid_argument, "burden_level must be -1..3");
        require(bridges >= 0 && bridge_blob_voxels >= 1 && bridge_hu >= 130, ErrorKind::invalid_argument,
                "invalid bridge settings");
        require(max_retries >= 1, ErrorKind::invalid_argument, "max_retries must be >= 1");
    }
};

struct PlantedLesion {
    int code = 0;
    Index3 center;
    std::vector<Index3> voxels;
};

struct Phantom {
    CtVolume ct;
    LabelMap labels;
    std::vector<PlantedLesion> lesions;
    int bridges_planted = 0;

    std::array<double, kNumClasses> class_volumes_mm3() const {
        std::array<std::size_t, kNumClasses> n{};
        for (auto c : labels.data()) ++n[c];
        std::array<double, kNumClasses> v{};
        for (int c = 1; c < kNumClasses; ++c)
            v[static_cast<std::size_t>(c)] = static_cast<double>(n[static_cast<std::size_t>(c)]) * labels.voxel_volume();
        return v;
    }
};

namespace phantom_detail {

inline constexpr float kAir = -1000, kLung = -800, kTissue = 40, kFat = -100, kAortaWall = 50, kMarrow = 300,
                       kCortex = 700;

/// Squared normalised ellipse distance in voxel units.
inline double ell(double r, double c, double cr, double cc, double rr, double rc) {
    return (r - cr) * (r - cr) / (rr * rr) + (c - cc) * (c - cc) / (rc * rc);
}

inline void paint_anatomy(CtVolume& v, const PhantomConfig& cfg) {
    const auto& L = cfg.layout;
    const Dims d = v.dims();
    const double ny = d.y, nx = d.x;
    const double cy = ny / 2, cx = nx / 2;
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x) {
                const double r = y + 0.5, c = x + 0.5;
                float hu = kAir;
                if (ell(r, c, cy, cx, L.body_ry * ny, L.body_rx * nx) <= 1) hu = kTissue;
                for (double side : {-1.0, 1.0})
                    if (ell(r, c, L.lung_cy * ny, (0.5 + side * L.lung_dx) * nx, L.lung_ry * ny,
                                    L.lung_rx * nx) <= 1)
                        hu = kLung;
                const double hr = std::hypot(r - L.heart_cy * ny, c - L.heart_cx * nx);
                const double rh = L.heart_r * ny;
                if (hr <= rh + L.fat_width_px) hu = kFat;
                if (hr <= rh) hu = kTissue;
                const double ar = std::hypot(r - L.aorta_cy * ny, c - L.aorta_cx * nx);
                if (ar <= L.aorta_r * ny + L.fat_width_px) hu = kFat;
                if (ar <= L.aorta_r * ny) hu = ar >= L.aorta_r * ny - 1 ? kAortaWall : kTissue;
                const double sr = std::hypot(r - L.spine_cy * ny, c - L.spine_cx * nx);
                if (sr <= L.spine_r * ny) hu = sr >= L.spine_r * ny - 1.5 ? kCortex : kMarrow;
                v.at(z, y, x) = hu;
            }
}

/// The n voxels nearest (physically) to `center`, ties by index order.
inline std::vector<Index3> nearest_voxels(const Dims& d, const Vec3& sp, const Vec3& center, std::size_t n) {
    const double vox = sp.z * sp.y * sp.x;
    double radius = std::cbrt(3.0 * 2.0 * static_cast<double>(n) * vox / (4.0 * std::numbers::pi)) + 2 * sp.z;
    std::vector<std::pair<double, Index3>> cand;
    const int rz = static_cast<int>(std::ceil(radius / sp.z)), ry = static_cast<int>(std::ceil(radius / sp.y)),
              rx = static_cast<int>(std::ceil(radius / sp.x));
    const int kz = static_cast<int>(std::lround(center.z / sp.z)), ky = static_cast<int>(std::lround(center.y / sp.y)),
              kx = static_cast<int>(std::lround(center.x / sp.x));
    for (int z = kz - rz; z <= kz + rz; ++z)
        for (int y = ky - ry; y <= ky + ry; ++y)
            for (int x = kx - rx; x <= kx + rx; ++x) {
                if (z < 0 || y < 0 || x < 0 || z >= d.z || y >= d.y || x >= d.x) continue;
                const double dz = z * sp.z - center.z, dy = y * sp.y - center.y, dx = x * sp.x - center.x;
                cand.push_back({dz * dz + dy * dy + dx * dx, Index3{z, y, x}});
            }
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first < b.first : a.second < b.second;
    });
    std::vector<Index3> out;
    for (std::size_t i = 0; i < std::min(n, cand.size()); ++i) out.push_back(cand[i].second);
    return out;
}

inline constexpr std::array<std::array<int, 3>, 6> kSix = {
    {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};

}  // namespace phantom_detail

/// Generates one phantom. Deterministic in cfg (including cfg.seed).
inline Phantom generate(const PhantomConfig& cfg) {
    using namespace phantom_detail;
    cfg.validate();
    const Dims d = cfg.dims;
    const Vec3 sp = cfg.spacing;
    const auto& L = cfg.layout;
    Phantom ph;
    ph.ct = CtVolume(d, sp, {}, cfg.slice_thickness, kAir);
    paint_anatomy(ph.ct, cfg);
    ph.labels = ph.ct.like<std::uint8_t>(0);
    const CtVolume clean = ph.ct;

    std::mt19937_64 rng(cfg.seed);
    auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    auto pick = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

    // Lesion loci: returns the physical centre for a class draw.
    const double ny = d.y, nx = d.x, zext = (d.z - 1) * sp.z;
    auto at_angle = [&](double cy, double cx, double r, double deg) {
        const double t = deg * std::numbers::pi / 180.0;
        return std::array<double, 2>{(cy - r * std::cos(t)) * sp.y, (cx + r * std::sin(t)) * sp.x};
    };
    auto locus = [&](int code) -> Vec3 {
        const double hcy = L.heart_cy * ny - 0.5, hcx = L.heart_cx * nx - 0.5;
        const double rim = L.heart_r * ny + L.fat_width_px / 2;
        std::array<double, 2> p{};
        double z = 0;
        switch (code) {
        case 1: p = at_angle(hcy, hcx, rim, uni(20, 60)), z = uni(0.50, 0.90) * zext; break;
        case 2: p = at_angle(hcy, hcx, rim, uni(100, 150)), z = uni(0.35, 0.75) * zext; break;
        case 3: p = at_angle(hcy, hcx, rim, uni(-110, -50)), z = uni(0.15, 0.60) * zext; break;
        case 4:
            p = at_angle(L.aorta_cy * ny - 0.5, L.aorta_cx * nx - 0.5, L.aorta_r * ny - 0.5, uni(0, 360));
            z = uni(0.10, 0.90) * zext;
            break;
        case 5:
            p = {(hcy - 0.35 * L.heart_r * ny + uni(-1, 1)) * sp.y, (hcx - 0.25 * L.heart_r * ny + uni(-1, 1)) * sp.x};
            z = uni(0.60, 0.85) * zext;
            break;
        default:
            p = {(hcy + 0.25 * L.heart_r * ny + uni(-1, 1)) * sp.y, (hcx + 0.40 * L.heart_r * ny + uni(-1, 1)) * sp.x};
            z = uni(0.30, 0.55) * zext;
            break;
        }
        return {z, p[0], p[1]};
    };

    struct Request {
        int code;
        double volume, hu;
    };
    std::vector<Request> requests;
    for (int c = 1; c < kNumClasses; ++c) {
        if (cfg.burden_level >= 0 && is_coronary(c)) continue;
        const auto& s = cfg.lesions[static_cast<std::size_t>(c)];
        const int n = pick(s.count_min, s.count_max);
        for (int i = 0; i < n; ++i)
            requests.push_back({c, uni(s.volume_min_mm3, s.volume_max_mm3), uni(s.hu_min, s.hu_max)});
    }
    if (cfg.burden_level >= 0) {
        const auto& b = cfg.burden_levels[static_cast<std::size_t>(cfg.burden_level)];
        const int first = pick(1, 3);
        for (int i = 0; i < b.lesions; ++i)
            requests.push_back({1 + (first - 1 + i) % 3, uni(b.volume_min_mm3, b.volume_max_mm3), uni(b.hu_min, b.hu_max)});
    }

    // occupied: lesion voxels plus their 6-neighbour shells, so that no two
    // lesions touch and no lesion touches bone.
    std::vector<std::uint8_t> occupied(d.count(), 0);
    for (std::size_t i = 0; i < d.count(); ++i)
        if (clean.data()[i] >= 130) occupied[i] = 1;
    std::vector<float> lesion_hu(d.count(), 0.f);
    for (const auto& req : requests) {
        const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(req.volume / ph.ct.voxel_volume())));
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
            const Vec3 c = locus(req.code);
            auto vox = nearest_voxels(d, sp, c, n);
            if (vox.size() < n) continue;
            bool ok = true;
            for (const auto& p : vox) {
                if (occupied[ph.ct.index(p.z, p.y, p.x)]) ok = false;
                for (const auto& o : kSix) {
                    const int z = p.z + o[0], y = p.y + o[1], x = p.x + o[2];
                    if (ph.ct.contains(z, y, x) && occupied[ph.ct.index(z, y, x)]) ok = false;
                }
                if (!ok) break;
            }
            if (!ok) continue;
            const double rmax = std::cbrt(3.0 * static_cast<double>(n) * ph.ct.voxel_volume() / (4 * std::numbers::pi));
            for (const auto& p : vox) {
                const std::size_t i = ph.ct.index(p.z, p.y, p.x);
                const double dz = p.z * sp.z - c.z, dy = p.y * sp.y - c.y, dx = p.x * sp.x - c.x;
                const double rel = std::min(1.0, std::sqrt(dz * dz + dy * dy + dx * dx) / std::max(rmax, 1e-9));
                lesion_hu[i] = static_cast<float>(req.hu - 40.0 * rel);
                ph.labels.data()[i] = static_cast<std::uint8_t>(req.code);
            }
            for (const auto& p : vox) {
                occupied[ph.ct.index(p.z, p.y, p.x)] = 1;
                for (const auto& o : kSix) {
                    const int z = p.z + o[0], y = p.y + o[1], x = p.x + o[2];
                    if (ph.ct.contains(z, y, x)) occupied[ph.ct.index(z, y, x)] = 1;
                }
            }
            Index3 ci{static_cast<int>(std::lround(c.z / sp.z)), static_cast<int>(std::lround(c.y / sp.y)),
                      static_cast<int>(std::lround(c.x / sp.x))};
            ph.lesions.push_back({req.code, ci, std::move(vox)});
            placed = true;
        }
        require(placed, ErrorKind::domain,
                "cannot place a " + std::string(class_name(req.code)) + " lesion after " +
                    std::to_string(cfg.max_retries) + " attempts");
    }

    // Noise; the sharp preset subtracts part of the local in-plane mean,
    // which boosts high frequencies, then rescales to unit variance.
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> noise(d.count());
    for (auto& n : noise) n = gauss(rng);
    if (cfg.preset == NoisePreset::sharp && cfg.sharp_highpass > 0) {
        std::vector<double> hp(d.count());
        const double a = cfg.sharp_highpass;
        for (int z = 0; z < d.z; ++z)
            for (int y = 0; y < d.y; ++y)
                for (int x = 0; x < d.x; ++x) {
                    double s = 0;
                    int k = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx)
                            if (ph.ct.contains(z, y + dy, x + dx)) s += noise[ph.ct.index(z, y + dy, x + dx)], ++k;
                    hp[ph.ct.index(z, y, x)] = noise[ph.ct.index(z, y, x)] - a * s / k;
                }
        const double gain = 1.0 / std::sqrt((1 - a / 9) * (1 - a / 9) + 8 * (a / 9) * (a / 9));
        for (std::size_t i = 0; i < d.count(); ++i) noise[i] = hp[i] * gain;
    }
    const double sigma = cfg.sigma();
    auto& hu = ph.ct.data();
    const auto& lab = ph.labels.data();
    for (std::size_t i = 0; i < d.count(); ++i) {
        const double base = lab[i] ? lesion_hu[i] : hu[i];
        // Air outside the body stays noise-free so padding matches it exactly.
        const double n = clean.data()[i] == kAir ? 0.0 : sigma * noise[i];
        hu[i] = static_cast<float>(std::clamp(std::nearbyint(base + n), -1024.0, 3071.0)) + 0.f;
    }
    for (std::size_t i = 0; i < d.count(); ++i)
        if (lab[i]) hu[i] = std::max(hu[i], 130.f);
    if (cfg.isolate_lesions)
        for (const auto& les : ph.lesions)
            for (const auto& p : les.voxels)
                for (const auto& o : kSix) {
                    const int z = p.z + o[0], y = p.y + o[1], x = p.x + o[2];
                    if (!ph.ct.contains(z, y, x)) continue;
                    const std::size_t j = ph.ct.index(z, y, x);
                    if (!lab[j]) hu[j] = std::min(hu[j], 129.f);
                }

    // Bridges: an unlabeled supra-threshold voxel path from a lesion to the
    // spine or to a small unlabeled blob.
    for (int b = 0; b < cfg.bridges && !ph.lesions.empty(); ++b) {
        const auto& les = ph.lesions[static_cast<std::size_t>(b) % ph.lesions.size()];
        const Index3 from = les.voxels.front();
        Index3 to{};
        if (cfg.bridge_target == BridgeTarget::spine) {
            to = {from.z, static_cast<int>(L.spine_cy * ny), static_cast<int>(L.spine_cx * nx)};
        } else {
            const int dir = from.x < d.x / 2 ? 1 : -1;
            to = {from.z, from.y, std::clamp(from.x + dir * 8, 0, d.x - 1)};
            auto blob = nearest_voxels(d, sp, Vec3{to.z * sp.z, to.y * sp.y, to.x * sp.x},
                                       static_cast<std::size_t>(cfg.bridge_blob_voxels));
            for (const auto& p : blob) {
                const std::size_t j = ph.ct.index(p.z, p.y, p.x);
                if (!lab[j]) hu[j] = static_cast<float>(cfg.bridge_hu);
            }
        }
        Index3 p = from;
        auto mark = [&](const Index3& q) {
            const std::size_t j = ph.ct.index(q.z, q.y, q.x);
            if (!lab[j]) hu[j] = std::max(hu[j], static_cast<float>(cfg.bridge_hu));
        };
        while (p.y != to.y) {
            p.y += p.y < to.y ? 1 : -1;
            mark(p);
        }
        while (p.x != to.x) {
            p.x += p.x < to.x ? 1 : -1;
            mark(p);
        }
        ++ph.bridges_planted;
    }
    return ph;
}

enum class Split { train, validation, test };

inline std::string_view to_string(Split s) {
    return s == Split::train ? "train" : s == Split::validation ? "validation" : "test";
}
inline Split split_from(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    fail(ErrorKind::schema_violation, "unknown split '" + std::string(s) + "'");
}

struct SplitFractions {
    double train = 0.6, validation = 0.1;  // test takes the rest
    double sharp_fraction = 0.5;

    void validate() const {
        require(train > 0 && validation > 0 && train + validation < 1, ErrorKind::invalid_argument,
                "split fractions must be positive and leave room for a test split");
        require(sharp_fraction >= 0 && sharp_fraction <= 1, ErrorKind::invalid_argument,
                "sharp_fraction must be in [0,1]");
    }
};

struct CorpusEntry {
    std::string subject;
    Split split = Split::train;
    NoisePreset preset = NoisePreset::soft;
    int burden_level = 0;
    std::uint64_t seed = 0;
};

/// Subject-level plan of a corpus: ids, split, noise preset, coronary burden
/// and per-phantom seed. Subjects are shuffled into train/validation/test;
/// within each split the presets follow `sharp_fraction` and the burden
/// tiers cycle so that every split sees both presets and all four tiers.
inline std::vector<CorpusEntry> plan_corpus(int n, std::uint64_t seed, const SplitFractions& f = {}) {
    require(n >= 3, ErrorKind::invalid_argument, "a corpus needs at least 3 phantoms");
    f.validate();
    const int n_train = std::max(1, static_cast<int>(std::floor(n * f.train + 1e-9)));
    const int n_val = std::max(1, static_cast<int>(std::floor(n * f.validation + 1e-9)));
    require(n - n_train - n_val >= 1, ErrorKind::invalid_argument, "corpus too small for three splits");
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<CorpusEntry> out(static_cast<std::size_t>(n));
    std::array<int, 3> position{};
    for (int k = 0; k < n; ++k) {
        const int i = order[static_cast<std::size_t>(k)];
        auto& e = out[static_cast<std::size_t>(i)];
        char id[16];
        std::snprintf(id, sizeof id, "S%03d", i);
        e.subject = id;
        e.split = k < n_train ? Split::train : k < n_train + n_val ? Split::validation : Split::test;
        const int j = position[static_cast<std::size_t>(e.split)]++;
        const bool sharp = std::floor((j + 1) * f.sharp_fraction + 1e-9) > std::floor(j * f.sharp_fraction + 1e-9);
        e.preset = sharp ? NoisePreset::sharp : NoisePreset::soft;
        e.burden_level = (j + j / 2) % 4;
        Fnv1a h;
        h.update(&seed, sizeof seed);
        h.update(&i, sizeof i);
        e.seed = h.digest();
    }
    return out;
}

inline PhantomConfig config_for(const PhantomConfig& base, const CorpusEntry& e) {
    PhantomConfig c = base;
    c.preset = e.preset;
    c.burden_level = e.burden_level;
    c.seed = e.seed;
    return c;
}

}  // namespace calcscore
