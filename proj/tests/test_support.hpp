#pragma once

// Helpers shared by the unit and acceptance tests.

#include <filesystem>
#include <random>
#include <string>

#include "calcscore/imagegrid.hpp"

namespace calcscore::testing {

/// Fresh empty directory under the system temp directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("calcscore_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline CtVolume random_volume(Dims d, std::uint64_t seed, Vec3 spacing = {1.5, 0.66, 0.66}, float lo = -1000.f,
                              float hi = 1500.f) {
    CtVolume v(d, spacing, {}, 3.0);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    for (auto& f : v.data()) f = u(rng);
    return v;
}

template <typename F>
ErrorKind error_kind_of(F&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    throw std::runtime_error("expected a calcscore::Error");
}

}  // namespace calcscore::testing
