#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "calcscore/imagegrid.hpp"
#include "calcscore/imagegrid_io.hpp"
#include "calcscore/patches.hpp"
#include "calcscore/resample.hpp"
#include "test_support.hpp"

using namespace calcscore;
using calcscore::testing::error_kind_of;
using calcscore::testing::random_volume;
using calcscore::testing::scratch_dir;
using Catch::Approx;

TEST_CASE("class codes map one-to-one onto names", "[imagegrid]") {
    const std::array<std::string_view, kNumClasses> expected = {"background", "lad", "lcx", "rca",
                                                                "tac",        "aortic_valve", "mitral_valve"};
    for (int c = 0; c < kNumClasses; ++c) {
        CHECK(class_name(c) == expected[static_cast<std::size_t>(c)]);
        CHECK(class_code(class_name(c)) == c);
    }
    CHECK(error_kind_of([] { class_code("aorta"); }) == ErrorKind::unknown_class_code);
    CHECK(is_coronary(1));
    CHECK(is_coronary(3));
    CHECK_FALSE(is_coronary(4));
    CHECK_FALSE(is_calcium(0));
}

TEST_CASE("volume geometry invariants are enforced", "[imagegrid]") {
    CHECK(error_kind_of([] { CtVolume({0, 2, 2}, {1, 1, 1}); }) == ErrorKind::invalid_argument);
    CHECK(error_kind_of([] { CtVolume({1, 2, 2}, {1, 0, 1}); }) == ErrorKind::invalid_argument);
    CHECK(error_kind_of([] { CtVolume({1, 2, 2}, {1, 1, 1}, {}, 1.0, std::vector<float>(3)); }) ==
          ErrorKind::size_mismatch);
    CtVolume v({2, 3, 4}, {1.5, 0.5, 0.25}, {10, 20, 30}, 3.0);
    CHECK(v.voxel_volume() == Approx(1.5 * 0.5 * 0.25));
    CHECK(v.index(1, 2, 3) == 23u);
    CHECK(v.unravel(23) == Index3{1, 2, 3});
    auto p = v.physical(1, 2, 3);
    CHECK(p.z == Approx(11.5));
    CHECK(p.y == Approx(21.0));
    CHECK(p.x == Approx(30.75));
}

TEST_CASE("slab reconstruction", "[imagegrid][slabs]") {
    SECTION("constant volume stays constant") {
        CtVolume v({10, 3, 3}, {0.7, 1, 1}, {}, 0.7, 42.f);
        for (auto [t, s] : {std::pair{3.0, 1.5}, {2.0, 2.0}, {1.0, 0.5}}) {
            auto out = reconstruct_slabs(v, t, s);
            for (float f : out.data()) CHECK(f == 42.f);
            CHECK(out.spacing().z == s);
            CHECK(out.slice_thickness() == t);
        }
    }
    SECTION("identity when slabs match the input slices") {
        auto v = random_volume({6, 4, 5}, 3, {1.5, 0.66, 0.66});
        auto out = reconstruct_slabs(v, 1.5, 1.5);
        REQUIRE(out.dims() == v.dims());
        CHECK(out.data() == v.data());
    }
    SECTION("hand-evaluated z profile with a partial trailing slab") {
        CtVolume v({4, 1, 1}, {1, 1, 1}, {}, 1.0, std::vector<float>{0, 100, 200, 300});
        auto out = reconstruct_slabs(v, 3.0, 1.5);
        REQUIRE(out.dims().z == 2);
        CHECK(out.data()[0] == Approx(100.0));
        CHECK(out.data()[1] == Approx(250.0));
    }
    SECTION("slab means lie within the range of their slices") {
        auto v = random_volume({17, 4, 4}, 9, {0.5, 1, 1});
        auto out = reconstruct_slabs(v, 3.0, 1.5);
        for (int k = 0; k < out.dims().z; ++k)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) {
                    float lo = 1e9f, hi = -1e9f;
                    for (int s = 0; s < 17; ++s) {
                        double c = s * 0.5;
                        if (c < k * 1.5 - 1e-9 || c >= k * 1.5 + 3.0 - 1e-9) continue;
                        lo = std::min(lo, v(s, y, x));
                        hi = std::max(hi, v(s, y, x));
                    }
                    CHECK(out(k, y, x) >= lo - 1e-3f);
                    CHECK(out(k, y, x) <= hi + 1e-3f);
                }
    }
    SECTION("too thin a volume is rejected") {
        CtVolume v({2, 1, 1}, {1, 1, 1});
        CHECK(error_kind_of([&] { reconstruct_slabs(v, 3.0, 1.5); }) == ErrorKind::domain);
    }
}

/// Scalar bilinear oracle with edge clamping, evaluated at a physical point.
static double bilinear_oracle(const CtVolume& v, int z, double py, double px) {
    auto axis = [](double p, double o, double s, int n) {
        double u = std::clamp((p - o) / s, 0.0, static_cast<double>(n - 1));
        int lo = static_cast<int>(std::floor(u));
        int hi = std::min(lo + 1, n - 1);
        return std::tuple{lo, hi, u - lo};
    };
    auto [y0, y1, wy] = axis(py, v.origin().y, v.spacing().y, v.dims().y);
    auto [x0, x1, wx] = axis(px, v.origin().x, v.spacing().x, v.dims().x);
    return (1 - wy) * ((1 - wx) * v(z, y0, x0) + wx * v(z, y0, x1)) + wy * ((1 - wx) * v(z, y1, x0) + wx * v(z, y1, x1));
}

TEST_CASE("in-plane resampling", "[imagegrid][resample]") {
    SECTION("identity at the target spacing") {
        auto v = random_volume({2, 5, 6}, 1);
        auto out = resample_inplane(v, 0.66);
        CHECK(out.same_grid(v));
        CHECK(out.data() == v.data());
    }
    SECTION("constant slices stay constant") {
        CtVolume v({2, 7, 5}, {1.5, 0.8, 0.8}, {}, 3.0, -37.f);
        for (double t : {0.3, 0.66, 1.7}) {
            auto out = resample_inplane(v, t);
            for (float f : out.data()) CHECK(f == -37.f);
        }
    }
    SECTION("2x2 slice against the pointwise bilinear oracle") {
        CtVolume v({1, 2, 2}, {1, 1, 1}, {}, 1.0, std::vector<float>{0, 100, 0, 100});
        auto out = resample_inplane(v, 0.5);
        REQUIRE(out.dims() == Dims{1, 4, 4});
        // Output starts at the same physical edge: first centre at -0.25 mm.
        CHECK(out.origin().x == Approx(-0.25));
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                auto p = out.physical(0, y, x);
                CHECK(out(0, y, x) == Approx(bilinear_oracle(v, 0, p.y, p.x)).margin(1e-4));
            }
        CHECK(out(0, 0, 0) == 0.f);
        CHECK(out(0, 0, 1) == Approx(25.0));
        CHECK(out(0, 0, 2) == Approx(75.0));
        CHECK(out(0, 0, 3) == 100.f);
    }
    SECTION("random volume against the oracle at a non-integer ratio") {
        auto v = random_volume({2, 9, 11}, 5, {1.5, 0.78, 0.91});
        auto out = resample_inplane(v, 0.66);
        for (int z = 0; z < 2; ++z)
            for (int y = 0; y < out.dims().y; ++y)
                for (int x = 0; x < out.dims().x; ++x) {
                    auto p = out.physical(z, y, x);
                    CHECK(out(z, y, x) == Approx(bilinear_oracle(v, z, p.y, p.x)).margin(1e-2));
                }
    }
    SECTION("linear ramps are reproduced exactly at interior samples") {
        CtVolume v({1, 12, 12}, {1, 1.0, 1.0});
        for (int y = 0; y < 12; ++y)
            for (int x = 0; x < 12; ++x) v(0, y, x) = static_cast<float>(3 * y - 2 * x);
        auto out = resample_inplane(v, 0.5);
        for (int y = 0; y < out.dims().y; ++y)
            for (int x = 0; x < out.dims().x; ++x) {
                auto p = out.physical(0, y, x);
                if (p.y < 0 || p.y > 11 || p.x < 0 || p.x > 11) continue;
                CHECK(out(0, y, x) == Approx(3 * p.y - 2 * p.x).margin(1e-4));
            }
    }
    SECTION("round trip of a constant volume is exact") {
        CtVolume v({1, 10, 10}, {1.5, 0.66, 0.66}, {}, 3.0, 130.f);
        auto back = resample_inplane(resample_inplane(v, 0.5), 0.66);
        CHECK(back.dims() == v.dims());
        for (float f : back.data()) CHECK(f == 130.f);
    }
}

TEST_CASE("nearest-neighbour label resampling", "[imagegrid][resample]") {
    SECTION("identical grids copy the data") {
        LabelMap l({2, 3, 3}, {1.5, 0.66, 0.66});
        l(1, 2, 0) = 4;
        auto out = resample_labels_to(l, l);
        CHECK(out.data() == l.data());
    }
    SECTION("background stays background") {
        LabelMap l({2, 3, 3}, {1.5, 0.66, 0.66});
        CtVolume g({4, 7, 5}, {0.75, 0.3, 0.5});
        const auto out = resample_labels_to(l, g);
        for (auto c : out.data()) CHECK(c == 0);
    }
    SECTION("single voxel under 2x upsampling matches an exhaustive search") {
        LabelMap l({3, 4, 4}, {2, 1, 1});
        l(1, 2, 1) = 5;
        CtVolume g({6, 8, 8}, {1, 0.5, 0.5}, {-0.5, -0.25, -0.25});
        auto out = resample_labels_to(l, g);
        std::size_t count = 0;
        for (int z = 0; z < 6; ++z)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) {
                    auto p = g.physical(z, y, x);
                    // Exhaustive nearest source centre per axis; ties to the lower index.
                    Index3 best;
                    double bz = 1e9, by = 1e9, bx = 1e9;
                    for (int k = 0; k < 3; ++k)
                        if (std::abs(l.physical(k, 0, 0).z - p.z) < bz - 1e-9) bz = std::abs(l.physical(k, 0, 0).z - p.z), best.z = k;
                    for (int j = 0; j < 4; ++j)
                        if (std::abs(l.physical(0, j, 0).y - p.y) < by - 1e-9) by = std::abs(l.physical(0, j, 0).y - p.y), best.y = j;
                    for (int i = 0; i < 4; ++i)
                        if (std::abs(l.physical(0, 0, i).x - p.x) < bx - 1e-9) bx = std::abs(l.physical(0, 0, i).x - p.x), best.x = i;
                    CHECK(out(z, y, x) == l[best]);
                    count += out(z, y, x) == 5;
                }
        CHECK(count == 8u);
    }
    SECTION("only source codes appear") {
        LabelMap l({3, 5, 5}, {1.5, 0.66, 0.66});
        l(0, 1, 1) = 2;
        l(2, 3, 4) = 6;
        CtVolume g({5, 9, 7}, {0.9, 0.4, 0.5});
        const auto out = resample_labels_to(l, g);
        for (auto c : out.data()) CHECK((c == 0 || c == 2 || c == 6));
    }
    SECTION("disjoint grids are rejected") {
        LabelMap l({2, 2, 2}, {1, 1, 1});
        CtVolume g({2, 2, 2}, {1, 1, 1}, {100, 0, 0});
        CHECK(error_kind_of([&] { resample_labels_to(l, g); }) == ErrorKind::domain);
    }
}

TEST_CASE("volume and label files round-trip losslessly", "[imagegrid][io]") {
    auto dir = scratch_dir("imagegrid_io");
    SECTION("integer HU volume is stored as int16") {
        CtVolume v({3, 4, 5}, {1.5, 0.66, 0.66}, {-12.5, 3.25, 7.0}, 3.0);
        std::mt19937 rng(4);
        for (auto& f : v.data()) f = static_cast<float>(std::uniform_int_distribution<int>(-1024, 3071)(rng));
        save_volume(dir / "a.hdr", v);
        auto back = load_volume(dir / "a.hdr");
        CHECK(back.data() == v.data());
        CHECK(back.same_grid(v));
        CHECK(back.slice_thickness() == v.slice_thickness());
        CHECK(std::filesystem::file_size(dir / "a.raw") == v.size() * 2);
    }
    SECTION("fractional HU volume is stored as float32 bit-exactly") {
        auto v = random_volume({2, 3, 4}, 8);
        save_volume(dir / "b.hdr", v);
        auto back = load_volume(dir / "b.hdr");
        CHECK(std::memcmp(back.data().data(), v.data().data(), v.size() * sizeof(float)) == 0);
        CHECK(std::filesystem::file_size(dir / "b.raw") == v.size() * 4);
    }
    SECTION("label maps") {
        LabelMap l({2, 3, 4}, {1.5, 0.66, 0.66});
        for (std::size_t i = 0; i < l.size(); ++i) l.data()[i] = static_cast<std::uint8_t>(i % kNumClasses);
        save_labels(dir / "l.hdr", l);
        auto back = load_labels(dir / "l.hdr");
        CHECK(back.data() == l.data());
        CHECK(back.same_grid(l));
    }
    SECTION("header fields") {
        CtVolume v({1, 2, 3}, {1.5, 0.66, 0.66}, {}, 3.0);
        save_volume(dir / "h.hdr", v);
        std::ifstream in(dir / "h.hdr");
        std::string text((std::istreambuf_iterator<char>(in)), {});
        CHECK(text.find("dims = 1 2 3") != std::string::npos);
        CHECK(text.find("spacing = 1.500000 0.660000 0.660000") != std::string::npos);
        CHECK(text.find("element_type = int16") != std::string::npos);
        CHECK(text.find("byte_order = little") != std::string::npos);
        CHECK(text.find("data_file = h.raw") != std::string::npos);
    }
    SECTION("truncated payload is a size mismatch") {
        CtVolume v({2, 2, 2}, {1, 1, 1});
        save_volume(dir / "t.hdr", v);
        std::filesystem::resize_file(dir / "t.raw", 15);
        CHECK(error_kind_of([&] { load_volume(dir / "t.hdr"); }) == ErrorKind::size_mismatch);
    }
    SECTION("a header declaring code 7 is an unknown class code") {
        LabelMap l({1, 1, 2}, {1, 1, 1});
        save_labels(dir / "c.hdr", l);
        std::ofstream(dir / "c.hdr", std::ios::app) << "";
        std::ifstream in(dir / "c.hdr");
        std::string text((std::istreambuf_iterator<char>(in)), {});
        in.close();
        auto pos = text.find("6:mitral_valve");
        text.insert(pos + std::string("6:mitral_valve").size(), " 7:other");
        std::ofstream(dir / "c.hdr") << text;
        CHECK(error_kind_of([&] { load_labels(dir / "c.hdr"); }) == ErrorKind::unknown_class_code);
    }
    SECTION("a payload holding code 7 is an unknown class code") {
        LabelMap l({1, 1, 2}, {1, 1, 1});
        save_labels(dir / "p.hdr", l);
        std::ofstream(dir / "p.raw", std::ios::binary) << std::string("\x01\x07", 2);
        CHECK(error_kind_of([&] { load_labels(dir / "p.hdr"); }) == ErrorKind::unknown_class_code);
    }
    SECTION("malformed headers") {
        std::ofstream(dir / "m.hdr") << "format = calcscore-volume\nversion = 1\nnonsense\n";
        CHECK(error_kind_of([&] { load_volume(dir / "m.hdr"); }) == ErrorKind::malformed_header);
        std::ofstream(dir / "n.hdr") << "format = calcscore-volume\nversion = 1\nbyte_order = little\nkind = ct\n";
        CHECK(error_kind_of([&] { load_volume(dir / "n.hdr"); }) == ErrorKind::malformed_header);
        CHECK(error_kind_of([&] { load_volume(dir / "missing.hdr"); }) == ErrorKind::missing_input);
    }
}

TEST_CASE("orthogonal patches intersect at the centre voxel", "[imagegrid][patches]") {
    auto v = random_volume({9, 11, 13}, 2);
    for (Index3 c : {Index3{4, 5, 6}, Index3{0, 0, 0}, Index3{8, 10, 12}}) {
        auto s = extract_ortho_patches(v, c, 7);
        for (auto o : kOrientations) CHECK(s.at(o, 3, 3) == v[c]);
    }
    auto s = extract_ortho_patches(v, {0, 0, 0}, 5);
    CHECK(s.at(Orientation::axial, 0, 0) == kPaddingHu);
    CHECK(s.at(Orientation::axial, 2, 3) == v(0, 0, 1));
    CHECK(error_kind_of([&] { extract_ortho_patches(v, {1, 1, 1}, 4); }) == ErrorKind::invalid_argument);
    CHECK(normalize_hu(-2000.f) == 0.f);
    CHECK(normalize_hu(3000.f) == 1.f);
    CHECK(normalize_hu(1000.f) == Approx(0.5));
}
