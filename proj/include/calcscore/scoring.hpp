#pragma once

// Calcium quantification: per-class volume, slice-overlap-normalised
// Agatston score and the four-tier risk category.

#include <array>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "calcscore/imagegrid.hpp"

namespace calcscore {

inline constexpr double kCalciumThresholdHu = 130.0;

inline double volume_score(const LabelMap& l, int code) {
    std::size_t n = 0;
    for (auto c : l.data()) n += c == code;
    return static_cast<double>(n) * l.voxel_volume();
}

/// Agatston density weight of a component's peak HU; 0 below 130 HU.
inline int density_weight(double peak_hu) {
    if (peak_hu >= 400) return 4;
    if (peak_hu >= 300) return 3;
    if (peak_hu >= 200) return 2;
    if (peak_hu >= kCalciumThresholdHu) return 1;
    return 0;
}

/// Sum over axial slices and 4-connected in-slice components of the voxels
/// selected by `member`: area (mm^2) x density weight of the component's peak,
/// multiplied by spacing.z / slice_thickness.
inline double agatston_score(const CtVolume& v, const LabelMap& l, const std::function<bool(int)>& member) {
    require(l.same_grid(v), ErrorKind::invalid_argument, "agatston_score: volume and labels on different grids");
    require(v.slice_thickness() > 0, ErrorKind::invalid_argument, "agatston_score: slice thickness missing");
    const Dims d = v.dims();
    const double area = v.spacing().y * v.spacing().x;
    std::vector<int> stack;
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(d.y) * d.x);
    double total = 0;
    for (int z = 0; z < d.z; ++z) {
        std::fill(seen.begin(), seen.end(), 0);
        auto in = [&](int y, int x) { return member(l.at(z, y, x)); };
        for (int y0 = 0; y0 < d.y; ++y0)
            for (int x0 = 0; x0 < d.x; ++x0) {
                const int s = y0 * d.x + x0;
                if (seen[static_cast<std::size_t>(s)] || !in(y0, x0)) continue;
                seen[static_cast<std::size_t>(s)] = 1;
                stack.assign(1, s);
                std::size_t count = 0;
                double peak = -1e30;
                while (!stack.empty()) {
                    const int p = stack.back();
                    stack.pop_back();
                    const int y = p / d.x, x = p % d.x;
                    ++count;
                    peak = std::max(peak, static_cast<double>(v.at(z, y, x)));
                    const int ny[4] = {y - 1, y + 1, y, y}, nx[4] = {x, x, x - 1, x + 1};
                    for (int k = 0; k < 4; ++k) {
                        if (ny[k] < 0 || ny[k] >= d.y || nx[k] < 0 || nx[k] >= d.x) continue;
                        const int q = ny[k] * d.x + nx[k];
                        if (seen[static_cast<std::size_t>(q)] || !in(ny[k], nx[k])) continue;
                        seen[static_cast<std::size_t>(q)] = 1;
                        stack.push_back(q);
                    }
                }
                total += static_cast<double>(count) * area * density_weight(peak);
            }
    }
    return total * v.spacing().z / v.slice_thickness();
}

inline double agatston_score(const CtVolume& v, const LabelMap& l, int code) {
    return agatston_score(v, l, [code](int c) { return c == code; });
}

enum class RiskCategory { I = 0, II = 1, III = 2, IV = 3 };

inline std::string_view to_string(RiskCategory r) {
    static constexpr std::array<std::string_view, 4> names = {"I", "II", "III", "IV"};
    return names[static_cast<std::size_t>(r)];
}

inline RiskCategory risk_category_from(std::string_view s) {
    for (int i = 0; i < 4; ++i)
        if (to_string(static_cast<RiskCategory>(i)) == s) return static_cast<RiskCategory>(i);
    fail(ErrorKind::schema_violation, "unknown risk category '" + std::string(s) + "'");
}

/// I: [0,10], II: (10,100], III: (100,1000], IV: > 1000.
inline RiskCategory risk_category(double cac_agatston) {
    require(cac_agatston >= 0, ErrorKind::domain, "negative Agatston score");
    if (cac_agatston <= 10) return RiskCategory::I;
    if (cac_agatston <= 100) return RiskCategory::II;
    if (cac_agatston <= 1000) return RiskCategory::III;
    return RiskCategory::IV;
}

struct ClassScore {
    double volume_mm3 = 0;
    double agatston = 0;
};

struct ScoreReport {
    static constexpr int kFormatVersion = 1;
    std::string scan_id;
    std::array<ClassScore, kNumClasses> per_class{};  // index = class code; entry 0 unused
    double cac_volume_mm3 = 0;                         // LAD + LCX + RCA
    double cac_agatston = 0;
    RiskCategory risk = RiskCategory::I;
    std::string cnn1_fingerprint, cnn2_fingerprint;
};

inline ScoreReport score_scan(const CtVolume& v, const LabelMap& l, std::string scan_id,
                              std::string cnn1_fingerprint = {}, std::string cnn2_fingerprint = {}) {
    ScoreReport r;
    r.scan_id = std::move(scan_id);
    r.cnn1_fingerprint = std::move(cnn1_fingerprint);
    r.cnn2_fingerprint = std::move(cnn2_fingerprint);
    for (int c = 1; c < kNumClasses; ++c) {
        auto& s = r.per_class[static_cast<std::size_t>(c)];
        s.volume_mm3 = volume_score(l, c);
        s.agatston = agatston_score(v, l, c);
        if (is_coronary(c)) {
            r.cac_volume_mm3 += s.volume_mm3;
            r.cac_agatston += s.agatston;
        }
    }
    r.risk = risk_category(r.cac_agatston);
    return r;
}

inline nlohmann::ordered_json to_json(const ScoreReport& r) {
    nlohmann::ordered_json j;
    j["format"] = "calcscore-score-report";
    j["format_version"] = ScoreReport::kFormatVersion;
    j["scan_id"] = r.scan_id;
    auto& classes = j["classes"];
    classes = nlohmann::ordered_json::object();
    for (int c = 1; c < kNumClasses; ++c) {
        const auto& s = r.per_class[static_cast<std::size_t>(c)];
        classes[std::string(class_name(c))] = {{"volume_mm3", s.volume_mm3}, {"agatston", s.agatston}};
    }
    j["cac"] = {{"volume_mm3", r.cac_volume_mm3}, {"agatston", r.cac_agatston}};
    j["risk_category"] = to_string(r.risk);
    j["weights"] = {{"cnn1_fingerprint", r.cnn1_fingerprint}, {"cnn2_fingerprint", r.cnn2_fingerprint}};
    return j;
}

inline ScoreReport score_report_from_json(const nlohmann::ordered_json& j) {
    try {
        require(j.at("format") == "calcscore-score-report", ErrorKind::schema_violation, "not a score report");
        ScoreReport r;
        r.scan_id = j.at("scan_id").get<std::string>();
        for (int c = 1; c < kNumClasses; ++c) {
            const auto& e = j.at("classes").at(std::string(class_name(c)));
            r.per_class[static_cast<std::size_t>(c)] = {e.at("volume_mm3").get<double>(), e.at("agatston").get<double>()};
        }
        r.cac_volume_mm3 = j.at("cac").at("volume_mm3").get<double>();
        r.cac_agatston = j.at("cac").at("agatston").get<double>();
        r.risk = risk_category_from(j.at("risk_category").get<std::string>());
        r.cnn1_fingerprint = j.at("weights").at("cnn1_fingerprint").get<std::string>();
        r.cnn2_fingerprint = j.at("weights").at("cnn2_fingerprint").get<std::string>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::schema_violation, std::string("score report: ") + e.what());
    }
}

/// Human-readable table of a report.
inline std::string format_table(const ScoreReport& r) {
    std::string s = "scan " + r.scan_id + "\n";
    char line[128];
    std::snprintf(line, sizeof line, "%-14s %12s %12s\n", "class", "volume_mm3", "agatston");
    s += line;
    for (int c = 1; c < kNumClasses; ++c) {
        const auto& e = r.per_class[static_cast<std::size_t>(c)];
        std::snprintf(line, sizeof line, "%-14s %12.2f %12.2f\n", std::string(class_name(c)).c_str(), e.volume_mm3,
                      e.agatston);
        s += line;
    }
    std::snprintf(line, sizeof line, "%-14s %12.2f %12.2f\n", "cac", r.cac_volume_mm3, r.cac_agatston);
    s += line;
    s += "risk category  " + std::string(to_string(r.risk)) + "\n";
    return s;
}

}  // namespace calcscore
