#pragma once

// Agreement statistics between predicted and reference labelings, risk
// category agreement and lesion-level conversion of voxel labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "calcscore/imagegrid.hpp"
#include "calcscore/scoring.hpp"

namespace calcscore {

/// Selects the class a statistic refers to: one code, or any calcium (1-6).
struct ClassSelector {
    int code = -1;  // -1 = any calcium class
    bool operator()(int c) const { return code < 0 ? is_calcium(c) : c == code; }
    static ClassSelector any_calcium() { return {}; }
};

struct AgreementStats {
    double tp_mm3 = 0, fp_mm3 = 0, fn_mm3 = 0;

    /// 100 TP / (TP + FN); 100 when the reference is empty.
    double sensitivity_pct() const { return tp_mm3 + fn_mm3 > 0 ? 100.0 * tp_mm3 / (tp_mm3 + fn_mm3) : 100.0; }
    /// 2TP / (2TP + FP + FN); 1 when both labelings are empty.
    double f1() const {
        const double den = 2 * tp_mm3 + fp_mm3 + fn_mm3;
        return den > 0 ? 2 * tp_mm3 / den : 1.0;
    }
    AgreementStats& operator+=(const AgreementStats& o) {
        tp_mm3 += o.tp_mm3;
        fp_mm3 += o.fp_mm3;
        fn_mm3 += o.fn_mm3;
        return *this;
    }
};

inline AgreementStats volume_agreement(const LabelMap& pred, const LabelMap& ref, ClassSelector sel = {}) {
    require(pred.same_grid(ref), ErrorKind::invalid_argument, "volume_agreement: grids differ");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = sel(pred.data()[i]), r = sel(ref.data()[i]);
        tp += p && r;
        fp += p && !r;
        fn += !p && r;
    }
    const double vv = pred.voxel_volume();
    return {static_cast<double>(tp) * vv, static_cast<double>(fp) * vv, static_cast<double>(fn) * vv};
}

/// Corpus summary: pooled volumes plus per-scan averages.
struct CorpusAgreement {
    AgreementStats pooled;
    double mean_f1_per_scan = 0;
    double mean_sensitivity_pct_per_scan = 0;
    double mean_fp_mm3_per_scan = 0;
    std::size_t scans = 0;
};

inline CorpusAgreement summarize(std::span<const AgreementStats> per_scan) {
    CorpusAgreement c;
    c.scans = per_scan.size();
    for (const auto& s : per_scan) {
        c.pooled += s;
        c.mean_f1_per_scan += s.f1();
        c.mean_sensitivity_pct_per_scan += s.sensitivity_pct();
        c.mean_fp_mm3_per_scan += s.fp_mm3;
    }
    if (c.scans) {
        const double n = static_cast<double>(c.scans);
        c.mean_f1_per_scan /= n;
        c.mean_sensitivity_pct_per_scan /= n;
        c.mean_fp_mm3_per_scan /= n;
    }
    return c;
}

/// k x k counts; rows are the reference category, columns the prediction.
struct ConfusionMatrix {
    int k = 4;
    std::vector<long long> counts = std::vector<long long>(16, 0);

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int k_) : k(k_), counts(static_cast<std::size_t>(k_) * k_, 0) {
        require(k_ >= 2, ErrorKind::invalid_argument, "confusion matrix needs k >= 2");
    }
    ConfusionMatrix(int k_, std::vector<long long> c) : k(k_), counts(std::move(c)) {
        require(k_ >= 2 && counts.size() == static_cast<std::size_t>(k_) * k_, ErrorKind::size_mismatch,
                "confusion matrix must be k x k");
        for (auto v : counts) require(v >= 0, ErrorKind::invalid_argument, "negative confusion count");
    }
    long long& at(int i, int j) { return counts[static_cast<std::size_t>(i) * k + j]; }
    long long at(int i, int j) const { return counts[static_cast<std::size_t>(i) * k + j]; }
    long long total() const {
        long long t = 0;
        for (auto v : counts) t += v;
        return t;
    }
};

/// Linearly weighted kappa, w_ij = |i - j| / (k - 1).
inline double weighted_kappa(const ConfusionMatrix& m) {
    const long long n = m.total();
    require(n > 0, ErrorKind::domain, "weighted_kappa of an empty matrix");
    std::vector<double> row(static_cast<std::size_t>(m.k), 0), col(static_cast<std::size_t>(m.k), 0);
    for (int i = 0; i < m.k; ++i)
        for (int j = 0; j < m.k; ++j) {
            row[static_cast<std::size_t>(i)] += static_cast<double>(m.at(i, j)) / static_cast<double>(n);
            col[static_cast<std::size_t>(j)] += static_cast<double>(m.at(i, j)) / static_cast<double>(n);
        }
    double obs = 0, exp = 0;
    for (int i = 0; i < m.k; ++i)
        for (int j = 0; j < m.k; ++j) {
            const double w = std::abs(i - j) / static_cast<double>(m.k - 1);
            obs += w * static_cast<double>(m.at(i, j)) / static_cast<double>(n);
            exp += w * row[static_cast<std::size_t>(i)] * col[static_cast<std::size_t>(j)];
        }
    if (obs == 0) return 1.0;
    return 1.0 - obs / exp;
}

/// Whitespace-separated integers, k rows of k.
inline ConfusionMatrix parse_confusion_matrix(const std::string& text, int k = 4) {
    std::istringstream is(text);
    std::vector<long long> v;
    std::string tok;
    while (is >> tok) {
        try {
            std::size_t used = 0;
            long long x = std::stoll(tok, &used);
            require(used == tok.size(), ErrorKind::schema_violation, "non-integer matrix entry '" + tok + "'");
            v.push_back(x);
        } catch (const std::logic_error&) {
            fail(ErrorKind::schema_violation, "non-integer matrix entry '" + tok + "'");
        }
    }
    require(v.size() == static_cast<std::size_t>(k) * k, ErrorKind::schema_violation,
            "matrix needs " + std::to_string(k * k) + " integers, got " + std::to_string(v.size()));
    for (auto x : v) require(x >= 0, ErrorKind::schema_violation, "negative matrix entry");
    return ConfusionMatrix(k, std::move(v));
}

inline std::string format_confusion_matrix(const ConfusionMatrix& m) {
    std::string s;
    for (int i = 0; i < m.k; ++i) {
        for (int j = 0; j < m.k; ++j) s += (j ? " " : "") + std::to_string(m.at(i, j));
        s += "\n";
    }
    return s;
}

/// Risk-category agreement over reports matched by scan id.
inline ConfusionMatrix risk_confusion(std::span<const ScoreReport> pred, std::span<const ScoreReport> ref) {
    std::map<std::string, RiskCategory> p;
    for (const auto& r : pred) {
        require(!p.count(r.scan_id), ErrorKind::invalid_argument, "duplicate predicted scan id " + r.scan_id);
        p[r.scan_id] = r.risk;
    }
    require(pred.size() == ref.size(), ErrorKind::invalid_argument, "report sets differ in size");
    ConfusionMatrix m(4);
    for (const auto& r : ref) {
        auto it = p.find(r.scan_id);
        require(it != p.end(), ErrorKind::invalid_argument, "no prediction for scan id " + r.scan_id);
        ++m.at(static_cast<int>(r.risk), static_cast<int>(it->second));
    }
    return m;
}

struct LesionizeResult {
    LabelMap labels;
    double seed_volume_mm3 = 0;
    double grown_volume_mm3 = 0;
    double ratio = 1;  // grown / seed; 1 without seeds
    bool excluded = false;
};

/// Grows every reference-labelled voxel into its 6-connected component of
/// voxels >= threshold HU. Each component takes the majority code of its
/// seeds, ties going to the lowest code. Scans whose labelled volume grows
/// by more than `exclusion_ratio` are flagged.
inline LesionizeResult lesionize(const LabelMap& ref, const CtVolume& v, double threshold = kCalciumThresholdHu,
                                 double exclusion_ratio = 5.0) {
    require(ref.same_grid(v), ErrorKind::invalid_argument, "lesionize: grids differ");
    const Dims d = v.dims();
    LesionizeResult out;
    out.labels = ref.like<std::uint8_t>(0);
    std::vector<std::uint8_t> seen(d.count(), 0);
    std::vector<std::size_t> stack, component;
    std::size_t seeds_total = 0, grown_total = 0;
    const std::size_t plane = static_cast<std::size_t>(d.y) * d.x;
    for (std::size_t s = 0; s < d.count(); ++s) {
        if (!is_calcium(ref.data()[s])) continue;
        ++seeds_total;
        if (seen[s]) continue;
        // Seeds below threshold form single-voxel lesions.
        seen[s] = 1;
        stack.assign(1, s);
        component.clear();
        std::array<std::size_t, kNumClasses> votes{};
        const bool grows = v.data()[s] >= threshold;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            component.push_back(p);
            ++votes[ref.data()[p]];
            if (!grows) break;
            const int z = static_cast<int>(p / plane), y = static_cast<int>((p % plane) / d.x),
                      x = static_cast<int>(p % d.x);
            const int nb[6][3] = {{z - 1, y, x}, {z + 1, y, x}, {z, y - 1, x}, {z, y + 1, x}, {z, y, x - 1}, {z, y, x + 1}};
            for (const auto& q : nb) {
                if (!v.contains(q[0], q[1], q[2])) continue;
                const std::size_t j = v.index(q[0], q[1], q[2]);
                if (seen[j] || v.data()[j] < threshold) continue;
                seen[j] = 1;
                stack.push_back(j);
            }
        }
        int best = 1;
        for (int c = 2; c < kNumClasses; ++c)
            if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(best)]) best = c;
        for (auto p : component) out.labels.data()[p] = static_cast<std::uint8_t>(best);
        grown_total += component.size();
    }
    out.seed_volume_mm3 = static_cast<double>(seeds_total) * v.voxel_volume();
    out.grown_volume_mm3 = static_cast<double>(grown_total) * v.voxel_volume();
    out.ratio = seeds_total ? static_cast<double>(grown_total) / static_cast<double>(seeds_total) : 1.0;
    out.excluded = out.ratio > exclusion_ratio;
    return out;
}

}  // namespace calcscore
