#pragma once

// End-to-end orchestration: grid standardisation, candidate extraction,
// two-stage classification and sequential training of both networks.

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "calcscore/imagegrid.hpp"
#include "calcscore/phantom.hpp"
#include "calcscore/resample.hpp"
#include "calcscore/scoring.hpp"
#include "calcscore/stage1.hpp"
#include "calcscore/stage2.hpp"
#include "calcscore/training.hpp"

namespace calcscore {

struct GridConfig {
    double threshold_hu = kCalciumThresholdHu;
    double inplane_spacing_mm = 0.66;
    double slab_thickness_mm = 3.0;
    double slab_spacing_mm = 1.5;
};

struct Stage1Config {
    int rf_target = 131;
    int width = 32;
    int fusion_width = 128;
    int patch_size = 155;
    double gamma = 0.05;
    stage1::FusionWeights omega;
    double dropout = 0.35;
    nn::AdamConfig adam{5e-4, 0.9, 0.999, 1e-8, 5e-5};
    int batch_size = 64;
    int micro_batch = 8;
    int epochs = 10;
    int steps_per_epoch = 100;
    int validation_samples = 256;
};

struct Stage2Config {
    std::array<int, 3> widths = {16, 32, 64};
    int dense_width = 256;
    double dropout = 0.5;
    nn::AdamConfig adam{5e-4, 0.9, 0.999, 1e-8, 1e-5};
    int batch_size = 64;
    int epochs = 5;
    int steps_per_epoch = 100;
    int validation_samples = 256;
};

struct PipelineConfig {
    GridConfig grid;
    Stage1Config stage1;
    Stage2Config stage2;
    SplitFractions split;
    std::uint64_t seed = 0;
    int threads = 1;

    stage1::Cnn1Spec cnn1_spec() const {
        auto s = stage1::build_cnn1(stage1.rf_target, stage1.width, stage1.fusion_width);
        s.gamma = stage1.gamma;
        s.omega = stage1.omega;
        s.dropout = stage1.dropout;
        s.validate();
        return s;
    }
    stage2::Cnn2Spec cnn2_spec() const {
        auto s = stage2::build_cnn2(stage2.widths, stage2.dense_width);
        s.dropout = stage2.dropout;
        s.validate();
        return s;
    }

    void validate() const {
        require(grid.threshold_hu > -1024 && grid.inplane_spacing_mm > 0 && grid.slab_thickness_mm > 0 &&
                    grid.slab_spacing_mm > 0,
                ErrorKind::invalid_argument, "grid settings must be positive");
        require(stage1.patch_size >= stage1.rf_target && stage1.patch_size % 2 == 1, ErrorKind::invalid_argument,
                "stage1 patch_size must be odd and >= rf_target");
        for (const auto* a : {&stage1.adam, &stage2.adam})
            require(a->learning_rate > 0 && a->beta1 >= 0 && a->beta1 < 1 && a->beta2 >= 0 && a->beta2 < 1 &&
                        a->epsilon > 0 && a->weight_decay >= 0,
                    ErrorKind::invalid_argument, "invalid Adam settings");
        require(stage1.batch_size >= 2 && stage2.batch_size >= 2 && stage1.micro_batch >= 1,
                ErrorKind::invalid_argument, "batch sizes must be >= 2");
        require(stage1.epochs >= 0 && stage1.steps_per_epoch >= 1 && stage2.epochs >= 0 &&
                    stage2.steps_per_epoch >= 1 && stage1.validation_samples >= 0 && stage2.validation_samples >= 0,
                ErrorKind::invalid_argument, "invalid epoch settings");
        require(threads >= 1, ErrorKind::invalid_argument, "threads must be >= 1");
        split.validate();
        cnn1_spec();
        cnn2_spec();
    }
};

/// Thick-slab reconstruction (when the slab geometry differs) followed by
/// in-plane resampling to the standard spacing.
inline CtVolume standardize(const CtVolume& v, const GridConfig& g) {
    const bool slabs_ok = std::abs(v.spacing().z - g.slab_spacing_mm) < 1e-6 &&
                          std::abs(v.slice_thickness() - g.slab_thickness_mm) < 1e-6;
    if (slabs_ok) return resample_inplane(v, g.inplane_spacing_mm);
    return resample_inplane(reconstruct_slabs(v, g.slab_thickness_mm, g.slab_spacing_mm), g.inplane_spacing_mm);
}

struct Candidate {
    Index3 voxel;
    float hu = 0;
    int code = 0;  // provisional stage-1 class
    std::array<float, kNumClasses> probs{};
};

struct CandidateSet {
    std::vector<Candidate> items;
    std::vector<Index3> voxels() const {
        std::vector<Index3> v;
        v.reserve(items.size());
        for (const auto& c : items) v.push_back(c.voxel);
        return v;
    }
};

/// Every voxel with HU >= threshold, in storage order.
inline CandidateSet extract_candidates(const CtVolume& v, double threshold = kCalciumThresholdHu) {
    CandidateSet s;
    const Dims d = v.dims();
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x)
                if (v.at(z, y, x) >= threshold) s.items.push_back({{z, y, x}, v.at(z, y, x)});
    return s;
}

struct InferenceResult {
    LabelMap labels;               // on the input grid
    CtVolume standardized;         // network grid
    LabelMap stage1_labels;        // stage-1 decision on candidates, network grid
    LabelMap standardized_labels;  // final decision, network grid
    CandidateSet candidates;
    std::size_t stage1_positives = 0;
    std::size_t stage2_rejected = 0;
};

/// Stage-1 labelling of the candidates of an already standardised volume.
template <typename T>
void stage1_label_candidates(const CtVolume& s, stage1::Cnn1<T>& cnn1, CandidateSet& cands, LabelMap& out,
                             int threads) {
    out = s.like<std::uint8_t>(0);
    if (cands.items.empty()) return;
    auto probs = cnn1.dense_classify_volume(s, threads);
    for (auto& c : cands.items) {
        const std::size_t i = s.index(c.voxel.z, c.voxel.y, c.voxel.x);
        auto p = probs.at(probs.fused, i);
        std::copy(p.begin(), p.end(), c.probs.begin());
        c.code = nn::argmax(p);
        out.data()[i] = static_cast<std::uint8_t>(c.code);
    }
}

/// Two-stage labelling. A null `cnn2` accepts every stage-1 positive.
template <typename T>
InferenceResult run_inference(const CtVolume& v, stage1::Cnn1<T>& cnn1, stage2::Cnn2<T>* cnn2,
                              const PipelineConfig& cfg) {
    InferenceResult r;
    r.standardized = standardize(v, cfg.grid);
    const CtVolume& s = r.standardized;
    r.candidates = extract_candidates(s, cfg.grid.threshold_hu);
    stage1_label_candidates(s, cnn1, r.candidates, r.stage1_labels, cfg.threads);
    r.standardized_labels = r.stage1_labels;
    std::vector<Index3> positives;
    for (const auto& c : r.candidates.items)
        if (c.code != 0) positives.push_back(c.voxel);
    r.stage1_positives = positives.size();
    if (cnn2 && !positives.empty()) {
        auto p2 = cnn2->classify_candidates(s, positives, cfg.threads);
        for (std::size_t i = 0; i < positives.size(); ++i)
            if (!(p2[i][1] > p2[i][0])) {
                r.standardized_labels[positives[i]] = 0;
                ++r.stage2_rejected;
            }
    }
    r.labels = resample_labels_to(r.standardized_labels, v);
    return r;
}

/// A labelled scan of a training corpus.
struct Scan {
    std::string subject;
    Split split = Split::train;
    CtVolume ct;
    LabelMap labels;
};

/// Errors when a subject appears in more than one split.
inline void check_subject_splits(std::span<const Scan> scans) {
    std::map<std::string, Split> seen;
    for (const auto& s : scans) {
        auto [it, fresh] = seen.emplace(s.subject, s.split);
        require(fresh || it->second == s.split, ErrorKind::domain,
                "subject " + s.subject + " appears in both " + std::string(to_string(it->second)) + " and " +
                    std::string(to_string(s.split)) + " splits");
    }
}

struct VoxelRef {
    std::size_t scan = 0;
    Index3 voxel;
};

struct TrainingReport {
    std::vector<EpochRecord> log;
    std::size_t stage1_positive_voxels = 0;  // harvested over the training scans
    std::size_t stage2_training_voxels = 0;
    std::size_t stage2_true_calcium = 0;
    std::size_t stage2_false_positive = 0;
    bool stage2_background_fallback = false;  // stage 1 produced no false positives
    std::uint64_t stage1_steps = 0, stage2_steps = 0;
};

template <typename T = float>
struct TrainedModels {
    std::unique_ptr<stage1::Cnn1<T>> cnn1;
    std::unique_ptr<stage2::Cnn2<T>> cnn2;
    TrainingReport report;
};

namespace pipeline_detail {

struct Prepared {
    std::vector<CtVolume> ct;
    std::vector<LabelMap> labels;
    std::vector<VoxelRef> calcium, background;  // candidates (HU >= threshold) by reference label
};

inline Prepared prepare(std::span<const Scan* const> scans, const GridConfig& g) {
    Prepared p;
    for (const auto* s : scans) {
        require(s->labels.same_grid(s->ct), ErrorKind::invalid_argument, "scan " + s->subject + ": grids differ");
        CtVolume ct = standardize(s->ct, g);
        LabelMap lab = resample_labels_to(s->labels, ct);
        const std::size_t k = p.ct.size();
        for (const auto& c : extract_candidates(ct, g.threshold_hu).items)
            (is_calcium(lab[c.voxel]) ? p.calcium : p.background).push_back({k, c.voxel});
        p.ct.push_back(std::move(ct));
        p.labels.push_back(std::move(lab));
    }
    return p;
}

}  // namespace pipeline_detail

/// Trains stage 1 on balanced candidate minibatches, harvests its positives
/// over the training scans and trains stage 2 on them. Validation losses
/// are logged after every epoch.
template <typename T = float>
TrainedModels<T> train_pipeline(std::span<const Scan> scans, const PipelineConfig& cfg,
                                const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    check_subject_splits(scans);
    std::vector<const Scan*> train, val;
    for (const auto& s : scans)
        if (s.split == Split::train)
            train.push_back(&s);
        else if (s.split == Split::validation)
            val.push_back(&s);
    require(!train.empty(), ErrorKind::domain, "no training scans");
    auto tr = pipeline_detail::prepare(train, cfg.grid);
    auto va = pipeline_detail::prepare(val, cfg.grid);

    TrainedModels<T> m;
    m.cnn1 = std::make_unique<stage1::Cnn1<T>>(cfg.cnn1_spec(), cfg.seed);
    m.cnn2 = std::make_unique<stage2::Cnn2<T>>(cfg.cnn2_spec(), cfg.seed + 1);
    auto& rep = m.report;
    auto record = [&](const EpochRecord& r) {
        rep.log.push_back(r);
        if (on_epoch) on_epoch(r);
    };

    // Stage 1.
    const auto& c1 = cfg.stage1;
    const int rf = c1.rf_target;
    auto samples_of = [&](const pipeline_detail::Prepared& p, std::span<const VoxelRef> refs) {
        std::vector<stage1::TrainingSample> out;
        out.reserve(refs.size());
        for (const auto& r : refs) out.push_back(stage1::make_training_sample(p.ct[r.scan], p.labels[r.scan], r.voxel, c1.patch_size, rf));
        return out;
    };
    std::mt19937_64 rng(cfg.seed ^ 0x51ed270b27a5c3e1ULL);
    m.cnn1->dropout().reseed(cfg.seed ^ 0x7f4a7c15ULL);
    std::vector<stage1::TrainingSample> val1;
    if (!va.calcium.empty() && !va.background.empty() && c1.validation_samples >= 2) {
        std::mt19937_64 vr(cfg.seed ^ 0xabcdef12345ULL);
        auto refs = balanced_minibatch<VoxelRef>(va.calcium, va.background, c1.validation_samples, vr);
        val1 = samples_of(va, refs);
    }
    nn::OptimizerState<T> opt1{c1.adam};
    for (int e = 0; e < c1.epochs; ++e) {
        double sum = 0;
        for (int s = 0; s < c1.steps_per_epoch; ++s) {
            auto refs = balanced_minibatch<VoxelRef>(tr.calcium, tr.background, c1.batch_size, rng);
            auto batch = samples_of(tr, refs);
            sum += m.cnn1->train_step(batch, opt1, c1.micro_batch).total;
        }
        EpochRecord r{"cnn1", e + 1, opt1.step, sum / c1.steps_per_epoch, 0.0};
        if (!val1.empty()) r.validation_loss = m.cnn1->evaluate_loss(val1, c1.micro_batch).total;
        record(r);
    }
    rep.stage1_steps = opt1.step;

    // Stage-1 positives become the stage-2 training set.
    auto harvest = [&](const pipeline_detail::Prepared& p, std::vector<stage2::Cnn2Sample>& out) {
        std::size_t positives = 0;
        for (std::size_t k = 0; k < p.ct.size(); ++k) {
            auto cands = extract_candidates(p.ct[k], cfg.grid.threshold_hu);
            LabelMap l1;
            stage1_label_candidates(p.ct[k], *m.cnn1, cands, l1, cfg.threads);
            for (const auto& c : cands.items)
                if (c.code != 0) {
                    out.push_back({k, c.voxel, is_calcium(p.labels[k][c.voxel]) ? 1 : 0});
                    ++positives;
                }
        }
        return positives;
    };
    std::vector<stage2::Cnn2Sample> s2;
    rep.stage1_positive_voxels = harvest(tr, s2);
    rep.stage2_training_voxels = s2.size();
    for (const auto& s : s2) (s.label ? rep.stage2_true_calcium : rep.stage2_false_positive) += 1;
    require(rep.stage2_true_calcium > 0, ErrorKind::domain,
            "stage 1 found no true calcium in the training scans; stage 2 has no positive candidates");
    if (rep.stage2_false_positive == 0) {
        rep.stage2_background_fallback = true;
        for (const auto& b : tr.background) s2.push_back({b.scan, b.voxel, 0});
    }
    std::vector<stage2::Cnn2Sample> v2;
    if (!va.ct.empty()) {
        harvest(va, v2);
        if (v2.size() > static_cast<std::size_t>(cfg.stage2.validation_samples)) {
            std::mt19937_64 vr(cfg.seed ^ 0x1234567ULL);
            std::shuffle(v2.begin(), v2.end(), vr);
            v2.resize(static_cast<std::size_t>(cfg.stage2.validation_samples));
        }
    }

    stage2::Cnn2TrainConfig t2;
    t2.epochs = cfg.stage2.epochs;
    t2.steps_per_epoch = cfg.stage2.steps_per_epoch;
    t2.batch_size = cfg.stage2.batch_size;
    t2.adam = cfg.stage2.adam;
    t2.seed = cfg.seed + 2;
    auto log2 = stage2::train_cnn2<T>(*m.cnn2, tr.ct, s2, t2, va.ct, v2);
    for (const auto& r : log2) record(r);
    rep.stage2_steps = log2.empty() ? 0 : log2.back().step;
    return m;
}

}  // namespace calcscore
