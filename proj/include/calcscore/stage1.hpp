#pragma once

// First-stage network: three orientation subnetworks of stacked dilated 3x3
// convolutions (independent weights), an auxiliary 7-class softmax head on
// each, and a fusion head over the concatenated centre features. Everything
// is convolutional along the plane, so whole slices can be classified at
// once and the result equals patch-wise evaluation.

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "calcscore/imagegrid.hpp"
#include "calcscore/nn/adam.hpp"
#include "calcscore/nn/layers.hpp"
#include "calcscore/nn/loss.hpp"
#include "calcscore/nn/receptive_field.hpp"
#include "calcscore/nn/serialize.hpp"
#include "calcscore/patches.hpp"

namespace calcscore::stage1 {

/// Weights of the fused output (network head N and auxiliary heads A, S, C).
struct FusionWeights {
    double network = 0.5;
    double axial = 1.0 / 6.0;
    double sagittal = 1.0 / 6.0;
    double coronal = 1.0 / 6.0;

    double aux(Orientation o) const {
        return o == Orientation::axial ? axial : o == Orientation::sagittal ? sagittal : coronal;
    }
    bool uses_aux() const { return axial != 0 || sagittal != 0 || coronal != 0; }
    void validate() const {
        require(network >= 0 && axial >= 0 && sagittal >= 0 && coronal >= 0, ErrorKind::invalid_argument,
                "fusion weights must be non-negative");
        require(std::abs(network + axial + sagittal + coronal - 1.0) <= 1e-9, ErrorKind::invalid_argument,
                "fusion weights must sum to 1");
    }
};

/// Dilations (1, 1, 2, 4, ..., D, 1) of 3x3 convolutions. Their receptive
/// field is 4D + 3, so the reachable targets are 11, 19, 35, 67, 131, 259, ...
inline std::vector<int> dilation_ladder(int rf_target) {
    std::vector<int> d = {1, 1};
    int rf = 5;
    for (int step = 2; rf < rf_target - 2; step *= 2) {
        d.push_back(step);
        rf += 2 * step;
    }
    d.push_back(1);
    rf += 2;
    require(rf == rf_target && d.size() >= 4, ErrorKind::invalid_argument,
            "receptive field " + std::to_string(rf_target) + " is not reachable by the dilation ladder");
    return d;
}

struct Cnn1Spec {
    int rf_target = 131;
    std::vector<int> dilations;
    int width = 32;          // filters per subnetwork convolution
    int fusion_width = 128;  // filters of the layer before the fused output
    double dropout = 0.35;   // on the fusion hidden layer, training only
    double gamma = 0.05;     // auxiliary loss weight
    FusionWeights omega;

    std::vector<nn::LayerSpec> subnetwork() const {
        std::vector<nn::LayerSpec> s;
        int in = 1;
        for (int d : dilations) {
            s.push_back(nn::LayerSpec::conv(in, width, 3, d));
            s.push_back(nn::LayerSpec::pointwise(nn::LayerKind::elu));
            in = width;
        }
        return s;
    }

    int receptive_field() const { return nn::receptive_field(subnetwork()).rf; }

    std::string architecture() const {
        nn::LayerSpec cat = nn::LayerSpec::pointwise(nn::LayerKind::concat);
        cat.out = 3 * width;
        nn::LayerSpec drop = nn::LayerSpec::pointwise(nn::LayerKind::dropout);
        drop.drop = dropout;
        std::vector<nn::LayerSpec> fusion = {cat,
                                             nn::LayerSpec::dense(3 * width, fusion_width),
                                             nn::LayerSpec::pointwise(nn::LayerKind::elu),
                                             drop,
                                             nn::LayerSpec::dense(fusion_width, kNumClasses),
                                             nn::LayerSpec::pointwise(nn::LayerKind::softmax)};
        std::vector<nn::LayerSpec> aux = {nn::LayerSpec::conv(width, kNumClasses, 1, 1),
                                          nn::LayerSpec::pointwise(nn::LayerKind::softmax)};
        return "cnn1 subnet[" + nn::describe_architecture(subnetwork()) + "] x3 aux[" +
               nn::describe_architecture(aux) + "] x3 fusion[" + nn::describe_architecture(fusion) + "]";
    }

    std::string fingerprint() const { return nn::fingerprint_of(architecture()); }

    void validate() const {
        require(width >= 1 && fusion_width >= 1, ErrorKind::invalid_argument, "layer widths must be >= 1");
        require(gamma >= 0, ErrorKind::invalid_argument, "gamma must be >= 0");
        require(dropout >= 0 && dropout < 1, ErrorKind::invalid_argument, "dropout must be in [0,1)");
        omega.validate();
        require(receptive_field() == rf_target, ErrorKind::invalid_argument, "dilations do not give rf_target");
    }
};

/// Reference architecture for a receptive field target. The published
/// configuration is build_cnn1(131) with widths 32 and 128.
inline Cnn1Spec build_cnn1(int rf_target = 131, int width = 32, int fusion_width = 128) {
    Cnn1Spec s;
    s.rf_target = rf_target;
    s.dilations = dilation_ladder(rf_target);
    s.width = width;
    s.fusion_width = fusion_width;
    s.validate();
    return s;
}

/// L = L_N + gamma * (L_A + L_S + L_C).
inline double total_loss(double l_network, double l_axial, double l_sagittal, double l_coronal, double gamma) {
    return l_network + gamma * (l_axial + l_sagittal + l_coronal);
}

/// Weighted average of the four class distributions.
template <typename T>
void fuse_probabilities(std::span<const T> p_network, std::span<const T> p_axial, std::span<const T> p_sagittal,
                        std::span<const T> p_coronal, const FusionWeights& w, std::span<T> out) {
    w.validate();
    const std::size_t n = p_network.size();
    require(p_axial.size() == n && p_sagittal.size() == n && p_coronal.size() == n && out.size() == n,
            ErrorKind::size_mismatch, "fuse_probabilities: distribution sizes differ");
    for (std::size_t i = 0; i < n; ++i)
        out[i] = static_cast<T>(w.network * p_network[i] + w.axial * p_axial[i] + w.sagittal * p_sagittal[i] +
                                w.coronal * p_coronal[i]);
}

/// One training example: a patch set plus the labels under the auxiliary
/// output maps and at the shared centre voxel.
struct TrainingSample {
    OrthoPatchSet patches;
    std::array<std::vector<int>, 3> aux_labels;  // (size - rf + 1)^2 per orientation, row-major
    int center_label = 0;
};

inline TrainingSample make_training_sample(const CtVolume& v, const LabelMap& labels, const Index3& center,
                                           int patch_size, int rf) {
    require(patch_size >= rf, ErrorKind::invalid_argument, "patch size smaller than the receptive field");
    require(labels.same_grid(v), ErrorKind::invalid_argument, "labels and volume grids differ");
    TrainingSample s;
    s.patches = extract_ortho_patches(v, center, patch_size);
    const int a = patch_size - rf + 1;
    for (auto o : kOrientations) {
        auto crop = extract_plane_patch<std::uint8_t>(labels, o, center, a, 0);
        s.aux_labels[static_cast<std::size_t>(o)].assign(crop.begin(), crop.end());
    }
    s.center_label = labels[center];
    return s;
}

struct LossComponents {
    double total = 0, network = 0, axial = 0, sagittal = 0, coronal = 0;
};

/// Per-voxel class distributions, voxel-major ([voxel * 7 + class]).
struct DenseProbabilities {
    Dims dims;
    std::vector<float> fused;
    std::vector<float> network;
    std::array<std::vector<float>, 3> aux;  // empty when the auxiliary heads were skipped

    std::span<const float> at(const std::vector<float>& field, std::size_t voxel) const {
        return {field.data() + voxel * kNumClasses, static_cast<std::size_t>(kNumClasses)};
    }
    int argmax(std::size_t voxel) const { return nn::argmax(at(fused, voxel)); }
};

/// Centre predictions for a batch of patch sets, each [B, 7].
template <typename T>
struct CenterPrediction {
    nn::Tensor<T> fused, network;
    std::array<nn::Tensor<T>, 3> aux;
};

template <typename T>
class Cnn1 {
public:
    explicit Cnn1(Cnn1Spec spec, std::uint64_t seed = 0) : spec_(std::move(spec)), seed_(seed) {
        spec_.validate();
        for (auto o : kOrientations) {
            auto& sub = subnet_[idx(o)];
            int in = 1;
            for (int d : spec_.dilations) {
                sub.template add<nn::Conv2d<T>>(in, spec_.width, 3, d);
                sub.template add<nn::Elu<T>>();
                in = spec_.width;
            }
            sub.set_name(std::string(kOrientationNames[idx(o)]) + ".subnet");
            aux_[idx(o)].template add<nn::Conv2d<T>>(spec_.width, kNumClasses, 1, 1);
            aux_[idx(o)].template add<nn::Softmax<T>>();
            aux_[idx(o)].set_name(std::string(kOrientationNames[idx(o)]) + ".aux");
        }
        fusion_.template add<nn::Dense<T>>(3 * spec_.width, spec_.fusion_width);
        fusion_.template add<nn::Elu<T>>();
        dropout_ = &fusion_.template add<nn::Dropout<T>>(spec_.dropout, seed ^ 0x5bd1e995ULL);
        fusion_.template add<nn::Dense<T>>(spec_.fusion_width, kNumClasses);
        fusion_.template add<nn::Softmax<T>>();
        fusion_.set_name("fusion");

        std::mt19937_64 rng(seed);
        for (auto& s : subnet_) s.initialize(rng);
        for (auto& a : aux_) a.initialize(rng);
        fusion_.initialize(rng);
    }

    const Cnn1Spec& spec() const { return spec_; }
    Cnn1Spec& mutable_spec() { return spec_; }
    std::uint64_t seed() const { return seed_; }
    int receptive_field() const { return spec_.rf_target; }

    /// Number of auxiliary-head forward passes so far.
    std::uint64_t aux_evaluations() const { return aux_evaluations_; }
    nn::Dropout<T>& dropout() { return *dropout_; }

    std::vector<nn::Parameter<T>*> parameters() {
        std::vector<nn::Parameter<T>*> out;
        for (auto& s : subnet_)
            for (auto* p : s.parameters()) out.push_back(p);
        for (auto& a : aux_)
            for (auto* p : a.parameters()) out.push_back(p);
        for (auto* p : fusion_.parameters()) out.push_back(p);
        return out;
    }

    /// Forward (and optionally backward) over a chunk of samples. Gradients
    /// are accumulated scaled by `weight`, the chunk's share of the batch.
    LossComponents accumulate(std::span<const TrainingSample> chunk, double weight, bool backprop, nn::Mode mode) {
        require(!chunk.empty(), ErrorKind::invalid_argument, "empty training chunk");
        std::vector<OrthoPatchSet> patches;
        for (const auto& s : chunk) patches.push_back(s.patches);
        const int p = chunk[0].patches.size;
        require(p >= spec_.rf_target, ErrorKind::invalid_argument, "patch size smaller than the receptive field");
        const int a = p - spec_.rf_target + 1;
        const int n = static_cast<int>(chunk.size());

        std::array<nn::Tensor<T>, 3> feats;
        for (auto o : kOrientations)
            feats[idx(o)] = subnet_[idx(o)].forward(stack_patches<T>(patches, o), mode, backprop);
        for (const auto& s : chunk)
            for (auto o : kOrientations)
                require(s.aux_labels[idx(o)].size() == static_cast<std::size_t>(a) * a, ErrorKind::invalid_argument,
                        "label crop misaligned with the auxiliary output geometry");

        auto centers = center_features(feats, a / 2);
        std::array<const nn::Tensor<T>*, 3> parts = {&centers[0], &centers[1], &centers[2]};
        nn::Tensor<T> cat = nn::concat_channels<T>(parts);
        nn::Tensor<T> p_n = fusion_.forward(cat, mode, backprop);
        std::vector<int> center_labels;
        for (const auto& s : chunk) center_labels.push_back(s.center_label);
        auto ce_n = nn::cross_entropy<T>(p_n, center_labels);

        LossComponents lc;
        lc.network = ce_n.value;
        std::array<nn::LossResult<T>, 3> ce_aux;
        if (spec_.gamma > 0) {
            for (auto o : kOrientations) {
                nn::Tensor<T> probs = aux_[idx(o)].forward(feats[idx(o)], mode, backprop);
                ++aux_evaluations_;
                std::vector<int> targets;
                targets.reserve(static_cast<std::size_t>(n) * a * a);
                for (const auto& s : chunk)
                    targets.insert(targets.end(), s.aux_labels[idx(o)].begin(), s.aux_labels[idx(o)].end());
                ce_aux[idx(o)] = nn::cross_entropy<T>(probs, targets);
            }
            lc.axial = ce_aux[0].value;
            lc.sagittal = ce_aux[1].value;
            lc.coronal = ce_aux[2].value;
        }
        lc.total = total_loss(lc.network, lc.axial, lc.sagittal, lc.coronal, spec_.gamma);
        if (!backprop) return lc;

        for (auto& g : ce_n.grad.values()) g = static_cast<T>(g * weight);
        nn::Tensor<T> dcat = fusion_.backward(ce_n.grad);
        const std::array<int, 3> widths = {spec_.width, spec_.width, spec_.width};
        auto dcenters = nn::split_channels<T>(dcat, widths);
        for (auto o : kOrientations) {
            nn::Tensor<T> dfeat(feats[idx(o)].shape());
            for (int b = 0; b < n; ++b)
                for (int c = 0; c < spec_.width; ++c) dfeat.at(b, c, a / 2, a / 2) = dcenters[idx(o)].at(b, c);
            if (spec_.gamma > 0) {
                auto& g = ce_aux[idx(o)].grad;
                for (auto& v : g.values()) v = static_cast<T>(v * spec_.gamma * weight);
                nn::Tensor<T> d = aux_[idx(o)].backward(g);
                for (std::size_t i = 0; i < d.size(); ++i) dfeat[i] += d[i];
            }
            subnet_[idx(o)].backward(dfeat);
        }
        return lc;
    }

    /// Zeroes gradients, accumulates over micro-batches, applies one Adam step.
    LossComponents train_step(std::span<const TrainingSample> batch, nn::OptimizerState<T>& opt, int micro_batch = 8) {
        auto params = parameters();
        nn::zero_grad<T>(params);
        LossComponents sum;
        const std::size_t b = batch.size();
        for (std::size_t start = 0; start < b; start += static_cast<std::size_t>(micro_batch)) {
            std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(micro_batch), b - start);
            double w = static_cast<double>(len) / static_cast<double>(b);
            auto lc = accumulate(batch.subspan(start, len), w, true, nn::Mode::train);
            sum.total += w * lc.total;
            sum.network += w * lc.network;
            sum.axial += w * lc.axial;
            sum.sagittal += w * lc.sagittal;
            sum.coronal += w * lc.coronal;
        }
        nn::adam_step<T>(opt, params);
        return sum;
    }

    /// Loss without parameter updates (inference mode).
    LossComponents evaluate_loss(std::span<const TrainingSample> batch, int micro_batch = 8) {
        LossComponents sum;
        const std::size_t b = batch.size();
        for (std::size_t start = 0; start < b; start += static_cast<std::size_t>(micro_batch)) {
            std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(micro_batch), b - start);
            double w = static_cast<double>(len) / static_cast<double>(b);
            auto lc = accumulate(batch.subspan(start, len), w, false, nn::Mode::infer);
            sum.total += w * lc.total;
            sum.network += w * lc.network;
            sum.axial += w * lc.axial;
            sum.sagittal += w * lc.sagittal;
            sum.coronal += w * lc.coronal;
        }
        return sum;
    }

    /// Sliding-window classification of the centre voxel of each patch set.
    CenterPrediction<T> classify_patches(std::span<const OrthoPatchSet> batch) {
        require(!batch.empty(), ErrorKind::invalid_argument, "empty patch batch");
        const int a = batch[0].size - spec_.rf_target + 1;
        require(a >= 1, ErrorKind::invalid_argument, "patch size smaller than the receptive field");
        std::array<nn::Tensor<T>, 3> feats;
        for (auto o : kOrientations)
            feats[idx(o)] = subnet_[idx(o)].forward(stack_patches<T>(batch, o), nn::Mode::infer, false);
        auto centers = center_features(feats, a / 2);
        std::array<const nn::Tensor<T>*, 3> parts = {&centers[0], &centers[1], &centers[2]};
        CenterPrediction<T> out;
        out.network = fusion_.forward(nn::concat_channels<T>(parts), nn::Mode::infer, false);
        const int n = static_cast<int>(batch.size());
        out.fused = nn::Tensor<T>({n, kNumClasses});
        const auto& w = spec_.omega;
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < kNumClasses; ++c) out.fused.at(b, c) = static_cast<T>(w.network * out.network.at(b, c));
        if (w.uses_aux()) {
            for (auto o : kOrientations) {
                auto c4 = centers[idx(o)];
                c4.reshape({n, spec_.width, 1, 1});
                auto probs = aux_[idx(o)].forward(c4, nn::Mode::infer, false);
                ++aux_evaluations_;
                probs.reshape({n, kNumClasses});
                for (int b = 0; b < n; ++b)
                    for (int c = 0; c < kNumClasses; ++c)
                        out.fused.at(b, c) += static_cast<T>(w.aux(o) * probs.at(b, c));
                out.aux[idx(o)] = std::move(probs);
            }
        }
        return out;
    }

    /// Classifies every voxel. Each orientation's subnetwork runs over whole
    /// padded planes; the fusion head then runs per voxel on the concatenated
    /// features.
    DenseProbabilities dense_classify_volume(const CtVolume& v, int threads = 1) {
        const int pad = (spec_.rf_target - 1) / 2;
        const Dims d = v.dims();
        const std::size_t nvox = d.count();
        const bool want_aux = spec_.omega.uses_aux();
        DenseProbabilities out;
        out.dims = d;
        std::array<std::vector<T>, 3> feat;
        for (auto o : kOrientations) {
            feat[idx(o)].assign(nvox * static_cast<std::size_t>(spec_.width), T{0});
            if (want_aux) out.aux[idx(o)].assign(nvox * kNumClasses, 0.f);
            const int planes = plane_count(o, d);
            auto [rows, cols] = plane_extent(o, d);
            require(rows + 2 * pad >= spec_.rf_target && cols + 2 * pad >= spec_.rf_target, ErrorKind::domain,
                    "volume smaller than the receptive field after padding");
            // Layers cache nothing in inference mode, so one network can serve
            // several planes concurrently.
            parallel_for(planes, threads, [&, o, rows = rows, cols = cols](int s) {
                nn::Tensor<T> f = subnet_[idx(o)].forward(padded_plane<T>(v, o, s, pad), nn::Mode::infer, false);
                nn::Tensor<T> probs;
                if (want_aux) probs = aux_[idx(o)].forward(f, nn::Mode::infer, false);
                const Index3 anchor = plane_anchor(o, s);
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c) {
                        const Index3 p = plane_to_volume(o, anchor, r, c);
                        const std::size_t vox = v.index(p.z, p.y, p.x);
                        for (int ch = 0; ch < spec_.width; ++ch)
                            feat[idx(o)][vox * spec_.width + ch] = f.at(0, ch, r, c);
                        if (want_aux)
                            for (int k = 0; k < kNumClasses; ++k)
                                out.aux[idx(o)][vox * kNumClasses + k] = static_cast<float>(probs.at(0, k, r, c));
                    }
            });
            if (want_aux) aux_evaluations_ += static_cast<std::uint64_t>(planes);
        }

        out.network.assign(nvox * kNumClasses, 0.f);
        out.fused.assign(nvox * kNumClasses, 0.f);
        constexpr std::size_t kChunk = 4096;
        const int w3 = 3 * spec_.width;
        const std::size_t chunks = (nvox + kChunk - 1) / kChunk;
        parallel_for(static_cast<int>(chunks), threads, [&](int ci) {
            std::size_t begin = static_cast<std::size_t>(ci) * kChunk;
            std::size_t len = std::min(kChunk, nvox - begin);
            nn::Tensor<T> cat({static_cast<int>(len), w3});
            for (std::size_t i = 0; i < len; ++i)
                for (auto o : kOrientations)
                    std::copy_n(feat[idx(o)].data() + (begin + i) * spec_.width, spec_.width,
                                cat.data() + i * w3 + idx(o) * spec_.width);
            nn::Tensor<T> p = fusion_.forward(cat, nn::Mode::infer, false);
            for (std::size_t i = 0; i < len; ++i)
                for (int k = 0; k < kNumClasses; ++k) {
                    std::size_t j = (begin + i) * kNumClasses + k;
                    out.network[j] = static_cast<float>(p.at(static_cast<int>(i), k));
                    double f = spec_.omega.network * static_cast<double>(p.at(static_cast<int>(i), k));
                    if (want_aux)
                        for (auto o : kOrientations) f += spec_.omega.aux(o) * out.aux[idx(o)][j];
                    out.fused[j] = static_cast<float>(f);
                }
        });
        return out;
    }

    nn::NetworkWeights export_weights(std::uint64_t steps) {
        nn::NetworkWeights w;
        w.network = "cnn1";
        w.architecture = spec_.architecture();
        w.fingerprint = spec_.fingerprint();
        w.seed = seed_;
        w.steps = steps;
        auto num = [](double v) {
            std::ostringstream os;
            os << std::setprecision(17) << v;
            return os.str();
        };
        w.meta = {{"rf_target", std::to_string(spec_.rf_target)},
                  {"width", std::to_string(spec_.width)},
                  {"fusion_width", std::to_string(spec_.fusion_width)},
                  {"dropout", num(spec_.dropout)},
                  {"gamma", num(spec_.gamma)},
                  {"omega_network", num(spec_.omega.network)},
                  {"omega_axial", num(spec_.omega.axial)},
                  {"omega_sagittal", num(spec_.omega.sagittal)},
                  {"omega_coronal", num(spec_.omega.coronal)}};
        auto params = parameters();
        w.tensors = nn::export_tensors<T>(params);
        return w;
    }

    void import_weights(const nn::NetworkWeights& w) {
        require(w.network == "cnn1", ErrorKind::fingerprint_mismatch, "weights are for " + w.network + ", not cnn1");
        require(w.fingerprint == spec_.fingerprint(), ErrorKind::fingerprint_mismatch,
                "cnn1 architecture fingerprint mismatch");
        auto params = parameters();
        nn::import_tensors<T>(params, w.tensors);
    }

private:
    static std::size_t idx(Orientation o) { return static_cast<std::size_t>(o); }

    std::array<nn::Tensor<T>, 3> center_features(const std::array<nn::Tensor<T>, 3>& feats, int c) const {
        std::array<nn::Tensor<T>, 3> out;
        for (std::size_t o = 0; o < 3; ++o) {
            const int n = feats[o].dim(0);
            out[o] = nn::Tensor<T>({n, spec_.width});
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < spec_.width; ++ch) out[o].at(b, ch) = feats[o].at(b, ch, c, c);
        }
        return out;
    }

    Cnn1Spec spec_;
    std::uint64_t seed_;
    std::array<nn::Sequential<T>, 3> subnet_;
    std::array<nn::Sequential<T>, 3> aux_;
    nn::Sequential<T> fusion_;
    nn::Dropout<T>* dropout_ = nullptr;
    std::uint64_t aux_evaluations_ = 0;
};

/// Rebuilds the spec recorded in a weights file and checks its fingerprint.
inline Cnn1Spec spec_from_weights(const nn::NetworkWeights& w) {
    require(w.network == "cnn1", ErrorKind::fingerprint_mismatch, "weights are for " + w.network + ", not cnn1");
    Cnn1Spec s;
    try {
        s = build_cnn1(std::stoi(w.meta_value("rf_target")), std::stoi(w.meta_value("width")),
                       std::stoi(w.meta_value("fusion_width")));
        s.dropout = std::stod(w.meta_value("dropout"));
        s.gamma = std::stod(w.meta_value("gamma"));
        s.omega = {std::stod(w.meta_value("omega_network")), std::stod(w.meta_value("omega_axial")),
                   std::stod(w.meta_value("omega_sagittal")), std::stod(w.meta_value("omega_coronal"))};
    } catch (const std::logic_error&) {
        fail(ErrorKind::malformed_header, "cnn1 weights carry unparsable metadata");
    }
    require(s.fingerprint() == w.fingerprint, ErrorKind::fingerprint_mismatch,
            "cnn1 weights fingerprint does not match the reference architecture");
    return s;
}

}  // namespace calcscore::stage1
