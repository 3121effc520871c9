#pragma once

// Second-stage network: binary true-calcium / false-positive classifier over
// the candidates accepted by stage 1. Each orientation runs three blocks of
// (conv3x3, conv3x3, maxpool 2/2) with batch normalisation after every
// convolution; a dense head merges the three flattened maps.

#include <array>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "calcscore/nn/adam.hpp"
#include "calcscore/nn/layers.hpp"
#include "calcscore/nn/loss.hpp"
#include "calcscore/nn/serialize.hpp"
#include "calcscore/patches.hpp"
#include "calcscore/training.hpp"

namespace calcscore::stage2 {

inline constexpr int kPatchSize = 65;

struct Cnn2Spec {
    int patch = kPatchSize;
    std::array<int, 3> widths = {16, 32, 64};
    int dense_width = 256;
    double dropout = 0.5;

    /// Side of the square map left after the three blocks (4 for 65).
    int final_extent() const {
        int s = patch;
        for (int b = 0; b < 3; ++b) s = (s - 4 - 2) / 2 + 1;
        return s;
    }
    int flat_features() const { return widths[2] * final_extent() * final_extent(); }

    std::vector<nn::LayerSpec> subnetwork() const {
        std::vector<nn::LayerSpec> s;
        int in = 1;
        for (int w : widths) {
            for (int k = 0; k < 2; ++k) {
                s.push_back(nn::LayerSpec::conv(in, w, 3, 1));
                nn::LayerSpec bn = nn::LayerSpec::pointwise(nn::LayerKind::batchnorm);
                bn.in = w;
                s.push_back(bn);
                s.push_back(nn::LayerSpec::pointwise(nn::LayerKind::elu));
                in = w;
            }
            s.push_back(nn::LayerSpec::maxpool(2, 2));
        }
        s.push_back(nn::LayerSpec::pointwise(nn::LayerKind::flatten));
        return s;
    }

    std::vector<nn::LayerSpec> head() const {
        nn::LayerSpec cat = nn::LayerSpec::pointwise(nn::LayerKind::concat);
        cat.out = 3 * flat_features();
        nn::LayerSpec bn = nn::LayerSpec::pointwise(nn::LayerKind::batchnorm);
        bn.in = dense_width;
        nn::LayerSpec drop = nn::LayerSpec::pointwise(nn::LayerKind::dropout);
        drop.drop = dropout;
        return {cat,
                nn::LayerSpec::dense(3 * flat_features(), dense_width),
                bn,
                nn::LayerSpec::pointwise(nn::LayerKind::elu),
                drop,
                nn::LayerSpec::dense(dense_width, 2),
                nn::LayerSpec::pointwise(nn::LayerKind::softmax)};
    }

    std::string architecture() const {
        return "cnn2 patch" + std::to_string(patch) + " subnet[" + nn::describe_architecture(subnetwork()) +
               "] x3 head[" + nn::describe_architecture(head()) + "]";
    }
    std::string fingerprint() const { return nn::fingerprint_of(architecture()); }

    /// Trainable parameters (weights, biases, batchnorm scale and shift).
    std::size_t parameter_count() const {
        std::size_t per = 0;
        int in = 1;
        for (int w : widths) {
            for (int k = 0; k < 2; ++k) {
                per += static_cast<std::size_t>(w) * in * 9 + w + 2 * static_cast<std::size_t>(w);
                in = w;
            }
        }
        const std::size_t f = 3 * static_cast<std::size_t>(flat_features());
        return 3 * per + f * dense_width + dense_width + 2 * static_cast<std::size_t>(dense_width) +
               static_cast<std::size_t>(dense_width) * 2 + 2;
    }

    void validate() const {
        require(patch % 2 == 1, ErrorKind::invalid_argument, "cnn2 patch size must be odd");
        require(widths[0] >= 1 && widths[1] >= 1 && widths[2] >= 1 && dense_width >= 1, ErrorKind::invalid_argument,
                "cnn2 widths must be >= 1");
        require(final_extent() >= 1, ErrorKind::invalid_argument, "cnn2 patch too small for three blocks");
        require(dropout >= 0 && dropout < 1, ErrorKind::invalid_argument, "dropout must be in [0,1)");
    }
};

inline Cnn2Spec build_cnn2(std::array<int, 3> widths = {16, 32, 64}, int dense_width = 256) {
    Cnn2Spec s;
    s.widths = widths;
    s.dense_width = dense_width;
    s.validate();
    return s;
}

template <typename T>
class Cnn2 {
public:
    explicit Cnn2(Cnn2Spec spec, std::uint64_t seed = 0) : spec_(spec), seed_(seed) {
        spec_.validate();
        for (auto o : kOrientations) {
            auto& sub = subnet_[idx(o)];
            int in = 1;
            for (int w : spec_.widths) {
                for (int k = 0; k < 2; ++k) {
                    sub.template add<nn::Conv2d<T>>(in, w, 3, 1);
                    sub.template add<nn::BatchNorm<T>>(w);
                    sub.template add<nn::Elu<T>>();
                    in = w;
                }
                sub.template add<nn::MaxPool2d<T>>(2, 2);
            }
            sub.template add<nn::Flatten<T>>();
            sub.set_name(std::string(kOrientationNames[idx(o)]) + ".subnet");
        }
        head_.template add<nn::Dense<T>>(3 * spec_.flat_features(), spec_.dense_width);
        head_.template add<nn::BatchNorm<T>>(spec_.dense_width);
        head_.template add<nn::Elu<T>>();
        dropout_ = &head_.template add<nn::Dropout<T>>(spec_.dropout, seed ^ 0x2545f4914f6cdd1dULL);
        head_.template add<nn::Dense<T>>(spec_.dense_width, 2);
        head_.template add<nn::Softmax<T>>();
        head_.set_name("head");

        std::mt19937_64 rng(seed);
        for (auto& s : subnet_) s.initialize(rng);
        head_.initialize(rng);
    }

    const Cnn2Spec& spec() const { return spec_; }
    std::uint64_t seed() const { return seed_; }
    nn::Dropout<T>& dropout() { return *dropout_; }

    std::vector<nn::Parameter<T>*> parameters() {
        std::vector<nn::Parameter<T>*> out;
        for (auto& s : subnet_)
            for (auto* p : s.parameters()) out.push_back(p);
        for (auto* p : head_.parameters()) out.push_back(p);
        return out;
    }

    /// [B, 2] class distributions; index 1 is calcium.
    nn::Tensor<T> forward(std::span<const OrthoPatchSet> batch, nn::Mode mode, bool record = true) {
        require(!batch.empty() && batch[0].size == spec_.patch, ErrorKind::invalid_argument,
                "cnn2 expects " + std::to_string(spec_.patch) + "-pixel patches");
        std::array<nn::Tensor<T>, 3> flat;
        for (auto o : kOrientations) flat[idx(o)] = subnet_[idx(o)].forward(stack_patches<T>(batch, o), mode, record);
        std::array<const nn::Tensor<T>*, 3> parts = {&flat[0], &flat[1], &flat[2]};
        return head_.forward(nn::concat_channels<T>(parts), mode, record);
    }

    /// Back-propagates d loss / d probabilities through the whole network.
    void backward(const nn::Tensor<T>& grad) {
        nn::Tensor<T> d = head_.backward(grad);
        const std::array<int, 3> f = {spec_.flat_features(), spec_.flat_features(), spec_.flat_features()};
        auto parts = nn::split_channels<T>(d, f);
        for (auto o : kOrientations) subnet_[idx(o)].backward(parts[idx(o)]);
    }

    /// One Adam step on the mean cross-entropy of a labelled batch.
    double train_step(std::span<const OrthoPatchSet> batch, std::span<const int> labels, nn::OptimizerState<T>& opt) {
        auto params = parameters();
        nn::zero_grad<T>(params);
        nn::Tensor<T> p = forward(batch, nn::Mode::train, true);
        auto ce = nn::cross_entropy<T>(p, labels);
        backward(ce.grad);
        nn::adam_step<T>(opt, params);
        return ce.value;
    }

    double evaluate_loss(std::span<const OrthoPatchSet> batch, std::span<const int> labels) {
        return nn::cross_entropy<T>(forward(batch, nn::Mode::infer, false), labels).value;
    }

    /// Inference-mode probabilities, evaluated in chunks over several threads.
    std::vector<std::array<float, 2>> classify(std::span<const OrthoPatchSet> batch, int threads = 1,
                                               int chunk = 64) {
        std::vector<std::array<float, 2>> out(batch.size());
        const int chunks = static_cast<int>((batch.size() + static_cast<std::size_t>(chunk) - 1) / chunk);
        parallel_for(chunks, threads, [&](int c) {
            std::size_t begin = static_cast<std::size_t>(c) * chunk;
            std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(chunk), batch.size() - begin);
            nn::Tensor<T> p = forward(batch.subspan(begin, len), nn::Mode::infer, false);
            for (std::size_t i = 0; i < len; ++i)
                out[begin + i] = {static_cast<float>(p.at(static_cast<int>(i), 0)),
                                  static_cast<float>(p.at(static_cast<int>(i), 1))};
        });
        return out;
    }

    /// Probabilities for candidate voxels; patches crossing the border are
    /// padded with air.
    std::vector<std::array<float, 2>> classify_candidates(const CtVolume& v, std::span<const Index3> candidates,
                                                          int threads = 1) {
        std::vector<std::array<float, 2>> out;
        if (candidates.empty()) return out;
        for (const auto& c : candidates)
            require(v.contains(c.z, c.y, c.x), ErrorKind::invalid_argument, "candidate outside the volume");
        constexpr std::size_t kBlock = 512;
        for (std::size_t begin = 0; begin < candidates.size(); begin += kBlock) {
            std::size_t len = std::min(kBlock, candidates.size() - begin);
            std::vector<OrthoPatchSet> patches;
            patches.reserve(len);
            for (std::size_t i = 0; i < len; ++i)
                patches.push_back(extract_ortho_patches(v, candidates[begin + i], spec_.patch));
            auto part = classify(patches, threads);
            out.insert(out.end(), part.begin(), part.end());
        }
        return out;
    }

    nn::NetworkWeights export_weights(std::uint64_t steps) {
        nn::NetworkWeights w;
        w.network = "cnn2";
        w.architecture = spec_.architecture();
        w.fingerprint = spec_.fingerprint();
        w.seed = seed_;
        w.steps = steps;
        std::ostringstream drop;
        drop << std::setprecision(17) << spec_.dropout;
        w.meta = {{"patch", std::to_string(spec_.patch)},
                  {"widths", std::to_string(spec_.widths[0]) + "," + std::to_string(spec_.widths[1]) + "," +
                                 std::to_string(spec_.widths[2])},
                  {"dense_width", std::to_string(spec_.dense_width)},
                  {"dropout", drop.str()}};
        auto params = parameters();
        w.tensors = nn::export_tensors<T>(params);
        return w;
    }

    void import_weights(const nn::NetworkWeights& w) {
        require(w.network == "cnn2", ErrorKind::fingerprint_mismatch, "weights are for " + w.network + ", not cnn2");
        require(w.fingerprint == spec_.fingerprint(), ErrorKind::fingerprint_mismatch,
                "cnn2 architecture fingerprint mismatch");
        auto params = parameters();
        nn::import_tensors<T>(params, w.tensors);
    }

private:
    static std::size_t idx(Orientation o) { return static_cast<std::size_t>(o); }

    Cnn2Spec spec_;
    std::uint64_t seed_;
    std::array<nn::Sequential<T>, 3> subnet_;
    nn::Sequential<T> head_;
    nn::Dropout<T>* dropout_ = nullptr;
};

inline Cnn2Spec spec_from_weights(const nn::NetworkWeights& w) {
    require(w.network == "cnn2", ErrorKind::fingerprint_mismatch, "weights are for " + w.network + ", not cnn2");
    Cnn2Spec s;
    try {
        s.patch = std::stoi(w.meta_value("patch"));
        std::istringstream is(w.meta_value("widths"));
        char comma = 0;
        is >> s.widths[0] >> comma >> s.widths[1] >> comma >> s.widths[2];
        require(!is.fail(), ErrorKind::malformed_header, "cnn2 weights carry bad widths");
        s.dense_width = std::stoi(w.meta_value("dense_width"));
        s.dropout = std::stod(w.meta_value("dropout"));
    } catch (const std::logic_error&) {
        fail(ErrorKind::malformed_header, "cnn2 weights carry unparsable metadata");
    }
    s.validate();
    require(s.fingerprint() == w.fingerprint, ErrorKind::fingerprint_mismatch,
            "cnn2 weights fingerprint does not match the reference architecture");
    return s;
}

/// A training voxel for stage 2. label 1 = true calcium, 0 = false positive.
struct Cnn2Sample {
    std::size_t volume = 0;
    Index3 voxel;
    int label = 0;
};

struct Cnn2TrainConfig {
    int epochs = 4;
    int steps_per_epoch = 50;
    int batch_size = 64;
    nn::AdamConfig adam{5e-4, 0.9, 0.999, 1e-8, 1e-5};
    std::uint64_t seed = 0;
};

/// Balanced-minibatch training. The optional validation set is scored after
/// every epoch.
template <typename T>
std::vector<EpochRecord> train_cnn2(Cnn2<T>& net, std::span<const CtVolume> volumes,
                                    std::span<const Cnn2Sample> samples, const Cnn2TrainConfig& cfg,
                                    std::span<const CtVolume> val_volumes = {},
                                    std::span<const Cnn2Sample> val_samples = {}) {
    std::vector<Cnn2Sample> pos, neg;
    for (const auto& s : samples) (s.label == 1 ? pos : neg).push_back(s);
    require(!pos.empty(), ErrorKind::domain, "no positive candidates in the stage-2 training corpus");
    require(!neg.empty(), ErrorKind::domain, "no negative candidates in the stage-2 training corpus");
    std::mt19937_64 rng(cfg.seed);
    nn::OptimizerState<T> opt{cfg.adam};
    net.dropout().reseed(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    auto patches_of = [&](std::span<const CtVolume> vols, std::span<const Cnn2Sample> batch,
                          std::vector<OrthoPatchSet>& p, std::vector<int>& l) {
        p.clear();
        l.clear();
        for (const auto& s : batch) {
            p.push_back(extract_ortho_patches(vols[s.volume], s.voxel, net.spec().patch));
            l.push_back(s.label);
        }
    };
    std::vector<EpochRecord> log;
    std::vector<OrthoPatchSet> p;
    std::vector<int> l;
    for (int e = 0; e < cfg.epochs; ++e) {
        double sum = 0;
        for (int s = 0; s < cfg.steps_per_epoch; ++s) {
            auto batch = balanced_minibatch<Cnn2Sample>(pos, neg, cfg.batch_size, rng, "true-calcium", "false-positive");
            patches_of(volumes, batch, p, l);
            sum += net.train_step(p, l, opt);
        }
        EpochRecord r{"cnn2", e + 1, opt.step, sum / std::max(1, cfg.steps_per_epoch), 0.0};
        if (!val_samples.empty()) {
            double vsum = 0;
            std::size_t n = 0;
            for (std::size_t b = 0; b < val_samples.size(); b += 64) {
                auto chunk = val_samples.subspan(b, std::min<std::size_t>(64, val_samples.size() - b));
                patches_of(val_volumes, chunk, p, l);
                vsum += net.evaluate_loss(p, l) * static_cast<double>(chunk.size());
                n += chunk.size();
            }
            r.validation_loss = vsum / static_cast<double>(n);
        }
        log.push_back(r);
    }
    return log;
}

}  // namespace calcscore::stage2
