#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "calcscore/nn/tensor.hpp"

namespace calcscore::nn {

enum class LayerKind { conv2d, maxpool2d, dense, elu, softmax, dropout, batchnorm, concat, flatten };

inline std::string_view to_string(LayerKind k) {
    switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::dense: return "dense";
    case LayerKind::elu: return "elu";
    case LayerKind::softmax: return "softmax";
    case LayerKind::dropout: return "dropout";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::concat: return "concat";
    case LayerKind::flatten: return "flatten";
    }
    return "?";
}

/// Architecture description of one layer. Unused fields keep their defaults.
struct LayerSpec {
    LayerKind kind = LayerKind::elu;
    int in = 0;          // input channels / features
    int out = 0;         // filters / units
    int kernel = 1;
    int dilation = 1;
    int stride = 1;
    int pool = 1;
    double drop = 0.0;

    static LayerSpec conv(int in, int out, int kernel, int dilation = 1) {
        return {LayerKind::conv2d, in, out, kernel, dilation, 1, 1, 0.0};
    }
    static LayerSpec maxpool(int pool, int stride) {
        return {LayerKind::maxpool2d, 0, 0, 1, 1, stride, pool, 0.0};
    }
    static LayerSpec dense(int in, int out) { return {LayerKind::dense, in, out}; }
    static LayerSpec pointwise(LayerKind k) { return {k}; }

    void validate() const {
        require(dilation >= 1, ErrorKind::invalid_argument, "dilation must be >= 1");
        require(kernel >= 1 && pool >= 1 && stride >= 1, ErrorKind::invalid_argument,
                "kernel, pool and stride must be >= 1");
        require(drop >= 0.0 && drop < 1.0, ErrorKind::invalid_argument, "drop probability must be in [0,1)");
    }

    std::string describe() const {
        std::string s(to_string(kind));
        switch (kind) {
        case LayerKind::conv2d:
            s += "(" + std::to_string(in) + "->" + std::to_string(out) + ",k" + std::to_string(kernel) + ",d" +
                 std::to_string(dilation) + ")";
            break;
        case LayerKind::maxpool2d: s += "(p" + std::to_string(pool) + ",s" + std::to_string(stride) + ")"; break;
        case LayerKind::dense: s += "(" + std::to_string(in) + "->" + std::to_string(out) + ")"; break;
        case LayerKind::batchnorm: s += "(" + std::to_string(in) + ")"; break;
        case LayerKind::concat: s += "(" + std::to_string(out) + ")"; break;
        case LayerKind::dropout: {
            std::ostringstream os;
            os << "(" << drop << ")";
            s += os.str();
            break;
        }
        default: break;
        }
        return s;
    }
};

enum class Mode { train, infer };

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;  // false for running statistics
    bool decay = false;     // subject to L2 weight decay
    bool touched = false;   // received a gradient contribution since zero_grad

    void zero_grad() {
        grad = Tensor<T>(value.shape());
        touched = false;
    }
};

/// Fan-in scaled uniform initialisation gain (He-style, suited to ELU).
inline constexpr double kInitGain = 1.4142135623730951;

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;

    /// `record` keeps whatever backward() needs; pass false for pure inference.
    virtual Tensor<T> forward(const Tensor<T>& x, Mode mode, bool record = true) = 0;
    virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
    virtual std::vector<Parameter<T>*> parameters() { return {}; }
    virtual LayerSpec spec() const = 0;
    virtual void initialize(std::mt19937_64&) {}
    virtual void set_name(const std::string& name) { name_ = name; }
    const std::string& name() const { return name_; }

protected:
    std::string name_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void uniform_init(Tensor<T>& w, int fan_in, std::mt19937_64& rng) {
    const double a = kInitGain * std::sqrt(3.0 / std::max(1, fan_in));
    std::uniform_real_distribution<double> dist(-a, a);
    for (auto& v : w.values()) v = static_cast<T>(dist(rng));
}

}  // namespace detail

/// Valid-mode dilated 2D cross-correlation with per-filter bias.
/// Input [N, C, H, W] -> output [N, F, H - d(k-1), W - d(k-1)].
template <typename T>
class Conv2d final : public Layer<T> {
public:
    Conv2d(int in, int out, int kernel, int dilation = 1) : spec_(LayerSpec::conv(in, out, kernel, dilation)) {
        spec_.validate();
        weight_.value = Tensor<T>({out, in, kernel, kernel});
        bias_.value = Tensor<T>({out});
        weight_.decay = true;
        weight_.zero_grad();
        bias_.zero_grad();
    }

    void set_name(const std::string& name) override {
        this->name_ = name;
        weight_.name = name + ".weight";
        bias_.name = name + ".bias";
    }

    void initialize(std::mt19937_64& rng) override {
        detail::uniform_init(weight_.value, spec_.in * spec_.kernel * spec_.kernel, rng);
        bias_.value.fill(T{0});
    }

    Tensor<T> forward(const Tensor<T>& x, Mode, bool record = true) override {
        check_input(x);
        const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
        const int ho = h - footprint() + 1, wo = w - footprint() + 1;
        Tensor<T> y({n, spec_.out, ho, wo});
        std::vector<T> cols;
        const int rows = spec_.in * spec_.kernel * spec_.kernel;
        detail::CMapMat<T> wmat(weight_.value.data(), spec_.out, rows);
        for (int b = 0; b < n; ++b) {
            im2col(x, b, cols);
            detail::CMapMat<T> cmat(cols.data(), rows, ho * wo);
            detail::MapMat<T> ymat(y.data() + static_cast<std::size_t>(b) * spec_.out * ho * wo, spec_.out, ho * wo);
            ymat.noalias() = wmat * cmat;
            for (int f = 0; f < spec_.out; ++f) ymat.row(f).array() += bias_.value[static_cast<std::size_t>(f)];
        }
        if (record) input_ = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        require(!input_.empty(), ErrorKind::invalid_argument, this->name_ + ": backward without recorded forward");
        const Tensor<T>& x = input_;
        const int n = x.dim(0), ho = g.dim(2), wo = g.dim(3);
        const int rows = spec_.in * spec_.kernel * spec_.kernel;
        Tensor<T> dx(x.shape());
        std::vector<T> cols, dcols(static_cast<std::size_t>(rows) * ho * wo);
        detail::CMapMat<T> wmat(weight_.value.data(), spec_.out, rows);
        detail::MapMat<T> dw(weight_.grad.data(), spec_.out, rows);
        for (int b = 0; b < n; ++b) {
            im2col(x, b, cols);
            detail::CMapMat<T> cmat(cols.data(), rows, ho * wo);
            detail::CMapMat<T> gmat(g.data() + static_cast<std::size_t>(b) * spec_.out * ho * wo, spec_.out, ho * wo);
            dw.noalias() += gmat * cmat.transpose();
            // Sequential sum: Eigen's vectorised reduction order depends on alignment.
            const std::size_t plane = static_cast<std::size_t>(ho) * wo;
            for (int f = 0; f < spec_.out; ++f) {
                const T* gf = gmat.data() + static_cast<std::size_t>(f) * plane;
                T acc{0};
                for (std::size_t i = 0; i < plane; ++i) acc += gf[i];
                bias_.grad[static_cast<std::size_t>(f)] += acc;
            }
            detail::MapMat<T> dc(dcols.data(), rows, ho * wo);
            dc.noalias() = wmat.transpose() * gmat;
            col2im(dcols, dx, b);
        }
        weight_.touched = bias_.touched = true;
        return dx;
    }

    std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
    LayerSpec spec() const override { return spec_; }
    int footprint() const { return spec_.dilation * (spec_.kernel - 1) + 1; }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }

private:
    void check_input(const Tensor<T>& x) const {
        require(x.rank() == 4 && x.dim(1) == spec_.in, ErrorKind::invalid_argument,
                this->name_ + ": expected [N," + std::to_string(spec_.in) + ",H,W] input, got " + x.shape_string());
        require(x.dim(2) >= footprint() && x.dim(3) >= footprint(), ErrorKind::invalid_argument,
                this->name_ + ": input " + x.shape_string() + " smaller than dilated kernel footprint " +
                    std::to_string(footprint()));
    }

    void im2col(const Tensor<T>& x, int b, std::vector<T>& cols) const {
        const int c_in = spec_.in, k = spec_.kernel, d = spec_.dilation;
        const int h = x.dim(2), w = x.dim(3);
        const int ho = h - footprint() + 1, wo = w - footprint() + 1;
        cols.resize(static_cast<std::size_t>(c_in) * k * k * ho * wo);
        T* dst = cols.data();
        for (int c = 0; c < c_in; ++c) {
            const T* plane = x.data() + (static_cast<std::size_t>(b) * c_in + c) * h * w;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx)
                    for (int oy = 0; oy < ho; ++oy) {
                        const T* src = plane + static_cast<std::size_t>(oy + ky * d) * w + kx * d;
                        dst = std::copy(src, src + wo, dst);
                    }
        }
    }

    void col2im(const std::vector<T>& cols, Tensor<T>& dx, int b) const {
        const int c_in = spec_.in, k = spec_.kernel, d = spec_.dilation;
        const int h = dx.dim(2), w = dx.dim(3);
        const int ho = h - footprint() + 1, wo = w - footprint() + 1;
        const T* src = cols.data();
        for (int c = 0; c < c_in; ++c) {
            T* plane = dx.data() + (static_cast<std::size_t>(b) * c_in + c) * h * w;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx)
                    for (int oy = 0; oy < ho; ++oy) {
                        T* dst = plane + static_cast<std::size_t>(oy + ky * d) * w + kx * d;
                        for (int ox = 0; ox < wo; ++ox) dst[ox] += src[ox];
                        src += wo;
                    }
        }
    }

    LayerSpec spec_;
    Parameter<T> weight_, bias_;
    Tensor<T> input_;
};

/// Valid-mode max pooling; ties resolve to the first maximum in scan order.
template <typename T>
class MaxPool2d final : public Layer<T> {
public:
    MaxPool2d(int pool, int stride) : spec_(LayerSpec::maxpool(pool, stride)) { spec_.validate(); }

    Tensor<T> forward(const Tensor<T>& x, Mode, bool record = true) override {
        require(x.rank() == 4 && x.dim(2) >= spec_.pool && x.dim(3) >= spec_.pool, ErrorKind::invalid_argument,
                this->name_ + ": pool region exceeds input " + x.shape_string());
        const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const int ho = (h - spec_.pool) / spec_.stride + 1, wo = (w - spec_.pool) / spec_.stride + 1;
        Tensor<T> y({n, c, ho, wo});
        if (record) argmax_.assign(y.size(), 0);
        std::size_t o = 0;
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * h * w;
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox, ++o) {
                        std::size_t best = base + static_cast<std::size_t>(oy * spec_.stride) * w + ox * spec_.stride;
                        for (int py = 0; py < spec_.pool; ++py)
                            for (int px = 0; px < spec_.pool; ++px) {
                                std::size_t i = base + static_cast<std::size_t>(oy * spec_.stride + py) * w +
                                                ox * spec_.stride + px;
                                if (x[i] > x[best]) best = i;
                            }
                        y[o] = x[best];
                        if (record) argmax_[o] = best;
                    }
            }
        if (record) in_shape_ = x.shape();
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        Tensor<T> dx(in_shape_);
        for (std::size_t o = 0; o < g.size(); ++o) dx[argmax_[o]] += g[o];
        return dx;
    }

    LayerSpec spec() const override { return spec_; }

private:
    LayerSpec spec_;
    std::vector<std::size_t> argmax_;
    std::vector<int> in_shape_;
};

/// Fully connected layer: [N, in] -> [N, out].
template <typename T>
class Dense final : public Layer<T> {
public:
    Dense(int in, int out) : spec_(LayerSpec::dense(in, out)) {
        weight_.value = Tensor<T>({out, in});
        bias_.value = Tensor<T>({out});
        weight_.decay = true;
        weight_.zero_grad();
        bias_.zero_grad();
    }

    void set_name(const std::string& name) override {
        this->name_ = name;
        weight_.name = name + ".weight";
        bias_.name = name + ".bias";
    }

    void initialize(std::mt19937_64& rng) override {
        detail::uniform_init(weight_.value, spec_.in, rng);
        bias_.value.fill(T{0});
    }

    Tensor<T> forward(const Tensor<T>& x, Mode, bool record = true) override {
        require(x.rank() == 2 && x.dim(1) == spec_.in, ErrorKind::invalid_argument,
                this->name_ + ": expected [N," + std::to_string(spec_.in) + "] input, got " + x.shape_string());
        const int n = x.dim(0);
        Tensor<T> y({n, spec_.out});
        detail::CMapMat<T> xm(x.data(), n, spec_.in);
        detail::CMapMat<T> wm(weight_.value.data(), spec_.out, spec_.in);
        detail::MapMat<T> ym(y.data(), n, spec_.out);
        ym.noalias() = xm * wm.transpose();
        for (int b = 0; b < n; ++b)
            for (int f = 0; f < spec_.out; ++f) y.at(b, f) += bias_.value[static_cast<std::size_t>(f)];
        if (record) input_ = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        const int n = g.dim(0);
        detail::CMapMat<T> xm(input_.data(), n, spec_.in);
        detail::CMapMat<T> gm(g.data(), n, spec_.out);
        detail::CMapMat<T> wm(weight_.value.data(), spec_.out, spec_.in);
        detail::MapMat<T> dw(weight_.grad.data(), spec_.out, spec_.in);
        dw.noalias() += gm.transpose() * xm;
        for (int b = 0; b < n; ++b)
            for (int f = 0; f < spec_.out; ++f) bias_.grad[static_cast<std::size_t>(f)] += g.at(b, f);
        Tensor<T> dx({n, spec_.in});
        detail::MapMat<T> dxm(dx.data(), n, spec_.in);
        dxm.noalias() = gm * wm;
        weight_.touched = bias_.touched = true;
        return dx;
    }

    std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
    LayerSpec spec() const override { return spec_; }
    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }

private:
    LayerSpec spec_;
    Parameter<T> weight_, bias_;
    Tensor<T> input_;
};

/// Exponential linear unit, alpha = 1.
template <typename T>
T elu(T x) {
    return x > T{0} ? x : std::expm1(x);
}

template <typename T>
class Elu final : public Layer<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, Mode, bool record = true) override {
        Tensor<T> y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = elu(x[i]);
        if (record) output_ = y;
        return y;
    }
    // y > 0 exactly when x > 0, so the output alone determines the slope.
    Tensor<T> backward(const Tensor<T>& g) override {
        Tensor<T> dx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = output_[i] > T{0} ? g[i] : g[i] * (output_[i] + T{1});
        return dx;
    }
    LayerSpec spec() const override { return LayerSpec::pointwise(LayerKind::elu); }

private:
    Tensor<T> output_;
};

/// Softmax over axis 1 (classes), independently at every sample and pixel.
template <typename T>
class Softmax final : public Layer<T> {
public:
    static void apply(const T* in, T* out, int classes, std::size_t stride) {
        T m = in[0];
        for (int c = 1; c < classes; ++c) m = std::max(m, in[c * stride]);
        T sum = 0;
        for (int c = 0; c < classes; ++c) {
            out[c * stride] = std::exp(in[c * stride] - m);
            sum += out[c * stride];
        }
        for (int c = 0; c < classes; ++c) out[c * stride] /= sum;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode, bool record = true) override {
        require(x.rank() == 2 || x.rank() == 4, ErrorKind::invalid_argument, "softmax expects rank 2 or 4");
        Tensor<T> y(x.shape());
        const int n = x.dim(0), c = x.dim(1);
        const std::size_t inner = x.rank() == 4 ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1;
        for (int b = 0; b < n; ++b)
            for (std::size_t p = 0; p < inner; ++p) {
                std::size_t off = static_cast<std::size_t>(b) * c * inner + p;
                apply(x.data() + off, y.data() + off, c, inner);
            }
        if (record) output_ = y;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        const Tensor<T>& y = output_;
        Tensor<T> dx(g.shape());
        const int n = y.dim(0), c = y.dim(1);
        const std::size_t inner = y.rank() == 4 ? static_cast<std::size_t>(y.dim(2)) * y.dim(3) : 1;
        for (int b = 0; b < n; ++b)
            for (std::size_t p = 0; p < inner; ++p) {
                std::size_t off = static_cast<std::size_t>(b) * c * inner + p;
                T dot = 0;
                for (int k = 0; k < c; ++k) dot += g[off + k * inner] * y[off + k * inner];
                for (int k = 0; k < c; ++k) dx[off + k * inner] = y[off + k * inner] * (g[off + k * inner] - dot);
            }
        return dx;
    }

    LayerSpec spec() const override { return LayerSpec::pointwise(LayerKind::softmax); }

private:
    Tensor<T> output_;
};

/// Inverted dropout. Identity at inference.
template <typename T>
class Dropout final : public Layer<T> {
public:
    explicit Dropout(double p, std::uint64_t seed = 0) : p_(p), rng_(seed) {
        LayerSpec s = spec();
        s.validate();
    }

    void reseed(std::uint64_t seed) { rng_.seed(seed); }
    /// Reuse the previous mask on later training passes (finite-difference checks).
    void freeze_mask(bool on) { frozen_ = on; }

    Tensor<T> forward(const Tensor<T>& x, Mode mode, bool record = true) override {
        const bool active = mode == Mode::train && p_ > 0.0;
        if (record) train_ = active;
        if (!active) return x;
        if (!frozen_ || mask_.size() != x.size()) {
            std::bernoulli_distribution keep(1.0 - p_);
            const T scale = static_cast<T>(1.0 / (1.0 - p_));
            mask_.assign(x.size(), T{0});
            for (auto& m : mask_) m = keep(rng_) ? scale : T{0};
        }
        Tensor<T> y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask_[i];
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        if (!train_) return g;
        Tensor<T> dx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * mask_[i];
        return dx;
    }

    LayerSpec spec() const override {
        LayerSpec s = LayerSpec::pointwise(LayerKind::dropout);
        s.drop = p_;
        return s;
    }
    double probability() const { return p_; }

private:
    double p_;
    std::mt19937_64 rng_;
    std::vector<T> mask_;
    bool train_ = false;
    bool frozen_ = false;
};

/// Batch normalisation over axis 1. Statistics span batch and spatial axes.
/// Training uses minibatch statistics and updates running averages;
/// inference uses the running averages.
template <typename T>
class BatchNorm final : public Layer<T> {
public:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    explicit BatchNorm(int channels) : channels_(channels) {
        gamma_.value = Tensor<T>({channels}, T{1});
        beta_.value = Tensor<T>({channels}, T{0});
        mean_.value = Tensor<T>({channels}, T{0});
        var_.value = Tensor<T>({channels}, T{1});
        mean_.trainable = var_.trainable = false;
        for (auto* p : parameters()) p->zero_grad();
    }

    void set_name(const std::string& name) override {
        this->name_ = name;
        gamma_.name = name + ".gamma";
        beta_.name = name + ".beta";
        mean_.name = name + ".running_mean";
        var_.name = name + ".running_var";
    }

    void initialize(std::mt19937_64&) override {
        gamma_.value.fill(T{1});
        beta_.value.fill(T{0});
        mean_.value.fill(T{0});
        var_.value.fill(T{1});
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode, bool record = true) override {
        require((x.rank() == 2 || x.rank() == 4) && x.dim(1) == channels_, ErrorKind::invalid_argument,
                this->name_ + ": batchnorm channel mismatch " + x.shape_string());
        const int n = x.dim(0);
        const std::size_t inner = x.rank() == 4 ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1;
        const double m = static_cast<double>(n) * static_cast<double>(inner);
        Tensor<T> y(x.shape());
        const bool training = mode == Mode::train;
        if (record) train_ = training;
        if (training) {
            require(n >= 2, ErrorKind::invalid_argument,
                    this->name_ + ": batchnorm in training needs a batch of at least 2");
            xhat_ = Tensor<T>(x.shape());
            inv_std_.assign(static_cast<std::size_t>(channels_), T{0});
        }
        for (int c = 0; c < channels_; ++c) {
            T mu, inv;
            if (training) {
                double s = 0, ss = 0;
                for (int b = 0; b < n; ++b) {
                    const T* p = x.data() + (static_cast<std::size_t>(b) * channels_ + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) s += p[i];
                }
                double mean = s / m;
                for (int b = 0; b < n; ++b) {
                    const T* p = x.data() + (static_cast<std::size_t>(b) * channels_ + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) ss += (p[i] - mean) * (p[i] - mean);
                }
                double var = ss / m;
                mu = static_cast<T>(mean);
                inv = static_cast<T>(1.0 / std::sqrt(var + kEps));
                inv_std_[static_cast<std::size_t>(c)] = inv;
                auto& rm = mean_.value[static_cast<std::size_t>(c)];
                auto& rv = var_.value[static_cast<std::size_t>(c)];
                rm = static_cast<T>((1 - kMomentum) * rm + kMomentum * mean);
                rv = static_cast<T>((1 - kMomentum) * rv + kMomentum * var * m / (m - 1));
            } else {
                mu = mean_.value[static_cast<std::size_t>(c)];
                inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var_.value[static_cast<std::size_t>(c)]) + kEps));
            }
            const T g = gamma_.value[static_cast<std::size_t>(c)], bta = beta_.value[static_cast<std::size_t>(c)];
            for (int b = 0; b < n; ++b) {
                std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    T xh = (x[off + i] - mu) * inv;
                    if (training) xhat_[off + i] = xh;
                    y[off + i] = g * xh + bta;
                }
            }
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g) override {
        const int n = g.dim(0);
        const std::size_t inner = g.rank() == 4 ? static_cast<std::size_t>(g.dim(2)) * g.dim(3) : 1;
        const double m = static_cast<double>(n) * static_cast<double>(inner);
        Tensor<T> dx(g.shape());
        for (int c = 0; c < channels_; ++c) {
            const T gam = gamma_.value[static_cast<std::size_t>(c)];
            if (!train_) {
                T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var_.value[static_cast<std::size_t>(c)]) + kEps));
                for (int b = 0; b < n; ++b) {
                    std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) dx[off + i] = g[off + i] * gam * inv;
                }
                continue;
            }
            double sg = 0, sgx = 0;
            for (int b = 0; b < n; ++b) {
                std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    sg += g[off + i];
                    sgx += g[off + i] * xhat_[off + i];
                }
            }
            gamma_.grad[static_cast<std::size_t>(c)] += static_cast<T>(sgx);
            beta_.grad[static_cast<std::size_t>(c)] += static_cast<T>(sg);
            const T k = gam * inv_std_[static_cast<std::size_t>(c)];
            for (int b = 0; b < n; ++b) {
                std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * inner;
                for (std::size_t i = 0; i < inner; ++i)
                    dx[off + i] = static_cast<T>(k * (g[off + i] - sg / m - xhat_[off + i] * sgx / m));
            }
        }
        if (train_) gamma_.touched = beta_.touched = true;
        return dx;
    }

    std::vector<Parameter<T>*> parameters() override { return {&gamma_, &beta_, &mean_, &var_}; }
    LayerSpec spec() const override {
        LayerSpec s = LayerSpec::pointwise(LayerKind::batchnorm);
        s.in = channels_;
        return s;
    }

private:
    int channels_;
    Parameter<T> gamma_, beta_, mean_, var_;
    Tensor<T> xhat_;
    std::vector<T> inv_std_;
    bool train_ = false;
};

/// [N, C, H, W] -> [N, C*H*W].
template <typename T>
class Flatten final : public Layer<T> {
public:
    Tensor<T> forward(const Tensor<T>& x, Mode, bool record = true) override {
        if (record) shape_ = x.shape();
        Tensor<T> y = x;
        int f = 1;
        for (int i = 1; i < x.rank(); ++i) f *= x.dim(i);
        y.reshape({x.dim(0), f});
        return y;
    }
    Tensor<T> backward(const Tensor<T>& g) override {
        Tensor<T> dx = g;
        dx.reshape(shape_);
        return dx;
    }
    LayerSpec spec() const override { return LayerSpec::pointwise(LayerKind::flatten); }

private:
    std::vector<int> shape_;
};

/// Ordered chain of layers.
template <typename T>
class Sequential {
public:
    Sequential() = default;
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    template <typename L, typename... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    void set_name(const std::string& prefix) {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            layers_[i]->set_name(prefix + "." + std::to_string(i) + "." + std::string(to_string(layers_[i]->spec().kind)));
    }

    void initialize(std::mt19937_64& rng) {
        for (auto& l : layers_) l->initialize(rng);
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode, bool record = true) {
        Tensor<T> h = x;
        for (auto& l : layers_) h = l->forward(h, mode, record);
        return h;
    }

    Tensor<T> backward(const Tensor<T>& g) {
        Tensor<T> d = g;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
        return d;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& l : layers_)
            for (auto* p : l->parameters()) out.push_back(p);
        return out;
    }

    std::vector<LayerSpec> specs() const {
        std::vector<LayerSpec> out;
        for (const auto& l : layers_) out.push_back(l->spec());
        return out;
    }

    std::size_t size() const { return layers_.size(); }
    Layer<T>& operator[](std::size_t i) { return *layers_[i]; }

    template <typename L>
    void for_each(auto&& fn) {
        for (auto& l : layers_)
            if (auto* p = dynamic_cast<L*>(l.get())) fn(*p);
    }

private:
    std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace calcscore::nn
