#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "calcscore/nn/gradcheck.hpp"
#include "calcscore/nn/loss.hpp"
#include "calcscore/nn/receptive_field.hpp"
#include "calcscore/nn/serialize.hpp"
#include "test_support.hpp"

using namespace calcscore;
using namespace calcscore::nn;
using calcscore::testing::error_kind_of;
using calcscore::testing::scratch_dir;
using Catch::Approx;

namespace {

template <typename T = double>
Tensor<T> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.values()) v = static_cast<T>(u(rng));
    return t;
}

template <typename T>
void randomize(Layer<T>& l, std::mt19937_64& rng) {
    for (auto* p : l.parameters())
        if (p->trainable)
            for (auto& v : p->value.values()) v = static_cast<T>(std::uniform_real_distribution<double>(-0.5, 0.5)(rng));
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Parameter and input gradient check of one layer under loss = <y, u>.
void check_layer(Layer<double>& layer, const Tensor<double>& x, Mode mode, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    layer.set_name("layer");
    randomize(layer, rng);
    Tensor<double> probe = layer.forward(x, mode, false);
    Tensor<double> u = random_tensor(probe.shape(), rng);
    auto params = layer.parameters();
    if (!params.empty()) {
        auto rep = grad_check(params, [&](bool with_grad) {
            Tensor<double> y = layer.forward(x, mode, with_grad);
            if (with_grad) layer.backward(u);
            return dot(y, u);
        });
        INFO(rep.worst);
        CHECK(rep.max_rel_error <= 1e-5);
        CHECK(rep.disconnected.empty());
    }
    CHECK(layer_input_grad_check(layer, x, u, mode) <= 1e-5);
}

/// Direct-summation valid-mode dilated cross-correlation.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int d) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), f = w.dim(0), k = w.dim(2);
    const int oh = h - d * (k - 1), ow = wd - d * (k - 1);
    Tensor<double> y({n, f, oh, ow});
    for (int s = 0; s < n; ++s)
        for (int o = 0; o < f; ++o)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double acc = b[static_cast<std::size_t>(o)];
                    for (int ch = 0; ch < c; ++ch)
                        for (int p = 0; p < k; ++p)
                            for (int q = 0; q < k; ++q) acc += w.at(o, ch, p, q) * x.at(s, ch, i + d * p, j + d * q);
                    y.at(s, o, i, j) = acc;
                }
    return y;
}

}  // namespace

TEST_CASE("conv2d forward", "[neuralcore][conv]") {
    std::mt19937_64 rng(7);
    SECTION("centred delta kernel crops the input") {
        for (int d : {1, 2, 3}) {
            Conv2d<double> conv(1, 1, 3, d);
            conv.weight().value.at(0, 0, 1, 1) = 1.0;
            auto x = random_tensor({1, 1, 9, 9}, rng);
            auto y = conv.forward(x, Mode::infer, false);
            REQUIRE(y.dim(2) == 9 - 2 * d);
            for (int i = 0; i < y.dim(2); ++i)
                for (int j = 0; j < y.dim(3); ++j) CHECK(y.at(0, 0, i, j) == x.at(0, 0, i + d, j + d));
        }
    }
    SECTION("impulse response of a dilated box kernel") {
        Conv2d<double> conv(1, 1, 3, 2);
        conv.weight().value.fill(1.0);
        Tensor<double> x({1, 1, 11, 11});
        x.at(0, 0, 5, 5) = 1.0;
        auto y = conv.forward(x, Mode::infer, false);
        // Output (i, j) reads input (i + 2p, j + 2q); the impulse sits at offsets {-2,0,2} of the centre tap.
        for (int i = 0; i < 7; ++i)
            for (int j = 0; j < 7; ++j) {
                int di = 5 - (i + 2), dj = 5 - (j + 2);
                bool hit = (di == -2 || di == 0 || di == 2) && (dj == -2 || dj == 0 || dj == 2);
                CHECK(y.at(0, 0, i, j) == (hit ? 1.0 : 0.0));
            }
    }
    SECTION("1x1 kernel is affine") {
        Conv2d<double> conv(1, 1, 1);
        conv.weight().value[0] = 2.0;
        conv.bias().value[0] = 1.0;
        auto x = random_tensor({2, 1, 3, 4}, rng);
        auto y = conv.forward(x, Mode::infer, false);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == Approx(2 * x[i] + 1).epsilon(1e-15));
    }
    SECTION("matches direct summation on 8x8 inputs in 32-bit") {
        for (int d : {1, 2, 4})
            for (int k : {1, 2, 3}) {
                if (d * (k - 1) + 1 > 8) continue;
                Conv2d<float> conv(3, 4, k, d);
                conv.initialize(rng);
                for (auto& v : conv.bias().value.values()) v = std::uniform_real_distribution<float>(-1, 1)(rng);
                auto x = random_tensor<float>({2, 3, 8, 8}, rng);
                auto y = conv.forward(x, Mode::infer, false);
                auto ref = conv_oracle(x.cast<double>(), conv.weight().value.cast<double>(),
                                       conv.bias().value.cast<double>(), d);
                REQUIRE(y.shape() == ref.shape());
                for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - ref[i]) <= 1e-6 * std::max(1.0, std::abs(ref[i])));
            }
    }
    SECTION("input smaller than the dilated footprint is rejected") {
        Conv2d<double> conv(1, 1, 3, 4);
        Tensor<double> x({1, 1, 8, 8});
        CHECK(error_kind_of([&] { conv.forward(x, Mode::infer, false); }) == ErrorKind::invalid_argument);
        CHECK(error_kind_of([] { Conv2d<double>(1, 1, 3, 0); }) == ErrorKind::invalid_argument);
    }
}

TEST_CASE("pointwise layer forwards", "[neuralcore]") {
    SECTION("elu") {
        CHECK(elu(0.0) == 0.0);
        CHECK(elu(5.0) == 5.0);
        CHECK(elu(-1.0) == Approx(std::exp(-1.0) - 1).margin(1e-6));
        CHECK(elu(-1.0) == Approx(-0.6321).margin(1e-4));
    }
    SECTION("maxpool") {
        MaxPool2d<double> mp(2, 2);
        Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
        auto y = mp.forward(x, Mode::infer, false);
        REQUIRE(y.size() == 1);
        CHECK(y[0] == 4.0);
        Tensor<double> c({1, 2, 6, 6}, 3.5);
        const auto pooled = mp.forward(c, Mode::infer, false);
        for (double v : pooled.values()) CHECK(v == 3.5);
        std::mt19937_64 rng(3);
        for (auto [pool, stride] : {std::pair{2, 2}, {3, 1}, {2, 1}, {3, 2}}) {
            MaxPool2d<double> m(pool, stride);
            auto r = random_tensor({2, 3, 4, 4}, rng);
            auto out = m.forward(r, Mode::infer, false);
            const int o = (4 - pool) / stride + 1;
            REQUIRE(out.dim(2) == o);
            for (int n = 0; n < 2; ++n)
                for (int ch = 0; ch < 3; ++ch)
                    for (int i = 0; i < o; ++i)
                        for (int j = 0; j < o; ++j) {
                            double best = -1e300;
                            for (int p = 0; p < pool; ++p)
                                for (int q = 0; q < pool; ++q) best = std::max(best, r.at(n, ch, i * stride + p, j * stride + q));
                            CHECK(out.at(n, ch, i, j) == best);
                        }
        }
    }
    SECTION("softmax") {
        Softmax<double> sm;
        Tensor<double> eq({2, 7}, 0.3);
        const auto p = sm.forward(eq, Mode::infer, false);
        for (double v : p.values()) CHECK(v == Approx(1.0 / 7).margin(1e-12));
        std::mt19937_64 rng(5);
        auto x = random_tensor({4, 7, 3, 3}, rng, -50, 50);
        x[0] = 1000;
        x[9] = -1000;
        auto y = sm.forward(x, Mode::infer, false);
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    double s = 0;
                    for (int c = 0; c < 7; ++c) {
                        CHECK(y.at(n, c, i, j) >= 0.0);
                        s += y.at(n, c, i, j);
                    }
                    CHECK(s == Approx(1.0).margin(1e-6));
                }
    }
    SECTION("dropout") {
        std::mt19937_64 rng(9);
        auto x = random_tensor({3, 5}, rng);
        Dropout<double> none(0.0, 1);
        CHECK(none.forward(x, Mode::train).values() == x.values());
        CHECK(none.forward(x, Mode::infer).values() == x.values());
        Dropout<double> half(0.5, 1);
        CHECK(half.forward(x, Mode::infer).values() == x.values());
        auto g = random_tensor({3, 5}, rng);
        CHECK(half.backward(g).values() == g.values());
        auto y = half.forward(x, Mode::train);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK((y[i] == 0.0 || y[i] == Approx(2 * x[i])));
        CHECK(error_kind_of([] { Dropout<double>(1.0); }) == ErrorKind::invalid_argument);
    }
    SECTION("batchnorm") {
        // Channel 0 holds mean 3, variance 4; channel 1 is arbitrary.
        Tensor<double> x({4, 2}, std::vector<double>{1, 0, 5, 10, 1, -3, 5, 7});
        BatchNorm<double> bn(2);
        auto y = bn.forward(x, Mode::train);
        double m = 0, v = 0;
        for (int n = 0; n < 4; ++n) m += y.at(n, 0) / 4;
        for (int n = 0; n < 4; ++n) v += (y.at(n, 0) - m) * (y.at(n, 0) - m) / 4;
        CHECK(m == Approx(0).margin(1e-5));
        CHECK(v == Approx(1).margin(1e-5));
        CHECK(y.at(0, 0) == Approx(-2 / std::sqrt(4 + BatchNorm<double>::kEps)).margin(1e-12));
        Tensor<double> one({1, 2}, 1.0);
        CHECK(error_kind_of([&] { bn.forward(one, Mode::train); }) == ErrorKind::invalid_argument);
        CHECK_NOTHROW(bn.forward(one, Mode::infer));
    }
    SECTION("batchnorm inference uses the running averages") {
        BatchNorm<double> bn(1);
        bn.set_name("bn");
        auto ps = bn.parameters();
        ps[2]->value[0] = 2.0;   // running mean
        ps[3]->value[0] = 9.0;   // running variance
        ps[0]->value[0] = 3.0;   // gamma
        ps[1]->value[0] = -1.0;  // beta
        Tensor<double> x({1, 1}, 5.0);
        CHECK(bn.forward(x, Mode::infer)[0] == Approx(3.0 * (5 - 2) / std::sqrt(9 + BatchNorm<double>::kEps) - 1));
    }
}

TEST_CASE("cross entropy", "[neuralcore][loss]") {
    std::vector<int> t0{2};
    Tensor<double> onehot({1, 7});
    onehot[2] = 1.0;
    CHECK(cross_entropy(onehot, std::span<const int>(t0)).value == 0.0);
    Tensor<double> uniform({3, 7}, 1.0 / 7);
    std::vector<int> t3{0, 3, 6};
    CHECK(cross_entropy(uniform, std::span<const int>(t3)).value == Approx(std::log(7.0)).margin(1e-12));
    CHECK(cross_entropy(uniform, std::span<const int>(t3)).value == Approx(1.9459).margin(1e-4));
    Tensor<double> half({1, 2}, 0.5);
    std::vector<int> t1{1};
    CHECK(cross_entropy(half, std::span<const int>(t1)).value == Approx(0.6931).margin(1e-4));
    Tensor<double> zero({1, 2}, std::vector<double>{1.0, 0.0});
    CHECK(cross_entropy(zero, std::span<const int>(t1)).value == Approx(-std::log(1e-12)));
    std::vector<int> bad{7};
    CHECK(error_kind_of([&] { cross_entropy(uniform, std::span<const int>(std::vector<int>{0, 1, 7})); }) ==
          ErrorKind::invalid_argument);
    CHECK(error_kind_of([&] { cross_entropy(onehot, std::span<const int>(bad)); }) == ErrorKind::invalid_argument);
}

namespace {

/// Hand-stepped scalar Adam with L2 decay folded into the gradient.
double adam_oracle(double p, double grad, double decay, int steps, const AdamConfig& c) {
    double m = 0, v = 0;
    for (int t = 1; t <= steps; ++t) {
        double g = grad + decay * p;
        m = c.beta1 * m + (1 - c.beta1) * g;
        v = c.beta2 * v + (1 - c.beta2) * g * g;
        double mh = m / (1 - std::pow(c.beta1, t));
        double vh = v / (1 - std::pow(c.beta2, t));
        p -= c.learning_rate * mh / (std::sqrt(vh) + c.epsilon);
    }
    return p;
}

Parameter<double> scalar_param(double value, bool decay) {
    Parameter<double> p;
    p.name = "scalar";
    p.value = Tensor<double>({1}, value);
    p.decay = decay;
    p.zero_grad();
    return p;
}

}  // namespace

TEST_CASE("adam", "[neuralcore][adam]") {
    AdamConfig cfg;
    SECTION("zero gradient without decay leaves parameters unchanged") {
        auto p = scalar_param(0.75, true);
        OptimizerState<double> st(cfg);
        std::vector<Parameter<double>*> ps{&p};
        for (int i = 0; i < 5; ++i) adam_step<double>(st, ps);
        CHECK(p.value[0] == 0.75);
        CHECK(st.step == 5u);
    }
    SECTION("constant unit gradient follows the scalar oracle") {
        auto p = scalar_param(0.5, false);
        OptimizerState<double> st(cfg);
        std::vector<Parameter<double>*> ps{&p};
        for (int t = 1; t <= 4; ++t) {
            p.grad[0] = 1.0;
            adam_step<double>(st, ps);
            CHECK(p.value[0] == Approx(adam_oracle(0.5, 1.0, 0.0, t, cfg)).margin(1e-10));
        }
        // First step moves by lr / (1 + eps).
        CHECK(adam_oracle(0.5, 1.0, 0.0, 1, cfg) == Approx(0.5 - 5e-4 / (1 + 1e-8)).margin(1e-15));
    }
    SECTION("weight decay pulls toward zero") {
        cfg.weight_decay = 0.1;
        auto p = scalar_param(2.0, true);
        auto q = scalar_param(2.0, false);
        OptimizerState<double> st(cfg);
        std::vector<Parameter<double>*> ps{&p, &q};
        for (int t = 1; t <= 3; ++t) {
            adam_step<double>(st, ps);
            CHECK(p.value[0] == Approx(adam_oracle(2.0, 0.0, 0.1, t, cfg)).margin(1e-10));
        }
        CHECK(p.value[0] < 2.0);
        CHECK(q.value[0] == 2.0);
    }
    SECTION("non-finite gradients name the parameter") {
        auto p = scalar_param(1.0, false);
        p.grad[0] = std::numeric_limits<double>::quiet_NaN();
        OptimizerState<double> st(cfg);
        std::vector<Parameter<double>*> ps{&p};
        try {
            adam_step<double>(st, ps);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::numeric);
            CHECK(std::string(e.what()).find("scalar") != std::string::npos);
        }
        CHECK(p.value[0] == 1.0);
    }
}

TEST_CASE("receptive field arithmetic", "[neuralcore][rf]") {
    auto ladder = [](std::vector<int> dil) {
        std::vector<LayerSpec> s;
        for (int d : dil) {
            s.push_back(LayerSpec::conv(1, 1, 3, d));
            s.push_back(LayerSpec::pointwise(LayerKind::elu));
        }
        return s;
    };
    CHECK(receptive_field(ladder({1, 1, 2, 4, 8, 16, 32, 1})).rf == 131);
    CHECK(receptive_field(ladder({1, 1, 2, 4, 8, 1})).rf == 35);
    CHECK(receptive_field(ladder({1, 1, 2, 4, 8, 16, 1})).rf == 67);
    CHECK(receptive_field(ladder({1, 1, 2, 4, 8, 16, 32, 64, 1})).rf == 259);
    std::vector<LayerSpec> one{LayerSpec::conv(1, 1, 1)};
    CHECK(receptive_field(one).rf == 1);
    std::vector<LayerSpec> pooled{LayerSpec::conv(1, 1, 3), LayerSpec::maxpool(2, 2), LayerSpec::conv(1, 1, 3)};
    CHECK(receptive_field(pooled) == ReceptiveField{8, 2});

    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        auto random_spec = [&] {
            std::vector<LayerSpec> s;
            int n = std::uniform_int_distribution<int>(1, 5)(rng);
            for (int i = 0; i < n; ++i) {
                if (rng() % 3 == 0)
                    s.push_back(LayerSpec::maxpool(static_cast<int>(rng() % 3) + 1, 1));
                else
                    s.push_back(LayerSpec::conv(1, 1, static_cast<int>(rng() % 4) + 1, static_cast<int>(rng() % 5) + 1));
                if (rng() % 2) s.push_back(LayerSpec::pointwise(LayerKind::batchnorm));
            }
            return s;
        };
        auto a = random_spec(), b = random_spec();
        auto ab = a;
        ab.insert(ab.end(), b.begin(), b.end());
        CHECK(receptive_field(ab).rf == receptive_field(a).rf + receptive_field(b).rf - 1);
    }
}

TEST_CASE("finite-difference gradients of every layer kind", "[neuralcore][gradcheck]") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        CAPTURE(seed);
        std::mt19937_64 rng(seed);
        SECTION("conv2d") {
            for (int d : {1, 2, 3}) {
                Conv2d<double> l(2, 3, 3, d);
                check_layer(l, random_tensor({2, 2, 9, 8}, rng), Mode::train, seed);
            }
        }
        SECTION("maxpool2d") {
            MaxPool2d<double> l(2, 2);
            check_layer(l, random_tensor({2, 3, 6, 6}, rng), Mode::train, seed);
        }
        SECTION("dense") {
            Dense<double> l(6, 4);
            check_layer(l, random_tensor({3, 6}, rng), Mode::train, seed);
        }
        SECTION("elu") {
            Elu<double> l;
            check_layer(l, random_tensor({2, 3, 4, 4}, rng, -3, 3), Mode::train, seed);
        }
        SECTION("softmax") {
            Softmax<double> l;
            check_layer(l, random_tensor({3, 7}, rng, -2, 2), Mode::train, seed);
            check_layer(l, random_tensor({2, 4, 3, 3}, rng, -2, 2), Mode::train, seed);
        }
        SECTION("dropout") {
            Dropout<double> l(0.4, seed);
            l.freeze_mask(true);
            check_layer(l, random_tensor({3, 8}, rng), Mode::train, seed);
            Dropout<double> inf(0.4, seed);
            check_layer(inf, random_tensor({3, 8}, rng), Mode::infer, seed);
        }
        SECTION("batchnorm") {
            BatchNorm<double> l(3);
            check_layer(l, random_tensor({4, 3, 3, 3}, rng), Mode::train, seed);
            BatchNorm<double> d(5);
            check_layer(d, random_tensor({6, 5}, rng), Mode::train, seed);
        }
        SECTION("flatten") {
            Flatten<double> l;
            check_layer(l, random_tensor({2, 3, 2, 2}, rng), Mode::train, seed);
        }
        SECTION("concat") {
            // Two conv branches joined by channel concatenation, then a dense head.
            Conv2d<double> a(1, 2, 3), b(1, 3, 3, 2);
            Dense<double> head(5, 2);
            Flatten<double> flat;
            a.set_name("a");
            b.set_name("b");
            head.set_name("head");
            randomize(a, rng);
            randomize(b, rng);
            randomize(head, rng);
            auto xa = random_tensor({2, 1, 3, 3}, rng);
            auto xb = random_tensor({2, 1, 5, 5}, rng);
            auto u = random_tensor({2, 2}, rng);
            std::vector<Parameter<double>*> ps;
            for (Layer<double>* l : std::initializer_list<Layer<double>*>{&a, &b, &head})
                for (auto* p : l->parameters()) ps.push_back(p);
            auto rep = grad_check(ps, [&](bool g) {
                auto ya = a.forward(xa, Mode::train, g);
                auto yb = b.forward(xb, Mode::train, g);
                std::array<const Tensor<double>*, 2> parts{&ya, &yb};
                auto cat = concat_channels<double>(parts);
                auto z = head.forward(flat.forward(cat, Mode::train, g), Mode::train, g);
                if (g) {
                    auto dcat = flat.backward(head.backward(u));
                    std::array<int, 2> ch{2, 3};
                    auto parts_grad = split_channels<double>(dcat, ch);
                    a.backward(parts_grad[0]);
                    b.backward(parts_grad[1]);
                }
                return dot(z, u);
            });
            INFO(rep.worst);
            CHECK(rep.max_rel_error <= 1e-5);
            CHECK(rep.disconnected.empty());
        }
    }
}

TEST_CASE("gradient bookkeeping", "[neuralcore][gradcheck]") {
    SECTION("affine scalar graph") {
        Dense<double> l(1, 1);
        l.set_name("affine");
        l.weight().value[0] = 1.7;
        l.bias().value[0] = -0.3;
        Tensor<double> x({1, 1}, 2.5);
        l.forward(x, Mode::train);
        l.backward(Tensor<double>({1, 1}, 1.0));
        CHECK(l.weight().grad[0] == 2.5);
        CHECK(l.bias().grad[0] == 1.0);
    }
    SECTION("disconnected parameters are reported apart from zero gradients") {
        Dense<double> used(3, 2), unused(3, 2);
        used.set_name("used");
        unused.set_name("unused");
        std::mt19937_64 rng(1);
        randomize(used, rng);
        Tensor<double> x({2, 3});  // all-zero input: weight gradient is exactly zero
        Tensor<double> u({2, 2}, 1.0);
        std::vector<Parameter<double>*> ps;
        for (auto* p : used.parameters()) ps.push_back(p);
        for (auto* p : unused.parameters()) ps.push_back(p);
        auto rep = grad_check(ps, [&](bool g) {
            auto y = used.forward(x, Mode::train, g);
            if (g) used.backward(u);
            return dot(y, u);
        });
        CHECK(rep.disconnected == std::vector<std::string>{"unused.weight", "unused.bias"});
        CHECK(rep.numeric_zero == std::vector<std::string>{"used.weight"});
        CHECK(rep.max_rel_error <= 1e-5);
    }
}

TEST_CASE("weights serialization", "[neuralcore][serialize]") {
    auto dir = scratch_dir("neuralcore_weights");
    auto build = [](int hidden) {
        Sequential<float> s;
        s.add<Conv2d<float>>(1, hidden, 3, 2);
        s.add<BatchNorm<float>>(hidden);
        s.add<Elu<float>>();
        s.add<Flatten<float>>();
        s.add<Dense<float>>(hidden * 4, 2);
        s.set_name("net");
        return s;
    };
    auto pack = [](Sequential<float>& s, std::uint64_t seed) {
        NetworkWeights w;
        w.network = "toy";
        w.architecture = describe_architecture(s.specs());
        w.fingerprint = fingerprint_of(w.architecture);
        w.seed = seed;
        w.steps = 17;
        w.meta = {{"note", "two words"}};
        auto ps = s.parameters();
        w.tensors = export_tensors<float>(ps);
        return w;
    };
    auto net = build(3);
    std::mt19937_64 rng(4);
    net.initialize(rng);
    auto w = pack(net, 4);
    save_weights(dir / "toy.weights", w);
    auto back = load_weights(dir / "toy.weights");
    CHECK(back.fingerprint == w.fingerprint);
    CHECK(back.seed == 4u);
    CHECK(back.steps == 17u);
    CHECK(back.meta_value("note") == "two words");
    auto fresh = build(3);
    auto fps = fresh.parameters();
    import_tensors<float>(fps, back.tensors);
    auto a = net.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value.values() == fps[i]->value.values());
    save_weights(dir / "again.weights", pack(fresh, 4));
    std::ifstream f1(dir / "toy.weights", std::ios::binary), f2(dir / "again.weights", std::ios::binary);
    CHECK(std::string(std::istreambuf_iterator<char>(f1), {}) == std::string(std::istreambuf_iterator<char>(f2), {}));

    auto other = build(4);
    auto ops = other.parameters();
    CHECK(describe_architecture(other.specs()) != w.architecture);
    CHECK(error_kind_of([&] { import_tensors<float>(ops, back.tensors); }) == ErrorKind::fingerprint_mismatch);

    auto tampered = w;
    tampered.architecture += " elu";
    save_weights(dir / "bad.weights", tampered);
    CHECK(error_kind_of([&] { load_weights(dir / "bad.weights"); }) == ErrorKind::fingerprint_mismatch);
    std::filesystem::resize_file(dir / "toy.weights", std::filesystem::file_size(dir / "toy.weights") - 3);
    CHECK(error_kind_of([&] { load_weights(dir / "toy.weights"); }) == ErrorKind::size_mismatch);
}

TEST_CASE("fixed-seed training is bit-deterministic", "[neuralcore]") {
    auto run = [] {
        Sequential<float> s;
        s.add<Conv2d<float>>(1, 4, 3);
        s.add<BatchNorm<float>>(4);
        s.add<Elu<float>>();
        s.add<Flatten<float>>();
        s.add<Dropout<float>>(0.3, 5);
        s.add<Dense<float>>(4 * 9, 3);
        s.add<Softmax<float>>();
        s.set_name("det");
        std::mt19937_64 rng(21);
        s.initialize(rng);
        OptimizerState<float> opt;
        auto ps = s.parameters();
        for (int step = 0; step < 10; ++step) {
            auto x = random_tensor<float>({8, 1, 5, 5}, rng);
            std::vector<int> t(8);
            for (auto& v : t) v = static_cast<int>(rng() % 3);
            zero_grad<float>(ps);
            auto y = s.forward(x, Mode::train);
            auto loss = cross_entropy(y, std::span<const int>(t));
            s.backward(loss.grad);
            adam_step<float>(opt, ps);
        }
        std::vector<float> flat;
        for (auto* p : ps) flat.insert(flat.end(), p->value.values().begin(), p->value.values().end());
        return flat;
    };
    CHECK(run() == run());
}
