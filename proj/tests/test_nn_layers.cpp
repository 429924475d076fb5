#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"
#include "uaseg/nn/blocks.hpp"
#include "uaseg/nn/optim.hpp"

using namespace uaseg;
using namespace uaseg::nn;

namespace {

// Scalar probe loss: sum(out * w) with fixed random w, so dL/dout = w.
template <typename Layer>
void check_layer_gradients(Layer& layer, const Tensor<double>& x, double tol = 1e-6,
                           int max_checks = 6) {
    Rng rng(99);
    Tensor<double> out = layer.forward(x, true);
    Tensor<double> w = testutil::random_tensor<double>(out.n(), out.c(), out.h(), out.w(), rng);

    ParamSet<double> params;
    if constexpr (requires { layer.params(params, "p"); }) layer.params(params, "p");
    zero_grads(params);
    Tensor<double> gx = layer.backward(w);

    auto loss_at = [&]() {
        Tensor<double> o = layer.forward(x, true);
        double s = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) s += o.ptr()[i] * w.ptr()[i];
        return s;
    };

    const double h = 1e-6;
    // Input gradient at a few random entries.
    Tensor<double> xm = x;
    for (int k = 0; k < max_checks; ++k) {
        const std::size_t i = rng.uniform_int(xm.size());
        // Recreate the forward cache for the perturbed input.
        const double keep = xm.ptr()[i];
        xm.ptr()[i] = keep + h;
        Tensor<double> op = layer.forward(xm, true);
        double lp = 0.0;
        for (std::size_t j = 0; j < op.size(); ++j) lp += op.ptr()[j] * w.ptr()[j];
        xm.ptr()[i] = keep - h;
        Tensor<double> om = layer.forward(xm, true);
        double lm = 0.0;
        for (std::size_t j = 0; j < om.size(); ++j) lm += om.ptr()[j] * w.ptr()[j];
        xm.ptr()[i] = keep;
        const double fd = (lp - lm) / (2 * h);
        INFO("input grad entry " << i);
        CHECK(testutil::rel_err(gx.ptr()[i], fd, 1e-8) < tol);
    }
    // Parameter gradients.
    // Re-run forward/backward on the clean input so caches match.
    layer.forward(x, true);
    zero_grads(params);
    layer.backward(w);
    for (auto& p : params) {
        if (!p.grad) continue;
        for (int k = 0; k < std::min<int>(max_checks, static_cast<int>(p.value->size())); ++k) {
            const std::size_t i = rng.uniform_int(p.value->size());
            const double keep = p.value->ptr()[i];
            p.value->ptr()[i] = keep + h;
            const double lp = loss_at();
            p.value->ptr()[i] = keep - h;
            const double lm = loss_at();
            p.value->ptr()[i] = keep;
            const double fd = (lp - lm) / (2 * h);
            INFO("param " << p.name << " entry " << i);
            CHECK(testutil::rel_err(p.grad->ptr()[i], fd, 1e-8) < tol);
        }
    }
}

}  // namespace

TEST_CASE("conv2d output shapes") {
    Rng rng(1);
    Conv2d<float> conv(3, 8, 3, 1, 1, true, rng);
    Tensor<float> x = testutil::random_tensor<float>(2, 3, 16, 16, rng);
    auto y = conv.forward(x, false);
    REQUIRE(y.shape() == std::array<int, 4>{2, 8, 16, 16});

    Conv2d<float> strided(3, 4, 7, 2, 3, false, rng);
    auto y2 = strided.forward(x, false);
    REQUIRE(y2.shape() == std::array<int, 4>{2, 4, 8, 8});

    Tensor<float> empty(0, 3, 16, 16);
    auto y3 = conv.forward(empty, false);
    REQUIRE(y3.n() == 0);
    REQUIRE(y3.c() == 8);
}

TEST_CASE("conv2d matches direct convolution on a small case") {
    Rng rng(2);
    Conv2d<double> conv(1, 1, 3, 1, 1, false, rng);
    Tensor<double> x = testutil::random_tensor<double>(1, 1, 4, 4, rng);
    auto y = conv.forward(x, false);
    for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 4; ++ox) {
            double acc = 0.0;
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int iy = oy - 1 + ky, ix = ox - 1 + kx;
                    if (iy >= 0 && iy < 4 && ix >= 0 && ix < 4)
                        acc += conv.weight().at(0, 0, ky, kx) * x.at(0, 0, iy, ix);
                }
            CHECK(testutil::rel_err(y.at(0, 0, oy, ox), acc) < 1e-12);
        }
}

TEST_CASE("conv2d gradients") {
    Rng rng(3);
    Conv2d<double> conv(2, 3, 3, 1, 1, true, rng);
    Tensor<double> x = testutil::random_tensor<double>(2, 2, 5, 5, rng);
    check_layer_gradients(conv, x);
}

TEST_CASE("conv transpose doubles resolution exactly and matches adjoint") {
    Rng rng(4);
    ConvTranspose2d<double> tc(3, 2, 4, 2, 1, false, rng);
    Tensor<double> x = testutil::random_tensor<double>(1, 3, 6, 6, rng);
    auto y = tc.forward(x, false);
    REQUIRE(y.shape() == std::array<int, 4>{1, 2, 12, 12});
    check_layer_gradients(tc, x);
}

TEST_CASE("batchnorm training statistics and gradients") {
    Rng rng(5);
    BatchNorm2d<double> bn(3);
    Tensor<double> x = testutil::random_tensor<double>(2, 3, 4, 4, rng, -2.0, 3.0);
    auto y = bn.forward(x, true);
    // Normalized output has ~zero mean and ~unit variance per channel.
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, var = 0.0;
        const double gamma = 1.0;
        (void)gamma;
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 16; ++i) mean += y.plane(n, c)[i];
        mean /= 32.0;
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 16; ++i) {
                const double d = y.plane(n, c)[i] - mean;
                var += d * d;
            }
        var /= 32.0;
        CHECK(std::abs(mean) < 1e-9);
        // The eps in the denominator shifts the variance by ~eps/var.
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
    check_layer_gradients(bn, x, 1e-5);
}

TEST_CASE("batchnorm eval mode uses running statistics and is differentiable") {
    Rng rng(6);
    BatchNorm2d<double> bn(2);
    Tensor<double> x = testutil::random_tensor<double>(3, 2, 4, 4, rng, -1.0, 2.0);
    for (int i = 0; i < 5; ++i) bn.forward(x, true);  // populate running stats
    auto y1 = bn.forward(x, false);
    auto y2 = bn.forward(x, false);
    REQUIRE(y1.raw() == y2.raw());

    struct EvalBn {
        BatchNorm2d<double>* bn;
        Tensor<double> forward(const Tensor<double>& x, bool) { return bn->forward(x, false); }
        Tensor<double> backward(const Tensor<double>& g) { return bn->backward(g); }
        void params(ParamSet<double>& ps, const std::string& p) { bn->params(ps, p); }
    } wrapper{&bn};
    check_layer_gradients(wrapper, x, 1e-5);
}

TEST_CASE("maxpool forward and gradient routing") {
    Rng rng(7);
    MaxPool2d<double> pool(2, 2, 0);
    Tensor<double> x = testutil::random_tensor<double>(1, 2, 6, 6, rng);
    auto y = pool.forward(x, true);
    REQUIRE(y.shape() == std::array<int, 4>{1, 2, 3, 3});
    for (int c = 0; c < 2; ++c)
        for (int oy = 0; oy < 3; ++oy)
            for (int ox = 0; ox < 3; ++ox) {
                double best = -1e30;
                for (int ky = 0; ky < 2; ++ky)
                    for (int kx = 0; kx < 2; ++kx)
                        best = std::max(best, x.at(0, c, 2 * oy + ky, 2 * ox + kx));
                CHECK(y.at(0, c, oy, ox) == best);
            }
    check_layer_gradients(pool, x, 1e-6, 4);

    MaxPool2d<double> pool3(3, 2, 1);
    auto y3 = pool3.forward(x, true);
    REQUIRE(y3.shape() == std::array<int, 4>{1, 2, 3, 3});
}

TEST_CASE("softmax channels normalizes and backward matches finite differences") {
    Rng rng(8);
    Tensor<double> z = testutil::random_tensor<double>(1, 4, 3, 3, rng, -3.0, 3.0);
    auto p = softmax_channels(z);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
            double s = 0.0;
            for (int c = 0; c < 4; ++c) s += p.at(0, c, y, x);
            CHECK(std::abs(s - 1.0) < 1e-12);
        }

    Tensor<double> w = testutil::random_tensor<double>(1, 4, 3, 3, rng);
    auto gz = softmax_backward(p, w);
    const double h = 1e-6;
    for (int k = 0; k < 8; ++k) {
        const std::size_t i = rng.uniform_int(z.size());
        auto probe = [&](double delta) {
            Tensor<double> zz = z;
            zz.ptr()[i] += delta;
            auto pp = softmax_channels(zz);
            double s = 0.0;
            for (std::size_t j = 0; j < pp.size(); ++j) s += pp.ptr()[j] * w.ptr()[j];
            return s;
        };
        const double fd = (probe(h) - probe(-h)) / (2 * h);
        CHECK(testutil::rel_err(gz.ptr()[i], fd, 1e-10) < 1e-6);
    }
}

TEST_CASE("relu and tanh gradients") {
    Rng rng(9);
    ReLU<double> relu;
    Tensor<double> x = testutil::random_tensor<double>(1, 2, 4, 4, rng);
    check_layer_gradients(relu, x);
    Tanh<double> th;
    check_layer_gradients(th, x);
}

TEST_CASE("concat and split are inverse") {
    Rng rng(10);
    auto a = testutil::random_tensor<float>(2, 3, 4, 4, rng);
    auto b = testutil::random_tensor<float>(2, 5, 4, 4, rng);
    auto cat = concat_channels(a, b);
    REQUIRE(cat.c() == 8);
    auto [a2, b2] = split_channels(cat, 3);
    REQUIRE(a2.raw() == a.raw());
    REQUIRE(b2.raw() == b.raw());
}

TEST_CASE("residual block gradient check") {
    Rng rng(14);
    SECTION("basic with projection") {
        ResidualBlock<double> block(3, 4, 4, 2, false, rng);
        Tensor<double> x = testutil::random_tensor<double>(1, 3, 6, 6, rng);
        check_layer_gradients(block, x, 1e-4, 4);
    }
    SECTION("bottleneck identity") {
        ResidualBlock<double> block(4, 2, 4, 1, true, rng);
        Tensor<double> x = testutil::random_tensor<double>(1, 4, 4, 4, rng);
        check_layer_gradients(block, x, 1e-4, 4);
    }
}

TEST_CASE("adam reduces a quadratic") {
    Tensor<float> w(1, 1, 1, 4), g(1, 1, 1, 4);
    for (int i = 0; i < 4; ++i) w.ptr()[i] = 2.0f + i;
    ParamSet<float> ps{{"w", &w, &g}};
    Adam<float> adam(ps, 0.1f);
    for (int step = 0; step < 200; ++step) {
        for (int i = 0; i < 4; ++i) g.ptr()[i] = 2.0f * w.ptr()[i];
        adam.step(ps);
    }
    for (int i = 0; i < 4; ++i) CHECK(std::abs(w.ptr()[i]) < 0.05f);
}

TEST_CASE("plateau scheduler fires after five non-improving epochs") {
    PlateauScheduler sched(0.1, 5, 1e-4);
    CHECK_FALSE(sched.observe(1.0));  // baseline
    CHECK_FALSE(sched.observe(1.0));
    CHECK_FALSE(sched.observe(1.0));
    CHECK_FALSE(sched.observe(1.0));
    CHECK_FALSE(sched.observe(1.0));
    CHECK(sched.observe(1.0));  // fifth consecutive failure -> reduce

    PlateauScheduler s2(0.1, 5, 1e-4);
    CHECK_FALSE(s2.observe(1.0));
    CHECK_FALSE(s2.observe(0.9));  // improvement resets
    CHECK_FALSE(s2.observe(0.9));
    CHECK_FALSE(s2.observe(0.9));
    CHECK_FALSE(s2.observe(0.9));
    CHECK_FALSE(s2.observe(0.9));
    CHECK(s2.observe(0.9));
}
