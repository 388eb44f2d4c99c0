#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "msti/ops.hpp"
#include "support.hpp"

using namespace msti;
using msti::testing::random_tensor;

namespace {

using Build = std::function<Var<double>(const std::vector<Var<double>>&)>;

// Checks every input entry of a scalar-valued graph against central differences.
void expect_gradients(const Build& build, std::vector<Var<double>> inputs, double rtol = 1e-5, double atol = 1e-8) {
    for (auto& v : inputs) v.zero_grad();
    const Var<double> out = build(inputs);
    backward(out);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Var<double> v = inputs[k];
        const Tensor<double> analytic = v.grad();
        for (std::size_t i = 0; i < v.value().size(); ++i) {
            const double num = msti::testing::central_difference(
                [&] { return build(inputs).value()[0]; }, v.mutable_value()[i], 1e-6);
            EXPECT_TRUE(msti::testing::grad_close(analytic[i], num, rtol, atol))
                << "input " << k << " entry " << i << ": analytic " << analytic[i] << " numeric " << num;
        }
    }
}

Var<double> leaf(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
    return Var<double>::leaf(random_tensor<double>(s, rng, lo, hi), true);
}

// Nonlinear scalarization so that every output entry receives a distinct gradient.
Var<double> scalarize(const Var<double>& y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return ops::squared_error(y, Var<double>::constant(random_tensor<double>(y.shape(), rng)), false);
}

double naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, int stride, int n, int co,
                  int oy, int ox) {
    const int k = w.shape().h, pad = k / 2;
    double s = b ? (*b)[co] : 0.0;
    for (int ci = 0; ci < x.shape().c; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy < 0 || ix < 0 || iy >= x.shape().h || ix >= x.shape().w) continue;
                s += w.at(co, ci, ky, kx) * x.at(n, ci, iy, ix);
            }
    return s;
}

}  // namespace

TEST(Conv2d, MatchesDirectLoop) {
    std::mt19937_64 rng(1);
    for (int k : {1, 3}) {
        for (int stride : {1, 2}) {
            const auto x = random_tensor<double>(Shape{2, 3, 6, 8}, rng);
            const auto w = random_tensor<double>(Shape{4, 3, k, k}, rng);
            const auto b = random_tensor<double>(Shape{4, 1, 1, 1}, rng);
            const auto y = ops::conv2d(Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(b),
                                       stride)
                               .value();
            ASSERT_EQ(y.shape(), (Shape{2, 4, (6 - 1) / stride + 1, (8 - 1) / stride + 1}));
            for (int n = 0; n < 2; ++n)
                for (int co = 0; co < 4; ++co)
                    for (int oy = 0; oy < y.shape().h; ++oy)
                        for (int ox = 0; ox < y.shape().w; ++ox)
                            EXPECT_NEAR(y.at(n, co, oy, ox), naive_conv(x, w, &b, stride, n, co, oy, ox), 1e-12);
        }
    }
}

TEST(Conv2d, RejectsChannelMismatch) {
    const Var<float> x = Var<float>::constant(Tensor<float>(Shape{1, 3, 4, 4}));
    const Var<float> w = Var<float>::constant(Tensor<float>(Shape{2, 4, 3, 3}));
    EXPECT_THROW(ops::conv2d(x, w, Var<float>(), 1), Error);
}

TEST(Conv2d, Gradients) {
    std::mt19937_64 rng(2);
    for (int k : {1, 3}) {
        for (int stride : {1, 2}) {
            expect_gradients(
                [stride](const auto& v) { return scalarize(ops::conv2d(v[0], v[1], v[2], stride)); },
                {leaf(Shape{2, 2, 5, 4}, rng), leaf(Shape{3, 2, k, k}, rng), leaf(Shape{3, 1, 1, 1}, rng)});
        }
    }
}

TEST(BatchNorm, TrainingNormalizesAndTracksStats) {
    std::mt19937_64 rng(3);
    const auto x = random_tensor<double>(Shape{3, 2, 4, 4}, rng, 2.0, 5.0);
    ops::BatchNormStats<double> stats{Tensor<double>(Shape{1, 2, 1, 1}, 0.0), Tensor<double>(Shape{1, 2, 1, 1}, 1.0)};
    const auto y = ops::batch_norm(Var<double>::constant(x), Var<double>::constant(Tensor<double>(Shape{1, 2, 1, 1}, 1.0)),
                                   Var<double>::constant(Tensor<double>(Shape{1, 2, 1, 1}, 0.0)), stats, true, 0.1,
                                   1e-5)
                       .value();
    for (int c = 0; c < 2; ++c) {
        double m = 0, sq = 0, xm = 0, xsq = 0;
        const double cnt = 3 * 16;
        for (int n = 0; n < 3; ++n)
            for (int i = 0; i < 16; ++i) {
                m += y.plane(n, c)[i];
                sq += y.plane(n, c)[i] * y.plane(n, c)[i];
                xm += x.plane(n, c)[i];
            }
        m /= cnt;
        xm /= cnt;
        for (int n = 0; n < 3; ++n)
            for (int i = 0; i < 16; ++i) xsq += (x.plane(n, c)[i] - xm) * (x.plane(n, c)[i] - xm);
        EXPECT_NEAR(m, 0.0, 1e-10);
        EXPECT_NEAR(sq / cnt, 1.0, 1e-3);
        EXPECT_NEAR(stats.running_mean[c], 0.1 * xm, 1e-12);
        EXPECT_NEAR(stats.running_var[c], 0.9 + 0.1 * xsq / (cnt - 1), 1e-12);
    }
}

TEST(BatchNorm, Gradients) {
    std::mt19937_64 rng(4);
    for (bool training : {true, false}) {
        ops::BatchNormStats<double> stats{Tensor<double>(Shape{1, 3, 1, 1}, 0.2),
                                          Tensor<double>(Shape{1, 3, 1, 1}, 1.5)};
        expect_gradients(
            [&](const auto& v) { return scalarize(ops::batch_norm(v[0], v[1], v[2], stats, training, 0.1, 1e-5)); },
            {leaf(Shape{2, 3, 3, 3}, rng), leaf(Shape{1, 3, 1, 1}, rng, 0.5, 1.5), leaf(Shape{1, 3, 1, 1}, rng)});
    }
}

TEST(Elementwise, Gradients) {
    std::mt19937_64 rng(5);
    const Shape s{2, 3, 2, 2};
    expect_gradients([](const auto& v) { return scalarize(ops::sigmoid(v[0])); }, {leaf(s, rng)});
    expect_gradients([](const auto& v) { return scalarize(ops::tanh(v[0])); }, {leaf(s, rng)});
    expect_gradients([](const auto& v) { return scalarize(ops::relu(v[0])); }, {leaf(s, rng, 0.05, 1.0)});
    expect_gradients([](const auto& v) { return scalarize(ops::add(v[0], v[1])); }, {leaf(s, rng), leaf(s, rng)});
    expect_gradients([](const auto& v) { return scalarize(ops::mul(v[0], v[1])); }, {leaf(s, rng), leaf(s, rng)});
    expect_gradients([](const auto& v) { return scalarize(ops::scale(v[0], 2.5)); }, {leaf(s, rng)});
    expect_gradients([](const auto& v) { return scalarize(ops::mul_channel(v[0], v[1])); },
                     {leaf(s, rng), leaf(Shape{2, 3, 1, 1}, rng)});
    expect_gradients([](const auto& v) { return scalarize(ops::concat_channels(v[0], v[1])); },
                     {leaf(s, rng), leaf(Shape{2, 1, 2, 2}, rng)});
    expect_gradients([](const auto& v) { return scalarize(ops::global_avg_pool(v[0])); }, {leaf(s, rng)});
    expect_gradients([](const auto& v) { return scalarize(ops::upsample_nearest2x(v[0])); }, {leaf(s, rng)});
}

TEST(Elementwise, ReluValuesAndShapes) {
    Tensor<float> t(Shape{1, 1, 1, 4}, std::vector<float>{-1, 0, 2, -3});
    const auto r = ops::relu(Var<float>::constant(t)).value();
    EXPECT_EQ(r.storage(), (std::vector<float>{0, 0, 2, 0}));
    const auto up = ops::upsample_nearest2x(Var<float>::constant(t)).value();
    EXPECT_EQ(up.shape(), (Shape{1, 1, 2, 8}));
    EXPECT_EQ(up.at(0, 0, 1, 5), 2.0f);
    EXPECT_THROW(ops::add(Var<float>::constant(t), Var<float>::constant(Tensor<float>(Shape{1, 1, 2, 2}))), Error);
}

TEST(Queries, RoundTripLayout) {
    std::mt19937_64 rng(6);
    const auto y = random_tensor<double>(Shape{2, 5, 3, 4}, rng);
    const auto q = ops::to_queries(Var<double>::constant(y)).value();
    ASSERT_EQ(q.shape(), (Shape{1, 1, 2 * 3 * 4, 5}));
    // Row (n, h, w) holds the channel vector at that position.
    EXPECT_EQ(q[(static_cast<std::size_t>(1) * 12 + 2 * 4 + 3) * 5 + 4], y.at(1, 4, 2, 3));
    const auto back = ops::from_queries(Var<double>::constant(q), y.shape()).value();
    EXPECT_EQ(back.storage(), y.storage());
    expect_gradients([](const auto& v) { return scalarize(ops::to_queries(v[0])); }, {leaf(Shape{2, 3, 2, 2}, rng)});
}

TEST(CosineAddress, GradientsIncludingItems) {
    std::mt19937_64 rng(7);
    expect_gradients([](const auto& v) { return scalarize(ops::cosine_address(v[0], v[1])); },
                     {leaf(Shape{1, 1, 5, 4}, rng), leaf(Shape{1, 1, 3, 4}, rng)});
}

TEST(CosineAddress, ZeroQueryIsFinite) {
    const Var<double> q = Var<double>::constant(Tensor<double>(Shape{1, 1, 1, 3}, 0.0));
    const Var<double> m = Var<double>::constant(Tensor<double>(Shape{1, 1, 2, 3}, std::vector<double>{1, 0, 0, 0, 1, 0}));
    const auto w = ops::cosine_address(q, m).value();
    EXPECT_NEAR(w[0], 0.5, 1e-12);
    EXPECT_NEAR(w[1], 0.5, 1e-12);
}

TEST(Losses, Gradients) {
    std::mt19937_64 rng(8);
    expect_gradients([](const auto& v) { return scalarize(ops::matmul(v[0], v[1])); },
                     {leaf(Shape{1, 1, 3, 4}, rng), leaf(Shape{1, 1, 4, 2}, rng)});
    expect_gradients([](const auto& v) { return ops::squared_error(v[0], v[1], true); },
                     {leaf(Shape{2, 3, 2, 2}, rng), leaf(Shape{2, 3, 2, 2}, rng)});
    expect_gradients([](const auto& v) { return ops::row_entropy(ops::cosine_address(v[0], v[1])); },
                     {leaf(Shape{1, 1, 4, 3}, rng), leaf(Shape{1, 1, 3, 3}, rng)});
    for (bool inverted : {false, true}) {
        expect_gradients([inverted](const auto& v) { return ops::cosine_hinge(v[0], v[1], 0.1, inverted); },
                         {leaf(Shape{1, 1, 6, 3}, rng), leaf(Shape{1, 1, 6, 3}, rng)});
    }
    expect_gradients(
        [](const auto& v) { return ops::weighted_sum<double>({v[0], v[1]}, {0.8, 3e-4}); },
        {leaf(Shape{1, 1, 1, 1}, rng), leaf(Shape{1, 1, 1, 1}, rng)});
}

TEST(Backward, AccumulatesIntoLeavesAcrossUses) {
    const Var<double> x = Var<double>::leaf(Tensor<double>(Shape{1, 1, 1, 1}, 3.0), true);
    const Var<double> y = ops::mul(x, x);  // dy/dx = 2x
    backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
    backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
    Var<double>(x).zero_grad();
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Backward, RejectsNonScalarRoot) {
    const Var<double> x = Var<double>::leaf(Tensor<double>(Shape{1, 1, 1, 2}, 1.0), true);
    EXPECT_THROW(backward(ops::scale(x, 2.0)), Error);
}
