#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stan/gradcheck.hpp"
#include "stan/ops.hpp"
#include "stan/random.hpp"

using namespace stan;

namespace {

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>(std::move(shape), std::move(v));
}

// Direct 6-loop convolution, written independently of ops.hpp.
std::vector<double> naive_conv(const std::vector<double>& x, std::size_t cin, std::size_t h, std::size_t w,
                               const std::vector<double>& k, std::size_t cout, std::size_t kh, std::size_t kw,
                               std::size_t stride, std::size_t pad, std::size_t& oh, std::size_t& ow) {
    oh = (h + 2 * pad - kh) / stride + 1;
    ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> y(cout * oh * ow, 0.0);
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j)
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t a = 0; a < kh; ++a)
                        for (std::size_t b = 0; b < kw; ++b) {
                            long r = long(i * stride + a) - long(pad), c = long(j * stride + b) - long(pad);
                            if (r < 0 || c < 0 || r >= long(h) || c >= long(w)) continue;
                            y[(co * oh + i) * ow + j] += x[(ci * h + r) * w + c] * k[((co * cin + ci) * kh + a) * kw + b];
                        }
    return y;
}

}  // namespace

TEST(Matmul, IdentityAndHandArithmetic) {
    Tensor<float> eye({2, 2}, {1, 0, 0, 1});
    Tensor<float> m({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(matmul(eye, m).vec(), m.vec());
    Tensor<float> a({2, 2}, {1, 2, 3, 4});
    Tensor<float> b({2, 1}, {1, 1});
    auto c = matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_EQ(c.vec(), (std::vector<float>{3, 7}));
}

TEST(Matmul, ShapeMismatchThrows) {
    Tensor<float> a({2, 3}), b({2, 3});
    EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    Rng rng(1);
    auto a = random_tensor<float>({3, 4}, rng);
    auto b = random_tensor<float>({4, 2}, rng);
    auto ra = grad_check([&](const Tensor<float>& x) { return sum(matmul(x, b)); }, a, 1e-3, 1e-3);
    auto rb = grad_check([&](const Tensor<float>& x) { return sum(matmul(a, x)); }, b, 1e-3, 1e-3);
    EXPECT_TRUE(ra.passed) << ra.max_rel_error;
    EXPECT_TRUE(rb.passed) << rb.max_rel_error;
}

TEST(Conv2d, IdentityKernelAndShape) {
    Rng rng(2);
    auto x = random_tensor<float>({1, 4, 5}, rng);
    Tensor<float> ones({1, 1, 1, 1}, {1.0f});
    EXPECT_EQ(conv2d(x, ones).vec(), x.vec());
    auto x3 = random_tensor<float>({1, 3, 3}, rng);
    auto k2 = random_tensor<float>({1, 1, 2, 2}, rng);
    EXPECT_EQ(conv2d(x3, k2, 1, 0).shape(), (Shape{1, 2, 2}));
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
    Tensor<float> x({1, 2, 2}), k({1, 1, 5, 5});
    EXPECT_THROW(conv2d(x, k, 1, 1), ShapeError);
    EXPECT_NO_THROW(conv2d(x, k, 1, 2));
}

TEST(Conv2d, MatchesNaiveLoopOracle) {
    Rng rng(3);
    for (auto [stride, pad] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}, {2, 1}, {1, 2}}) {
        auto x = random_tensor<float>({3, 7, 6}, rng);
        auto k = random_tensor<float>({4, 3, 3, 2}, rng);
        std::size_t oh = 0, ow = 0;
        auto ref = naive_conv({x.vec().begin(), x.vec().end()}, 3, 7, 6, {k.vec().begin(), k.vec().end()}, 4, 3, 2,
                              stride, pad, oh, ow);
        auto y = conv2d(x, k, stride, pad);
        ASSERT_EQ(y.shape(), (Shape{4, oh, ow}));
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-5);
    }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    Rng rng(4);
    auto x = random_tensor<double>({2, 5, 5}, rng);
    auto k = random_tensor<double>({3, 2, 3, 3}, rng);
    auto b = random_tensor<double>({3}, rng);
    EXPECT_TRUE(grad_check([&](const Tensor<double>& v) { return conv2d(v, k, b, 2, 1); }, x, 1e-6, 1e-6).passed);
    EXPECT_TRUE(grad_check([&](const Tensor<double>& v) { return conv2d(x, v, b, 2, 1); }, k, 1e-6, 1e-6).passed);
    EXPECT_TRUE(grad_check([&](const Tensor<double>& v) { return conv2d(x, k, v, 2, 1); }, b, 1e-6, 1e-6).passed);
}

TEST(MaxPool, ConstantAndHandMax) {
    auto c = Tensor<float>::full({2, 4, 4}, 3.5f);
    auto y = maxpool2d(c, 2, 2);
    for (auto v : y.data()) EXPECT_EQ(v, 3.5f);
    Tensor<float> x({1, 2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(maxpool2d(x, 2, 2).vec(), (std::vector<float>{4}));
    EXPECT_THROW(maxpool2d(x, 3, 1), ShapeError);
}

TEST(MaxPool, TiesRouteGradientToFirstElement) {
    Tensor<float> x({1, 2, 2}, {5, 5, 5, 5}, true);
    Tape<float> tape;
    TapeScope<float> scope(tape);
    tape.backward(sum(maxpool2d(x, 2, 2)));
    EXPECT_EQ(std::vector<float>(x.grad().begin(), x.grad().end()), (std::vector<float>{1, 0, 0, 0}));
}

TEST(MaxPool, GradientAwayFromTies) {
    // distinct values spaced well beyond the FD step
    Rng rng(5);
    std::vector<float> v(4 * 6 * 6);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05f * static_cast<float>(i);
    rng.shuffle(v.begin(), v.end());
    Tensor<float> x({4, 6, 6}, v);
    auto r = grad_check([](const Tensor<float>& t) { return maxpool2d(t, 2, 2); }, x, 1e-3, 1e-3);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Elementwise, FixedPoints) {
    EXPECT_FLOAT_EQ(sigmoid(Tensor<float>::scalar(0.0f)).item(), 0.5f);
    auto s = softmax(Tensor<float>::full({4}, 2.0f));
    for (auto v : s.data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Elementwise, SigmoidStrictlyInsideUnitInterval) {
    Tensor<float> x({6}, {-1000.f, -90.f, -20.f, 20.f, 90.f, 1000.f});
    auto y = sigmoid(x);
    for (auto v : y.data()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(Elementwise, SoftmaxRowsSumToOne) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = random_tensor<float>({5, 7}, rng, -30, 30);
        auto y = softmax(x);
        for (std::size_t r = 0; r < 5; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < 7; ++j) s += y.at(r * 7 + j);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Concat, AxisOutOfRangeAndMismatch) {
    Tensor<float> a({2, 3}), b({2, 4});
    EXPECT_THROW(concat<float>({a, b}, 2), ShapeError);
    EXPECT_THROW(concat<float>({a, b}, 0), ShapeError);
    EXPECT_EQ(concat<float>({a, b}, 1).shape(), (Shape{2, 7}));
}

// Per-primitive finite-difference sweep, in both precisions.
template <class T>
class PrimitiveGrad : public ::testing::Test {
protected:
    static double tol() { return sizeof(T) >= 8 ? 1e-6 : 1e-3; }
    static double eps() { return sizeof(T) >= 8 ? 1e-6 : 1e-3; }
};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(PrimitiveGrad, Precisions);

TYPED_TEST(PrimitiveGrad, AllPrimitives) {
    using T = TypeParam;
    Rng rng(7);
    const double eps = this->eps(), tol = this->tol();
    auto x = random_tensor<T>({3, 4}, rng, -2, 2);
    auto y = random_tensor<T>({3, 4}, rng, -2, 2);
    auto w = random_tensor<T>({5, 4}, rng);
    auto b = random_tensor<T>({5}, rng);
    auto g = random_tensor<T>({4}, rng, 0.5, 1.5);
    auto beta = random_tensor<T>({4}, rng);
    auto map = random_tensor<T>({3, 4, 5}, rng);
    // keep relu inputs clear of the kink
    auto xr = x.detach();
    for (auto& v : xr.mutable_data()) v = v >= 0 ? v + T(0.1) : v - T(0.1);

    struct Case {
        const char* name;
        std::function<Tensor<T>(const Tensor<T>&)> f;
        Tensor<T> at;
    };
    std::vector<Case> cases = {
        {"add", [&](const Tensor<T>& v) { return add(v, y); }, x},
        {"sub", [&](const Tensor<T>& v) { return sub(y, v); }, x},
        {"mul", [&](const Tensor<T>& v) { return mul(v, y); }, x},
        {"scale", [&](const Tensor<T>& v) { return scale(v, T(-1.7)); }, x},
        {"sigmoid", [](const Tensor<T>& v) { return sigmoid(v); }, x},
        {"tanh", [](const Tensor<T>& v) { return tanh(v); }, x},
        {"relu", [](const Tensor<T>& v) { return relu(v); }, xr},
        {"gelu", [](const Tensor<T>& v) { return gelu(v); }, x},
        {"softmax", [](const Tensor<T>& v) { return softmax(v); }, x},
        {"sum", [](const Tensor<T>& v) { return sum(v); }, x},
        {"mean", [](const Tensor<T>& v) { return mean(v); }, x},
        {"global_avg_pool", [](const Tensor<T>& v) { return global_avg_pool(v); }, map},
        {"linear.x", [&](const Tensor<T>& v) { return linear(v, w, b); }, x},
        {"linear.w", [&](const Tensor<T>& v) { return linear(x, v, b); }, w},
        {"linear.b", [&](const Tensor<T>& v) { return linear(x, w, v); }, b},
        {"concat", [&](const Tensor<T>& v) { return concat<T>({y, v, y}, 1); }, x},
        {"slice", [](const Tensor<T>& v) { return slice(v, 1, 1, 3); }, x},
        {"transpose", [](const Tensor<T>& v) { return transpose(v); }, x},
        {"gather_rows", [](const Tensor<T>& v) { return gather_rows(v, {2, 0, 2}); }, x},
        {"layer_norm.x", [&](const Tensor<T>& v) { return layer_norm(v, g, beta); }, x},
        {"layer_norm.gamma", [&](const Tensor<T>& v) { return layer_norm(x, v, beta); }, g},
        {"layer_norm.beta", [&](const Tensor<T>& v) { return layer_norm(x, g, v); }, beta},
        {"cross_entropy", [](const Tensor<T>& v) { return cross_entropy(v, std::vector<int>{0, 3, 1}); }, x},
    };
    for (auto& c : cases) {
        auto r = grad_check(c.f, c.at, eps, tol);
        EXPECT_TRUE(r.passed) << c.name << " rel err " << r.max_rel_error << " at " << r.worst_index;
    }
}

TEST(CrossEntropy, KnownValues) {
    Tensor<float> sat({1, 2}, {1e6f, 0.0f});
    EXPECT_NEAR(cross_entropy(sat, std::vector<int>{0}).item(), 0.0, 1e-6);
    auto uni = Tensor<float>::full({3, 4}, 0.7f);
    EXPECT_NEAR(cross_entropy(uni, std::vector<int>{0, 1, 3}).item(), std::log(4.0), 1e-6);
}

TEST(CrossEntropy, MatchesDirectLogSumExp) {
    Rng rng(8);
    auto z = random_tensor<float>({8, 5}, rng, -4, 4);
    std::vector<int> labels(8);
    for (auto& l : labels) l = static_cast<int>(rng.below(5));
    double ref = 0.0;
    for (std::size_t r = 0; r < 8; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) s += std::exp(static_cast<double>(z.at(r * 5 + j)));
        ref += std::log(s) - z.at(r * 5 + labels[r]);
    }
    EXPECT_NEAR(cross_entropy(z, labels).item(), ref / 8.0, 1e-5);
}

TEST(CrossEntropy, LabelOutOfRangeAndNonFinite) {
    Tensor<float> z({1, 3});
    EXPECT_THROW(cross_entropy(z, std::vector<int>{3}), DataError);
    EXPECT_THROW(cross_entropy(z, std::vector<int>{-1}), DataError);
    Tensor<float> bad({1, 2}, {NAN, 0.0f});
    EXPECT_THROW(cross_entropy(bad, std::vector<int>{0}), NumericalError);
}

TEST(Backward, LinearAndQuadratic) {
    Tensor<float> x({3}, {0.3f, -2.0f, 5.0f}, true);
    {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        tape.backward(sum(x));
    }
    for (auto g : x.grad()) EXPECT_EQ(g, 1.0f);
    Tensor<float> q({2}, {1.0f, 2.0f}, true);
    Tape<float> tape;
    TapeScope<float> scope(tape);
    tape.backward(sum(mul(q, q)));
    EXPECT_EQ(std::vector<float>(q.grad().begin(), q.grad().end()), (std::vector<float>{2, 4}));
}

TEST(Backward, RejectsDoubleCallAndNonScalar) {
    Tensor<float> x({2}, {1, 2}, true);
    Tape<float> tape;
    TapeScope<float> scope(tape);
    EXPECT_THROW(tape.backward(mul(x, x)), ShapeError);
    auto loss = sum(x);
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), std::logic_error);
    tape.reset();
    x.zero_grad();
    tape.backward(sum(x));
    EXPECT_EQ(x.grad()[0], 1.0f);
}

TEST(Backward, SharedSubexpressionsAccumulate) {
    // f(x) = sum(t*t + t) with t = tanh(x), t used three times, vs an unshared
    // construction with three separate copies of x.
    Rng rng(9);
    auto base = random_tensor<double>({4}, rng);
    Tensor<double> x = base.detach();
    x.set_requires_grad(true);
    Tensor<double> x1 = base.detach(), x2 = base.detach(), x3 = base.detach();
    for (auto* t : {&x1, &x2, &x3}) t->set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto t = tanh(x);
    tape.backward(sum(add(mul(t, t), t)));
    tape.reset();
    tape.backward(sum(add(mul(tanh(x1), tanh(x2)), tanh(x3))));
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(x.grad()[i], x1.grad()[i] + x2.grad()[i] + x3.grad()[i], 1e-14);
}

TEST(Backward, ComposedGraphMatchesFiniteDifferences) {
    Rng rng(10);
    auto img = random_tensor<double>({2, 6, 6}, rng);
    auto k = random_tensor<double>({3, 2, 3, 3}, rng);
    auto w = random_tensor<double>({4, 3 * 4 * 4}, rng);
    auto b = random_tensor<double>({4}, rng);
    auto f = [&](const Tensor<double>& kk) {
        auto h = relu(conv2d(img, kk, 1, 0));
        auto logits = linear(reshape(h, {1, h.numel()}), w, b);
        return cross_entropy(logits, std::vector<int>{2});
    };
    auto r = grad_check(f, k, 1e-6, 1e-3);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(GradCheck, IdentityAndSigmoidClosedForm) {
    Tensor<float> x({3}, {0.1f, 0.2f, 0.3f});
    EXPECT_EQ(grad_check([](const Tensor<float>& v) { return v; }, x, 1e-3, 1e-6).max_rel_error, 0.0);
    // analytic gradient vs closed form s(1-s)
    Tensor<float> p({1}, {0.3f}, true);
    Tape<float> tape;
    TapeScope<float> scope(tape);
    tape.backward(sum(sigmoid(p)));
    const double s = 1.0 / (1.0 + std::exp(-0.3));
    EXPECT_LT(relative_error(p.grad()[0], s * (1 - s), 1e-12), 1e-4);
    auto r = grad_check([](const Tensor<float>& v) { return sigmoid(v); }, Tensor<float>({1}, {0.3f}), 1e-3, 1e-4);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(GradCheck, DetectsSabotagedGradient) {
    debug::sabotage_gradients() = true;
    auto r = grad_check([](const Tensor<double>& v) { return sigmoid(v); }, Tensor<double>({2}, {0.3, -0.4}), 1e-6, 1e-3);
    debug::sabotage_gradients() = false;
    EXPECT_FALSE(r.passed);
}

TEST(Tape, ParentsPrecedeChildrenAndInputsUntouched) {
    Rng rng(11);
    auto a = random_tensor<float>({3, 3}, rng);
    a.set_requires_grad(true);
    auto b = random_tensor<float>({3, 3}, rng);
    const auto a0 = a.vec(), b0 = b.vec();
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto loss = mean(softmax(add(matmul(a, b), tanh(mul(a, b)))));
    tape.backward(loss);
    EXPECT_EQ(a.vec(), a0);
    EXPECT_EQ(b.vec(), b0);
    for (std::size_t i = 0; i < tape.size(); ++i)
        for (const auto& p : tape.parents(i)) {
            bool leaf = true, earlier = false;
            for (std::size_t j = 0; j < tape.size(); ++j)
                if (tape.output(j) == p) {
                    leaf = false;
                    earlier = j < i;
                }
            EXPECT_TRUE(leaf || earlier);
        }
}

TEST(Tape, NoRecordingWithoutActiveTape) {
    Tensor<float> x({2}, {1, 2}, true);
    auto y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
}
