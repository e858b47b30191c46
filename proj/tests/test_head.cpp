#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "stan/head.hpp"
#include "test_util.hpp"

using namespace stan;
using stan::testing::random_tensor;

namespace {

// mean over rows of logsumexp(row) - row[label]
double ce_oracle(const Tensor<double>& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data().data() + i * k;
        double m = row[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
        total += m + std::log(s) - row[labels[i]];
    }
    return total / double(n);
}

double loss_value(const Tensor<double>& a, const Tensor<double>& b, const std::vector<int>& labels, double lambda) {
    return total_loss(a, b, std::span<const int>(labels), lambda).item();
}

}  // namespace

TEST(TotalLoss, LambdaZeroIsClassifierSLoss) {
    Rng rng(1);
    auto a = random_tensor<double>({4, 3}, rng, -2, 2), b = random_tensor<double>({4, 3}, rng, -2, 2);
    std::vector<int> y{0, 2, 1, 1};
    EXPECT_EQ(loss_value(a, b, y, 0.0), cross_entropy(a, std::span<const int>(y)).item());
}

TEST(TotalLoss, IdenticalLogitsDoubleAtLambdaOne) {
    Rng rng(2);
    auto a = random_tensor<double>({5, 4}, rng, -2, 2);
    std::vector<int> y{0, 1, 2, 3, 0};
    EXPECT_NEAR(loss_value(a, a, y, 1.0), 2.0 * ce_oracle(a, y), 1e-12);
}

TEST(TotalLoss, MatchesSumOfCrossEntropies) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_tensor<double>({6, 5}, rng, -3, 3), b = random_tensor<double>({6, 5}, rng, -3, 3);
        std::vector<int> y(6);
        for (auto& v : y) v = static_cast<int>(rng.below(5));
        const double lambda = rng.uniform(0.0, 10.0);
        EXPECT_NEAR(loss_value(a, b, y, lambda), ce_oracle(a, y) + lambda * ce_oracle(b, y), 1e-6);
    }
}

TEST(TotalLoss, DerivativeInLambdaIsSecondLoss) {
    Rng rng(4);
    auto a = random_tensor<double>({3, 4}, rng, -2, 2), b = random_tensor<double>({3, 4}, rng, -2, 2);
    std::vector<int> y{3, 0, 1};
    const double h = 1e-5, lambda = 0.7;
    const double fd = (loss_value(a, b, y, lambda + h) - loss_value(a, b, y, lambda - h)) / (2 * h);
    EXPECT_NEAR(fd, ce_oracle(b, y), 1e-8);
}

TEST(TotalLoss, RejectsBadInput) {
    Rng rng(5);
    auto a = random_tensor<double>({2, 3}, rng);
    std::vector<int> bad{0, 3}, ok{0, 1};
    EXPECT_THROW(loss_value(a, a, bad, 1.0), Error);
    EXPECT_THROW(loss_value(a, a, ok, -0.5), ConfigError);
}

TEST(OpenSetScore, IsMaxLogit) {
    std::vector<double> v{0.1, 2.5, -1.0};
    EXPECT_EQ(open_set_score(std::span<const double>(v)), 2.5);
    std::vector<double> flat(4, -0.75);
    EXPECT_EQ(open_set_score(std::span<const double>(flat)), -0.75);
    std::vector<double> empty;
    EXPECT_THROW(open_set_score(std::span<const double>(empty)), Error);
}

TEST(OpenSetScore, ShiftsWithConstant) {
    Rng rng(6);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> v(5);
        for (auto& x : v) x = rng.uniform(-4, 4);
        const double c = rng.uniform(-10, 10), base = open_set_score(std::span<const double>(v));
        for (auto& x : v) x += c;
        EXPECT_NEAR(open_set_score(std::span<const double>(v)), base + c, 1e-12);
    }
}

TEST(Predict, ExamplesAndBoundary) {
    EXPECT_EQ(predict(std::vector<double>{3, 1}, 2.0).predicted, 0);
    EXPECT_EQ(predict(std::vector<double>{3, 1}, 3.0).predicted, UNKNOWN);
    EXPECT_EQ(predict(std::vector<double>{1, 4, 4}, 0.0).predicted, 1);  // first index on ties
    const auto d = predict(std::vector<float>{0.5f, 2.0f}, 1.0);
    EXPECT_EQ(d.score, 2.0);
    EXPECT_EQ(d.theta, 1.0);
    EXPECT_EQ(d.predicted, 1);
    EXPECT_EQ(predict(std::vector<double>{5, 9}, std::numeric_limits<double>::infinity()).predicted, UNKNOWN);
}

TEST(Predict, AgreesWithCaseSplitOracle) {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> v(1 + rng.below(6));
        for (auto& x : v) x = std::round(rng.uniform(-3, 3) * 4) / 4;  // coarse grid makes ties likely
        double theta = std::round(rng.uniform(-3, 3) * 4) / 4;
        std::size_t best = 0;
        for (std::size_t i = 1; i < v.size(); ++i)
            if (v[i] > v[best]) best = i;
        if (t % 10 == 0) theta = v[best];
        const int expect = v[best] > theta ? static_cast<int>(best) : UNKNOWN;
        EXPECT_EQ(predict(v, theta).predicted, expect);
    }
}

TEST(Predict, InvariantUnderIncreasingAffineMap) {
    Rng rng(8);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> v(4);
        for (auto& x : v) x = rng.uniform(-3, 3);
        const double theta = rng.uniform(-3, 3), a = rng.uniform(0.1, 5), b = rng.uniform(-5, 5);
        std::vector<double> w(v);
        for (auto& x : w) x = a * x + b;
        EXPECT_EQ(predict(v, theta).predicted, predict(w, a * theta + b).predicted);
    }
}

TEST(Calibrate, QuantileExample) {
    const double theta = calibrate_threshold({5, 3, 1, 4, 2}, 0.8);
    EXPECT_EQ(theta, 1.0);
}

TEST(Calibrate, FullTprGoesBelowMinimum) {
    const double theta = calibrate_threshold({2, 7, 3}, 1.0);
    EXPECT_LT(theta, 2.0);
    EXPECT_EQ(theta, std::nextafter(2.0, -std::numeric_limits<double>::infinity()));
}

TEST(Calibrate, ConstantScoresAllAccepted) {
    const double theta = calibrate_threshold({1.5, 1.5, 1.5, 1.5}, 0.5);
    EXPECT_LT(theta, 1.5);
}

TEST(Calibrate, KeepsTargetFraction) {
    Rng rng(9);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> s(1 + rng.below(40));
        for (auto& x : s) x = std::round(rng.uniform(-2, 2) * 8) / 8;
        const double tpr = rng.uniform(0.05, 1.0);
        const double theta = calibrate_threshold(s, tpr);
        std::size_t above = 0;
        for (double x : s) above += x > theta;
        EXPECT_GE(double(above), std::ceil(tpr * double(s.size()) - 1e-9)) << "tpr " << tpr;
    }
}

TEST(Calibrate, Errors) {
    EXPECT_THROW(calibrate_threshold({}, 0.9), DataError);
    EXPECT_THROW(calibrate_threshold({1.0}, 0.0), ConfigError);
    EXPECT_THROW(calibrate_threshold({1.0}, 1.5), ConfigError);
}
