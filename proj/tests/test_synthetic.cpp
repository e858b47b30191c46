#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include <unistd.h>

#include "stan/synthetic.hpp"

using namespace stan;
namespace fs = std::filesystem;

namespace {

// Softmax regression on raw pixels by full-batch gradient descent; returns train accuracy.
double linear_probe_accuracy(const std::vector<Sample<double>>& data, int k) {
    const std::size_t d = data[0].image.numel() + 1, n = data.size();
    std::vector<double> w(k * d, 0.0), grad(k * d);
    auto logits = [&](const Sample<double>& s, std::vector<double>& z) {
        for (int c = 0; c < k; ++c) {
            double v = w[c * d + d - 1];
            for (std::size_t i = 0; i + 1 < d; ++i) v += w[c * d + i] * s.image.data()[i];
            z[c] = v;
        }
    };
    std::vector<double> z(k);
    for (int it = 0; it < 300; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (const auto& s : data) {
            logits(s, z);
            const double m = *std::max_element(z.begin(), z.end());
            double sum = 0;
            for (auto& v : z) sum += (v = std::exp(v - m));
            for (int c = 0; c < k; ++c) {
                const double g = z[c] / sum - (c == s.label ? 1.0 : 0.0);
                for (std::size_t i = 0; i + 1 < d; ++i) grad[c * d + i] += g * s.image.data()[i];
                grad[c * d + d - 1] += g;
            }
        }
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.01 * grad[i] / double(n);
    }
    std::size_t hit = 0;
    for (const auto& s : data) {
        logits(s, z);
        hit += std::max_element(z.begin(), z.end()) - z.begin() == s.label;
    }
    return double(hit) / double(n);
}

}  // namespace

TEST(Synthetic, SameSeedBitwiseIdentical) {
    SyntheticSpec spec;
    spec.per_class = 4;
    spec.similarity = 0.5;
    spec.seed = 9;
    const auto a = generate_synthetic(spec), b = generate_synthetic(spec);
    ASSERT_EQ(a.images.size(), b.images.size());
    EXPECT_EQ(manifest_to_json(a.manifest), manifest_to_json(b.manifest));
    for (std::size_t i = 0; i < a.images.size(); ++i)
        EXPECT_EQ(std::memcmp(a.images[i].image.data().data(), b.images[i].image.data().data(),
                              a.images[i].image.numel() * sizeof(float)),
                  0);
    spec.seed = 10;
    const auto c = generate_synthetic(spec);
    EXPECT_NE(a.images[0].image.data()[0], c.images[0].image.data()[0]);
}

TEST(Synthetic, SplitsAndLabels) {
    SyntheticSpec spec;
    spec.per_class = 8;
    const auto ds = generate_synthetic(spec);
    EXPECT_EQ(ds.images.size(), 8u * 8);
    std::size_t train = 0, val = 0, test_known = 0, unknown = 0;
    for (const auto& img : ds.images) {
        const auto& e = img.entry;
        EXPECT_EQ(img.image.shape(), (Shape{3, 32, 32}));
        if (!e.known) {
            EXPECT_EQ(e.label, UNKNOWN);
            EXPECT_EQ(e.split, Split::test);
            ++unknown;
        } else {
            EXPECT_LT(e.label, 4);
            (e.split == Split::train ? train : e.split == Split::val ? val : test_known)++;
        }
    }
    EXPECT_EQ(train, 16u);
    EXPECT_EQ(val, 8u);
    EXPECT_EQ(test_known, 8u);
    EXPECT_EQ(unknown, 32u);
    ds.manifest.validate();
}

TEST(Synthetic, InvalidSpecsRejected) {
    SyntheticSpec spec;
    spec.per_class = 0;
    EXPECT_THROW(generate_synthetic(spec), ConfigError);
    spec = {};
    spec.known_classes = 1;
    EXPECT_THROW(generate_synthetic(spec), ConfigError);
    spec = {};
    spec.similarity = 1.0;
    EXPECT_THROW(generate_synthetic(spec), ConfigError);
    spec = {};
    spec.train_fraction = 0.8;
    spec.val_fraction = 0.4;
    EXPECT_THROW(generate_synthetic(spec), ConfigError);
}

TEST(Synthetic, SimilarityPullsClassesTogether) {
    // Mean distance between class-mean images shrinks as similarity grows.
    auto spread = [](double s) {
        SyntheticSpec spec;
        spec.unknown_classes = 0;
        spec.per_class = 8;
        spec.noise = 0;
        spec.jitter = 0;
        spec.similarity = s;
        spec.seed = 3;
        const auto ds = generate_synthetic(spec);
        std::vector<std::vector<double>> mean(4, std::vector<double>(3 * 32 * 32, 0.0));
        for (const auto& img : ds.images)
            for (std::size_t i = 0; i < img.image.numel(); ++i) mean[img.entry.label][i] += img.image.data()[i] / 8.0;
        double total = 0;
        for (int a = 0; a < 4; ++a)
            for (int b = a + 1; b < 4; ++b)
                for (std::size_t i = 0; i < mean[a].size(); ++i) total += std::pow(mean[a][i] - mean[b][i], 2);
        return total;
    };
    const double s0 = spread(0.0), s5 = spread(0.5), s9 = spread(0.9);
    EXPECT_GT(s0, s5);
    EXPECT_GT(s5, s9);
}

TEST(Synthetic, LinearProbeSeparatesDistinctClasses) {
    SyntheticSpec spec;
    spec.unknown_classes = 0;
    spec.per_class = 32;
    spec.similarity = 0.0;
    spec.train_fraction = 1.0;
    spec.val_fraction = 0.0;
    const auto ds = generate_synthetic(spec);
    const auto data = synthetic_samples<double>(ds, Split::train, true, false);
    ASSERT_EQ(data.size(), 128u);
    EXPECT_GE(linear_probe_accuracy(data, 4), 0.9);
}

TEST(Synthetic, WriteDatasetMatchesInMemory) {
    SyntheticSpec spec;
    spec.per_class = 2;
    const auto ds = generate_synthetic(spec);
    const auto dir = fs::temp_directory_path() / ("stan_test_syn_" + std::to_string(::getpid()));
    const auto manifest = write_dataset(ds, dir);
    const auto m = load_manifest(manifest);
    const auto disk = load_samples<float>(m, Split::test, true, true);
    const auto mem = synthetic_samples<float>(ds, Split::test, true, true);
    ASSERT_EQ(disk.size(), mem.size());
    for (std::size_t i = 0; i < disk.size(); ++i) {
        EXPECT_EQ(disk[i].path, mem[i].path);
        EXPECT_EQ(disk[i].label, mem[i].label);
        EXPECT_EQ(std::memcmp(disk[i].image.data().data(), mem[i].image.data().data(), disk[i].image.numel() * 4), 0);
    }
    fs::remove_all(dir);
}
