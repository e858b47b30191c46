#pragma once
// Joint loss, max-logit open-set score, thresholded decision and threshold
// calibration.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "stan/ops.hpp"

namespace stan {

inline constexpr int UNKNOWN = -1;

struct Decision {
    double score = 0.0;
    int predicted = UNKNOWN;
    double theta = 0.0;
};

/// L = L_S + lambda * L_ST, both batch-mean cross entropies over [N,K] logits.
template <class T>
Tensor<T> total_loss(const Tensor<T>& logits_s, const Tensor<T>& logits_st, std::span<const int> labels, double lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("loss.lambda must be non-negative");
    return add(cross_entropy(logits_s, labels), scale(cross_entropy(logits_st, labels), static_cast<T>(lambda)));
}

/// Index of the largest entry; first one on ties.
template <class V>
int argmax(std::span<const V> v) {
    if (v.empty()) throw ShapeError("argmax of an empty vector");
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <class V>
double open_set_score(std::span<const V> logits) {
    if (logits.empty()) throw ShapeError("open_set_score of an empty logit vector");
    return static_cast<double>(*std::max_element(logits.begin(), logits.end()));
}

/// Known class (argmax) when the max logit is strictly above theta, UNKNOWN otherwise.
template <class V>
Decision predict(std::span<const V> logits, double theta) {
    Decision d;
    d.score = open_set_score(logits);
    d.theta = theta;
    d.predicted = d.score > theta ? argmax(logits) : UNKNOWN;
    return d;
}

inline Decision predict(const std::vector<float>& logits, double theta) {
    return predict(std::span<const float>(logits), theta);
}
inline Decision predict(const std::vector<double>& logits, double theta) {
    return predict(std::span<const double>(logits), theta);
}

/// Largest theta that keeps at least target_tpr of the known validation
/// scores strictly above it: the lower empirical quantile at 1 - target_tpr,
/// nudged below the next score when needed.
inline double calibrate_threshold(std::vector<double> scores, double target_tpr) {
    if (scores.empty()) throw DataError("calibrate_threshold needs at least one score");
    if (!(target_tpr > 0.0 && target_tpr <= 1.0)) throw ConfigError("target_tpr must be in (0,1]");
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericalError("non-finite validation score");
    std::sort(scores.begin(), scores.end());
    const std::size_t n = scores.size();
    const auto keep = static_cast<std::size_t>(std::ceil(target_tpr * static_cast<double>(n) - 1e-9));
    const std::size_t j = n - std::clamp<std::size_t>(keep, 1, n);  // scores[j..n) must stay above theta
    if (j >= 1 && scores[j - 1] < scores[j]) return scores[j - 1];
    return std::nextafter(scores[j], -std::numeric_limits<double>::infinity());
}

}  // namespace stan
