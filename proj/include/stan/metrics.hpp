#pragma once
// Open-set metrics: closed-set ACC, AUROC, OSCR and (K+1)-class macro-F1.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "stan/error.hpp"
#include "stan/head.hpp"
#include "stan/train.hpp"

namespace stan {

using Curve = std::vector<std::pair<double, double>>;  // (x, y) points, x ascending

struct MetricReport {
    double acc = 0.0;
    double auroc = 0.0;
    double oscr = 0.0;
    double macro_f1 = 0.0;
    Curve ccr_fpr_curve;  // (FPR, CCR)
    Curve roc_curve;      // (FPR, TPR)
};

/// Fraction of known samples whose argmax class is the true class.
inline double acc(const std::vector<ScoredSample>& known) {
    if (known.empty()) throw DataError("acc of an empty sample list");
    std::size_t hit = 0;
    for (const auto& s : known) {
        if (s.true_label == UNKNOWN) throw DataError("acc expects known-class samples only");
        hit += s.pred_label == s.true_label;
    }
    return static_cast<double>(hit) / static_cast<double>(known.size());
}

/// P(known score > unknown score), ties counted one half.
inline double auroc(std::vector<double> known, std::vector<double> unknown) {
    if (known.empty() || unknown.empty()) throw DataError("auroc needs known and unknown scores");
    std::sort(known.begin(), known.end());
    std::sort(unknown.begin(), unknown.end());
    // for every known score: count unknowns strictly below and equal
    double wins = 0.0;
    std::size_t lo = 0, hi = 0;
    for (double k : known) {
        while (lo < unknown.size() && unknown[lo] < k) ++lo;
        while (hi < unknown.size() && unknown[hi] <= k) ++hi;
        wins += static_cast<double>(lo) + 0.5 * static_cast<double>(hi - lo);
    }
    return wins / (static_cast<double>(known.size()) * static_cast<double>(unknown.size()));
}

namespace detail {

inline std::vector<double> thresholds(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> t{-std::numeric_limits<double>::infinity()};
    t.insert(t.end(), a.begin(), a.end());
    t.insert(t.end(), b.begin(), b.end());
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    return t;
}

inline double count_above(const std::vector<double>& sorted, double theta) {
    return static_cast<double>(sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), theta));
}

inline double trapezoid(Curve& pts) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        area += (pts[i].first - pts[i - 1].first) * (pts[i].second + pts[i - 1].second) / 2.0;
    return area;
}

}  // namespace detail

/// (FPR, TPR) at every threshold "score > theta", theta over -inf and all
/// observed scores; starts at (0,0) and ends at (1,1).
inline Curve roc_curve(std::vector<double> known, std::vector<double> unknown) {
    if (known.empty() || unknown.empty()) throw DataError("roc_curve needs known and unknown scores");
    std::sort(known.begin(), known.end());
    std::sort(unknown.begin(), unknown.end());
    Curve pts{{0.0, 0.0}};
    const double nk = static_cast<double>(known.size()), nu = static_cast<double>(unknown.size());
    for (double t : detail::thresholds(known, unknown))
        pts.emplace_back(detail::count_above(unknown, t) / nu, detail::count_above(known, t) / nk);
    detail::trapezoid(pts);
    return pts;
}

/// Area under CCR over FPR. CCR(theta) counts known samples that are both
/// correctly classified and scored above theta; FPR(theta) counts unknowns
/// scored above theta. Thresholds: -inf and every observed score, strict
/// "score > theta". The curve starts at (0,0); theta = -inf gives the
/// FPR = 1 end point at CCR = plain accuracy.
inline std::pair<double, Curve> oscr(const std::vector<ScoredSample>& known, const std::vector<double>& unknown_scores) {
    if (known.empty() || unknown_scores.empty()) throw DataError("oscr needs known samples and unknown scores");
    std::vector<double> correct, all_known, unknown(unknown_scores);
    for (const auto& s : known) {
        all_known.push_back(s.score);
        if (s.pred_label == s.true_label) correct.push_back(s.score);
    }
    std::sort(correct.begin(), correct.end());
    std::sort(unknown.begin(), unknown.end());
    const double nk = static_cast<double>(known.size()), nu = static_cast<double>(unknown.size());
    Curve pts{{0.0, 0.0}};
    for (double t : detail::thresholds(all_known, unknown))
        pts.emplace_back(detail::count_above(unknown, t) / nu, detail::count_above(correct, t) / nk);
    const double area = detail::trapezoid(pts);
    return {area, pts};
}

/// Macro-F1 over the K known classes plus one UNKNOWN class; classes with a
/// zero precision+recall denominator contribute 0.
inline double macro_f1(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t k) {
    if (truth.empty() || truth.size() != predicted.size()) throw DataError("macro_f1 needs equal, non-empty label lists");
    auto index = [k](int label) {
        if (label == UNKNOWN) return k;
        if (label < 0 || static_cast<std::size_t>(label) >= k) throw DataError("macro_f1 label out of range");
        return static_cast<std::size_t>(label);
    };
    std::vector<double> tp(k + 1, 0), fp(k + 1, 0), fn(k + 1, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const std::size_t t = index(truth[i]), p = index(predicted[i]);
        if (t == p) {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn[t] += 1;
        }
    }
    double total = 0.0;
    for (std::size_t c = 0; c <= k; ++c) {
        const double denom = 2 * tp[c] + fp[c] + fn[c];
        total += denom > 0 ? 2 * tp[c] / denom : 0.0;
    }
    return total / static_cast<double>(k + 1);
}

/// All four metrics for a scored test set at threshold theta.
inline MetricReport evaluate_scores(const std::vector<ScoredSample>& samples, double theta, std::size_t k) {
    std::vector<ScoredSample> known;
    std::vector<double> known_scores, unknown_scores;
    std::vector<int> truth, predicted;
    for (const auto& s : samples) {
        if (!std::isfinite(s.score)) throw NumericalError("non-finite score for " + s.path);
        if (s.true_label == UNKNOWN) {
            unknown_scores.push_back(s.score);
        } else {
            known.push_back(s);
            known_scores.push_back(s.score);
        }
        truth.push_back(s.true_label);
        predicted.push_back(s.score > theta ? s.pred_label : UNKNOWN);
    }
    if (known.empty()) throw DataError("evaluation set has no known-class samples");
    if (unknown_scores.empty()) throw DataError("evaluation set has no unknown-class samples");
    MetricReport r;
    r.acc = acc(known);
    r.auroc = auroc(known_scores, unknown_scores);
    std::tie(r.oscr, r.ccr_fpr_curve) = oscr(known, unknown_scores);
    r.macro_f1 = macro_f1(truth, predicted, k);
    r.roc_curve = roc_curve(known_scores, unknown_scores);
    return r;
}

}  // namespace stan
