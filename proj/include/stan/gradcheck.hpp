#pragma once
// Central finite-difference verification of recorded gradients.
//
// Non-scalar outputs are reduced to a scalar by a fixed pseudo-random
// projection that is accumulated in double, so rounding of the reduction does
// not pollute the numeric derivative. Errors are normwise per tensor:
//   max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, floor)
// with a = analytic and n = numeric gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "stan/ops.hpp"
#include "stan/tensor.hpp"

namespace stan {

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    bool passed = true;
};

template <class T>
constexpr double default_grad_floor() {
    return sizeof(T) >= 8 ? 1e-8 : 1e-3;
}

/// Scalar relative error with an absolute floor on the denominator.
inline double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

namespace detail {

// Weights in [0.5, 1.5) with alternating sign; deterministic and input independent.
inline std::vector<double> projection_weights(std::size_t n) {
    std::vector<double> w(n);
    std::uint64_t s = 0x9E3779B97F4A7C15ull;
    for (std::size_t i = 0; i < n; ++i) {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        const double u = static_cast<double>(s >> 11) * 0x1.0p-53;
        w[i] = (i % 2 ? -1.0 : 1.0) * (0.5 + u);
    }
    if (n == 1) w[0] = 1.0;
    return w;
}

template <class T>
double project(const Tensor<T>& y, const std::vector<double>& w) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += w[i] * static_cast<double>(y.data()[i]);
    return acc;
}

inline GradCheckReport summarize(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 const std::vector<std::size_t>& index, double floor, double tol) {
    GradCheckReport r;
    double scale = floor;
    for (std::size_t i = 0; i < analytic.size(); ++i)
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        if (!(diff <= r.max_abs_error)) {  // also catches NaN
            r.max_abs_error = std::isnan(diff) ? std::numeric_limits<double>::infinity() : diff;
            r.worst_index = index[i];
        }
    }
    r.max_rel_error = r.max_abs_error / scale;
    r.checked = analytic.size();
    r.passed = r.max_rel_error < tol;
    return r;
}

}  // namespace detail

/// Checks d(project(f(x)))/dx against central differences with step eps.
template <class T, class F>
GradCheckReport grad_check(F&& f, const Tensor<T>& x, double eps, double tol,
                           double floor = default_grad_floor<T>()) {
    Tensor<T> probe = x.detach();
    probe.set_requires_grad(true);
    std::vector<double> w;
    std::vector<double> analytic(x.numel());
    {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> y = f(probe);
        w = detail::projection_weights(y.numel());
        for (auto& v : w) v = static_cast<double>(static_cast<T>(v));  // same weights on both paths
        std::vector<T> wt(w.begin(), w.end());
        Tensor<T> loss = sum(mul(y, Tensor<T>(y.shape(), std::move(wt))));
        tape.backward(loss);
        for (std::size_t i = 0; i < analytic.size(); ++i)
            analytic[i] = probe.has_grad() ? static_cast<double>(probe.grad()[i]) : 0.0;
    }
    NoTapeScope<T> no_tape;
    std::vector<double> numeric(x.numel());
    std::vector<std::size_t> index(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        Tensor<T> plus = x.detach(), minus = x.detach();
        plus.mutable_data()[i] = static_cast<T>(static_cast<double>(x.data()[i]) + eps);
        minus.mutable_data()[i] = static_cast<T>(static_cast<double>(x.data()[i]) - eps);
        const double step = static_cast<double>(plus.data()[i]) - static_cast<double>(minus.data()[i]);
        numeric[i] = (detail::project(f(plus), w) - detail::project(f(minus), w)) / step;
        index[i] = i;
    }
    return detail::summarize(analytic, numeric, index, floor, tol);
}

/// Per-tensor report for a multi-parameter sweep.
struct NamedGradReport {
    std::string name;
    GradCheckReport report;
};

/// Finite-difference sweep over named parameter tensors of a scalar loss.
/// `loss_fn` must rebuild the graph from the current parameter values on each call.
/// `max_per_tensor` = 0 checks every entry; otherwise evenly spaced entries.
template <class T>
std::vector<NamedGradReport> grad_check_parameters(const std::function<Tensor<T>()>& loss_fn,
                                                   std::vector<std::pair<std::string, Tensor<T>>> params,
                                                   double eps, double tol, double floor = default_grad_floor<T>(),
                                                   std::size_t max_per_tensor = 0) {
    for (auto& [name, p] : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        tape.backward(loss_fn());
    }
    NoTapeScope<T> no_tape;
    std::vector<NamedGradReport> out;
    for (auto& [name, p] : params) {
        std::vector<double> analytic, numeric;
        std::vector<std::size_t> index;
        const std::size_t n = p.numel();
        const std::size_t stride = (max_per_tensor == 0 || n <= max_per_tensor) ? 1 : n / max_per_tensor;
        for (std::size_t i = 0; i < n; i += stride) {
            const T original = p.data()[i];
            p.mutable_data()[i] = static_cast<T>(static_cast<double>(original) + eps);
            const T up = p.data()[i];
            const double fp = static_cast<double>(loss_fn().item());
            p.mutable_data()[i] = static_cast<T>(static_cast<double>(original) - eps);
            const T down = p.data()[i];
            const double fm = static_cast<double>(loss_fn().item());
            p.mutable_data()[i] = original;
            numeric.push_back((fp - fm) / (static_cast<double>(up) - static_cast<double>(down)));
            analytic.push_back(p.has_grad() ? static_cast<double>(p.grad()[i]) : 0.0);
            index.push_back(i);
        }
        out.push_back({name, detail::summarize(analytic, numeric, index, floor, tol)});
    }
    return out;
}

}  // namespace stan
