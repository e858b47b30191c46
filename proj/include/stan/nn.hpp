#pragma once
// Named parameter registry and the small layers shared by the modules.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "stan/ops.hpp"
#include "stan/random.hpp"
#include "stan/tensor.hpp"

namespace stan {

/// Ordered, uniquely named set of trainable tensors. Entries share storage
/// with the handles held by the modules.
template <class T>
class ParameterSet {
public:
    Tensor<T> add(const std::string& name, Tensor<T> t) {
        for (const auto& [n, _] : entries_)
            if (n == name) throw std::logic_error("duplicate parameter name " + name);
        t.set_requires_grad(true);
        entries_.emplace_back(name, t);
        return t;
    }

    /// fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Tensor<T> uniform(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<T> v(shape_numel(shape));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
        return add(name, Tensor<T>(std::move(shape), std::move(v)));
    }

    Tensor<T> constant(const std::string& name, Shape shape, T value) {
        return add(name, Tensor<T>::full(std::move(shape), value));
    }

    Tensor<T> normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
        std::vector<T> v(shape_numel(shape));
        for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
        return add(name, Tensor<T>(std::move(shape), std::move(v)));
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
    std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }

    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : entries_)
            if (n == name) return &t;
        return nullptr;
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

template <class T>
struct Linear {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out], may be undefined

    static Linear make(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       bool with_bias = true, T bias_init = T{0}) {
        Linear l;
        l.weight = ps.uniform(name + ".weight", {out, in}, in, rng);
        if (with_bias) l.bias = ps.constant(name + ".bias", {out}, bias_init);
        return l;
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
    std::size_t in_features() const { return weight.dim(1); }
    std::size_t out_features() const { return weight.dim(0); }
};

template <class T>
struct LayerNorm {
    Tensor<T> gamma;
    Tensor<T> beta;
    T eps = T(1e-5);

    static LayerNorm make(ParameterSet<T>& ps, const std::string& name, std::size_t width) {
        return {ps.constant(name + ".gamma", {width}, T{1}), ps.constant(name + ".beta", {width}, T{0})};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

/// [C,H,W] -> [H*W, C] token matrix (row-major spatial order).
template <class T>
Tensor<T> to_tokens(const Tensor<T>& map) {
    return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

/// [H*W, C] -> [C,H,W].
template <class T>
Tensor<T> from_tokens(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
    return reshape(transpose(tokens), {tokens.dim(1), h, w});
}

/// Single-head scaled dot-product attention: softmax(Q·Kᵀ/sqrt(d))·V.
/// When `weights` is non-null the attention matrix is appended to it.
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::vector<Tensor<T>>* weights = nullptr) {
    const T s = T{1} / std::sqrt(static_cast<T>(q.dim(1)));
    Tensor<T> a = softmax(scale(matmul(q, transpose(k)), s));
    if (weights) weights->push_back(a);
    return matmul(a, v);
}

}  // namespace stan
