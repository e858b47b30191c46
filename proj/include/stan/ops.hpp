#pragma once
// Differentiable primitives. Each op computes its forward value eagerly and,
// when recording, registers a closure that accumulates input gradients from
// the output gradient.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "stan/tensor.hpp"

namespace stan {

namespace debug {
/// Negative control for the gradient checker: scales the sigmoid backward pass.
inline std::atomic<bool>& sabotage_gradients() {
    static std::atomic<bool> flag{false};
    return flag;
}
}  // namespace debug

namespace detail {

template <class T, class Fn>
Tensor<T> finish(Tensor<T> out, std::initializer_list<const Tensor<T>*> inputs, Fn&& fn) {
    Tape<T>* tape = active_tape<T>();
    if (!tape) return out;
    std::vector<typename Tensor<T>::NodePtr> parents;
    bool any = false;
    for (const auto* in : inputs) {
        if (in && in->defined()) {
            parents.push_back(in->node());
            any = any || in->requires_grad();
        }
    }
    if (!any) return out;
    out.node()->requires_grad = true;
    tape->record(out.node(), std::move(parents), std::forward<Fn>(fn));
    return out;
}

template <class T>
Tensor<T> finish_many(Tensor<T> out, const std::vector<Tensor<T>>& inputs,
                      typename Tape<T>::BackwardFn fn) {
    Tape<T>* tape = active_tape<T>();
    if (!tape) return out;
    std::vector<typename Tensor<T>::NodePtr> parents;
    bool any = false;
    for (const auto& in : inputs) {
        parents.push_back(in.node());
        any = any || in.requires_grad();
    }
    if (!any) return out;
    out.node()->requires_grad = true;
    tape->record(out.node(), std::move(parents), std::move(fn));
    return out;
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
    std::vector<T> y(x.numel());
    auto xs = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xs[i]);
    Tensor<T> out(x.shape(), std::move(y));
    auto xn = x.node();
    auto on = out.node().get();
    return finish(out, {&x}, [xn, on, df](const std::vector<T>& g) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xn->data[i], on->data[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "add " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::finish(Tensor<T>(a.shape(), std::move(y)), {&a, &b}, [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "sub " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::finish(Tensor<T>(a.shape(), std::move(y)), {&a, &b}, [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

/// Elementwise (Hadamard) product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "mul " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
    auto an = a.node(), bn = b.node();
    return detail::finish(Tensor<T>(a.shape(), std::move(y)), {&a, &b}, [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    return detail::unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        x,
        [](T v) {
            // split by sign so exp() never overflows; clamp keeps the result strictly inside (0,1)
            T y;
            if (v >= T{0}) {
                y = T{1} / (T{1} + std::exp(-v));
            } else {
                T e = std::exp(v);
                y = e / (T{1} + e);
            }
            return std::clamp(y, std::numeric_limits<T>::min(), T{1} - std::numeric_limits<T>::epsilon() / T{2});
        },
        [](T, T y) {
            T d = y * (T{1} - y);
            return debug::sabotage_gradients().load(std::memory_order_relaxed) ? d * T(1.25) : d;
        });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

/// GELU, tanh approximation.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T a = T(0.044715);
    return detail::unary(
        x,
        [](T v) { return T(0.5) * v * (T{1} + std::tanh(c * (v + a * v * v * v))); },
        [](T v, T) {
            T u = c * (v + a * v * v * v);
            T t = std::tanh(u);
            return T(0.5) * (T{1} + t) + T(0.5) * v * (T{1} - t * t) * c * (T{1} + T{3} * a * v * v);
        });
}

// ----------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc{0};
    for (auto v : x.data()) acc += v;
    auto xn = x.node();
    return detail::finish(Tensor<T>::scalar(acc), {&x}, [xn](const std::vector<T>& g) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (auto& v : gx) v += g[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// [C,H,W] -> [C], spatial mean per channel.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require(x.rank() == 3, "global_avg_pool expects [C,H,W], got " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    std::vector<T> y(c, T{0});
    for (std::size_t k = 0; k < c; ++k) {
        T acc{0};
        for (std::size_t i = 0; i < hw; ++i) acc += x.data()[k * hw + i];
        y[k] = acc / static_cast<T>(hw);
    }
    auto xn = x.node();
    return detail::finish(Tensor<T>({c}, std::move(y)), {&x}, [xn, c, hw](const std::vector<T>& g) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        const T inv = T{1} / static_cast<T>(hw);
        for (std::size_t k = 0; k < c; ++k)
            for (std::size_t i = 0; i < hw; ++i) gx[k * hw + i] += g[k] * inv;
    });
}

// --------------------------------------------------------------------- linear

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                    "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> c(m * n, T{0});
    const T* A = a.data().data();
    const T* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const T av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * B[p * n + j];
        }
    auto an = a.node(), bn = b.node();
    return detail::finish(Tensor<T>({m, n}, std::move(c)), {&a, &b}, [an, bn, m, k, n](const std::vector<T>& g) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    T acc{0};
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bn->data[p * n + j];
                    ga[i * k + p] += acc;
                }
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = an->data[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                }
        }
    });
}

/// y = x·Wᵀ + b over the last axis of x. weight is [out, in]; bias may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    detail::require(weight.rank() == 2, "linear weight must be rank 2");
    const std::size_t out_f = weight.dim(0), in_f = weight.dim(1);
    detail::require(x.shape().back() == in_f,
                    "linear input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    if (bias.defined()) detail::require(bias.numel() == out_f, "linear bias width");
    const std::size_t rows = x.numel() / in_f;
    std::vector<T> y(rows * out_f);
    const T* X = x.data().data();
    const T* W = weight.data().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_f; ++o) {
            T acc = bias.defined() ? bias.data()[o] : T{0};
            const T* xr = X + r * in_f;
            const T* wr = W + o * in_f;
            for (std::size_t i = 0; i < in_f; ++i) acc += xr[i] * wr[i];
            y[r * out_f + o] = acc;
        }
    Shape shape = x.shape();
    shape.back() = out_f;
    auto xn = x.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    return detail::finish(Tensor<T>(shape, std::move(y)), {&x, &weight, &bias},
                          [xn, wn, bn, rows, in_f, out_f](const std::vector<T>& g) {
                              if (xn->requires_grad) {
                                  auto& gx = xn->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t o = 0; o < out_f; ++o) {
                                          const T gv = g[r * out_f + o];
                                          const T* wr = wn->data.data() + o * in_f;
                                          for (std::size_t i = 0; i < in_f; ++i) gx[r * in_f + i] += gv * wr[i];
                                      }
                              }
                              if (wn->requires_grad) {
                                  auto& gw = wn->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t o = 0; o < out_f; ++o) {
                                          const T gv = g[r * out_f + o];
                                          const T* xr = xn->data.data() + r * in_f;
                                          for (std::size_t i = 0; i < in_f; ++i) gw[o * in_f + i] += gv * xr[i];
                                      }
                              }
                              if (bn && bn->requires_grad) {
                                  auto& gb = bn->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
                              }
                          });
}

// ------------------------------------------------------------- normalisation

/// Softmax over the last axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
    const std::size_t n = x.shape().back(), rows = x.numel() / n;
    std::vector<T> y(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * n;
        T mx = *std::max_element(xr, xr + n);
        T z{0};
        for (std::size_t j = 0; j < n; ++j) z += (y[r * n + j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= z;
    }
    auto xn = x.node();
    Tensor<T> out(x.shape(), std::move(y));
    auto on = out.node().get();
    return detail::finish(out, {&x}, [xn, on, rows, n](const std::vector<T>& g) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * on->data[r * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += on->data[r * n + j] * (g[r * n + j] - dot);
        }
    });
}

/// Row-wise layer normalisation over the last axis with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    const std::size_t n = x.shape().back(), rows = x.numel() / n;
    detail::require(gamma.numel() == n && beta.numel() == n, "layer_norm affine width");
    std::vector<T> y(x.numel()), xhat(x.numel()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * n;
        T mu{0};
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<T>(n);
        T var{0};
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(n);
        inv_std[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[r * n + j] = (xr[j] - mu) * inv_std[r];
            y[r * n + j] = xhat[r * n + j] * gamma.data()[j] + beta.data()[j];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::finish(
        Tensor<T>(x.shape(), std::move(y)), {&x, &gamma, &beta},
        [xn, gn, bn, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](const std::vector<T>& g) {
            if (gn->requires_grad) {
                auto& gg = gn->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
            if (xn->requires_grad) {
                auto& gx = xn->grad_buffer();
                std::vector<T> gh(n);
                for (std::size_t r = 0; r < rows; ++r) {
                    T m1{0}, m2{0};
                    for (std::size_t j = 0; j < n; ++j) {
                        gh[j] = g[r * n + j] * gn->data[j];
                        m1 += gh[j];
                        m2 += gh[j] * xhat[r * n + j];
                    }
                    m1 /= static_cast<T>(n);
                    m2 /= static_cast<T>(n);
                    for (std::size_t j = 0; j < n; ++j)
                        gx[r * n + j] += inv_std[r] * (gh[j] - m1 - xhat[r * n + j] * m2);
                }
            }
        });
}

// -------------------------------------------------------------------- shaping

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    detail::require(shape_numel(shape) == x.numel(),
                    "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto xn = x.node();
    return detail::finish(Tensor<T>(std::move(shape), x.vec()), {&x}, [xn](const std::vector<T>& g) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// 2-D transpose.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
    detail::require(x.rank() == 2, "transpose expects rank 2, got " + shape_str(x.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<T> y(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x.data()[i * n + j];
    auto xn = x.node();
    return detail::finish(Tensor<T>({n, m}, std::move(y)), {&x}, [xn, m, n](const std::vector<T>& g) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    detail::require(!parts.empty(), "concat of zero tensors");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size())
        throw ShapeError("concat axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(ref.size()));
    std::size_t outer = 1, inner = 1, total = 0;
    for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
        detail::require(ok, "concat " + shape_str(s) + " vs " + shape_str(ref) + " on axis " + std::to_string(axis));
        widths.push_back(s[axis] * inner);
        total += s[axis];
    }
    const std::size_t row = total * inner;
    std::vector<T> y(outer * row);
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const T* src = parts[k].data().data() + o * widths[k];
            std::copy(src, src + widths[k], y.begin() + o * row + off);
            off += widths[k];
        }
    }
    Shape shape = ref;
    shape[axis] = total;
    std::vector<typename Tensor<T>::NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::finish_many(Tensor<T>(shape, std::move(y)), parts,
                               [nodes, widths, outer, row](const std::vector<T>& g) {
                                   for (std::size_t o = 0; o < outer; ++o) {
                                       std::size_t off = 0;
                                       for (std::size_t k = 0; k < nodes.size(); ++k) {
                                           if (nodes[k]->requires_grad) {
                                               auto& gk = nodes[k]->grad_buffer();
                                               for (std::size_t i = 0; i < widths[k]; ++i)
                                                   gk[o * widths[k] + i] += g[o * row + off + i];
                                           }
                                           off += widths[k];
                                       }
                                   }
                               });
}

/// Half-open range [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank()) throw ShapeError("slice axis out of range");
    detail::require(begin < end && end <= x.dim(axis), "slice bounds");
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
    const std::size_t src_row = x.dim(axis) * inner, len = (end - begin) * inner, off = begin * inner;
    std::vector<T> y(outer * len);
    for (std::size_t o = 0; o < outer; ++o) {
        const T* src = x.data().data() + o * src_row + off;
        std::copy(src, src + len, y.begin() + o * len);
    }
    Shape shape = x.shape();
    shape[axis] = end - begin;
    auto xn = x.node();
    return detail::finish(Tensor<T>(shape, std::move(y)), {&x}, [xn, outer, src_row, len, off](const std::vector<T>& g) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len; ++i) gx[o * src_row + off + i] += g[o * len + i];
    });
}

/// Selects rows (first-axis entries) by index; repeated indices accumulate in backward.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& index) {
    detail::require(x.rank() >= 1 && !index.empty(), "gather_rows on empty input");
    const std::size_t m = x.dim(0), width = x.numel() / m;
    std::vector<T> y(index.size() * width);
    for (std::size_t r = 0; r < index.size(); ++r) {
        detail::require(index[r] < m, "gather_rows index out of range");
        const T* src = x.data().data() + index[r] * width;
        std::copy(src, src + width, y.begin() + r * width);
    }
    Shape shape = x.shape();
    shape[0] = index.size();
    auto xn = x.node();
    return detail::finish(Tensor<T>(shape, std::move(y)), {&x}, [xn, index, width](const std::vector<T>& g) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer();
        for (std::size_t r = 0; r < index.size(); ++r)
            for (std::size_t i = 0; i < width; ++i) gx[index[r] * width + i] += g[r * width + i];
    });
}

// ------------------------------------------------------------------- spatial

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

/// x [C_in,H,W], w [C_out,C_in,kh,kw], optional bias [C_out]; zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
    detail::require(x.rank() == 3 && w.rank() == 4 && w.dim(1) == x.dim(0),
                    "conv2d input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
    detail::require(stride >= 1, "conv2d stride must be positive");
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (kh > h + 2 * padding || kw > wd + 2 * padding)
        throw ShapeError("conv2d kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + shape_str(x.shape()));
    if (bias.defined()) detail::require(bias.numel() == cout, "conv2d bias width");
    const std::size_t oh = conv_out_size(h, kh, stride, padding), ow = conv_out_size(wd, kw, stride, padding);
    std::vector<T> y(cout * oh * ow);
    const T* X = x.data().data();
    const T* W = w.data().data();
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T acc = bias.defined() ? bias.data()[co] : T{0};
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                        if (iy < 0 || iy >= static_cast<long>(h)) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                            if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                            acc += X[(ci * h + iy) * wd + ix] * W[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                y[(co * oh + oy) * ow + ox] = acc;
            }
    auto xn = x.node(), wn = w.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    return detail::finish(
        Tensor<T>({cout, oh, ow}, std::move(y)), {&x, &w, &bias},
        [=](const std::vector<T>& g) {
            T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
            T* gw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
            T* gb = (bn && bn->requires_grad) ? bn->grad_buffer().data() : nullptr;
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const T gv = g[(co * oh + oy) * ow + ox];
                        if (gb) gb[co] += gv;
                        for (std::size_t ci = 0; ci < cin; ++ci)
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                                    if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                                    const std::size_t xi = (ci * h + iy) * wd + ix;
                                    const std::size_t wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                    if (gx) gx[xi] += gv * wn->data[wi];
                                    if (gw) gw[wi] += gv * xn->data[xi];
                                }
                            }
                    }
        });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride = 1, std::size_t padding = 0) {
    return conv2d(x, w, Tensor<T>{}, stride, padding);
}

/// Window maximum over x [C,H,W]; the gradient goes to the first (row-major) maximal element.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
    detail::require(x.rank() == 3, "maxpool2d expects [C,H,W]");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (k == 0 || k > h || k > w || stride == 0)
        throw ShapeError("maxpool2d window " + std::to_string(k) + " exceeds input " + shape_str(x.shape()));
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    std::vector<T> y(c * oh * ow);
    std::vector<std::size_t> arg(y.size());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (ch * h + oy * stride) * w + ox * stride;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::size_t idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if (x.data()[idx] > x.data()[best]) best = idx;
                    }
                const std::size_t o = (ch * oh + oy) * ow + ox;
                y[o] = x.data()[best];
                arg[o] = best;
            }
    auto xn = x.node();
    return detail::finish(Tensor<T>({c, oh, ow}, std::move(y)), {&x},
                          [xn, arg = std::move(arg)](const std::vector<T>& g) {
                              if (!xn->requires_grad) return;
                              auto& gx = xn->grad_buffer();
                              for (std::size_t o = 0; o < g.size(); ++o) gx[arg[o]] += g[o];
                          });
}

// ----------------------------------------------------------------------- loss

/// Mean negative log softmax probability of the labelled class over the batch.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    detail::require(logits.rank() == 2 && logits.dim(0) == labels.size(),
                    "cross_entropy logits " + shape_str(logits.shape()) + " for " + std::to_string(labels.size()) +
                        " labels");
    check_finite(logits, "logits");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw DataError("label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    std::vector<T> prob(n * k);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const T* z = logits.data().data() + r * k;
        const T mx = *std::max_element(z, z + k);
        T s{0};
        for (std::size_t j = 0; j < k; ++j) s += (prob[r * k + j] = std::exp(z[j] - mx));
        for (std::size_t j = 0; j < k; ++j) prob[r * k + j] /= s;
        total += static_cast<double>(mx + std::log(s) - z[labels[r]]);
    }
    const T loss = static_cast<T>(total / static_cast<double>(n));
    if (!std::isfinite(static_cast<double>(loss))) throw NumericalError("non-finite cross-entropy");
    auto ln = logits.node();
    std::vector<int> lab(labels.begin(), labels.end());
    return detail::finish(Tensor<T>::scalar(loss), {&logits},
                          [ln, n, k, prob = std::move(prob), lab = std::move(lab)](const std::vector<T>& g) {
                              if (!ln->requires_grad) return;
                              auto& gl = ln->grad_buffer();
                              const T s = g[0] / static_cast<T>(n);
                              for (std::size_t r = 0; r < n; ++r)
                                  for (std::size_t j = 0; j < k; ++j) {
                                      T d = prob[r * k + j] - (static_cast<int>(j) == lab[r] ? T{1} : T{0});
                                      gl[r * k + j] += s * d;
                                  }
                          });
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    return cross_entropy(logits, std::span<const int>(labels));
}

}  // namespace stan
