#pragma once
// Context-aware forget gate. An inner single-layer LSTM scans the pixels of
// the current feature map, each pixel concatenated with the outer hidden
// state; its last hidden output, concatenated with the pooled input feature,
// goes through FC + sigmoid to give the soft mask over the outer cell state.

#include <string>
#include <vector>

#include "stan/nn.hpp"
#include "stan/ops.hpp"

namespace stan {

enum class ScanOrder { row_major, column_major };

struct CaConfig {
    bool enabled = true;
    std::size_t hidden_size = 0;  // 0: same as the outer hidden size
    ScanOrder scan_order = ScanOrder::row_major;
    bool freeze_initial_states = false;
    double initial_state_std = 0.1;
};

/// [D,S,S] map -> S*S pixel vectors of length D in scan order.
template <class T>
std::vector<Tensor<T>> pixel_split(const Tensor<T>& map, ScanOrder order = ScanOrder::row_major) {
    if (map.rank() != 3) throw ShapeError("pixel_split expects [D,H,W], got " + shape_str(map.shape()));
    const std::size_t d = map.dim(0), h = map.dim(1), w = map.dim(2);
    Tensor<T> tokens = to_tokens(map);  // [h*w, d], row-major positions
    std::vector<Tensor<T>> out;
    out.reserve(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        const std::size_t pos = order == ScanOrder::row_major ? i : (i % h) * w + i / h;
        out.push_back(reshape(slice(tokens, 0, pos, pos + 1), {d}));
    }
    return out;
}

/// Inverse of pixel_split for row-major order.
template <class T>
Tensor<T> pixel_merge(const std::vector<Tensor<T>>& pixels, std::size_t h, std::size_t w) {
    std::vector<Tensor<T>> rows;
    for (const auto& p : pixels) rows.push_back(reshape(p, {1, p.numel()}));
    return from_tokens(concat(rows, 0), h, w);
}

template <class T>
class CaGate {
public:
    CaGate() = default;

    /// map_channels D (pixel width), hidden d (outer LSTM), input_width d_in (pooled feature).
    CaGate(const CaConfig& cfg, std::size_t map_channels, std::size_t hidden, std::size_t input_width,
           ParameterSet<T>& ps, Rng& rng, const std::string& prefix = "ca")
        : order_(cfg.scan_order), map_channels_(map_channels), hidden_(hidden) {
        const std::size_t dca = cfg.hidden_size ? cfg.hidden_size : hidden;
        inner_ih_ = Linear<T>::make(ps, prefix + ".lstm.ih", map_channels + hidden, 4 * dca, rng);
        inner_hh_ = Linear<T>::make(ps, prefix + ".lstm.hh", dca, 4 * dca, rng, false);
        c0_ = ps.normal(prefix + ".lstm.c0", {dca}, cfg.initial_state_std, rng);
        h0_ = ps.normal(prefix + ".lstm.h0", {dca}, cfg.initial_state_std, rng);
        if (cfg.freeze_initial_states) {
            c0_.set_requires_grad(false);
            h0_.set_requires_grad(false);
        }
        mask_fc_ = Linear<T>::make(ps, prefix + ".mask", dca + input_width, hidden, rng, true, T{1});
    }

    /// Soft forget mask in (0,1)^d.
    Tensor<T> forget_mask(const Tensor<T>& h_prev, const Tensor<T>& x_vec, const Tensor<T>& x_map) const {
        if (h_prev.numel() != hidden_) throw ShapeError("ca: hidden state width mismatch");
        if (x_map.rank() != 3 || x_map.dim(0) != map_channels_) throw ShapeError("ca: feature map channel mismatch");
        const std::size_t dca = c0_.numel();
        Tensor<T> c = c0_, h = h0_;
        for (const auto& pixel : pixel_split(x_map, order_)) {
            Tensor<T> gates = add(inner_ih_(concat<T>({pixel, h_prev}, 0)), inner_hh_(h));
            Tensor<T> i = sigmoid(slice(gates, 0, 0, dca));
            Tensor<T> f = sigmoid(slice(gates, 0, dca, 2 * dca));
            Tensor<T> g = tanh(slice(gates, 0, 2 * dca, 3 * dca));
            Tensor<T> o = sigmoid(slice(gates, 0, 3 * dca, 4 * dca));
            c = add(mul(f, c), mul(i, g));
            h = mul(o, tanh(c));
        }
        return sigmoid(mask_fc_(concat<T>({h, x_vec}, 0)));
    }

    const Linear<T>& mask_fc() const { return mask_fc_; }
    const Linear<T>& inner_input() const { return inner_ih_; }
    const Linear<T>& inner_recurrent() const { return inner_hh_; }
    const Tensor<T>& initial_cell() const { return c0_; }
    const Tensor<T>& initial_hidden() const { return h0_; }

private:
    ScanOrder order_ = ScanOrder::row_major;
    std::size_t map_channels_ = 0, hidden_ = 0;
    Linear<T> inner_ih_, inner_hh_, mask_fc_;
    Tensor<T> c0_, h0_;
};

}  // namespace stan
