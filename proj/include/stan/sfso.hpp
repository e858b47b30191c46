#pragma once
// Spatial feature self-organizing: brings the four pyramid levels to one
// common [D,S,S] size, then folds higher-level features into lower ones with
// residual cross-attention, top-down.

#include <array>
#include <string>

#include "stan/backbone.hpp"
#include "stan/nn.hpp"
#include "stan/ops.hpp"

namespace stan {

struct SfsoConfig {
    bool enabled = true;
    std::size_t common_channels = 0;  // 0: channels of pyramid level 3
    std::size_t common_side = 0;      // 0: side of pyramid level 4
    std::size_t kernel = 1;

    std::size_t channels(const BackboneConfig& b) const { return common_channels ? common_channels : b.stage_channels[2]; }
    std::size_t side(const BackboneConfig& b) const { return common_side ? common_side : b.grid_side(3); }

    void validate(const BackboneConfig& b) const {
        if (kernel == 0 || kernel % 2 == 0) throw ConfigError("sfso.kernel must be a positive odd size");
        const std::size_t s = side(b);
        for (std::size_t l = 0; l < 4; ++l) {
            if (b.grid_side(l) < s) throw ConfigError("sfso.common_side larger than pyramid level " + std::to_string(l + 1));
            if (b.grid_side(l) % s != 0) throw ConfigError("sfso.common_side must divide every pyramid side");
        }
    }
};

/// Four same-shape maps [D,S,S]; entry t folds in pyramid levels t..4.
template <class T>
struct ReorganizedSequence {
    std::array<Tensor<T>, 4> maps;
};

template <class T>
struct CrossAttention {
    Linear<T> query, key, value, out;

    static CrossAttention make(ParameterSet<T>& ps, const std::string& name, std::size_t d, Rng& rng) {
        return {Linear<T>::make(ps, name + ".query", d, d, rng), Linear<T>::make(ps, name + ".key", d, d, rng),
                Linear<T>::make(ps, name + ".value", d, d, rng), Linear<T>::make(ps, name + ".out", d, d, rng)};
    }

    /// Tokens of `lower` attend over tokens of `higher`; both [n, d]. Returns [n, d].
    Tensor<T> operator()(const Tensor<T>& lower, const Tensor<T>& higher) const {
        return out(attend(query(lower), key(higher), value(higher)));
    }
};

template <class T>
class Sfso {
public:
    Sfso() = default;

    Sfso(const SfsoConfig& cfg, const BackboneConfig& bcfg, ParameterSet<T>& ps, Rng& rng, const std::string& prefix = "sfso")
        : channels_(cfg.channels(bcfg)), side_(cfg.side(bcfg)), kernel_(cfg.kernel) {
        cfg.validate(bcfg);
        for (std::size_t l = 0; l < 4; ++l) {
            const std::string name = prefix + ".proj" + std::to_string(l + 1);
            const std::size_t cin = bcfg.stage_channels[l];
            conv_w_[l] = ps.uniform(name + ".weight", {channels_, cin, kernel_, kernel_}, cin * kernel_ * kernel_, rng);
            conv_b_[l] = ps.constant(name + ".bias", {channels_}, T{0});
        }
        for (std::size_t t = 0; t < 3; ++t)
            attn_[t] = CrossAttention<T>::make(ps, prefix + ".attn" + std::to_string(t + 1), channels_, rng);
    }

    /// Per level: conv to D channels (size preserving), then max-pool down to side S.
    std::array<Tensor<T>, 4> project_to_common(const FeaturePyramid<T>& pyramid) const {
        std::array<Tensor<T>, 4> out;
        for (std::size_t l = 0; l < 4; ++l) {
            const Tensor<T>& m = pyramid.maps[l];
            if (m.rank() != 3 || m.dim(1) < side_ || m.dim(2) < side_)
                throw ShapeError("pyramid level " + std::to_string(l + 1) + " " + shape_str(m.shape()) +
                                 " smaller than common side " + std::to_string(side_));
            Tensor<T> c = conv2d(m, conv_w_[l], conv_b_[l], 1, kernel_ / 2);
            const std::size_t k = m.dim(1) / side_;
            out[l] = k > 1 ? maxpool2d(c, k, k) : c;
        }
        return out;
    }

    /// r4 = c4; r_t = c_t + CrossAttn(c_t, r_{t+1}) for t = 3, 2, 1.
    ReorganizedSequence<T> high_to_low_aggregate(const std::array<Tensor<T>, 4>& common) const {
        for (const auto& c : common)
            if (c.shape() != common[3].shape()) throw ShapeError("high_to_low_aggregate inputs differ in shape");
        const std::size_t h = common[3].dim(1), w = common[3].dim(2);
        ReorganizedSequence<T> seq;
        seq.maps[3] = common[3];
        for (std::size_t t = 3; t-- > 0;) {
            Tensor<T> lower = to_tokens(common[t]);
            Tensor<T> higher = to_tokens(seq.maps[t + 1]);
            seq.maps[t] = add(common[t], from_tokens(attn_[t](lower, higher), h, w));
        }
        return seq;
    }

    ReorganizedSequence<T> forward(const FeaturePyramid<T>& pyramid) const {
        return high_to_low_aggregate(project_to_common(pyramid));
    }

    std::size_t channels() const { return channels_; }
    std::size_t side() const { return side_; }
    const CrossAttention<T>& attention(std::size_t t) const { return attn_.at(t); }
    const Tensor<T>& conv_weight(std::size_t l) const { return conv_w_.at(l); }
    const Tensor<T>& conv_bias(std::size_t l) const { return conv_b_.at(l); }

private:
    std::size_t channels_ = 0, side_ = 0, kernel_ = 1;
    std::array<Tensor<T>, 4> conv_w_, conv_b_;
    std::array<CrossAttention<T>, 3> attn_;
};

}  // namespace stan
