#pragma once
// Four-stage windowed self-attention backbone producing the hierarchical
// feature pyramid and the spatial classifier logits (C_S).
//
// Internally every stage works on a token matrix [H*W, C] in row-major
// spatial order; pyramid entries are exposed as [C, H, W] maps.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "stan/nn.hpp"
#include "stan/ops.hpp"

namespace stan {

struct BackboneConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
    std::array<std::size_t, 4> stage_depths{1, 1, 2, 1};
    std::size_t window_size = 2;
    std::array<std::size_t, 4> num_heads{1, 2, 4, 4};
    std::size_t mlp_ratio = 4;
    std::size_t num_known_classes = 4;

    std::size_t grid_side(std::size_t stage) const { return (image_size / patch_size) >> stage; }

    /// Window side used at a stage; clipped to the grid once the grid is smaller than the window.
    std::size_t window(std::size_t stage) const { return std::min(window_size, grid_side(stage)); }

    void validate() const {
        if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
            throw ConfigError("backbone.image_size must be divisible by backbone.patch_size");
        if (image_size % (patch_size * 8) != 0)
            throw ConfigError("backbone.image_size must be divisible by patch_size*8 (four halving stages)");
        if (num_known_classes < 1) throw ConfigError("backbone.num_known_classes must be positive");
        if (window_size == 0 || mlp_ratio == 0) throw ConfigError("backbone.window_size and mlp_ratio must be positive");
        for (std::size_t s = 0; s < 4; ++s) {
            if (stage_channels[s] == 0 || stage_depths[s] == 0 || num_heads[s] == 0)
                throw ConfigError("backbone stage sizes must be positive");
            if (s > 0 && stage_channels[s] != 2 * stage_channels[s - 1])
                throw ConfigError("backbone.stage_channels must double from stage to stage");
            if (stage_channels[s] % num_heads[s] != 0)
                throw ConfigError("backbone.num_heads must divide the stage channel count");
            if (grid_side(s) % window(s) != 0)
                throw ConfigError("backbone.window_size must divide every stage grid side");
        }
    }
};

template <class T>
struct FeaturePyramid {
    std::array<Tensor<T>, 4> maps;

    void validate() const {
        for (std::size_t i = 0; i < 4; ++i) {
            if (maps[i].rank() != 3) throw ShapeError("pyramid entry must be [C,H,W]");
            if (i == 0) continue;
            const auto& a = maps[i - 1].shape();
            const auto& b = maps[i].shape();
            if (b[0] != 2 * a[0] || a[1] != 2 * b[1] || a[2] != 2 * b[2])
                throw ShapeError("pyramid halving/doubling violated between " + shape_str(a) + " and " + shape_str(b));
        }
    }
};

template <class T>
struct PatchEmbed {
    Tensor<T> weight;  // [C1, 3, p, p]
    Tensor<T> bias;    // [C1]
    std::size_t patch = 1;
};

template <class T>
struct WindowBlock {
    LayerNorm<T> norm1;
    Linear<T> qkv;
    Linear<T> proj;
    LayerNorm<T> norm2;
    Linear<T> fc1;
    Linear<T> fc2;
    std::size_t heads = 1;

    static WindowBlock make(ParameterSet<T>& ps, const std::string& name, std::size_t channels, std::size_t heads,
                            std::size_t mlp_ratio, Rng& rng) {
        WindowBlock b;
        b.norm1 = LayerNorm<T>::make(ps, name + ".norm1", channels);
        b.qkv = Linear<T>::make(ps, name + ".qkv", channels, 3 * channels, rng);
        b.proj = Linear<T>::make(ps, name + ".proj", channels, channels, rng);
        b.norm2 = LayerNorm<T>::make(ps, name + ".norm2", channels);
        b.fc1 = Linear<T>::make(ps, name + ".fc1", channels, mlp_ratio * channels, rng);
        b.fc2 = Linear<T>::make(ps, name + ".fc2", mlp_ratio * channels, channels, rng);
        b.heads = heads;
        return b;
    }
};

/// Token indices of each non-overlapping window, windows in row-major order.
inline std::vector<std::vector<std::size_t>> window_partition(std::size_t h, std::size_t w, std::size_t window) {
    if (window == 0 || h % window != 0 || w % window != 0)
        throw ShapeError("window " + std::to_string(window) + " does not divide grid " + std::to_string(h) + "x" +
                         std::to_string(w));
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t wy = 0; wy < h; wy += window)
        for (std::size_t wx = 0; wx < w; wx += window) {
            std::vector<std::size_t> idx;
            for (std::size_t y = 0; y < window; ++y)
                for (std::size_t x = 0; x < window; ++x) idx.push_back((wy + y) * w + wx + x);
            out.push_back(std::move(idx));
        }
    return out;
}

/// Pre-norm window attention + MLP on a token matrix [h*w, C].
template <class T>
Tensor<T> window_block_tokens(const WindowBlock<T>& blk, const Tensor<T>& tokens, std::size_t h, std::size_t w,
                              std::size_t window, std::vector<Tensor<T>>* attention = nullptr) {
    const std::size_t c = tokens.dim(1);
    const std::size_t dh = c / blk.heads;
    const auto windows = window_partition(h, w, window);
    Tensor<T> qkv = blk.qkv(blk.norm1(tokens));
    std::vector<Tensor<T>> outs;
    std::vector<std::size_t> order;
    outs.reserve(windows.size());
    for (const auto& idx : windows) {
        Tensor<T> rows = gather_rows(qkv, idx);
        std::vector<Tensor<T>> heads;
        for (std::size_t hd = 0; hd < blk.heads; ++hd) {
            Tensor<T> q = slice(rows, 1, hd * dh, (hd + 1) * dh);
            Tensor<T> k = slice(rows, 1, c + hd * dh, c + (hd + 1) * dh);
            Tensor<T> v = slice(rows, 1, 2 * c + hd * dh, 2 * c + (hd + 1) * dh);
            heads.push_back(attend(q, k, v, attention));
        }
        outs.push_back(heads.size() == 1 ? heads.front() : concat(heads, 1));
        order.insert(order.end(), idx.begin(), idx.end());
    }
    Tensor<T> merged = outs.size() == 1 ? outs.front() : concat(outs, 0);
    // undo the window ordering
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
    bool identity = true;
    for (std::size_t i = 0; i < inverse.size() && identity; ++i) identity = inverse[i] == i;
    if (!identity) merged = gather_rows(merged, inverse);
    Tensor<T> x = add(tokens, blk.proj(merged));
    return add(x, blk.fc2(gelu(blk.fc1(blk.norm2(x)))));
}

/// [C,H,W] -> [C,H,W]; per-window multi-head self-attention and MLP, both residual.
template <class T>
Tensor<T> window_attention_block(const WindowBlock<T>& blk, const Tensor<T>& x, std::size_t window,
                                 std::vector<Tensor<T>>* attention = nullptr) {
    if (x.rank() != 3) throw ShapeError("window_attention_block expects [C,H,W]");
    const std::size_t h = x.dim(1), w = x.dim(2);
    return from_tokens(window_block_tokens(blk, to_tokens(x), h, w, window, attention), h, w);
}

/// 2x2 neighbourhood merge of a token grid [h*w, C] -> [(h/2)*(w/2), 2C].
template <class T>
Tensor<T> merge_tokens(const Linear<T>& reduction, const Tensor<T>& tokens, std::size_t h, std::size_t w) {
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("downsample needs even spatial size");
    std::array<std::vector<std::size_t>, 4> idx;
    for (std::size_t y = 0; y < h; y += 2)
        for (std::size_t x = 0; x < w; x += 2) {
            idx[0].push_back(y * w + x);
            idx[1].push_back((y + 1) * w + x);
            idx[2].push_back(y * w + x + 1);
            idx[3].push_back((y + 1) * w + x + 1);
        }
    std::vector<Tensor<T>> parts;
    for (const auto& i : idx) parts.push_back(gather_rows(tokens, i));
    return reduction(concat(parts, 1));
}

/// [C,H,W] -> [2C,H/2,W/2].
template <class T>
Tensor<T> downsample(const Linear<T>& reduction, const Tensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("downsample expects [C,H,W]");
    const std::size_t h = x.dim(1), w = x.dim(2);
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("downsample needs even spatial size, got " + shape_str(x.shape()));
    return from_tokens(merge_tokens(reduction, to_tokens(x), h, w), h / 2, w / 2);
}

/// Non-overlapping p×p patches linearly projected: [3,H,W] -> [C1,H/p,W/p].
template <class T>
Tensor<T> patch_embed(const PatchEmbed<T>& pe, const Tensor<T>& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("image must be [3,H,W], got " + shape_str(image.shape()));
    if (image.dim(1) % pe.patch != 0 || image.dim(2) % pe.patch != 0)
        throw ShapeError("image " + shape_str(image.shape()) + " not divisible into " + std::to_string(pe.patch) +
                         "-pixel patches");
    return conv2d(image, pe.weight, pe.bias, pe.patch, 0);
}

template <class T>
struct BackboneOutput {
    FeaturePyramid<T> pyramid;
    Tensor<T> logits_s;  // [K]
};

template <class T>
class Backbone {
public:
    Backbone() = default;

    Backbone(const BackboneConfig& cfg, ParameterSet<T>& ps, Rng& rng, const std::string& prefix = "backbone")
        : cfg_(cfg) {
        cfg_.validate();
        const std::size_t p = cfg.patch_size, c1 = cfg.stage_channels[0];
        embed_.patch = p;
        embed_.weight = ps.uniform(prefix + ".patch_embed.weight", {c1, 3, p, p}, 3 * p * p, rng);
        embed_.bias = ps.constant(prefix + ".patch_embed.bias", {c1}, T{0});
        for (std::size_t s = 0; s < 4; ++s) {
            const std::string sp = prefix + ".stage" + std::to_string(s + 1);
            const std::size_t c = cfg.stage_channels[s];
            if (s > 0) merge_[s] = Linear<T>::make(ps, sp + ".downsample", 2 * c, c, rng);
            for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b)
                blocks_[s].push_back(WindowBlock<T>::make(ps, sp + ".block" + std::to_string(b), c, cfg.num_heads[s],
                                                          cfg.mlp_ratio, rng));
        }
        norm_ = LayerNorm<T>::make(ps, prefix + ".norm", cfg.stage_channels[3]);
        head_ = Linear<T>::make(ps, prefix + ".classifier", cfg.stage_channels[3], cfg.num_known_classes, rng);
    }

    /// Pyramid entry i is the output of stage i; logits_s = C_S(avgpool(layernorm(map_4))).
    BackboneOutput<T> forward(const Tensor<T>& image, std::vector<Tensor<T>>* attention = nullptr) const {
        if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size)
            throw ShapeError("image " + shape_str(image.shape()) + " does not match configured size " +
                             std::to_string(cfg_.image_size));
        BackboneOutput<T> out;
        std::size_t side = cfg_.grid_side(0);
        Tensor<T> tokens = to_tokens(patch_embed(embed_, image));
        for (std::size_t s = 0; s < 4; ++s) {
            if (s > 0) {
                tokens = merge_tokens(merge_[s], tokens, side, side);
                side /= 2;
            }
            for (const auto& blk : blocks_[s]) tokens = window_block_tokens(blk, tokens, side, side, cfg_.window(s), attention);
            out.pyramid.maps[s] = from_tokens(tokens, side, side);
        }
        Tensor<T> pooled = global_avg_pool(from_tokens(norm_(tokens), side, side));
        out.logits_s = head_(pooled);
        return out;
    }

    const BackboneConfig& config() const { return cfg_; }
    const PatchEmbed<T>& embed() const { return embed_; }
    const std::vector<WindowBlock<T>>& blocks(std::size_t stage) const { return blocks_.at(stage); }
    const Linear<T>& merge(std::size_t stage) const { return merge_.at(stage); }
    const LayerNorm<T>& norm() const { return norm_; }
    const Linear<T>& classifier() const { return head_; }

private:
    BackboneConfig cfg_;
    PatchEmbed<T> embed_;
    std::array<Linear<T>, 4> merge_;  // merge_[0] unused
    std::array<std::vector<WindowBlock<T>>, 4> blocks_;
    LayerNorm<T> norm_;
    Linear<T> head_;
};

}  // namespace stan
