#pragma once
// Per-block activation maps: channel-mean |activation| of each pyramid level,
// min-max normalized to [0,1] and nearest-neighbour upsampled to the image.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "stan/io.hpp"
#include "stan/model.hpp"

namespace stan {

/// [C,h,w] -> [out_h,out_w]. A spatially constant map normalizes to all zeros.
template <class T>
Tensor<float> activation_map(const Tensor<T>& map, std::size_t out_h, std::size_t out_w) {
    if (map.rank() != 3) throw ShapeError("activation_map expects [C,H,W]");
    const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
    if (out_h % h != 0 || out_w % w != 0) throw ShapeError("image size is not a multiple of the feature map size");
    std::vector<double> m(h * w, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * w; ++i) m[i] += std::abs(static_cast<double>(map.data()[ch * h * w + i]));
    for (auto& v : m) v /= static_cast<double>(c);
    const auto [lo, hi] = std::minmax_element(m.begin(), m.end());
    const double min = *lo, range = *hi - *lo;
    std::vector<float> out(out_h * out_w);
    const std::size_t sy = out_h / h, sx = out_w / w;
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            const double v = m[(y / sy) * w + x / sx];
            out[y * out_w + x] = range > 0 ? static_cast<float>((v - min) / range) : 0.0f;
        }
    return Tensor<float>({out_h, out_w}, std::move(out));
}

template <class T>
std::array<Tensor<float>, 4> activation_maps(const Model<T>& model, const Tensor<T>& image) {
    NoTapeScope<T> no_tape;
    const auto out = model.forward(image);
    std::array<Tensor<float>, 4> maps;
    for (std::size_t l = 0; l < 4; ++l) maps[l] = activation_map(out.pyramid.maps[l], image.dim(1), image.dim(2));
    return maps;
}

/// Binary 8-bit PGM (P5); values in [0,1] scaled to 0..255.
inline std::string encode_pgm(const Tensor<float>& map) {
    if (map.rank() != 2) throw ShapeError("encode_pgm expects [H,W]");
    std::string out = "P5\n" + std::to_string(map.dim(1)) + " " + std::to_string(map.dim(0)) + "\n255\n";
    for (float v : map.data()) {
        const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    return out;
}

}  // namespace stan
