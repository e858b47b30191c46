#pragma once
// Synthetic fine-grained dataset: a shared background texture plus one local
// oriented-grating motif per class. Motif parameters are blended toward a
// global prototype with weight `similarity`, so higher similarity means
// harder-to-separate classes. Unknown classes use held-out motifs.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stan/io.hpp"
#include "stan/random.hpp"

namespace stan {

struct SyntheticSpec {
    std::size_t known_classes = 4;
    std::size_t unknown_classes = 4;
    std::size_t per_class = 32;
    std::size_t image_side = 32;
    double similarity = 0.0;  // in [0,1)
    std::uint64_t seed = 0;
    double noise = 0.1;             // pixel noise standard deviation
    double jitter = 0.06;           // motif position jitter, fraction of the side
    double train_fraction = 0.5;    // known classes only
    double val_fraction = 0.25;     // known classes only; the rest is test

    void validate() const {
        if (known_classes < 2) throw ConfigError("synthetic.known_classes must be at least 2");
        if (per_class == 0) throw ConfigError("synthetic.per_class must be positive");
        if (image_side < 4) throw ConfigError("synthetic.image_side must be at least 4");
        if (!(similarity >= 0.0 && similarity < 1.0)) throw ConfigError("synthetic.similarity must be in [0,1)");
        if (!(noise >= 0.0) || !(jitter >= 0.0)) throw ConfigError("synthetic.noise and jitter must be non-negative");
        if (!(train_fraction >= 0 && val_fraction >= 0 && train_fraction + val_fraction <= 1.0))
            throw ConfigError("synthetic train/val fractions must be non-negative and sum to at most 1");
    }
};

struct Motif {
    double cx, cy;     // centre, fraction of the side
    double sigma;      // envelope width, fraction of the side
    double angle;      // grating orientation, radians
    double frequency;  // cycles per image side
    double phase;
    std::array<double, 3> color;
};

struct SyntheticImage {
    ManifestEntry entry;
    Tensor<float> image;
};

struct SyntheticDataset {
    DatasetManifest manifest;
    std::vector<SyntheticImage> images;  // same order as manifest.entries
};

namespace detail {

inline Motif random_motif(Rng& rng) {
    Motif m;
    m.cx = rng.uniform(0.3, 0.7);
    m.cy = rng.uniform(0.3, 0.7);
    m.sigma = rng.uniform(0.1, 0.2);
    m.angle = rng.uniform(0.0, 3.141592653589793);
    m.frequency = rng.uniform(2.0, 6.0);
    m.phase = rng.uniform(0.0, 6.283185307179586);
    for (auto& c : m.color) c = rng.uniform(-1.0, 1.0);
    return m;
}

inline Motif blend(const Motif& own, const Motif& proto, double s) {
    auto mix = [s](double a, double b) { return (1.0 - s) * a + s * b; };
    Motif m;
    m.cx = mix(own.cx, proto.cx);
    m.cy = mix(own.cy, proto.cy);
    m.sigma = mix(own.sigma, proto.sigma);
    m.angle = mix(own.angle, proto.angle);
    m.frequency = mix(own.frequency, proto.frequency);
    m.phase = mix(own.phase, proto.phase);
    for (std::size_t c = 0; c < 3; ++c) m.color[c] = mix(own.color[c], proto.color[c]);
    return m;
}

}  // namespace detail

/// Shared background: a few low-frequency plane waves per channel.
inline std::vector<float> background_texture(std::size_t side, Rng& rng) {
    std::vector<float> bg(3 * side * side, 0.0f);
    for (std::size_t c = 0; c < 3; ++c)
        for (int wave = 0; wave < 3; ++wave) {
            const double fx = rng.uniform(-2.0, 2.0), fy = rng.uniform(-2.0, 2.0);
            const double ph = rng.uniform(0.0, 6.283185307179586), amp = rng.uniform(0.05, 0.15);
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x) {
                    const double u = double(x) / double(side), v = double(y) / double(side);
                    bg[(c * side + y) * side + x] +=
                        static_cast<float>(amp * std::cos(6.283185307179586 * (fx * u + fy * v) + ph));
                }
        }
    return bg;
}

inline Tensor<float> render_motif(const std::vector<float>& bg, std::size_t side, const Motif& m, double dx, double dy,
                                  double noise, Rng& rng) {
    std::vector<float> px(bg);
    const double cx = m.cx + dx, cy = m.cy + dy;
    const double ca = std::cos(m.angle), sa = std::sin(m.angle);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const double u = (double(x) + 0.5) / double(side) - cx, v = (double(y) + 0.5) / double(side) - cy;
            const double env = std::exp(-(u * u + v * v) / (2.0 * m.sigma * m.sigma));
            const double wave = std::cos(6.283185307179586 * m.frequency * (u * ca + v * sa) + m.phase);
            for (std::size_t c = 0; c < 3; ++c)
                px[(c * side + y) * side + x] += static_cast<float>(m.color[c] * env * wave);
        }
    if (noise > 0)
        for (auto& p : px) p += static_cast<float>(rng.normal(0.0, noise));
    return Tensor<float>({3, side, side}, std::move(px));
}

/// Deterministic in the spec (including the seed). Image paths are
/// "images/<class>_<index>.stt"; unknown classes are numbered after the known ones.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const std::size_t side = spec.image_side;
    const auto bg = background_texture(side, rng);
    const Motif proto = detail::random_motif(rng);
    std::vector<Motif> motifs;
    for (std::size_t k = 0; k < spec.known_classes + spec.unknown_classes; ++k)
        motifs.push_back(detail::blend(detail::random_motif(rng), proto, spec.similarity));

    SyntheticDataset ds;
    ds.manifest.name = "synthetic-s" + format_score(spec.similarity) + "-seed" + std::to_string(spec.seed);
    ds.manifest.image_shape = {3, side, side};
    ds.manifest.num_known_classes = spec.known_classes;
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * double(spec.per_class)));
    const auto n_val = std::min(spec.per_class - std::min(n_train, spec.per_class),
                                static_cast<std::size_t>(std::llround(spec.val_fraction * double(spec.per_class))));
    for (std::size_t k = 0; k < motifs.size(); ++k) {
        const bool known = k < spec.known_classes;
        for (std::size_t i = 0; i < spec.per_class; ++i) {
            const double dx = rng.uniform(-spec.jitter, spec.jitter), dy = rng.uniform(-spec.jitter, spec.jitter);
            SyntheticImage img;
            img.image = render_motif(bg, side, motifs[k], dx, dy, spec.noise, rng);
            img.entry.path = "images/c" + std::to_string(k) + "_" + std::to_string(i) + ".stt";
            img.entry.known = known;
            img.entry.label = known ? static_cast<int>(k) : UNKNOWN;
            img.entry.split = !known ? Split::test : i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
            ds.manifest.entries.push_back(img.entry);
            ds.images.push_back(std::move(img));
        }
    }
    return ds;
}

/// Writes manifest.json and the image TensorFiles under `dir`.
inline fs::path write_dataset(const SyntheticDataset& ds, const fs::path& dir) {
    for (const auto& img : ds.images) write_tensor(dir / img.entry.path, img.image);
    const fs::path manifest = dir / "manifest.json";
    save_manifest(manifest, ds.manifest);
    return manifest;
}

/// In-memory samples of one split, without touching the file system.
template <class T>
std::vector<Sample<T>> synthetic_samples(const SyntheticDataset& ds, Split split, bool known, bool unknown) {
    std::vector<Sample<T>> out;
    for (const auto& img : ds.images)
        if (img.entry.split == split && (img.entry.known ? known : unknown))
            out.push_back({img.entry.path, cast<T>(img.image), img.entry.label});
    return out;
}

}  // namespace stan
