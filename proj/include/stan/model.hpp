#pragma once
// Full network: backbone + C_S, then one of the aggregation variants feeding
// the spatial-temporal classifier C_ST.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "stan/backbone.hpp"
#include "stan/nn.hpp"
#include "stan/sfso.hpp"
#include "stan/stfl.hpp"

namespace stan {

/// Which representation C_ST classifies.
///   backbone_only: no C_ST; the C_S logits stand in for it
///   module1_agg:   concat of pooled pyramid maps
///   module2_agg:   concat of pooled re-organized maps
///   module3_agg:   concat of the four STFL hidden states
///   stan:          final STFL hidden state
enum class Variant { backbone_only, module1_agg, module2_agg, module3_agg, stan };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::backbone_only: return "backbone_only";
        case Variant::module1_agg: return "module1_agg";
        case Variant::module2_agg: return "module2_agg";
        case Variant::module3_agg: return "module3_agg";
        case Variant::stan: return "stan";
    }
    return "?";
}

struct ModelConfig {
    BackboneConfig backbone;
    SfsoConfig sfso;
    StflConfig stfl;
    CaConfig ca;
};

/// Maps module toggles and the aggregation mode to the network actually built.
inline Variant resolve_variant(const ModelConfig& c) {
    const auto mode = c.stfl.aggregation_mode;
    if (mode == AggregationMode::module1_agg) return Variant::module1_agg;
    if (!c.sfso.enabled) {
        if (mode != AggregationMode::stan)
            throw ConfigError("aggregation_mode needs sfso.enabled unless it is module1_agg");
        return Variant::backbone_only;
    }
    if (mode == AggregationMode::module2_agg) return Variant::module2_agg;
    if (!c.stfl.enabled) {
        if (mode == AggregationMode::module3_agg) throw ConfigError("aggregation_mode module3_agg needs stfl.enabled");
        return Variant::module2_agg;
    }
    return mode == AggregationMode::module3_agg ? Variant::module3_agg : Variant::stan;
}

template <class T>
struct ModelOutput {
    Tensor<T> logits_s;   // [K]
    Tensor<T> logits_st;  // [K]
    FeaturePyramid<T> pyramid;
    std::optional<ReorganizedSequence<T>> sequence;
    std::vector<Tensor<T>> hidden;
};

template <class T>
struct BatchLogits {
    Tensor<T> logits_s;   // [N,K]
    Tensor<T> logits_st;  // [N,K]
};

template <class T>
class Model {
public:
    explicit Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), variant_(resolve_variant(cfg)) {
        Rng rng(seed);
        backbone_ = Backbone<T>(cfg.backbone, params_, rng);
        const std::size_t k = cfg.backbone.num_known_classes;
        std::size_t width = 0;
        if (variant_ == Variant::module1_agg) {
            for (std::size_t c : cfg.backbone.stage_channels) width += c;
        } else if (variant_ != Variant::backbone_only) {
            sfso_.emplace(cfg.sfso, cfg.backbone, params_, rng);
            width = 4 * sfso_->channels();
            if (variant_ == Variant::module3_agg || variant_ == Variant::stan) {
                stfl_.emplace(cfg.stfl, cfg.ca, sfso_->channels(), params_, rng);
                width = (variant_ == Variant::stan ? 1 : 4) * stfl_->hidden_size();
            }
        }
        if (variant_ != Variant::backbone_only) classifier_st_ = Linear<T>::make(params_, "head.classifier_st", width, k, rng);
    }

    ModelOutput<T> forward(const Tensor<T>& image, std::vector<Tensor<T>>* attention = nullptr) const {
        ModelOutput<T> out;
        auto b = backbone_.forward(image, attention);
        out.logits_s = b.logits_s;
        out.pyramid = b.pyramid;
        if (variant_ == Variant::backbone_only) {
            out.logits_st = b.logits_s;
            return out;
        }
        Tensor<T> rep;
        if (variant_ == Variant::module1_agg) {
            rep = pooled_concat(out.pyramid.maps);
        } else {
            out.sequence = sfso_->forward(out.pyramid);
            if (variant_ == Variant::module2_agg) {
                rep = pooled_concat(out.sequence->maps);
            } else {
                out.hidden = stfl_->forward(*out.sequence).hidden;
                rep = variant_ == Variant::stan ? out.hidden.back() : concat(out.hidden, 0);
            }
        }
        out.logits_st = classifier_st_(rep);
        return out;
    }

    /// Per-sample forward over a batch; logits stacked to [N,K].
    BatchLogits<T> forward_batch(const std::vector<Tensor<T>>& images) const {
        if (images.empty()) throw DataError("empty batch");
        std::vector<Tensor<T>> s, st;
        const std::size_t k = cfg_.backbone.num_known_classes;
        for (const auto& img : images) {
            auto o = forward(img);
            s.push_back(reshape(o.logits_s, {1, k}));
            st.push_back(reshape(o.logits_st, {1, k}));
        }
        if (images.size() == 1) return {s[0], st[0]};
        return {concat(s, 0), concat(st, 0)};
    }

    const ModelConfig& config() const { return cfg_; }
    Variant variant() const { return variant_; }
    ParameterSet<T>& parameters() { return params_; }
    const ParameterSet<T>& parameters() const { return params_; }
    const Backbone<T>& backbone() const { return backbone_; }
    bool has_sfso() const { return sfso_.has_value(); }
    bool has_stfl() const { return stfl_.has_value(); }
    bool has_ca() const { return stfl_ && stfl_->has_ca(); }
    const Sfso<T>& sfso() const { return *sfso_; }
    const Stfl<T>& stfl() const { return *stfl_; }
    const Linear<T>& classifier_st() const { return classifier_st_; }

private:
    template <class Maps>
    static Tensor<T> pooled_concat(const Maps& maps) {
        std::vector<Tensor<T>> v;
        for (const auto& m : maps) v.push_back(global_avg_pool(m));
        return concat(v, 0);
    }

    ModelConfig cfg_;
    Variant variant_;
    ParameterSet<T> params_;
    Backbone<T> backbone_;
    std::optional<Sfso<T>> sfso_;
    std::optional<Stfl<T>> stfl_;
    Linear<T> classifier_st_;
};

}  // namespace stan
