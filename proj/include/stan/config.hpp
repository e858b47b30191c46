#pragma once
// Run configuration: JSON schema, strict parsing (unknown keys are errors),
// dotted-key overrides and a stable content hash.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "stan/model.hpp"
#include "stan/optim.hpp"
#include "stan/synthetic.hpp"

namespace stan {

using nlohmann::json;

struct DataConfig {
    std::string manifest;                    // path; relative paths resolve against the config file
    std::optional<SyntheticSpec> synthetic;  // generated in memory when no manifest is given
};

struct EvalConfig {
    double target_tpr = 0.95;
};

struct RunConfig {
    ModelConfig model;
    double lambda = 1.0;
    OptimizerConfig optimizer;
    DataConfig data;
    EvalConfig eval;
    std::uint64_t seed = 0;
    std::filesystem::path base_dir;  // directory of the config file; not serialized

    void validate() const {
        model.backbone.validate();
        const Variant v = resolve_variant(model);
        if (v != Variant::backbone_only && v != Variant::module1_agg) model.sfso.validate(model.backbone);
        if (!(lambda >= 0.0)) throw ConfigError("loss.lambda must be non-negative");
        optimizer.validate();
        if (!(eval.target_tpr > 0.0 && eval.target_tpr <= 1.0)) throw ConfigError("eval.target_tpr must be in (0,1]");
        if (!data.manifest.empty() && data.synthetic) throw ConfigError("data: give either manifest or synthetic, not both");
        if (data.synthetic) {
            data.synthetic->validate();
            if (data.synthetic->image_side != model.backbone.image_size)
                throw ConfigError("data.synthetic.image_side must equal backbone.image_size");
            if (data.synthetic->known_classes != model.backbone.num_known_classes)
                throw ConfigError("data.synthetic.known_classes must equal backbone.num_known_classes");
        }
        if (model.ca.initial_state_std < 0.0) throw ConfigError("ca.initial_state_std must be non-negative");
    }
};

// ---------------------------------------------------------------- enums

inline const char* to_string(AggregationMode m) {
    switch (m) {
        case AggregationMode::module1_agg: return "module1_agg";
        case AggregationMode::module2_agg: return "module2_agg";
        case AggregationMode::module3_agg: return "module3_agg";
        case AggregationMode::stan: return "stan";
    }
    return "?";
}
inline const char* to_string(MomentOrder m) { return m == MomentOrder::low_to_high ? "low_to_high" : "high_to_low"; }
inline const char* to_string(ScanOrder s) { return s == ScanOrder::row_major ? "row_major" : "column_major"; }

inline AggregationMode parse_aggregation(const std::string& s) {
    if (s == "module1_agg") return AggregationMode::module1_agg;
    if (s == "module2_agg") return AggregationMode::module2_agg;
    if (s == "module3_agg") return AggregationMode::module3_agg;
    if (s == "stan") return AggregationMode::stan;
    throw ConfigError("stfl.aggregation_mode: unknown mode '" + s + "'");
}
inline MomentOrder parse_moment_order(const std::string& s) {
    if (s == "low_to_high") return MomentOrder::low_to_high;
    if (s == "high_to_low") return MomentOrder::high_to_low;
    throw ConfigError("stfl.moment_order: expected low_to_high or high_to_low, got '" + s + "'");
}
inline ScanOrder parse_scan_order(const std::string& s) {
    if (s == "row_major") return ScanOrder::row_major;
    if (s == "column_major") return ScanOrder::column_major;
    throw ConfigError("ca.scan_order: expected row_major or column_major, got '" + s + "'");
}

// ---------------------------------------------------------------- to JSON

inline json to_json(const SyntheticSpec& s) {
    return {{"known_classes", s.known_classes}, {"unknown_classes", s.unknown_classes},
            {"per_class", s.per_class},         {"image_side", s.image_side},
            {"similarity", s.similarity},       {"seed", s.seed},
            {"noise", s.noise},                 {"jitter", s.jitter},
            {"train_fraction", s.train_fraction}, {"val_fraction", s.val_fraction}};
}

inline json model_to_json(const ModelConfig& m) {
    const auto& b = m.backbone;
    return {{"backbone",
             {{"image_size", b.image_size},
              {"patch_size", b.patch_size},
              {"stage_channels", b.stage_channels},
              {"stage_depths", b.stage_depths},
              {"window_size", b.window_size},
              {"num_heads", b.num_heads},
              {"mlp_ratio", b.mlp_ratio},
              {"num_known_classes", b.num_known_classes}}},
            {"sfso",
             {{"enabled", m.sfso.enabled},
              {"common_channels", m.sfso.common_channels},
              {"common_side", m.sfso.common_side},
              {"kernel", m.sfso.kernel}}},
            {"stfl",
             {{"enabled", m.stfl.enabled},
              {"hidden_size", m.stfl.hidden_size},
              {"aggregation_mode", to_string(m.stfl.aggregation_mode)},
              {"moment_order", to_string(m.stfl.moment_order)}}},
            {"ca",
             {{"enabled", m.ca.enabled},
              {"hidden_size", m.ca.hidden_size},
              {"scan_order", to_string(m.ca.scan_order)},
              {"freeze_initial_states", m.ca.freeze_initial_states},
              {"initial_state_std", m.ca.initial_state_std}}}};
}

inline json to_json(const RunConfig& c) {
    json j = model_to_json(c.model);
    const auto& o = c.optimizer;
    j["loss"] = {{"lambda", c.lambda}};
    j["optimizer"] = {{"backbone",
                       {{"lr", o.backbone.lr},
                        {"weight_decay", o.backbone.weight_decay},
                        {"beta1", o.backbone.beta1},
                        {"beta2", o.backbone.beta2},
                        {"eps", o.backbone.eps}}},
                      {"rest", {{"lr", o.rest.lr}, {"weight_decay", o.rest.weight_decay}, {"momentum", o.rest.momentum}}},
                      {"epochs", o.epochs},
                      {"batch_size", o.batch_size}};
    json data = json::object();
    if (!c.data.manifest.empty()) data["manifest"] = c.data.manifest;
    if (c.data.synthetic) data["synthetic"] = to_json(*c.data.synthetic);
    j["data"] = data;
    j["eval"] = {{"target_tpr", c.eval.target_tpr}};
    j["seed"] = c.seed;
    return j;
}

// ---------------------------------------------------------------- from JSON

namespace detail {

/// Reads fields of one JSON object and rejects any key it was not asked about.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
    }

    template <class V>
    void get(const char* key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
                if (!j_.at(key).is_number_integer() || j_.at(key).get<long long>() < 0)
                    throw ConfigError(name(key) + " must be a non-negative integer");
            }
            if constexpr (std::is_same_v<V, bool>) {
                if (!j_.at(key).is_boolean()) throw ConfigError(name(key) + " must be true or false");
            }
            if constexpr (std::is_floating_point_v<V>) {
                if (!j_.at(key).is_number()) throw ConfigError(name(key) + " must be a number");
            }
            out = j_.at(key).get<V>();
        } catch (const json::exception& e) {
            throw ConfigError(name(key) + ": " + e.what());
        }
    }

    template <class V, std::size_t N>
    void get(const char* key, std::array<V, N>& out) {
        std::vector<V> v(out.begin(), out.end());
        get(key, v);
        if (v.size() != N) throw ConfigError(name(key) + " must have " + std::to_string(N) + " entries");
        std::copy(v.begin(), v.end(), out.begin());
    }

    Section child(const char* key) {
        seen_.insert(key);
        static const json empty = json::object();
        return Section(j_.contains(key) ? j_.at(key) : empty, name(key));
    }

    bool has(const char* key) const { return j_.contains(key); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name(it.key().c_str()) + "'");
    }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }
    std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline SyntheticSpec synthetic_from(Section s) {
    SyntheticSpec out;
    s.get("known_classes", out.known_classes);
    s.get("unknown_classes", out.unknown_classes);
    s.get("per_class", out.per_class);
    s.get("image_side", out.image_side);
    s.get("similarity", out.similarity);
    s.get("seed", out.seed);
    s.get("noise", out.noise);
    s.get("jitter", out.jitter);
    s.get("train_fraction", out.train_fraction);
    s.get("val_fraction", out.val_fraction);
    s.finish();
    return out;
}

}  // namespace detail

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
    return detail::synthetic_from(detail::Section(j, "synthetic"));
}

/// Missing keys keep their defaults; unknown keys throw ConfigError.
inline RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
    RunConfig c;
    c.base_dir = base_dir;
    detail::Section root(j, "");
    {
        auto s = root.child("backbone");
        auto& b = c.model.backbone;
        s.get("image_size", b.image_size);
        s.get("patch_size", b.patch_size);
        s.get("stage_channels", b.stage_channels);
        s.get("stage_depths", b.stage_depths);
        s.get("window_size", b.window_size);
        s.get("num_heads", b.num_heads);
        s.get("mlp_ratio", b.mlp_ratio);
        s.get("num_known_classes", b.num_known_classes);
        s.finish();
    }
    {
        auto s = root.child("sfso");
        s.get("enabled", c.model.sfso.enabled);
        s.get("common_channels", c.model.sfso.common_channels);
        s.get("common_side", c.model.sfso.common_side);
        s.get("kernel", c.model.sfso.kernel);
        s.finish();
    }
    {
        auto s = root.child("stfl");
        std::string mode = to_string(c.model.stfl.aggregation_mode), order = to_string(c.model.stfl.moment_order);
        s.get("enabled", c.model.stfl.enabled);
        s.get("hidden_size", c.model.stfl.hidden_size);
        s.get("aggregation_mode", mode);
        s.get("moment_order", order);
        s.finish();
        c.model.stfl.aggregation_mode = parse_aggregation(mode);
        c.model.stfl.moment_order = parse_moment_order(order);
    }
    {
        auto s = root.child("ca");
        std::string scan = to_string(c.model.ca.scan_order);
        s.get("enabled", c.model.ca.enabled);
        s.get("hidden_size", c.model.ca.hidden_size);
        s.get("scan_order", scan);
        s.get("freeze_initial_states", c.model.ca.freeze_initial_states);
        s.get("initial_state_std", c.model.ca.initial_state_std);
        s.finish();
        c.model.ca.scan_order = parse_scan_order(scan);
    }
    {
        auto s = root.child("loss");
        s.get("lambda", c.lambda);
        s.finish();
    }
    {
        auto s = root.child("optimizer");
        auto& o = c.optimizer;
        auto b = s.child("backbone");
        b.get("lr", o.backbone.lr);
        b.get("weight_decay", o.backbone.weight_decay);
        b.get("beta1", o.backbone.beta1);
        b.get("beta2", o.backbone.beta2);
        b.get("eps", o.backbone.eps);
        b.finish();
        auto r = s.child("rest");
        r.get("lr", o.rest.lr);
        r.get("weight_decay", o.rest.weight_decay);
        r.get("momentum", o.rest.momentum);
        r.finish();
        s.get("epochs", o.epochs);
        s.get("batch_size", o.batch_size);
        s.finish();
    }
    {
        auto s = root.child("data");
        s.get("manifest", c.data.manifest);
        if (s.has("synthetic")) c.data.synthetic = detail::synthetic_from(s.child("synthetic"));
        s.finish();
    }
    {
        auto s = root.child("eval");
        s.get("target_tpr", c.eval.target_tpr);
        s.finish();
    }
    root.get("seed", c.seed);
    root.finish();
    c.validate();
    return c;
}

// ---------------------------------------------------------------- overrides

/// Parses "a.b.c=value"; the value is read as JSON when it parses, else as a string.
inline void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    json* node = &j;
    std::size_t start = 0;
    for (;;) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

inline json read_json_file(const std::filesystem::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    json j = read_json_file(path);
    for (const auto& o : overrides) apply_override(j, o);
    return run_config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------- hashing

/// 64-bit FNV-1a, printed as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Hash of the architecture sections only: equal hashes mean checkpoints are interchangeable.
inline std::string architecture_hash(const ModelConfig& m) { return fnv1a_hex(model_to_json(m).dump()); }

/// Hash of the whole canonical config (architecture, training, data, seed).
inline std::string config_hash(const RunConfig& c) { return fnv1a_hex(to_json(c).dump()); }

}  // namespace stan
