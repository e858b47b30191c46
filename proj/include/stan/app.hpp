#pragma once
// Command implementations behind the `stan` executable. Each returns the
// process exit code; failures are thrown as stan::Error.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "stan/config.hpp"
#include "stan/gradcheck.hpp"
#include "stan/head.hpp"
#include "stan/io.hpp"
#include "stan/metrics.hpp"
#include "stan/model.hpp"
#include "stan/probe.hpp"
#include "stan/synthetic.hpp"
#include "stan/train.hpp"

namespace stan {

/// Worker count for evaluation, from STAN_THREADS (default 1).
inline std::size_t eval_threads() {
    const char* v = std::getenv("STAN_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError(std::string("STAN_THREADS must be a positive integer, got '") + v + "'");
    return static_cast<std::size_t>(n);
}

inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// JSON number when finite, otherwise the strings "inf"/"-inf"/"nan".
inline nlohmann::json json_number(double v) {
    if (std::isfinite(v)) return v;
    return format_double(v);
}

// ---------------------------------------------------------------- data

struct LoadedData {
    std::vector<Sample<float>> train;
    std::vector<Sample<float>> val;   // known classes only
    std::vector<Sample<float>> test;  // known and unknown classes
};

inline LoadedData load_data(const RunConfig& cfg) {
    LoadedData d;
    if (cfg.data.synthetic) {
        const auto ds = generate_synthetic(*cfg.data.synthetic);
        d.train = synthetic_samples<float>(ds, Split::train, true, false);
        d.val = synthetic_samples<float>(ds, Split::val, true, false);
        d.test = synthetic_samples<float>(ds, Split::test, true, true);
    } else if (!cfg.data.manifest.empty()) {
        fs::path p(cfg.data.manifest);
        if (p.is_relative()) p = cfg.base_dir / p;
        const auto m = load_manifest(p);
        if (m.num_known_classes != cfg.model.backbone.num_known_classes)
            throw ConfigError("manifest has " + std::to_string(m.num_known_classes) +
                              " known classes, backbone.num_known_classes is " +
                              std::to_string(cfg.model.backbone.num_known_classes));
        if (m.image_shape[1] != cfg.model.backbone.image_size || m.image_shape[2] != cfg.model.backbone.image_size)
            throw ConfigError("manifest image size does not match backbone.image_size");
        d.train = load_samples<float>(m, Split::train, true, false);
        d.val = load_samples<float>(m, Split::val, true, false);
        d.test = load_samples<float>(m, Split::test, true, true);
    } else {
        throw ConfigError("data: neither manifest nor synthetic given");
    }
    return d;
}

// ---------------------------------------------------------------- checkpoints

inline nlohmann::json checkpoint_trailer(const RunConfig& cfg, Variant v, const TrainResult& r) {
    return {{"format", "stan-checkpoint"},
            {"config", to_json(cfg)},
            {"config_hash", config_hash(cfg)},
            {"architecture_hash", architecture_hash(cfg.model)},
            {"seed", cfg.seed},
            {"variant", variant_name(v)},
            {"epochs_run", r.epoch_losses.size()},
            {"final_loss", r.epoch_losses.empty() ? nlohmann::json(nullptr) : json_number(r.epoch_losses.back())}};
}

/// Rebuilds the model recorded in a checkpoint and loads its parameters.
inline Model<float> model_from_checkpoint(const Checkpoint& ck, RunConfig* cfg_out = nullptr) {
    if (!ck.trailer.contains("config")) throw DataError("checkpoint trailer has no config");
    const RunConfig cfg = run_config_from_json(ck.trailer.at("config"));
    if (ck.trailer.value("architecture_hash", std::string{}) != architecture_hash(cfg.model))
        throw DataError("checkpoint architecture hash does not match its recorded config");
    Model<float> model(cfg.model, cfg.seed);
    load_parameters(model.parameters(), ck);
    if (cfg_out) *cfg_out = cfg;
    return model;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
    fs::path config;
    fs::path out;
    fs::path loss_csv;  // default: <out>.loss.csv
    std::vector<std::string> overrides;
};

inline std::string format_loss_history(const TrainResult& r, std::size_t batches_per_epoch) {
    std::string out = "step,epoch,loss\n";
    for (std::size_t i = 0; i < r.batch_losses.size(); ++i)
        out += std::to_string(i) + "," + std::to_string(i / batches_per_epoch) + "," + format_score(r.batch_losses[i]) + "\n";
    return out;
}

inline int cmd_train(const TrainOptions& opt, std::ostream& log) {
    const RunConfig cfg = load_run_config(opt.config, opt.overrides);
    const LoadedData data = load_data(cfg);
    Model<float> model(cfg.model, cfg.seed);
    log << "variant " << variant_name(model.variant()) << ", " << model.parameters().total_size() << " parameters, "
        << data.train.size() << " training samples\n";
    const auto result = train(model, data.train, cfg.optimizer, cfg.lambda, cfg.seed, [&](std::size_t e, double loss) {
        log << "epoch " << e + 1 << "/" << cfg.optimizer.epochs << " loss " << format_score(loss) << "\n";
        return true;
    });
    save_checkpoint(opt.out, checkpoint_from(model.parameters(), checkpoint_trailer(cfg, model.variant(), result)));
    fs::path csv = opt.loss_csv;
    if (csv.empty()) {
        csv = opt.out;
        csv += ".loss.csv";
    }
    const std::size_t per_epoch = (data.train.size() + cfg.optimizer.batch_size - 1) / cfg.optimizer.batch_size;
    atomic_write(csv, format_loss_history(result, per_epoch));
    log << "wrote " << opt.out.string() << " and " << csv.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- eval

inline nlohmann::json curve_json(const Curve& c) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& [x, y] : c) a.push_back({x, y});
    return a;
}

inline nlohmann::json report_json(const MetricReport& r) {
    return {{"acc", r.acc},
            {"auroc", r.auroc},
            {"oscr", r.oscr},
            {"macro_f1", r.macro_f1},
            {"ccr_fpr_curve", curve_json(r.ccr_fpr_curve)},
            {"roc_curve", curve_json(r.roc_curve)}};
}

inline double calibrate_on(const Model<float>& model, const std::vector<Sample<float>>& known_val, double tpr,
                           std::size_t threads) {
    if (known_val.empty()) throw DataError("calibration needs known-class validation samples");
    std::vector<double> scores;
    for (const auto& s : score_samples(model, known_val, threads)) scores.push_back(s.score);
    return calibrate_threshold(scores, tpr);
}

struct EvalOptions {
    fs::path config;
    fs::path ckpt;
    fs::path out;  // directory for report.json and scores.csv
    std::optional<double> theta;
    bool calibrate = false;
    std::vector<std::string> overrides;
};

struct EvalOutcome {
    MetricReport report;
    double theta = 0.0;
    std::vector<ScoredSample> scores;
};

inline EvalOutcome evaluate_model(const Model<float>& model, const LoadedData& data, std::optional<double> theta,
                                  double target_tpr, std::size_t threads) {
    EvalOutcome o;
    o.theta = theta ? *theta : calibrate_on(model, data.val, target_tpr, threads);
    o.scores = score_samples(model, data.test, threads);
    o.report = evaluate_scores(o.scores, o.theta, model.config().backbone.num_known_classes);
    return o;
}

inline int cmd_eval(const EvalOptions& opt, std::ostream& log) {
    if (opt.theta && opt.calibrate) throw ConfigError("give either --theta or --calibrate, not both");
    if (opt.theta && std::isnan(*opt.theta)) throw ConfigError("--theta must not be NaN");
    const RunConfig cfg = load_run_config(opt.config, opt.overrides);
    const Checkpoint ck = load_checkpoint(opt.ckpt);
    RunConfig ck_cfg;
    const Model<float> model = model_from_checkpoint(ck, &ck_cfg);
    if (architecture_hash(cfg.model) != architecture_hash(ck_cfg.model))
        throw ConfigError("checkpoint " + opt.ckpt.string() + " was trained with a different architecture than " +
                          opt.config.string());
    const LoadedData data = load_data(cfg);
    const auto o = evaluate_model(model, data, opt.theta, cfg.eval.target_tpr, eval_threads());
    std::size_t known = 0;
    for (const auto& s : o.scores) known += s.true_label != UNKNOWN;
    nlohmann::json j = report_json(o.report);
    j["theta"] = json_number(o.theta);
    j["theta_source"] = opt.theta ? "given" : "calibrated";
    j["target_tpr"] = cfg.eval.target_tpr;
    j["num_known"] = known;
    j["num_unknown"] = o.scores.size() - known;
    j["variant"] = variant_name(model.variant());
    j["config_hash"] = config_hash(cfg);
    j["checkpoint_config_hash"] = ck.trailer.value("config_hash", std::string{});
    j["seed"] = cfg.seed;
    atomic_write(opt.out / "report.json", j.dump(2) + "\n");
    write_scores(opt.out / "scores.csv", o.scores);
    log << "ACC " << format_score(o.report.acc) << " AUROC " << format_score(o.report.auroc) << " OSCR "
        << format_score(o.report.oscr) << " macro-F1 " << format_score(o.report.macro_f1) << " theta "
        << format_double(o.theta) << "\n";
    return 0;
}

// ---------------------------------------------------------------- calibrate

struct CalibrateOptions {
    fs::path ckpt;
    fs::path manifest;
    double target_tpr = 0.95;
    fs::path out;  // optional JSON output
};

inline int cmd_calibrate(const CalibrateOptions& opt, std::ostream& log) {
    const Model<float> model = model_from_checkpoint(load_checkpoint(opt.ckpt));
    const auto m = load_manifest(opt.manifest);
    const auto val = load_samples<float>(m, Split::val, true, false);
    const double theta = calibrate_on(model, val, opt.target_tpr, eval_threads());
    if (!opt.out.empty()) {
        nlohmann::json j{{"theta", json_number(theta)}, {"target_tpr", opt.target_tpr}, {"num_scores", val.size()}};
        atomic_write(opt.out, j.dump(2) + "\n");
    }
    log << format_double(theta) << "\n";
    return 0;
}

// ---------------------------------------------------------------- gen-data

inline int cmd_gen_data(const fs::path& spec_path, const fs::path& out, std::ostream& log) {
    nlohmann::json j = read_json_file(spec_path);
    if (j.is_object() && j.contains("synthetic") && j.size() == 1) j = j.at("synthetic");
    const SyntheticSpec spec = synthetic_spec_from_json(j);
    const auto ds = generate_synthetic(spec);
    const auto manifest = write_dataset(ds, out);
    log << "wrote " << ds.images.size() << " images and " << manifest.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- ablate

struct AblationRow {
    std::string name;
    std::vector<std::string> overrides;
};

struct AblationGrid {
    std::vector<AblationRow> rows;
    std::vector<std::uint64_t> seeds;  // empty: the config seed only
    bool vary_data = true;             // synthetic data seed follows the run seed
};

inline AblationGrid parse_grid(const nlohmann::json& j) {
    AblationGrid g;
    try {
        for (auto it = j.begin(); it != j.end(); ++it)
            if (it.key() != "rows" && it.key() != "seeds" && it.key() != "vary_data")
                throw ConfigError("grid: unknown key '" + it.key() + "'");
        if (!j.contains("rows") || !j.at("rows").is_array() || j.at("rows").empty())
            throw ConfigError("grid: 'rows' must be a non-empty array");
        for (const auto& r : j.at("rows")) {
            AblationRow row;
            for (auto it = r.begin(); it != r.end(); ++it)
                if (it.key() != "name" && it.key() != "set") throw ConfigError("grid row: unknown key '" + it.key() + "'");
            row.name = r.value("name", std::string{});
            if (r.contains("set")) {
                if (!r.at("set").is_object()) throw ConfigError("grid row 'set' must be an object of key: value");
                for (auto it = r.at("set").begin(); it != r.at("set").end(); ++it)
                    row.overrides.push_back(it.key() + "=" + it.value().dump());
            }
            g.rows.push_back(std::move(row));
        }
        if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        g.vary_data = j.value("vary_data", true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("grid: ") + e.what());
    }
    return g;
}

struct AblationResult {
    std::string name;
    std::array<int, 4> modules{};
    std::vector<std::uint64_t> seeds;
    std::vector<MetricReport> runs;
    double acc = 0, auroc = 0, oscr = 0, macro_f1 = 0;  // medians over seeds
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw DataError("median of nothing");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Module columns: backbone (always), SFSO, STFL, CA gate.
inline std::array<int, 4> module_flags(const Model<float>& m) {
    return {1, m.has_sfso() ? 1 : 0, m.has_stfl() ? 1 : 0, m.has_ca() ? 1 : 0};
}

inline std::vector<AblationResult> run_ablation(const nlohmann::json& base, const fs::path& base_dir, const AblationGrid& grid,
                                                std::ostream& log) {
    std::vector<AblationResult> results;
    for (const auto& row : grid.rows) {
        nlohmann::json j = base;
        for (const auto& o : row.overrides) apply_override(j, o);
        const RunConfig row_cfg = run_config_from_json(j, base_dir);
        AblationResult res;
        res.seeds = grid.seeds.empty() ? std::vector<std::uint64_t>{row_cfg.seed} : grid.seeds;
        for (std::uint64_t seed : res.seeds) {
            nlohmann::json js = j;
            js["seed"] = seed;
            if (grid.vary_data && js.contains("data") && js["data"].contains("synthetic")) js["data"]["synthetic"]["seed"] = seed;
            const RunConfig cfg = run_config_from_json(js, base_dir);
            const LoadedData data = load_data(cfg);
            Model<float> model(cfg.model, cfg.seed);
            if (res.name.empty()) res.name = row.name.empty() ? variant_name(model.variant()) : row.name;
            res.modules = module_flags(model);
            train(model, data.train, cfg.optimizer, cfg.lambda, cfg.seed);
            const auto o = evaluate_model(model, data, std::nullopt, cfg.eval.target_tpr, eval_threads());
            log << res.name << " seed " << seed << ": ACC " << format_score(o.report.acc) << " AUROC "
                << format_score(o.report.auroc) << " OSCR " << format_score(o.report.oscr) << "\n";
            res.runs.push_back(o.report);
        }
        std::vector<double> a, u, s, f;
        for (const auto& r : res.runs) {
            a.push_back(r.acc);
            u.push_back(r.auroc);
            s.push_back(r.oscr);
            f.push_back(r.macro_f1);
        }
        res.acc = median(a);
        res.auroc = median(u);
        res.oscr = median(s);
        res.macro_f1 = median(f);
        results.push_back(std::move(res));
    }
    return results;
}

inline const char* kAblationHeader = "Model,Module1,Module2,Module3,Module4,ACC,AUROC,OSCR";

inline std::string format_ablation(const std::vector<AblationResult>& results) {
    std::string out = std::string(kAblationHeader) + "\n";
    for (const auto& r : results) {
        out += detail::csv_field(r.name);
        for (int m : r.modules) out += "," + std::to_string(m);
        out += "," + format_score(r.acc) + "," + format_score(r.auroc) + "," + format_score(r.oscr) + "\n";
    }
    return out;
}

inline std::string format_ablation_runs(const std::vector<AblationResult>& results) {
    std::string out = "Model,seed,ACC,AUROC,OSCR,macro_F1\n";
    for (const auto& r : results)
        for (std::size_t i = 0; i < r.runs.size(); ++i)
            out += detail::csv_field(r.name) + "," + std::to_string(r.seeds[i]) + "," + format_score(r.runs[i].acc) + "," +
                   format_score(r.runs[i].auroc) + "," + format_score(r.runs[i].oscr) + "," +
                   format_score(r.runs[i].macro_f1) + "\n";
    return out;
}

struct AblateOptions {
    fs::path config;
    fs::path grid;
    fs::path out;
    std::vector<std::string> overrides;
};

inline int cmd_ablate(const AblateOptions& opt, std::ostream& log) {
    nlohmann::json base = read_json_file(opt.config);
    for (const auto& o : opt.overrides) apply_override(base, o);
    run_config_from_json(base, opt.config.parent_path());  // fail early on a bad base config
    const AblationGrid grid = parse_grid(read_json_file(opt.grid));
    const auto results = run_ablation(base, opt.config.parent_path(), grid, log);
    atomic_write(opt.out / "ablation.csv", format_ablation(results));
    atomic_write(opt.out / "ablation_runs.csv", format_ablation_runs(results));
    log << "wrote " << (opt.out / "ablation.csv").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- attn-dump

inline int cmd_attn_dump(const fs::path& ckpt, const fs::path& image, const fs::path& out, std::ostream& log) {
    const Model<float> model = model_from_checkpoint(load_checkpoint(ckpt));
    const Tensor<float> img = read_tensor(image);
    const std::size_t side = model.config().backbone.image_size;
    if (img.shape() != Shape{3, side, side})
        throw ShapeError("image " + image.string() + " has shape " + shape_str(img.shape()) + ", model expects " +
                         shape_str({3, side, side}));
    const auto maps = activation_maps(model, img);
    for (std::size_t l = 0; l < 4; ++l) {
        const std::string stem = "block" + std::to_string(l + 1);
        atomic_write(out / (stem + ".pgm"), encode_pgm(maps[l]));
        write_tensor(out / (stem + ".stt"), maps[l]);
    }
    log << "wrote block1..4 .pgm/.stt under " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- gradcheck

/// Small architecture used when gradcheck runs without a config.
inline ModelConfig tiny_model_config() {
    ModelConfig m;
    m.backbone.image_size = 16;
    m.backbone.patch_size = 2;
    m.backbone.stage_channels = {4, 8, 16, 32};
    m.backbone.stage_depths = {1, 1, 1, 1};
    m.backbone.num_heads = {1, 2, 2, 2};
    m.backbone.mlp_ratio = 2;
    m.backbone.num_known_classes = 3;
    return m;
}

struct GradcheckOptions {
    fs::path config;  // optional; architecture, lambda and seed are taken from it
    double tol = 5e-3;
    double eps = 1e-6;
    std::size_t max_per_tensor = 4;
    bool sabotage = false;
    std::vector<std::string> overrides;
};

/// Module a parameter belongs to, for the per-module report.
inline std::string gradcheck_group(const std::string& name) {
    if (name.rfind("backbone.classifier", 0) == 0 || name.rfind("backbone.norm.", 0) == 0) return "classifier_s";
    if (name.rfind("backbone.", 0) == 0) return "backbone";
    if (name.rfind("sfso.", 0) == 0) return "sfso";
    if (name.rfind("ca.", 0) == 0) return "ca_gate";
    if (name.rfind("stfl.", 0) == 0) return "stfl";
    if (name.rfind("head.", 0) == 0) return "classifier_st";
    return "other";
}

struct GradcheckSummary {
    std::vector<std::pair<std::string, GradCheckReport>> modules;  // worst tensor per module, group entry count
    double worst = 0.0;
    bool passed = true;
};

inline GradcheckSummary run_gradcheck(const ModelConfig& mc, double lambda, std::uint64_t seed, const GradcheckOptions& opt) {
    struct SabotageGuard {
        bool prev;
        explicit SabotageGuard(bool on) : prev(debug::sabotage_gradients().exchange(on)) {}
        ~SabotageGuard() { debug::sabotage_gradients() = prev; }
    } guard(opt.sabotage);

    Model<double> model(mc, seed);
    Rng rng(seed ^ 0xbb67ae8584caa73bull);
    const std::size_t side = mc.backbone.image_size;
    std::vector<Tensor<double>> images;
    std::vector<int> labels;
    for (int i = 0; i < 2; ++i) {
        std::vector<double> px(3 * side * side);
        for (auto& p : px) p = rng.uniform(-1.0, 1.0);
        images.emplace_back(Shape{3, side, side}, std::move(px));
        labels.push_back(i % static_cast<int>(mc.backbone.num_known_classes));
    }
    const std::function<Tensor<double>()> loss = [&] { return batch_loss(model, images, labels, lambda); };
    const auto reports =
        grad_check_parameters<double>(loss, model.parameters().entries(), opt.eps, opt.tol, 1e-8, opt.max_per_tensor);

    // worst tensor per group; `checked` counts entries over the whole group
    std::map<std::string, GradCheckReport> worst;
    std::vector<std::string> order;
    for (const auto& [name, r] : reports) {
        const std::string g = gradcheck_group(name);
        auto it = worst.find(g);
        if (it == worst.end()) {
            order.push_back(g);
            worst[g] = r;
        } else {
            const std::size_t checked = it->second.checked + r.checked;
            if (!(r.max_rel_error <= it->second.max_rel_error)) it->second = r;
            it->second.checked = checked;
        }
    }
    auto input = grad_check(
        [&](const Tensor<double>& x) {
            auto o = model.forward(x);
            return concat<double>({o.logits_s, o.logits_st}, 0);
        },
        images[0], opt.eps, opt.tol, 1e-8);
    order.push_back("input");
    worst["input"] = input;

    GradcheckSummary s;
    for (const auto& g : order) {
        GradCheckReport r = worst[g];
        r.passed = r.max_rel_error < opt.tol;
        s.modules.emplace_back(g, r);
        if (!(r.max_rel_error <= s.worst)) s.worst = r.max_rel_error;
        s.passed = s.passed && r.passed;
    }
    return s;
}

inline int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& log) {
    ModelConfig mc = tiny_model_config();
    double lambda = 1.0;
    std::uint64_t seed = 0;
    if (!opt.config.empty()) {
        const RunConfig cfg = load_run_config(opt.config, opt.overrides);
        mc = cfg.model;
        lambda = cfg.lambda;
        seed = cfg.seed;
    } else if (!opt.overrides.empty()) {
        nlohmann::json j = model_to_json(mc);
        for (const auto& o : opt.overrides) apply_override(j, o);
        const RunConfig cfg = run_config_from_json(j);
        mc = cfg.model;
        lambda = cfg.lambda;
        seed = cfg.seed;
    }
    const auto s = run_gradcheck(mc, lambda, seed, opt);
    for (const auto& [name, r] : s.modules) {
        char line[160];
        std::snprintf(line, sizeof line, "%-14s worst_rel_error %.3e  (%zu entries)  %s\n", name.c_str(), r.max_rel_error,
                      r.checked, r.passed ? "ok" : "FAIL");
        log << line;
    }
    char line[120];
    std::snprintf(line, sizeof line, "overall worst_rel_error %.3e tol %.3e: %s\n", s.worst, opt.tol,
                  s.passed ? "PASS" : "FAIL");
    log << line;
    if (!s.passed) throw NumericalError("gradient check failed: worst relative error " + format_double(s.worst));
    return 0;
}

}  // namespace stan
