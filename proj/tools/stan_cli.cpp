// stan: train, evaluate and inspect open-set fine-grained recognition models.

#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "stan/app.hpp"

namespace {

// Accepts the usual float spellings plus inf / +inf / -inf.
double parse_theta(const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw stan::ConfigError("--theta: not a number: '" + s + "'");
    }
    if (used != s.size() || std::isnan(v)) throw stan::ConfigError("--theta: not a number: '" + s + "'");
    return v;
}

int fail(stan::ErrorKind kind, const std::string& msg) {
    std::string line = msg;
    for (auto& c : line)
        if (c == '\n' || c == '\r') c = ' ';
    std::cerr << "stan: error[" << stan::to_string(kind) << "]: " << line << "\n";
    return static_cast<int>(kind);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Open-set fine-grained recognition: training, evaluation, ablations and diagnostics"};
    app.require_subcommand(1);
    std::vector<std::string> overrides;
    auto add_set = [&](CLI::App* sub) {
        sub->add_option("--set", overrides, "Override a config value, e.g. --set optimizer.epochs=5 (repeatable)");
    };

    stan::TrainOptions train;
    auto* c_train = app.add_subcommand("train", "Train a model; writes a checkpoint and a loss-history CSV");
    c_train->add_option("--config", train.config, "Run config JSON")->required();
    c_train->add_option("--out", train.out, "Checkpoint path")->required();
    c_train->add_option("--loss-csv", train.loss_csv, "Loss history CSV (default: <out>.loss.csv)");
    add_set(c_train);

    stan::EvalOptions eval;
    std::string theta;
    auto* c_eval = app.add_subcommand("eval", "Score the test split; writes report.json and scores.csv");
    c_eval->add_option("--config", eval.config, "Run config JSON (data and eval sections)")->required();
    c_eval->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
    c_eval->add_option("--out", eval.out, "Output directory")->required();
    auto* o_theta = c_eval->add_option("--theta", theta, "Fixed open-set threshold (accepts inf)");
    auto* o_cal = c_eval->add_flag("--calibrate", eval.calibrate,
                                   "Calibrate the threshold on the known validation split (default)");
    o_theta->excludes(o_cal);
    add_set(c_eval);

    stan::CalibrateOptions cal;
    auto* c_cal = app.add_subcommand("calibrate", "Print the threshold keeping target-tpr of known validation samples");
    c_cal->add_option("--ckpt", cal.ckpt, "Checkpoint")->required();
    c_cal->add_option("--manifest", cal.manifest, "Dataset manifest (val split is used)")->required();
    c_cal->add_option("--target-tpr", cal.target_tpr, "Fraction of known samples to accept")->capture_default_str();
    c_cal->add_option("--out", cal.out, "Also write the threshold to this JSON file");

    std::filesystem::path gen_spec, gen_out;
    auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic dataset (TensorFiles + manifest.json)");
    c_gen->add_option("--spec", gen_spec, "Synthetic spec JSON")->required();
    c_gen->add_option("--out", gen_out, "Output directory")->required();

    stan::AblateOptions abl;
    auto* c_abl = app.add_subcommand("ablate", "Train and evaluate every grid row; writes ablation.csv");
    c_abl->add_option("--config", abl.config, "Base run config JSON")->required();
    c_abl->add_option("--grid", abl.grid, "Grid JSON: {rows: [{name, set: {key: value}}], seeds: [...]}")->required();
    c_abl->add_option("--out", abl.out, "Output directory")->required();
    add_set(c_abl);

    std::filesystem::path dump_ckpt, dump_image, dump_out;
    auto* c_dump = app.add_subcommand("attn-dump", "Write per-block activation maps as PGM and TensorFile");
    c_dump->add_option("--ckpt", dump_ckpt, "Checkpoint")->required();
    c_dump->add_option("--image", dump_image, "Image TensorFile [3,H,W]")->required();
    c_dump->add_option("--out", dump_out, "Output directory")->required();

    stan::GradcheckOptions gc;
    auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of the full model on a 2-sample batch");
    c_gc->add_option("--config", gc.config, "Run config JSON (default: built-in tiny architecture)");
    c_gc->add_option("--tol", gc.tol, "Relative error tolerance")->capture_default_str();
    c_gc->add_option("--eps", gc.eps, "Central difference step")->capture_default_str();
    c_gc->add_option("--max-per-tensor", gc.max_per_tensor, "Entries checked per parameter tensor (0 = all)")
        ->capture_default_str();
    c_gc->add_flag("--sabotage", gc.sabotage, "Corrupt one backward rule on purpose (checker self-test)");
    add_set(c_gc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(stan::ErrorKind::config, e.what());
    }

    try {
        std::ostream& log = std::cout;
        if (*c_train) return stan::cmd_train({train.config, train.out, train.loss_csv, overrides}, log);
        if (*c_eval) {
            if (!theta.empty()) eval.theta = parse_theta(theta);
            eval.overrides = overrides;
            return stan::cmd_eval(eval, log);
        }
        if (*c_cal) return stan::cmd_calibrate(cal, log);
        if (*c_gen) return stan::cmd_gen_data(gen_spec, gen_out, log);
        if (*c_abl) {
            abl.overrides = overrides;
            return stan::cmd_ablate(abl, log);
        }
        if (*c_dump) return stan::cmd_attn_dump(dump_ckpt, dump_image, dump_out, log);
        if (*c_gc) {
            gc.overrides = overrides;
            return stan::cmd_gradcheck(gc, log);
        }
    } catch (const stan::Error& e) {
        return fail(e.kind(), e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(stan::ErrorKind::io, e.what());
    } catch (const std::exception& e) {
        std::cerr << "stan: error[internal]: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
