// Trains a small model on generated data and reports open-set metrics,
// using the library directly instead of the CLI.
#include <cstdio>

#include "stan/stan.hpp"

int main() {
    stan::SyntheticSpec spec;
    spec.per_class = 16;
    spec.similarity = 0.3;
    spec.seed = 4;

    stan::RunConfig cfg;
    cfg.data.synthetic = spec;
    cfg.optimizer.epochs = 20;
    const stan::LoadedData data = stan::load_data(cfg);

    stan::Model<float> model(cfg.model, cfg.seed);
    stan::train(model, data.train, cfg.optimizer, cfg.lambda, cfg.seed, [](std::size_t epoch, double loss) {
        std::printf("epoch %zu loss %.4f\n", epoch + 1, loss);
        return true;
    });

    const auto o = stan::evaluate_model(model, data, std::nullopt, cfg.eval.target_tpr, 1);
    std::printf("theta %.6g  acc %.4f  auroc %.4f  oscr %.4f  macro-f1 %.4f\n", o.theta, o.report.acc,
                o.report.auroc, o.report.oscr, o.report.macro_f1);
    return 0;
}
