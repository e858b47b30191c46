#pragma once
// Minibatch training on the joint loss and per-sample open-set scoring.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "stan/head.hpp"
#include "stan/model.hpp"
#include "stan/optim.hpp"

namespace stan {

template <class T>
struct Sample {
    std::string path;
    Tensor<T> image;  // [3,H,W]
    int label = UNKNOWN;
};

struct TrainResult {
    std::vector<double> batch_losses;  // one per optimizer step
    std::vector<double> epoch_losses;  // mean of the batch losses of each epoch
};

/// Called after every epoch with (epoch index, mean loss); return false to stop.
using EpochCallback = std::function<bool(std::size_t, double)>;

/// Joint loss for one batch. Without a C_ST branch only L_S is trained.
template <class T>
Tensor<T> batch_loss(const Model<T>& model, const std::vector<Tensor<T>>& images, const std::vector<int>& labels,
                     double lambda) {
    auto logits = model.forward_batch(images);
    if (model.variant() == Variant::backbone_only) return cross_entropy(logits.logits_s, labels);
    return total_loss(logits.logits_s, logits.logits_st, std::span<const int>(labels), lambda);
}

template <class T>
TrainResult train(Model<T>& model, const std::vector<Sample<T>>& data, const OptimizerConfig& cfg, double lambda,
                  std::uint64_t seed, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (data.empty()) throw DataError("training set is empty");
    const int k = static_cast<int>(model.config().backbone.num_known_classes);
    for (const auto& s : data)
        if (s.label < 0 || s.label >= k)
            throw DataError("training sample " + s.path + " has label " + std::to_string(s.label) + " outside [0," +
                            std::to_string(k) + ")");
    SplitOptimizer<T> opt(model.parameters(), cfg);
    Rng order_rng(seed ^ 0x6a09e667f3bcc909ull);
    std::vector<std::size_t> order(data.size());
    TrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        order_rng.shuffle(order.begin(), order.end());
        double epoch_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Tensor<T>> images;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                images.push_back(data[order[i]].image);
                labels.push_back(data[order[i]].label);
            }
            opt.zero_grad();
            Tape<T> tape;
            TapeScope<T> scope(tape);
            Tensor<T> loss = batch_loss(model, images, labels, lambda);
            const double value = static_cast<double>(loss.item());
            if (!std::isfinite(value))
                throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
            tape.backward(loss);
            opt.step();
            result.batch_losses.push_back(value);
            epoch_sum += value;
            ++batches;
        }
        result.epoch_losses.push_back(epoch_sum / static_cast<double>(batches));
        if (on_epoch && !on_epoch(epoch, result.epoch_losses.back())) break;
    }
    return result;
}

struct ScoredSample {
    std::string path;
    int true_label = UNKNOWN;
    int pred_label = 0;  // argmax class, threshold ignored
    double score = 0.0;  // max C_ST logit
};

/// Scores every sample; `threads` workers each take a contiguous block, output
/// keeps the input order.
template <class T>
std::vector<ScoredSample> score_samples(const Model<T>& model, const std::vector<Sample<T>>& data, std::size_t threads = 1) {
    std::vector<ScoredSample> out(data.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        NoTapeScope<T> no_tape;
        for (std::size_t i = begin; i < end; ++i) {
            auto o = model.forward(data[i].image);
            auto logits = o.logits_st.data();
            check_finite(o.logits_st, "logits of " + data[i].path);
            out[i] = {data[i].path, data[i].label, argmax(logits), open_set_score(logits)};
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, data.size()));
    if (threads == 1) {
        work(0, data.size());
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (data.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            try {
                work(std::min(data.size(), t * chunk), std::min(data.size(), (t + 1) * chunk));
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

/// Closed-set accuracy of the argmax prediction on known-class samples.
template <class T>
double train_accuracy(const Model<T>& model, const std::vector<Sample<T>>& data, std::size_t threads = 1) {
    if (data.empty()) throw DataError("accuracy of an empty set");
    std::size_t hit = 0;
    for (const auto& s : score_samples(model, data, threads)) hit += s.pred_label == s.true_label;
    return static_cast<double>(hit) / static_cast<double>(data.size());
}

}  // namespace stan
