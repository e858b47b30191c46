#pragma once
// Spatial-temporal feature learning: a single-layer LSTM unrolled over the
// four re-organized moments. Its forget block is the context-aware gate
// (or a plain sigmoid gate when that module is switched off).

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "stan/ca_gate.hpp"
#include "stan/nn.hpp"
#include "stan/ops.hpp"
#include "stan/sfso.hpp"

namespace stan {

enum class AggregationMode { module1_agg, module2_agg, module3_agg, stan };
enum class MomentOrder { low_to_high, high_to_low };

struct StflConfig {
    bool enabled = true;
    std::size_t hidden_size = 0;  // 0: input width
    AggregationMode aggregation_mode = AggregationMode::stan;
    MomentOrder moment_order = MomentOrder::low_to_high;
};

template <class T>
struct LstmState {
    Tensor<T> cell;
    Tensor<T> hidden;
};

template <class T>
struct StflOutput {
    std::vector<Tensor<T>> hidden;  // one per moment, processing order
    Tensor<T> final() const { return hidden.back(); }
};

template <class T>
class Stfl {
public:
    Stfl() = default;

    /// input_width d_in is the pooled feature width (= map channels D).
    Stfl(const StflConfig& cfg, const CaConfig& ca_cfg, std::size_t input_width, ParameterSet<T>& ps, Rng& rng,
         const std::string& prefix = "stfl")
        : order_(cfg.moment_order), input_(input_width), hidden_(cfg.hidden_size ? cfg.hidden_size : input_width) {
        const std::size_t z = hidden_ + input_;
        init_cell_ = Linear<T>::make(ps, prefix + ".init_cell", input_, hidden_, rng);
        init_hidden_ = Linear<T>::make(ps, prefix + ".init_hidden", input_, hidden_, rng);
        input_gate_ = Linear<T>::make(ps, prefix + ".input_gate", z, hidden_, rng);
        candidate_ = Linear<T>::make(ps, prefix + ".candidate", z, hidden_, rng);
        output_gate_ = Linear<T>::make(ps, prefix + ".output_gate", z, hidden_, rng);
        if (ca_cfg.enabled)
            ca_.emplace(ca_cfg, input_, hidden_, input_, ps, rng);
        else
            plain_forget_ = Linear<T>::make(ps, prefix + ".forget_gate", z, hidden_, rng, true, T{1});
    }

    /// Instance-adaptive initial states from the pooled final-moment feature.
    LstmState<T> init_states(const Tensor<T>& x_final) const {
        if (x_final.numel() != input_) throw ShapeError("stfl: init input width mismatch");
        return {tanh(init_cell_(x_final)), tanh(init_hidden_(x_final))};
    }

    Tensor<T> forget_gate(const LstmState<T>& s, const Tensor<T>& z, const Tensor<T>& x_vec, const Tensor<T>& x_map) const {
        if (ca_) return ca_->forget_mask(s.hidden, x_vec, x_map);
        return sigmoid(plain_forget_(z));
    }

    LstmState<T> step(const LstmState<T>& s, const Tensor<T>& x_vec, const Tensor<T>& x_map) const {
        if (x_vec.numel() != input_ || s.cell.numel() != hidden_ || s.hidden.numel() != hidden_)
            throw ShapeError("stfl: step dimension mismatch");
        Tensor<T> z = concat<T>({s.hidden, x_vec}, 0);
        Tensor<T> i = sigmoid(input_gate_(z));
        Tensor<T> g = tanh(candidate_(z));
        Tensor<T> o = sigmoid(output_gate_(z));
        Tensor<T> f = forget_gate(s, z, x_vec, x_map);
        Tensor<T> cell = add(mul(f, s.cell), mul(i, g));
        Tensor<T> hidden = mul(o, tanh(cell));
        check_finite(cell, "stfl cell state");
        return {cell, hidden};
    }

    StflOutput<T> forward(const ReorganizedSequence<T>& seq) const {
        std::array<std::size_t, 4> order{0, 1, 2, 3};
        if (order_ == MomentOrder::high_to_low) order = {3, 2, 1, 0};
        std::array<Tensor<T>, 4> pooled;
        for (std::size_t t = 0; t < 4; ++t) pooled[t] = global_avg_pool(seq.maps[t]);
        LstmState<T> s = init_states(pooled[order[3]]);
        StflOutput<T> out;
        for (std::size_t t : order) {
            s = step(s, pooled[t], seq.maps[t]);
            out.hidden.push_back(s.hidden);
        }
        return out;
    }

    std::size_t hidden_size() const { return hidden_; }
    std::size_t input_size() const { return input_; }
    bool has_ca() const { return ca_.has_value(); }
    const CaGate<T>& ca() const { return *ca_; }
    const Linear<T>& init_cell() const { return init_cell_; }
    const Linear<T>& init_hidden() const { return init_hidden_; }
    const Linear<T>& input_gate() const { return input_gate_; }
    const Linear<T>& candidate() const { return candidate_; }
    const Linear<T>& output_gate() const { return output_gate_; }

private:
    MomentOrder order_ = MomentOrder::low_to_high;
    std::size_t input_ = 0, hidden_ = 0;
    Linear<T> init_cell_, init_hidden_, input_gate_, candidate_, output_gate_, plain_forget_;
    std::optional<CaGate<T>> ca_;
};

}  // namespace stan
