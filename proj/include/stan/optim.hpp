#pragma once
// AdamW for the backbone, SGD (coupled weight decay, optional momentum) for
// everything else. Learning rates are constant.

#include <cmath>
#include <string>
#include <vector>

#include "stan/nn.hpp"

namespace stan {

struct AdamWConfig {
    double lr = 5e-5;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct SgdConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double momentum = 0.0;
};

struct OptimizerConfig {
    AdamWConfig backbone;
    SgdConfig rest;
    std::size_t epochs = 300;
    std::size_t batch_size = 8;

    void validate() const {
        if (!(backbone.lr >= 0) || !(rest.lr >= 0)) throw ConfigError("learning rates must be non-negative");
        if (!(backbone.weight_decay >= 0) || !(rest.weight_decay >= 0)) throw ConfigError("weight decay must be non-negative");
        if (!(backbone.beta1 >= 0 && backbone.beta1 < 1) || !(backbone.beta2 >= 0 && backbone.beta2 < 1))
            throw ConfigError("optimizer.backbone betas must be in [0,1)");
        if (!(backbone.eps > 0)) throw ConfigError("optimizer.backbone.eps must be positive");
        if (!(rest.momentum >= 0 && rest.momentum < 1)) throw ConfigError("optimizer.rest.momentum must be in [0,1)");
        if (batch_size == 0) throw ConfigError("optimizer.batch_size must be at least 1");
    }
};

inline bool is_backbone_parameter(const std::string& name) { return name.rfind("backbone.", 0) == 0; }

template <class T>
class AdamW {
public:
    AdamW(std::vector<Tensor<T>> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor<T>& p = params_[k];
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto w = p.mutable_data();
            auto g = p.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
                v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = m_[k][i] / bc1, vhat = v_[k][i] / bc2;
                double x = static_cast<double>(w[i]);
                x -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * x);
                w[i] = static_cast<T>(x);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    std::vector<Tensor<T>> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

template <class T>
class Sgd {
public:
    Sgd(std::vector<Tensor<T>> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) buf_.emplace_back(p.numel(), 0.0);
    }

    void step() {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor<T>& p = params_[k];
            if (!p.requires_grad() || !p.has_grad()) continue;
            auto w = p.mutable_data();
            auto g = p.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                double d = static_cast<double>(g[i]) + cfg_.weight_decay * static_cast<double>(w[i]);
                if (cfg_.momentum > 0) d = buf_[k][i] = cfg_.momentum * buf_[k][i] + d;
                w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg_.lr * d);
            }
        }
    }

private:
    std::vector<Tensor<T>> params_;
    SgdConfig cfg_;
    std::vector<std::vector<double>> buf_;
};

/// The two-optimizer split over one parameter set.
template <class T>
class SplitOptimizer {
public:
    SplitOptimizer(ParameterSet<T>& ps, const OptimizerConfig& cfg)
        : adam_(select(ps, true), cfg.backbone), sgd_(select(ps, false), cfg.rest), ps_(&ps) {}

    void zero_grad() { ps_->zero_grad(); }
    void step() {
        adam_.step();
        sgd_.step();
    }

private:
    static std::vector<Tensor<T>> select(ParameterSet<T>& ps, bool backbone) {
        std::vector<Tensor<T>> out;
        for (auto& [name, t] : ps.entries())
            if (is_backbone_parameter(name) == backbone) out.push_back(t);
        return out;
    }

    AdamW<T> adam_;
    Sgd<T> sgd_;
    ParameterSet<T>* ps_;
};

}  // namespace stan
