#pragma once

// Adam with optional per-weight freeze mask. Frozen elements are skipped
// entirely (value, first and second moments untouched), which makes the
// frozen slice bit-identical across any number of steps while trainable
// elements follow the unconstrained update rule exactly.

#include "minelab/freeze.hpp"
#include "minelab/models.hpp"

namespace minelab {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(Tensor::zeros(p->value.shape));
            v_.emplace_back(Tensor::zeros(p->value.shape));
        }
    }

    const std::vector<Var>& params() const { return params_; }
    AdamConfig& config() { return cfg_; }

    void step(const std::vector<Tensor>& grads, const FreezeMask* mask = nullptr) {
        if (grads.size() != params_.size())
            throw ArgumentError("Adam::step: gradient count mismatch");
        if (mask && mask->weight_view.size() != params_.size())
            throw ConfigError("Adam::step: freeze mask does not match parameter list");
        ++t_;
        double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& w = params_[i]->value;
            const Tensor& g = grads[i];
            check_same_shape(w, g, "Adam::step");
            const std::vector<uint8_t>* wv = mask ? &mask->weight_view[i] : nullptr;
            if (wv && static_cast<int64_t>(wv->size()) != w.numel())
                throw ConfigError("Adam::step: freeze mask built for a different architecture");
            for (int64_t e = 0; e < w.numel(); ++e) {
                if (wv && !(*wv)[e]) continue;
                double ge = g.data[e];
                m_[i].data[e] = cfg_.beta1 * m_[i].data[e] + (1.0 - cfg_.beta1) * ge;
                v_[i].data[e] = cfg_.beta2 * v_[i].data[e] + (1.0 - cfg_.beta2) * ge * ge;
                double mhat = m_[i].data[e] / c1;
                double vhat = v_[i].data[e] / c2;
                w.data[e] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    int64_t steps() const { return t_; }

    // moment state, exposed for checkpointing
    std::vector<Tensor>& moment1() { return m_; }
    std::vector<Tensor>& moment2() { return v_; }
    void set_steps(int64_t t) { t_ = t; }

private:
    std::vector<Var> params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
};

/// Backprop `loss` into `opt`'s parameters and take one step.
inline void optimize_step(Adam& opt, const Var& loss, const FreezeMask* mask = nullptr) {
    auto gs = ad::grad(loss, opt.params());
    std::vector<Tensor> gt;
    gt.reserve(gs.size());
    for (auto& g : gs) gt.push_back(g->value);
    opt.step(gt, mask);
}

}  // namespace minelab
