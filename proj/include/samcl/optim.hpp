#pragma once

// Adam with decoupled weight decay, plus the cosine learning-rate schedule
// used by every training loop in the project.

#include <cmath>
#include <vector>

#include "samcl/errors.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

struct AdamWConfig {
    double lr = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

inline double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return base_lr;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const Tensor& p : params_) {
            if (!p.requires_grad()) {
                throw validation_error("AdamW: refusing a non-trainable parameter " +
                                       shape_str(p.shape()));
            }
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

    void step() {
        ++t_;
        const double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor& p = params_[pi];
            if (!p.has_grad()) continue;
            const std::vector<double>& g = p.grad();
            double* w = p.data();
            std::vector<double>& m = m_[pi];
            std::vector<double>& v = v_[pi];
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bias1;
                const double vhat = v[i] / bias2;
                w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
            }
        }
    }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

} // namespace samcl
