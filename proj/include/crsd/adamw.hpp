#pragma once

// AdamW with decoupled weight decay and bias-corrected moments.

#include <cmath>
#include <vector>

#include "crsd/tensor.hpp"

namespace crsd {

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (Tensor& p : params_) {
            if (!p.requires_grad()) p.set_requires_grad(true);
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            const std::vector<double>& g = p.grad();
            std::vector<double>& m = m_[i];
            std::vector<double>& v = v_[i];
            std::vector<double>& x = p.values();
            for (size_t j = 0; j < x.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                x[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * x[j]);
            }
        }
    }

    long step_count() const { return t_; }
    std::vector<Tensor>& params() { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamWConfig cfg_;
    long t_ = 0;
};

}  // namespace crsd
