#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "bicat/autograd.hpp"

namespace bicat {

/// Adaptive moment estimation over a fixed parameter set.
class Adam {
public:
    explicit Adam(std::vector<Parameter*> params, double lr = 1e-3, double beta1 = 0.9,
                  double beta2 = 0.98, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (Parameter* p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    /// One update from the gradients currently held in the parameters.
    /// Gradients are cleared afterwards.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Parameter& p = *params_[i];
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t k = 0; k < p.value.numel(); ++k) {
                const double g = p.grad.at(k);
                m.at(k) = beta1_ * m.at(k) + (1.0 - beta1_) * g;
                v.at(k) = beta2_ * v.at(k) + (1.0 - beta2_) * g * g;
                const double mhat = m.at(k) / bc1;
                const double vhat = v.at(k) / bc2;
                p.value.at(k) -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
            p.zero_grad();
        }
    }

private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

}  // namespace bicat
