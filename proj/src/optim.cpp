#include "r2vd/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace r2vd::optim {

template <typename T>
Optimizer<T>::Optimizer(std::vector<ad::Tensor<T>> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    if (!(cfg_.lr > 0.0) || cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0 ||
        !(cfg_.eps > 0.0) || cfg_.weight_decay < 0.0)
        throw std::invalid_argument("optimizer: invalid hyperparameters");
    for (const auto& p : params_) {
        if (!p.defined() || !p.requires_grad()) throw std::invalid_argument("optimizer: parameter does not require grad");
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

template <typename T>
void Optimizer<T>::step() {
    ++step_count_;
    const double t = static_cast<double>(step_count_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        auto vals = p.mutable_values();
        const auto grad = p.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < vals.size(); ++i) {
            double theta = vals[i];
            double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            if (cfg_.kind == OptimizerKind::Adam) {
                g += cfg_.weight_decay * theta;
            } else {
                theta *= 1.0 - cfg_.lr * cfg_.weight_decay;
            }
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1, vhat = v[i] / bc2;
            theta -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            vals[i] = static_cast<T>(theta);
        }
    }
}

template <typename T>
void Optimizer<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace r2vd::optim
