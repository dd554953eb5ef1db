#pragma once

#include <cstddef>
#include <vector>

#include "r2vd/autodiff.hpp"

namespace r2vd::optim {

enum class OptimizerKind { Adam, AdamW };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // L2 term for Adam, decoupled for AdamW
};

template <typename T>
class Optimizer {
public:
    Optimizer(std::vector<ad::Tensor<T>> params, OptimizerConfig cfg);

    /// One update from the gradients currently stored on the parameters.
    /// Parameters without a gradient buffer are treated as having zero gradient.
    void step();
    void zero_grad();

    std::size_t step_count() const { return step_count_; }
    const OptimizerConfig& config() const { return cfg_; }
    const std::vector<ad::Tensor<T>>& params() const { return params_; }

private:
    std::vector<ad::Tensor<T>> params_;
    OptimizerConfig cfg_;
    std::size_t step_count_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace r2vd::optim
