#pragma once

#include <map>
#include <string>

#include "bdforge/tensor.hpp"

namespace bdforge {

/// Classic momentum SGD with optional L2 regularization:
///   g' = g + weight_decay * p ;  v <- momentum * v + g' ;  p <- p - lr * v.
/// Velocity buffers are created lazily (zero) on first sight of a key.
/// weight_decay 0 skips the regularization term entirely, so the update
/// is bit-identical to plain momentum SGD.
class SgdOptimizer {
public:
    SgdOptimizer(double learning_rate, double momentum, double weight_decay = 0.0);

    void step(std::map<std::string, Tensor>& params,
              const std::map<std::string, Tensor>& grads);

    double learning_rate() const { return lr_; }
    double momentum() const { return momentum_; }
    double weight_decay() const { return weight_decay_; }

private:
    double lr_;
    double momentum_;
    double weight_decay_;
    std::map<std::string, Tensor> velocity_;
};

}  // namespace bdforge
