#include "bdforge/optim.hpp"

#include "bdforge/common.hpp"

namespace bdforge {

SgdOptimizer::SgdOptimizer(double learning_rate, double momentum, double weight_decay)
    : lr_(learning_rate), momentum_(momentum), weight_decay_(weight_decay) {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("SgdOptimizer: learning_rate must be positive");
    }
    if (momentum < 0.0 || momentum >= 1.0) {
        throw ConfigError("SgdOptimizer: momentum must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("SgdOptimizer: weight_decay must be non-negative");
    }
}

void SgdOptimizer::step(std::map<std::string, Tensor>& params,
                        const std::map<std::string, Tensor>& grads) {
    for (const auto& [key, g] : grads) {
        auto it = params.find(key);
        if (it == params.end()) {
            throw Error("SgdOptimizer::step: gradient for unknown parameter '" + key + "'");
        }
        Tensor& p = it->second;
        if (!p.same_shape(g)) {
            throw ShapeError("SgdOptimizer::step: parameter '" + key + "' has shape " +
                             p.shape_str() + " but gradient has shape " + g.shape_str());
        }
        auto vit = velocity_.find(key);
        if (vit == velocity_.end()) {
            vit = velocity_.emplace(key, Tensor::zeros(p.shape())).first;
        }
        Tensor& v = vit->second;
        if (weight_decay_ != 0.0) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                v.data()[i] = momentum_ * v.data()[i] + g.data()[i] + weight_decay_ * p.data()[i];
                p.data()[i] -= lr_ * v.data()[i];
            }
        } else {
            for (std::size_t i = 0; i < p.size(); ++i) {
                v.data()[i] = momentum_ * v.data()[i] + g.data()[i];
                p.data()[i] -= lr_ * v.data()[i];
            }
        }
    }
    for (const auto& [key, p] : params) {
        (void)p;
        if (grads.find(key) == grads.end()) {
            throw Error("SgdOptimizer::step: missing gradient for parameter '" + key + "'");
        }
    }
}

}  // namespace bdforge
