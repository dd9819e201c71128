#pragma once

#include <map>
#include <string>

#include "nd/tensor.hpp"

namespace nd {

struct SgdConfig {
    double lr = 0.025;
    double momentum = 0.9;
    double weight_decay = 3e-4;
    double grad_clip = 5.0;  // global L2 clip; 0 disables
    int total_epochs = 25;   // cosine horizon
};

// Momentum SGD with cosine learning rate and decoupled weight decay:
//   v <- momentum*v + g;  w <- w - lr(e)*v - lr(e)*wd*w
class MomentumSgd {
public:
    explicit MomentumSgd(SgdConfig cfg) : cfg_(cfg) {}

    double lr_at(int epoch) const;
    void step(NamedTensors& params, const NamedTensors& grads, int epoch);
    const SgdConfig& config() const { return cfg_; }

private:
    SgdConfig cfg_;
    NamedTensors velocity_;
};

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-3;  // added to the gradient
};

// Adaptive-moment update with bias correction and a constant learning rate.
class AdamOpt {
public:
    explicit AdamOpt(AdamConfig cfg) : cfg_(cfg) {}

    void step(NamedTensors& params, const NamedTensors& grads);
    const AdamConfig& config() const { return cfg_; }
    long steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    NamedTensors m_, v_;
    long t_ = 0;
};

}  // namespace nd
