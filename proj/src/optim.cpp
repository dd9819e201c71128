#include "nd/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nd {

double MomentumSgd::lr_at(int epoch) const {
    const double e = static_cast<double>(epoch);
    return cfg_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * e / cfg_.total_epochs));
}

void MomentumSgd::step(NamedTensors& params, const NamedTensors& grads, int epoch) {
    const double lr = lr_at(epoch);

    double scale = 1.0;
    if (cfg_.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& [name, g] : grads)
            for (double v : g.data) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
    }

    for (auto& [name, w] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (!g.same_shape(w))
            throw std::invalid_argument("sgd: gradient shape " + shape_str(g.shape) + " for '" + name +
                                        "' does not match parameter " + shape_str(w.shape));
        auto vit = velocity_.find(name);
        if (vit == velocity_.end()) vit = velocity_.emplace(name, Tensor(w.shape)).first;
        Tensor& vel = vit->second;
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            vel.at(i) = cfg_.momentum * vel.at(i) + scale * g.at(i);
            w.at(i) -= lr * vel.at(i) + lr * cfg_.weight_decay * w.at(i);
        }
    }
}

void AdamOpt::step(NamedTensors& params, const NamedTensors& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, w] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (!g.same_shape(w))
            throw std::invalid_argument("adam: gradient shape " + shape_str(g.shape) + " for '" + name +
                                        "' does not match parameter " + shape_str(w.shape));
        auto mit = m_.find(name);
        if (mit == m_.end()) mit = m_.emplace(name, Tensor(w.shape)).first;
        auto vit = v_.find(name);
        if (vit == v_.end()) vit = v_.emplace(name, Tensor(w.shape)).first;
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            const double gi = g.at(i) + cfg_.weight_decay * w.at(i);
            m.at(i) = cfg_.beta1 * m.at(i) + (1.0 - cfg_.beta1) * gi;
            v.at(i) = cfg_.beta2 * v.at(i) + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m.at(i) / bc1;
            const double vhat = v.at(i) / bc2;
            w.at(i) -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace nd
