#include "dmc/adam.hpp"

#include <cmath>

namespace dmc::core {

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw ContractError("Adam: learning rate must be positive");
    for (auto& p : params) {
        Slot s;
        s.m.assign(static_cast<size_t>(p.size()), 0.0);
        s.v.assign(static_cast<size_t>(p.size()), 0.0);
        s.param = std::move(p);
        slots_.push_back(std::move(s));
    }
}

void Adam::zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
}

void Adam::step() {
    for (auto& s : slots_) {
        for (double g : s.param.grad())
            if (!std::isfinite(g)) throw NumericError("Adam::step: non-finite gradient");
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (auto& s : slots_) {
        const auto& g = s.param.grad();
        auto& w = s.param.mutable_values();
        for (size_t i = 0; i < w.size(); ++i) {
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

} // namespace dmc::core
