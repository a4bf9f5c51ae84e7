#pragma once

#include <vector>

#include "dmc/tensor.hpp"

namespace dmc::core {

// Bias-corrected Adam over an explicit parameter list. Moments are owned
// here, one slot per parameter, and step() applies the update in place.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                  double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    // Throws NumericError on non-finite gradients; parameters stay untouched.
    void step();

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    long step_count() const { return steps_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    double lr_, beta1_, beta2_, eps_;
    long steps_ = 0;
};

} // namespace dmc::core
