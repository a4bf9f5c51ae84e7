#include "dmc/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "dmc/errors.hpp"

namespace dmc::diffusion {

using core::ContractError;

double NoiseSchedule::beta_at(int t) const {
    if (t < 1 || t > T) throw ContractError("NoiseSchedule: step out of [1,T]");
    return beta[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_at(int t) const {
    if (t < 1 || t > T) throw ContractError("NoiseSchedule: step out of [1,T]");
    return alpha[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar_at(int t) const {
    if (t == 0) return 1.0;
    if (t < 0 || t > T) throw ContractError("NoiseSchedule: step out of [0,T]");
    return alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_schedule(ScheduleKind kind, int T) {
    if (T < 2) throw ContractError("make_schedule: T must be at least 2");
    NoiseSchedule s;
    s.kind = kind;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    if (kind == ScheduleKind::Linear) {
        const double lo = 1e-4, hi = 2e-2;
        for (int t = 1; t <= T; ++t)
            s.beta[static_cast<std::size_t>(t - 1)] =
                lo + (hi - lo) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
    } else {
        // Squared-cosine alpha_bar curve; betas recovered from its ratios.
        // The beta cap is far below the usual 0.999: at desk-scale T the last
        // reverse step divides by sqrt(1 - beta_T), and a near-one beta would
        // amplify prediction error by ~1/sqrt(1-beta).
        const double eps = 0.008;
        auto f = [&](double u) {
            const double v = std::cos((u + eps) / (1.0 + eps) * M_PI / 2.0);
            return v * v;
        };
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            const double ab = f(static_cast<double>(t) / static_cast<double>(T)) / f(0.0);
            double b = 1.0 - ab / prev;
            b = std::clamp(b, 1e-8, 0.2);
            s.beta[static_cast<std::size_t>(t - 1)] = b;
            prev *= 1.0 - b;
        }
    }
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.alpha[static_cast<std::size_t>(t)] = 1.0 - s.beta[static_cast<std::size_t>(t)];
        prod *= s.alpha[static_cast<std::size_t>(t)];
        s.alpha_bar[static_cast<std::size_t>(t)] = prod;
    }
    return s;
}

} // namespace dmc::diffusion
