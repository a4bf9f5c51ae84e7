#pragma once

#include <vector>

namespace dmc::diffusion {

enum class ScheduleKind { Linear, Cosine };

// Variance schedule for the forward corruption chain. Arrays are indexed by
// step t in [1, T]; alpha_bar_at(0) is defined as 1 (the identity corruption).
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::Linear;
    int T = 0;
    std::vector<double> beta;      // beta[t-1] = beta_t, each in (0,1)
    std::vector<double> alpha;     // 1 - beta_t
    std::vector<double> alpha_bar; // cumulative product of alpha, strictly decreasing

    double beta_at(int t) const;
    double alpha_at(int t) const;
    double alpha_bar_at(int t) const; // accepts t = 0
};

NoiseSchedule make_schedule(ScheduleKind kind, int T);

} // namespace dmc::diffusion
