#pragma once

#include <cstdint>
#include <vector>

#include "dmc/rng.hpp"

namespace dmc::envs {

using core::Rng;

// One-dimensional navigation over a fixed horizon. The agent moves by
// s' = clip(s + step_size * a, -1, 1) and is rewarded by how closely s'
// lands on that step's Gaussian target, peak-normalized so the best
// attainable per-step reward is 1 regardless of the target width.
struct Nav1DConfig {
    int horizon = 8;
    double step_size = 0.25;
    std::vector<double> mu;    // per-step reward centers, size horizon
    std::vector<double> sigma; // per-step reward widths, size horizon
    std::uint64_t world_seed = 0;
    double partial_start_lo = -1.0; // start sub-interval for partial coverage
    double partial_start_hi = 0.0;

    void validate() const;
};

// Reward centers follow a bounded random walk (|step| <= 0.4, clipped to
// [-1,1]) so an expert can track them; widths are uniform in [0.05, 0.3].
// The same seed always regenerates the same world.
Nav1DConfig make_nav1d_world(std::uint64_t seed, int horizon = 8, double step_size = 0.25);

struct Nav1DState {
    double s = 0.0;
    int t = 0;
};

struct Nav1DStepResult {
    Nav1DState next;
    double reward = 0.0;
    bool done = false;
};

// Deterministic transition alone: clip(s + step_size * a, -1, 1).
double nav1d_transition(const Nav1DConfig& world, double s, double action);

// Full environment step; throws ContractError once t == horizon.
Nav1DStepResult nav1d_step(const Nav1DConfig& world, const Nav1DState& state, double action);

// Greedy one-step expert: clip((mu_{t+1} - s) / step_size, -1, 1).
double nav1d_expert_action(const Nav1DConfig& world, const Nav1DState& state);

// Observation fed to learners: (position, normalized time index t/H).
std::vector<double> nav1d_observation(const Nav1DConfig& world, const Nav1DState& state);

} // namespace dmc::envs
