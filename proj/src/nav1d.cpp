#include "dmc/nav1d.hpp"

#include <algorithm>
#include <cmath>

#include "dmc/errors.hpp"

namespace dmc::envs {

using core::ContractError;

void Nav1DConfig::validate() const {
    if (horizon < 1) throw ContractError("Nav1DConfig: horizon must be >= 1");
    if (step_size <= 0.0 || step_size > 1.0)
        throw ContractError("Nav1DConfig: step_size must lie in (0,1]");
    if (static_cast<int>(mu.size()) != horizon || static_cast<int>(sigma.size()) != horizon)
        throw ContractError("Nav1DConfig: mu/sigma must have one entry per step");
    for (double m : mu)
        if (m < -1.0 || m > 1.0) throw ContractError("Nav1DConfig: centers must lie in [-1,1]");
    for (double s : sigma)
        if (s <= 0.0) throw ContractError("Nav1DConfig: widths must be positive");
}

Nav1DConfig make_nav1d_world(std::uint64_t seed, int horizon, double step_size) {
    Nav1DConfig w;
    w.horizon = horizon;
    w.step_size = step_size;
    w.world_seed = seed;
    Rng rng(seed);
    double center = rng.uniform(-0.5, 0.5);
    for (int t = 0; t < horizon; ++t) {
        center = std::clamp(center + rng.uniform(-0.4, 0.4), -1.0, 1.0);
        w.mu.push_back(center);
        w.sigma.push_back(rng.uniform(0.05, 0.3));
    }
    w.validate();
    return w;
}

double nav1d_transition(const Nav1DConfig& world, double s, double action) {
    const double a = std::clamp(action, -1.0, 1.0);
    return std::clamp(s + world.step_size * a, -1.0, 1.0);
}

Nav1DStepResult nav1d_step(const Nav1DConfig& world, const Nav1DState& state, double action) {
    world.validate();
    if (state.t >= world.horizon) throw ContractError("nav1d_step: episode already terminal");
    Nav1DStepResult r;
    r.next.s = nav1d_transition(world, state.s, action);
    r.next.t = state.t + 1;
    const double mu = world.mu[static_cast<std::size_t>(state.t)];
    const double sigma = world.sigma[static_cast<std::size_t>(state.t)];
    const double d = r.next.s - mu;
    r.reward = std::exp(-d * d / (2.0 * sigma * sigma));
    r.done = r.next.t == world.horizon;
    return r;
}

double nav1d_expert_action(const Nav1DConfig& world, const Nav1DState& state) {
    if (state.t >= world.horizon) throw ContractError("nav1d_expert_action: episode terminal");
    const double target = world.mu[static_cast<std::size_t>(state.t)];
    return std::clamp((target - state.s) / world.step_size, -1.0, 1.0);
}

std::vector<double> nav1d_observation(const Nav1DConfig& world, const Nav1DState& state) {
    return {state.s, static_cast<double>(state.t) / static_cast<double>(world.horizon)};
}

} // namespace dmc::envs
