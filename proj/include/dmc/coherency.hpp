#pragma once

#include <array>
#include <vector>

#include "dmc/dataset.hpp"
#include "dmc/nav1d.hpp"

namespace dmc::envs {

struct CoherencyReport {
    double score = 0.0; // C in [0, 1]
    long samples = 0;
    double tolerance = 0.0; // epsilon band for the planner variant, 0 otherwise
};

// (s_t, a_t, s_{t+1}) as produced by a planner.
struct PlanTriplet {
    double s = 0.0;
    double a = 0.0;
    double s_next = 0.0;
};

// Fraction of triplets whose claimed next state lands within eps_c of the true
// deterministic dynamics.
CoherencyReport coherency_planner(const std::vector<PlanTriplet>& plans,
                                  const Nav1DConfig& world, double eps_c = 0.05);

// Mean behavior density at the policy's (state, action) samples, estimated by
// a Laplace-smoothed 32x32 histogram over the dataset and normalized by its
// maximum bin so the result lives in [0, 1].
CoherencyReport coherency_policy(const std::vector<std::array<double, 2>>& state_actions,
                                 const OfflineDataset& data);

} // namespace dmc::envs
