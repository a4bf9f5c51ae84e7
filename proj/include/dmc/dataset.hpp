#pragma once

#include <string>
#include <vector>

#include "dmc/nav1d.hpp"
#include "dmc/rng.hpp"

namespace dmc::envs {

enum class Coverage { Partial, Full, Expert };

struct Transition {
    std::vector<double> obs;
    std::vector<double> action;
    double reward = 0.0;
    std::vector<double> next_obs;
    bool done = false;
};

struct Episode {
    std::vector<Transition> steps;
    double episode_return() const;
};

// Immutable after construction; transitions replay exactly through the
// generating environment.
struct OfflineDataset {
    Coverage coverage = Coverage::Full;
    std::string policy_desc;
    int obs_dim = 0;
    int action_dim = 0;
    std::vector<Episode> episodes;

    std::size_t num_transitions() const;
    double mean_return() const;
    const Transition& flat_at(std::size_t i) const; // row-major over episodes
};

// partial: random actions from starts inside the configured sub-interval;
// full: random actions from uniform starts; expert: greedy one-step policy.
OfflineDataset gen_dataset(const Nav1DConfig& world, Coverage coverage, int episodes, Rng& rng);

void write_dataset(const std::string& path, const OfflineDataset& ds);
OfflineDataset read_dataset(const std::string& path);

} // namespace dmc::envs
