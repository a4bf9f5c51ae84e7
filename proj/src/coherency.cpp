#include "dmc/coherency.hpp"

#include <algorithm>
#include <cmath>

#include "dmc/errors.hpp"

namespace dmc::envs {

namespace {

constexpr int kBins = 32;

int bin_index(double v) {
    // Map [-1, 1] onto kBins cells, clamping anything that drifts outside.
    const double u = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5;
    int i = static_cast<int>(u * kBins);
    return std::clamp(i, 0, kBins - 1);
}

} // namespace

CoherencyReport coherency_planner(const std::vector<PlanTriplet>& plans,
                                  const Nav1DConfig& world, double eps_c) {
    if (plans.empty()) throw core::ContractError("coherency_planner: empty plan set");
    if (eps_c <= 0.0) throw core::ContractError("coherency_planner: eps_c must be positive");
    long hits = 0;
    for (const auto& p : plans) {
        const double truth = nav1d_transition(world, p.s, p.a);
        if (std::abs(p.s_next - truth) <= eps_c) ++hits;
    }
    CoherencyReport rep;
    rep.samples = static_cast<long>(plans.size());
    rep.score = static_cast<double>(hits) / static_cast<double>(rep.samples);
    rep.tolerance = eps_c;
    return rep;
}

CoherencyReport coherency_policy(const std::vector<std::array<double, 2>>& state_actions,
                                 const OfflineDataset& data) {
    if (state_actions.empty()) throw core::ContractError("coherency_policy: no policy samples");
    if (data.episodes.empty() || data.num_transitions() == 0)
        throw core::ContractError("coherency_policy: empty dataset");

    // Behavior density: Laplace-smoothed histogram over state x action.
    std::vector<double> counts(static_cast<std::size_t>(kBins) * kBins, 1.0);
    for (const auto& ep : data.episodes) {
        for (const auto& tr : ep.steps) {
            if (tr.obs.empty() || tr.action.empty())
                throw core::ContractError("coherency_policy: transition missing obs or action");
            const int si = bin_index(tr.obs[0]);
            const int ai = bin_index(tr.action[0]);
            counts[static_cast<std::size_t>(si) * kBins + ai] += 1.0;
        }
    }
    const double max_bin = *std::max_element(counts.begin(), counts.end());

    double acc = 0.0;
    for (const auto& sa : state_actions) {
        const int si = bin_index(sa[0]);
        const int ai = bin_index(sa[1]);
        acc += counts[static_cast<std::size_t>(si) * kBins + ai] / max_bin;
    }
    CoherencyReport rep;
    rep.samples = static_cast<long>(state_actions.size());
    rep.score = acc / static_cast<double>(rep.samples);
    rep.tolerance = 0.0;
    return rep;
}

} // namespace dmc::envs
