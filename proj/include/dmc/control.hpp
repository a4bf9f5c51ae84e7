#pragma once

#include <functional>
#include <vector>

#include "dmc/dataset.hpp"
#include "dmc/diffusion.hpp"
#include "dmc/rng.hpp"

namespace dmc::control {

using core::Rng;
using diffusion::ConditionMask;
using diffusion::DiffusionModel;
using diffusion::SampleOptions;
using diffusion::SamplerKind;

// All state and action coordinates live in [-1, 1].
constexpr double kActionLo = -1.0;
constexpr double kActionHi = 1.0;

// Scores a flattened trajectory; plugged in by the value module (sum of Q
// over state-action pairs) or by tests with fakes.
using TrajScorer = std::function<double(const std::vector<double>& trajectory)>;

// Q(observation, action) handle for greedy action selection.
using QHandle =
    std::function<double(const std::vector<double>& obs, const std::vector<double>& action)>;

struct PlanResult {
    std::vector<double> trajectory; // the chosen candidate, layout as below
    std::vector<double> first_action; // clipped to action bounds
    double score = 0.0;
    int chosen_index = 0;
};

// Diffusion over flattened N-step trajectories laid out as
// [s_0, a_0, s_1, a_1, ..., a_{N-1}, s_N]; the current state is conditioned
// by in-painting slot s_0 at inference.
class PlannerDmc {
public:
    PlannerDmc() = default;
    PlannerDmc(DiffusionModel model, int plan_horizon, int state_dim, int action_dim);

    int plan_horizon() const { return horizon_; }
    int state_dim() const { return state_dim_; }
    int action_dim() const { return action_dim_; }
    int traj_dim() const { return (horizon_ + 1) * state_dim_ + horizon_ * action_dim_; }
    DiffusionModel& model() { return model_; }
    const DiffusionModel& model() const { return model_; }

    int state_offset(int i) const;  // i in [0, N]
    int action_offset(int i) const; // i in [0, N)
    std::vector<double> state_at(const std::vector<double>& traj, int i) const;
    std::vector<double> action_at(const std::vector<double>& traj, int i) const;

    // Mask that pins slot s_0 to the given state.
    ConditionMask current_state_mask(const std::vector<double>& state) const;

    // Generate n_rollouts in-painted candidates, score each, return the
    // argmax. A scorer is required whenever there is more than one candidate.
    PlanResult plan(const std::vector<double>& current_state, int n_rollouts,
                    const TrajScorer& scorer, SamplerKind kind, Rng& rng,
                    const SampleOptions& opts = {}) const;

private:
    DiffusionModel model_;
    int horizon_ = 0;
    int state_dim_ = 0;
    int action_dim_ = 0;
};

// Sliding window of recent observations fed to the policy as conditioning.
// Slots run oldest to newest; each slot is obs_dim values plus a trailing
// validity flag (1 = real observation, 0 = zero padding), so short histories
// are explicit rather than silently zero.
struct ContextWindow {
    int window = 1;
    int obs_dim = 0;
    std::vector<std::vector<double>> slots;  // window entries of size obs_dim
    std::vector<unsigned char> valid;        // per slot

    static ContextWindow build(const std::vector<std::vector<double>>& history, int window,
                               int obs_dim);
    void push(const std::vector<double>& obs);

    int flat_dim() const { return window * (obs_dim + 1); }
    std::vector<double> flatten() const;
    bool has_observation() const;
    const std::vector<double>& latest() const; // newest valid observation
};

enum class SelectorKind { Expectation, GreedyQ };

struct ActionSelector {
    SelectorKind kind = SelectorKind::Expectation;
    int candidates = 8;
    QHandle q; // required for GreedyQ
};

// Reduce candidate action chunks to one action: expectation = element-wise
// mean; greedy-Q = the candidate whose first action_dim entries score highest
// under selector.q at the given observation. Output is clipped to bounds.
std::vector<double> select_action(const std::vector<std::vector<double>>& candidates,
                                  const ActionSelector& selector, const std::vector<double>& obs,
                                  int action_dim);

// Diffusion over action chunks conditioned on a context window.
class PolicyDmc {
public:
    PolicyDmc() = default;
    PolicyDmc(DiffusionModel model, int obs_dim, int action_dim, int window = 1,
              int chunk_len = 1);

    int obs_dim() const { return obs_dim_; }
    int action_dim() const { return action_dim_; }
    int window() const { return window_; }
    int chunk_len() const { return chunk_; }
    DiffusionModel& model() { return model_; }
    const DiffusionModel& model() const { return model_; }

    ContextWindow make_context() const { return ContextWindow::build({}, window_, obs_dim_); }

    // Draw selector.candidates action chunks conditioned on the context and
    // reduce them: expectation = element-wise mean, greedy-Q = argmax of
    // Q(latest obs, first action). The result is clipped to action bounds.
    std::vector<double> act(const ContextWindow& ctx, const ActionSelector& selector,
                            SamplerKind kind, Rng& rng, const SampleOptions& opts = {}) const;

private:
    DiffusionModel model_;
    int obs_dim_ = 0;
    int action_dim_ = 0;
    int window_ = 1;
    int chunk_ = 1;
};

// Training batch for the in-painting task: flattened trajectories plus
// causal-prefix masks (a random number of leading trajectory elements is
// revealed; with probability uncond_prob the prefix is empty, keeping plain
// unconditional training in the mix).
struct MaskedBatch {
    std::vector<std::vector<double>> x0;
    std::vector<ConditionMask> masks;
};

// Flatten one stored episode into the planner's trajectory layout. The first
// state_dim entries of each observation are taken as the state.
std::vector<double> episode_to_trajectory(const PlannerDmc& planner, const envs::Episode& ep);

MaskedBatch masked_training_batch(const PlannerDmc& planner, const envs::OfflineDataset& data,
                                  int batch_size, double uncond_prob, Rng& rng);

} // namespace dmc::control
