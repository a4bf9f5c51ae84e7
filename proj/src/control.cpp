#include "dmc/control.hpp"

#include <algorithm>
#include <cmath>

#include "dmc/errors.hpp"

namespace dmc::control {

using core::ConfigurationError;
using core::ContractError;
using core::DimensionError;

namespace {

std::vector<double> clip_actions(std::vector<double> a) {
    for (double& v : a) v = std::clamp(v, kActionLo, kActionHi);
    return a;
}

} // namespace

PlannerDmc::PlannerDmc(DiffusionModel model, int plan_horizon, int state_dim, int action_dim)
    : model_(std::move(model)), horizon_(plan_horizon), state_dim_(state_dim),
      action_dim_(action_dim) {
    if (horizon_ < 1) throw ContractError("PlannerDmc: plan_horizon must be >= 1");
    if (state_dim_ < 1 || action_dim_ < 1)
        throw ContractError("PlannerDmc: state/action dims must be positive");
    if (model_.data_dim() != traj_dim())
        throw DimensionError("PlannerDmc: model data_dim does not match trajectory layout");
    if (model_.cond_dim() != 0)
        throw ContractError("PlannerDmc: planner models condition via in-painting only");
}

int PlannerDmc::state_offset(int i) const {
    if (i < 0 || i > horizon_) throw ContractError("PlannerDmc::state_offset: index out of range");
    return i * (state_dim_ + action_dim_);
}

int PlannerDmc::action_offset(int i) const {
    if (i < 0 || i >= horizon_)
        throw ContractError("PlannerDmc::action_offset: index out of range");
    return i * (state_dim_ + action_dim_) + state_dim_;
}

std::vector<double> PlannerDmc::state_at(const std::vector<double>& traj, int i) const {
    if (static_cast<int>(traj.size()) != traj_dim())
        throw DimensionError("PlannerDmc::state_at: trajectory dim mismatch");
    const int off = state_offset(i);
    return {traj.begin() + off, traj.begin() + off + state_dim_};
}

std::vector<double> PlannerDmc::action_at(const std::vector<double>& traj, int i) const {
    if (static_cast<int>(traj.size()) != traj_dim())
        throw DimensionError("PlannerDmc::action_at: trajectory dim mismatch");
    const int off = action_offset(i);
    return {traj.begin() + off, traj.begin() + off + action_dim_};
}

ConditionMask PlannerDmc::current_state_mask(const std::vector<double>& state) const {
    if (static_cast<int>(state.size()) != state_dim_)
        throw DimensionError("PlannerDmc::current_state_mask: state dim mismatch");
    ConditionMask m;
    m.mask.assign(static_cast<std::size_t>(traj_dim()), 0);
    m.known.assign(static_cast<std::size_t>(traj_dim()), 0.0);
    for (int i = 0; i < state_dim_; ++i) {
        m.mask[static_cast<std::size_t>(i)] = 1;
        m.known[static_cast<std::size_t>(i)] = state[static_cast<std::size_t>(i)];
    }
    return m;
}

PlanResult PlannerDmc::plan(const std::vector<double>& current_state, int n_rollouts,
                            const TrajScorer& scorer, SamplerKind kind, Rng& rng,
                            const SampleOptions& opts) const {
    if (n_rollouts < 1) throw ContractError("PlannerDmc::plan: n_rollouts must be >= 1");
    if (!scorer && n_rollouts > 1)
        throw ConfigurationError("PlannerDmc::plan: candidate selection needs a scorer handle");
    const ConditionMask mask = current_state_mask(current_state);

    PlanResult best;
    bool first = true;
    for (int k = 0; k < n_rollouts; ++k) {
        std::vector<double> cand = model_.inpaint_sample(mask, kind, rng, opts);
        const double score = scorer ? scorer(cand) : 0.0;
        if (first || score > best.score) {
            best.trajectory = std::move(cand);
            best.score = score;
            best.chosen_index = k;
            first = false;
        }
    }
    best.first_action = clip_actions(action_at(best.trajectory, 0));
    return best;
}

ContextWindow ContextWindow::build(const std::vector<std::vector<double>>& history, int window,
                                   int obs_dim) {
    if (window < 1) throw ContractError("ContextWindow::build: window must be >= 1");
    if (obs_dim < 1) throw ContractError("ContextWindow::build: obs_dim must be >= 1");
    ContextWindow ctx;
    ctx.window = window;
    ctx.obs_dim = obs_dim;
    ctx.slots.assign(static_cast<std::size_t>(window),
                     std::vector<double>(static_cast<std::size_t>(obs_dim), 0.0));
    ctx.valid.assign(static_cast<std::size_t>(window), 0);
    for (const auto& obs : history) ctx.push(obs);
    return ctx;
}

void ContextWindow::push(const std::vector<double>& obs) {
    if (static_cast<int>(obs.size()) != obs_dim)
        throw DimensionError("ContextWindow::push: observation dim mismatch");
    slots.erase(slots.begin());
    slots.push_back(obs);
    valid.erase(valid.begin());
    valid.push_back(1);
}

std::vector<double> ContextWindow::flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(flat_dim()));
    for (std::size_t i = 0; i < slots.size(); ++i) {
        flat.insert(flat.end(), slots[i].begin(), slots[i].end());
        flat.push_back(valid[i] != 0 ? 1.0 : 0.0);
    }
    return flat;
}

bool ContextWindow::has_observation() const {
    return std::any_of(valid.begin(), valid.end(), [](unsigned char v) { return v != 0; });
}

const std::vector<double>& ContextWindow::latest() const {
    for (std::size_t i = slots.size(); i-- > 0;)
        if (valid[i] != 0) return slots[i];
    throw ContractError("ContextWindow::latest: window holds no observation");
}

PolicyDmc::PolicyDmc(DiffusionModel model, int obs_dim, int action_dim, int window, int chunk_len)
    : model_(std::move(model)), obs_dim_(obs_dim), action_dim_(action_dim), window_(window),
      chunk_(chunk_len) {
    if (obs_dim_ < 1 || action_dim_ < 1)
        throw ContractError("PolicyDmc: obs/action dims must be positive");
    if (window_ < 1 || chunk_ < 1) throw ContractError("PolicyDmc: window and chunk must be >= 1");
    if (model_.data_dim() != action_dim_ * chunk_)
        throw DimensionError("PolicyDmc: model data_dim does not match the action chunk");
    if (model_.cond_dim() != window_ * (obs_dim_ + 1))
        throw DimensionError("PolicyDmc: model cond_dim does not match the context window");
}

std::vector<double> select_action(const std::vector<std::vector<double>>& candidates,
                                  const ActionSelector& selector, const std::vector<double>& obs,
                                  int action_dim) {
    if (candidates.empty()) throw ContractError("select_action: no candidates");
    if (selector.kind == SelectorKind::Expectation) {
        std::vector<double> mean(candidates[0].size(), 0.0);
        for (const auto& c : candidates) {
            if (c.size() != mean.size())
                throw DimensionError("select_action: ragged candidate set");
            for (std::size_t i = 0; i < c.size(); ++i) mean[i] += c[i];
        }
        for (double& v : mean) v /= static_cast<double>(candidates.size());
        return clip_actions(std::move(mean));
    }

    if (!selector.q)
        throw ConfigurationError("select_action: greedy-Q selection needs a Q handle");
    std::size_t best = 0;
    double best_q = 0.0;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
        if (static_cast<int>(candidates[k].size()) < action_dim)
            throw DimensionError("select_action: candidate shorter than action_dim");
        std::vector<double> first(candidates[k].begin(), candidates[k].begin() + action_dim);
        const double qv = selector.q(obs, clip_actions(std::move(first)));
        if (k == 0 || qv > best_q) {
            best = k;
            best_q = qv;
        }
    }
    return clip_actions(candidates[best]);
}

std::vector<double> PolicyDmc::act(const ContextWindow& ctx, const ActionSelector& selector,
                                   SamplerKind kind, Rng& rng, const SampleOptions& opts) const {
    if (selector.candidates < 1) throw ContractError("PolicyDmc::act: candidates must be >= 1");
    if (selector.kind == SelectorKind::GreedyQ && !selector.q)
        throw ConfigurationError("PolicyDmc::act: greedy-Q selection needs a Q handle");
    if (ctx.window != window_ || ctx.obs_dim != obs_dim_)
        throw DimensionError("PolicyDmc::act: context window shape mismatch");

    const std::vector<double> cond = ctx.flatten();
    SampleOptions local = opts;
    local.cond = &cond;

    std::vector<std::vector<double>> cands;
    cands.reserve(static_cast<std::size_t>(selector.candidates));
    for (int k = 0; k < selector.candidates; ++k) cands.push_back(model_.sample(kind, rng, local));

    const std::vector<double> no_obs;
    const std::vector<double>& obs =
        selector.kind == SelectorKind::GreedyQ ? ctx.latest() : no_obs;
    return select_action(cands, selector, obs, action_dim_);
}

std::vector<double> episode_to_trajectory(const PlannerDmc& planner, const envs::Episode& ep) {
    const int N = planner.plan_horizon();
    const int sd = planner.state_dim();
    const int ad = planner.action_dim();
    if (static_cast<int>(ep.steps.size()) != N)
        throw ContractError("episode_to_trajectory: episode length differs from plan horizon");
    std::vector<double> traj(static_cast<std::size_t>(planner.traj_dim()), 0.0);
    for (int i = 0; i < N; ++i) {
        const auto& tr = ep.steps[static_cast<std::size_t>(i)];
        if (static_cast<int>(tr.obs.size()) < sd || static_cast<int>(tr.next_obs.size()) < sd)
            throw DimensionError("episode_to_trajectory: observation shorter than state_dim");
        if (static_cast<int>(tr.action.size()) != ad)
            throw DimensionError("episode_to_trajectory: action dim mismatch");
        for (int j = 0; j < sd; ++j)
            traj[static_cast<std::size_t>(planner.state_offset(i) + j)] =
                tr.obs[static_cast<std::size_t>(j)];
        for (int j = 0; j < ad; ++j)
            traj[static_cast<std::size_t>(planner.action_offset(i) + j)] =
                tr.action[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < sd; ++j)
        traj[static_cast<std::size_t>(planner.state_offset(N) + j)] =
            ep.steps.back().next_obs[static_cast<std::size_t>(j)];
    return traj;
}

MaskedBatch masked_training_batch(const PlannerDmc& planner, const envs::OfflineDataset& data,
                                  int batch_size, double uncond_prob, Rng& rng) {
    if (batch_size < 1) throw ContractError("masked_training_batch: batch_size must be >= 1");
    if (uncond_prob < 0.0 || uncond_prob > 1.0)
        throw ContractError("masked_training_batch: uncond_prob must lie in [0, 1]");
    if (data.episodes.empty()) throw ContractError("masked_training_batch: empty dataset");

    const int N = planner.plan_horizon();
    const int elements = 2 * N + 1; // s_0, a_0, s_1, ..., a_{N-1}, s_N
    MaskedBatch out;
    out.x0.reserve(static_cast<std::size_t>(batch_size));
    out.masks.reserve(static_cast<std::size_t>(batch_size));
    for (int b = 0; b < batch_size; ++b) {
        const int e = rng.uniform_int(0, static_cast<int>(data.episodes.size()) - 1);
        std::vector<double> traj =
            episode_to_trajectory(planner, data.episodes[static_cast<std::size_t>(e)]);

        int prefix = 0;
        if (rng.uniform() >= uncond_prob) prefix = rng.uniform_int(1, elements - 1);
        ConditionMask m;
        if (prefix > 0) {
            m.mask.assign(traj.size(), 0);
            m.known = traj;
            for (int k = 0; k < prefix; ++k) {
                const bool is_state = (k % 2 == 0);
                const int idx = k / 2;
                const int off =
                    is_state ? planner.state_offset(idx) : planner.action_offset(idx);
                const int len = is_state ? planner.state_dim() : planner.action_dim();
                for (int j = 0; j < len; ++j) m.mask[static_cast<std::size_t>(off + j)] = 1;
            }
        }
        out.x0.push_back(std::move(traj));
        out.masks.push_back(std::move(m));
    }
    return out;
}

} // namespace dmc::control
