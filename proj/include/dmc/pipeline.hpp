#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmc/align.hpp"
#include "dmc/config.hpp"
#include "dmc/control.hpp"
#include "dmc/dataset.hpp"
#include "dmc/diffusion.hpp"
#include "dmc/metrics.hpp"
#include "dmc/nav1d.hpp"
#include "dmc/qvalue.hpp"
#include "dmc/rng.hpp"

namespace dmc::pipeline {

using core::Rng;
using diffusion::DiffusionModel;
using diffusion::SamplerKind;

// --- Evaluation ---------------------------------------------------------------

// Episode i of every evaluation runs on Rng(kEvalSeedBase + i): seeds are
// enumerated, not drawn, so the same evaluation is bit-repeatable.
constexpr std::uint64_t kEvalSeedBase = 10007;

// A Markov controller: action from the current state. The Rng carries all of
// the controller's own sampling noise for that episode.
using Controller =
    std::function<double(const envs::Nav1DConfig&, const envs::Nav1DState&, Rng&)>;

struct EvalResult {
    double mean_return = 0.0;
    double std_return = 0.0; // sample standard deviation across episodes
    double coherency = 0.0;  // 0 when no dataset is supplied
    int episodes = 0;
};

// Rolls out `episodes` fixed-seed episodes from uniform start states; when a
// dataset is supplied, the executed (state, action) pairs are scored against
// its behavior density (coherency_policy). episode_returns, when given,
// receives the per-episode returns in seed order.
EvalResult evaluate_controller(const envs::Nav1DConfig& world, int episodes,
                               const Controller& controller,
                               const envs::OfflineDataset* coherency_data = nullptr,
                               std::vector<double>* episode_returns = nullptr);

Controller expert_controller();
Controller zero_controller();

// Wraps a single-step-context diffusion policy (window must be 1: a Markov
// controller cannot carry longer history).
Controller policy_controller(const control::PolicyDmc& policy,
                             control::ActionSelector selector,
                             SamplerKind kind = SamplerKind::Ddim,
                             diffusion::SampleOptions opts = {});

// Receding-horizon wrapper: re-plans from the current state every step and
// executes the first action.
Controller planner_controller(const control::PlannerDmc& planner, int n_rollouts,
                              control::TrajScorer scorer, SamplerKind kind = SamplerKind::Ddim,
                              diffusion::SampleOptions opts = {});

// --- Collapse detection ---------------------------------------------------------

struct CollapseDetector {
    double return_drop = 0.5; // collapse when return < (1 - drop) * best so far
    double loss_spike = 10.0; // ... or loss > spike * rolling median
    int median_window = 9;    // previous losses entering the rolling median

    void validate() const;
};

// Evaluation-aligned series; losses may be shorter than returns (or empty)
// when early evaluations precede any training.
struct EvalHistory {
    std::vector<double> returns;
    std::vector<double> losses;
};

struct CollapseVerdict {
    bool collapsed = false;
    std::string reason; // "return-drop", "loss-spike", "non-finite", or empty
};

// Judges the most recent entry against the history. Requires at least one
// recorded return.
CollapseVerdict detect_collapse(const EvalHistory& history, const CollapseDetector& detector);

// --- Convergence ---------------------------------------------------------------

// Stall rule over evaluation returns: converged once the window-mean improves
// by less than eps_imp (a fraction of the current window mean) between
// consecutive evaluations. Latches once true.
class ConvergenceTracker {
public:
    ConvergenceTracker(int window, double eps_imp);

    bool push(double eval_return); // returns converged()
    bool converged() const { return converged_; }
    int evals() const { return static_cast<int>(values_.size()); }

private:
    int window_;
    double eps_imp_;
    std::vector<double> values_;
    bool converged_ = false;
};

// --- Stage schedule --------------------------------------------------------------

enum class StageKind { Rl, Dpo, Sft };

const std::string& stage_name(StageKind stage);
StageKind stage_from_name(const std::string& name); // FormatError on unknown names

struct StageSchedule {
    std::vector<StageKind> stages = {StageKind::Rl, StageKind::Dpo, StageKind::Sft};
    int passes = 3;
    int window = 5;        // W_c: evaluations per convergence window
    double eps_imp = 0.01; // relative improvement threshold

    void validate() const;
};

// --- Online fine-tuning -----------------------------------------------------------

struct OnlineFinetuneConfig {
    bool enabled = false; // pure offline by default
    long activation_step = 0;
    int episodes_per_injection = 4;
    std::size_t buffer_cap = 4096; // transitions; oldest episodes evicted beyond it
    bool q_continue = false;
    int q_steps = 50; // critic continuation steps per injection

    void validate() const;
};

struct OnlineInjectResult {
    int episodes = 0;
    std::size_t transitions_added = 0;
    bool q_updated = false;
    bool skipped = false;
    std::string warning;
};

// Rolls the controller out in the environment and appends the transitions to
// the replay buffer. Before the activation step this is a silent no-op; a
// missing environment (null world) skips with a warning instead of failing
// the run. With q_continue set, the critic trains q_steps more IQL steps on
// the grown buffer.
OnlineInjectResult online_inject(const Controller& controller, const envs::Nav1DConfig* world,
                                 envs::OfflineDataset& buffer, const OnlineFinetuneConfig& cfg,
                                 long wall_step, qvalue::QFunction* qf,
                                 const qvalue::IqlConfig* q_cfg, Rng& rng);

// --- Sequential alignment ----------------------------------------------------------

struct SequenceConfig {
    StageSchedule schedule;
    align::RlAlignConfig rl;
    align::DpoConfig dpo;
    align::SftConfig sft;
    CollapseDetector collapse;
    int updates_per_stage = 40;
    int eval_interval = 5; // updates between evaluations
    int dpo_groups = 4;    // condition groups per DPO update
    int dpo_group_size = 8;
    double dpo_quantile = 0.25;
    bool arbitrate_rl = false; // probe REINFORCE vs QV-PG on 10% of the budget each
    int max_rollbacks_per_stage = 2;
    std::optional<align::DivergenceBudget> divergence; // per-eval gap vs the foundation
    std::uint64_t seed_label = 0;                      // written into every metrics row

    void validate(int T) const;
};

struct SequenceHooks {
    align::RewardFn reward;        // required
    align::TensorScorer scorer;    // required for QV-PG or arbitration
    align::CondSampler cond_sampler; // required for conditional models
    std::function<EvalResult(const DiffusionModel&)> evaluate; // required
    // Optional per-evaluation online injection; returns a warning or "".
    std::function<std::string(long wall_step, Rng& rng)> online;
    // Optional stage-boundary checkpoint sink (the CLI writes files here).
    std::function<void(StageKind stage, int pass, const DiffusionModel& model)> on_stage_end;
    // Reference rows (and optional parallel conditions) for the SFT
    // foundation-likelihood threshold.
    std::vector<std::vector<double>> sft_rows;
    std::vector<std::vector<double>> sft_conds;
};

struct StageOutcome {
    StageKind stage = StageKind::Rl;
    int pass = 0;
    int updates = 0;
    int evals = 0;
    int rollbacks = 0;
    bool skipped = false;   // rollback budget exhausted
    bool converged = false; // stalled before the update budget ran out
    double final_return = 0.0;
    align::RlMethod rl_method_used = align::RlMethod::Reinforce;
};

struct SequenceResult {
    MetricsLog log;
    std::vector<StageOutcome> stage_log;
    std::vector<std::string> warnings;
    double foundation_return = 0.0;
    double final_return = 0.0;
    long wall_steps = 0;
};

// Runs {stages} x passes sequential alignment in place on `model`, evaluating
// every eval_interval updates, checkpointing at stage boundaries, and rolling
// back (with halved stage learning rate) when the collapse detector fires --
// at most max_rollbacks_per_stage times before the stage is skipped. All
// prerequisites are validated before any training. passes = 0 leaves the
// weights bit-identical and the logs empty.
SequenceResult run_sequence(DiffusionModel& model, const SequenceConfig& cfg,
                            const SequenceHooks& hooks, Rng& rng);

// --- Foundation training helpers ----------------------------------------------------

struct PolicyTrainConfig {
    int T = 16;
    std::vector<int> hidden = {64, 64};
    int time_embed = 8;
    int steps = 4000;
    int batch_size = 64;
    double lr = 1e-3; // staircase: /3 at half budget, 1e-4 at three quarters
    int window = 1;
    int chunk = 1;

    void validate() const;
};

// Behavior-cloning foundation: denoising regression of dataset action chunks
// conditioned on the flattened observation window.
control::PolicyDmc train_policy_foundation(const envs::OfflineDataset& data,
                                           const PolicyTrainConfig& cfg, Rng& rng);

struct PlannerTrainConfig {
    int T = 16;
    std::vector<int> hidden = {64, 64};
    int time_embed = 8;
    int steps = 4000;
    int batch_size = 64;
    double lr = 1e-3;
    double uncond_prob = 0.25; // fraction of rows trained without a revealed prefix

    void validate() const;
};

// Trajectory foundation on flattened episodes with causal-prefix masking.
control::PlannerDmc train_planner_foundation(const envs::OfflineDataset& data, int horizon,
                                             int state_dim, int action_dim,
                                             const PlannerTrainConfig& cfg, Rng& rng);

// --- Nav1D policy-alignment plumbing --------------------------------------------------

// Draws a random dataset transition and returns its observation as a
// flattened one-slot context window.
align::CondSampler dataset_obs_sampler(const envs::OfflineDataset& data,
                                       const control::PolicyDmc& policy);

// Reward of a generated action chunk: Q(observation, first action), with the
// observation recovered from the policy's flattened context condition.
align::RewardFn q_action_reward(const qvalue::QFunction& qf, const control::PolicyDmc& policy);

// Differentiable version of the same scoring for QV-PG.
align::TensorScorer policy_q_scorer(const qvalue::QFunction& qf,
                                    const control::PolicyDmc& policy);

// Sum of Q over the (state, action) pairs of a flattened plan; observations
// are rebuilt as (position, t/H) to match the critic's inputs.
control::TrajScorer plan_q_scorer(const control::PlannerDmc& planner,
                                  const qvalue::QFunction& qf, const envs::Nav1DConfig& world);

struct Nav1dPolicyHooksConfig {
    int eval_episodes = 16;
    control::ActionSelector selector; // evaluation-time action selection
    SamplerKind eval_sampler = SamplerKind::Ddim;
    int eval_ddim_stride = 1;
    int sft_reference_rows = 256; // dataset transitions for the SFT threshold
};

// Assembles the full hook set for aligning a Nav1D action policy against an
// IQL critic. Captures references: policy, critic, world, and dataset must
// outlive the returned hooks.
SequenceHooks make_nav1d_policy_hooks(const control::PolicyDmc& policy,
                                      const qvalue::QFunction& qf,
                                      const envs::Nav1DConfig& world,
                                      const envs::OfflineDataset& data,
                                      const Nav1dPolicyHooksConfig& cfg);

} // namespace dmc::pipeline
