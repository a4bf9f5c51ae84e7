#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmc/adam.hpp"
#include "dmc/diffusion.hpp"
#include "dmc/qvalue.hpp"
#include "dmc/tensor.hpp"

namespace dmc::align {

using core::Adam;
using core::Rng;
using core::Tensor;
using diffusion::DiffusionModel;
using diffusion::SamplerKind;

// Reward of a generated sample under its condition (empty for unconditional
// models). Used by RL alignment, preference-pair construction, and SFT.
using RewardFn = std::function<double(const std::vector<double>& x0, const std::vector<double>& cond)>;

// Draws a fresh conditioning vector for one rollout; null means unconditional.
using CondSampler = std::function<std::vector<double>(Rng&)>;

// Differentiable scorer of a generated sample: maps a [1, data_dim] row on the
// tape (plus its condition) to a scalar tensor. QV-PG backpropagates through it.
using TensorScorer = std::function<Tensor(const Tensor& x0_row, const std::vector<double>& cond)>;

// --- RL alignment (REINFORCE / PPO and QV-PG) --------------------------------

enum class RlMethod { Reinforce, QvPg };
enum class KappaKind { Geometric, Retrospective };
enum class DivergenceControl { PpoClip, KlPenalty };

struct RlAlignConfig {
    RlMethod method = RlMethod::Reinforce;
    // Gradients flow through the last K reverse steps only; older steps are
    // value-equal but graph-free. Optional linear ramp toward truncation_k_final
    // across a stage (0 disables; see effective_k).
    int truncation_k = 4;
    int truncation_k_final = 0;
    KappaKind kappa = KappaKind::Geometric;
    double kappa_c = 0.95;
    DivergenceControl control = DivergenceControl::PpoClip;
    double clip_eps = 0.1;
    double kl_coef = 0.01;
    int samples_per_update = 16;
    double lr = 1e-4;
    // Per-batch mean-reward baseline subtraction for variance reduction.
    bool reward_baseline = true;

    void validate(int T) const; // throws ContractError / ConfigurationError
};

// Linear K ramp over a stage; returns truncation_k when no ramp is configured.
int effective_k(const RlAlignConfig& cfg, int step, int total_steps);

// One recorded reverse chain in the multi-step-MDP view: every step, including
// the final one, draws Gaussian noise so each transition has a proper
// log-density. zs[0] is z_T, zs[T] is z_0 (element t lives at index T - t).
struct ChainRecord {
    std::vector<std::vector<double>> zs;
    std::vector<double> cond;

    int steps() const { return static_cast<int>(zs.size()) - 1; }
    const std::vector<double>& z_at(int t) const { return zs[static_cast<size_t>(steps() - t)]; }
    const std::vector<double>& z0() const { return zs.back(); }
};

ChainRecord record_ddpm_chain(const DiffusionModel& model, Rng& rng,
                              const std::vector<double>* cond = nullptr);

// Per-step credit weights indexed by step t (entry 0 unused). Geometric kind:
// kappa_t = c^(T-t). Retrospective kind: max(0, cos(z_{t-1} - z_t, z_0 - z_T)),
// which requires a completed chain.
std::vector<double> kappa_sequence(const RlAlignConfig& cfg, int T,
                                   const ChainRecord* chain = nullptr);

struct RewardedChain {
    ChainRecord chain;
    double advantage = 0.0; // reward minus baseline
};

// Score-function surrogate on the tape: minus the mean over chains of
// sum_t kappa_t * log pi_theta(z_{t-1} | z_t) * advantage, restricted to the
// last K steps, with the configured divergence control (per-step PPO ratio
// clipping against ref, or an additive KL penalty toward ref's step means).
// ref may be null only when the control term is inactive (kl_coef == 0).
Tensor reinforce_loss(const DiffusionModel& model, const DiffusionModel* ref,
                      const std::vector<RewardedChain>& rollouts, const RlAlignConfig& cfg,
                      int k_override = 0);

struct RlStats {
    double loss = 0.0;
    double mean_reward = 0.0;
    double grad_norm = 0.0;
    int samples = 0;
    int k_used = 0;
};

RlStats reinforce_update(DiffusionModel& model, const DiffusionModel* ref, const RewardFn& reward,
                         const RlAlignConfig& cfg, Adam& opt, Rng& rng,
                         const CondSampler& cond_sampler = nullptr);

// Reparameterized rollout: the last K reverse steps stay on the tape, so the
// loss -kappa_bar * score(z_0) differentiates through the sampler itself.
struct QvpgRollout {
    Tensor loss;
    std::vector<std::vector<double>> samples;
    double mean_score = 0.0;
};

QvpgRollout qvpg_loss(const DiffusionModel& model, const DiffusionModel* ref,
                      const TensorScorer& scorer, const RlAlignConfig& cfg, Rng& rng,
                      const CondSampler& cond_sampler = nullptr, int k_override = 0);

RlStats qvpg_update(DiffusionModel& model, const DiffusionModel* ref, const TensorScorer& scorer,
                    const RlAlignConfig& cfg, Adam& opt, Rng& rng,
                    const CondSampler& cond_sampler = nullptr);

// Adapts a trained state-action critic to the scorer interface: the rollout
// condition is the observation, the generated sample is the action.
TensorScorer make_q_scorer(const qvalue::QFunction& q);

// --- DPO ----------------------------------------------------------------------

enum class DpoWeight { Constant, Snr };

struct DpoConfig {
    double gamma = 1000.0;
    DpoWeight omega = DpoWeight::Constant; // Snr: omega(t) = abar_t / (1 - abar_t)
    int pairs_per_update = 8;
    double lr = 1e-4;

    void validate() const;
};

struct PreferencePair {
    std::vector<double> winner;
    std::vector<double> loser;
    std::vector<double> condition;
    double reward_gap = 0.0; // strictly positive
};

struct CandidateGroup {
    std::vector<double> condition;
    std::vector<std::vector<double>> candidates;
};

// Cross-pairs the top and bottom reward quantiles within each condition group;
// equal-reward combinations are dropped (strict preference only). The result
// order is shuffled so callers can subsample a prefix.
std::vector<PreferencePair> make_preference_pairs(const std::vector<CandidateGroup>& groups,
                                                  const RewardFn& reward, double quantile,
                                                  Rng& rng);

// Mean over pairs of softplus(gamma * omega(t) * (F_w - F_l)) where
// F_x = ||eps - eps_theta(z_t^x, t)||^2 - ||eps - eps_ref(z_t^x, t)||^2 and one
// shared (t, eps) draw serves all four residual evaluations of a pair.
// Draw order per pair: step index, then one noise value per data entry.
Tensor dpo_loss(const DiffusionModel& model, const DiffusionModel& ref,
                const std::vector<PreferencePair>& pairs, const DpoConfig& cfg, Rng& rng);

struct DpoStats {
    double loss = 0.0;
    double mean_gap = 0.0;
    double grad_norm = 0.0;
    int pairs = 0;
};

DpoStats dpo_update(DiffusionModel& model, const DiffusionModel& ref,
                    const std::vector<PreferencePair>& pairs, const DpoConfig& cfg, Adam& opt,
                    Rng& rng);

// --- SFT ----------------------------------------------------------------------

struct SftConfig {
    double winner_fraction = 0.25;     // top fraction by reward among survivors
    double threshold_quantile = 0.10;  // lower-tail quantile of foundation scores
    bool synthesize_from_finetuned = false;
    int candidates = 64;
    int update_steps = 20;
    int batch_size = 16;
    int elbo_draws = 2;
    double lr = 1e-4;
    SamplerKind sampler = SamplerKind::Ddim;
    int ddim_stride = 1;

    void validate() const;
};

// Lower-tail quantile of the foundation ELBO proxy over dataset rows; samples
// scoring below it are treated as implausible under the foundation model.
// conds, when given, pairs one conditioning vector with each row.
double elbo_threshold(const DiffusionModel& foundation,
                      const std::vector<std::vector<double>>& rows, double quantile, int draws,
                      Rng& rng, const std::vector<std::vector<double>>* conds = nullptr);

struct SftStats {
    int generated = 0;
    int survivors = 0;
    int winners = 0;
    int updates = 0;
    bool skipped = false;
    std::string warning;
    double mean_winner_reward = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

// One synthesize-filter-retrain round: draws candidates from the configured
// synthesizer, drops those whose foundation ELBO proxy falls below the
// precomputed threshold, keeps the top winner-fraction by reward, and runs
// denoising-loss updates on the winners. An empty survivor set skips the round
// and reports a warning instead of erroring.
SftStats sft_round(DiffusionModel& model, const DiffusionModel& foundation, const RewardFn& reward,
                   const SftConfig& cfg, double threshold, Adam& opt, Rng& rng,
                   const CondSampler& cond_sampler = nullptr);

// --- Divergence monitoring -----------------------------------------------------

struct DivergenceBudget {
    double max_proxy_drop = 1.0; // delta: allowed drop below the dataset baseline
    double min_coherency = 0.0;  // floor applied only when a coherency value is supplied
    double baseline_proxy = 0.0; // offline-dataset mean foundation ELBO proxy
    int eval_samples = 64;
    int elbo_draws = 2;
    SamplerKind sampler = SamplerKind::Ddpm;
    int ddim_stride = 1;
};

struct DivergenceReport {
    bool pass = false;
    double measured_gap = 0.0; // baseline_proxy - mean proxy of generated samples
    double delta = 0.0;
    double model_proxy = 0.0;
    double baseline_proxy = 0.0;
    bool coherency_checked = false;
    double coherency = 0.0;
    double min_coherency = 0.0;
};

DivergenceReport divergence_check(const DiffusionModel& model, const DiffusionModel& foundation,
                                  const DivergenceBudget& budget, Rng& rng,
                                  const std::optional<double>& coherency = std::nullopt,
                                  const CondSampler& cond_sampler = nullptr);

// --- Dispersion regularizer -----------------------------------------------------

// Mean pairwise squared distance among candidate rows [B, d]; differentiable,
// O(B d) via B * sum ||x_i||^2 - ||sum x_i||^2.
Tensor entropy_bonus(const Tensor& candidates);

// L2 norm of the accumulated gradients of the given parameters.
double grad_norm(const std::vector<Tensor>& params);

} // namespace dmc::align
