#include "dmc/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include "dmc/adam.hpp"
#include "dmc/coherency.hpp"
#include "dmc/errors.hpp"

namespace dmc::pipeline {

namespace {

using core::Adam;
using core::ConfigurationError;
using core::ContractError;
using core::DimensionError;
using core::Mlp;
using core::NumericError;
using core::Tensor;
using envs::Nav1DConfig;
using envs::Nav1DState;
using envs::OfflineDataset;

// Divergence probes draw from their own seed line so measurement never shifts
// the training noise stream.
constexpr std::uint64_t kDivergenceSeedBase = 777003;

// Bit-exact in-place weight restore; optimizer moments are rebuilt by the
// caller, which is also where the halved learning rate lands.
void copy_weights(Mlp& dst, const Mlp& src) {
    auto& dl = dst.layers_mut();
    const auto& sl = src.layers();
    if (dl.size() != sl.size()) throw ContractError("weight copy: layer count mismatch");
    for (std::size_t i = 0; i < dl.size(); ++i) {
        if (dl[i].weight.values().size() != sl[i].weight.values().size() ||
            dl[i].bias.values().size() != sl[i].bias.values().size())
            throw ContractError("weight copy: layer shape mismatch");
        dl[i].weight.mutable_values() = sl[i].weight.values();
        dl[i].bias.mutable_values() = sl[i].bias.values();
        if (dl[i].lora.has_value() != sl[i].lora.has_value())
            throw ContractError("weight copy: adapter layout mismatch");
        if (dl[i].lora) {
            dl[i].lora->down.mutable_values() = sl[i].lora->down.values();
            dl[i].lora->up.mutable_values() = sl[i].lora->up.values();
        }
    }
}

double window_mean(const std::vector<double>& v, std::size_t end_exclusive, int window) {
    double acc = 0.0;
    for (std::size_t i = end_exclusive - static_cast<std::size_t>(window); i < end_exclusive; ++i)
        acc += v[i];
    return acc / static_cast<double>(window);
}

} // namespace

// --- Evaluation -------------------------------------------------------------------

EvalResult evaluate_controller(const Nav1DConfig& world, int episodes,
                               const Controller& controller,
                               const OfflineDataset* coherency_data,
                               std::vector<double>* episode_returns) {
    world.validate();
    if (episodes < 1) throw ContractError("evaluation needs at least one episode");
    if (!controller) throw ConfigurationError("evaluation requires a controller");

    std::vector<double> returns(static_cast<std::size_t>(episodes), 0.0);
    std::vector<std::array<double, 2>> state_actions;
    state_actions.reserve(static_cast<std::size_t>(episodes) * world.horizon);
    for (int i = 0; i < episodes; ++i) {
        Rng rng(kEvalSeedBase + static_cast<std::uint64_t>(i));
        Nav1DState st{rng.uniform(-1.0, 1.0), 0};
        double ret = 0.0;
        for (int t = 0; t < world.horizon; ++t) {
            const double a = controller(world, st, rng);
            state_actions.push_back({st.s, a});
            const auto res = envs::nav1d_step(world, st, a);
            ret += res.reward;
            st = res.next;
        }
        returns[static_cast<std::size_t>(i)] = ret;
    }

    EvalResult out;
    out.episodes = episodes;
    for (double r : returns) out.mean_return += r;
    out.mean_return /= static_cast<double>(episodes);
    if (episodes > 1) {
        double acc = 0.0;
        for (double r : returns) acc += (r - out.mean_return) * (r - out.mean_return);
        out.std_return = std::sqrt(acc / static_cast<double>(episodes - 1));
    }
    if (coherency_data)
        out.coherency = envs::coherency_policy(state_actions, *coherency_data).score;
    if (episode_returns) *episode_returns = std::move(returns);
    return out;
}

Controller expert_controller() {
    return [](const Nav1DConfig& world, const Nav1DState& st, Rng&) {
        return envs::nav1d_expert_action(world, st);
    };
}

Controller zero_controller() {
    return [](const Nav1DConfig&, const Nav1DState&, Rng&) { return 0.0; };
}

Controller policy_controller(const control::PolicyDmc& policy, control::ActionSelector selector,
                             SamplerKind kind, diffusion::SampleOptions opts) {
    if (policy.window() != 1)
        throw ConfigurationError("a Markov controller needs a one-step context window");
    if (policy.action_dim() != 1)
        throw ConfigurationError("the navigation environment takes scalar actions");
    const control::PolicyDmc* p = &policy;
    return [p, selector, kind, opts](const Nav1DConfig& world, const Nav1DState& st, Rng& rng) {
        auto ctx = p->make_context();
        ctx.push(envs::nav1d_observation(world, st));
        return p->act(ctx, selector, kind, rng, opts)[0];
    };
}

Controller planner_controller(const control::PlannerDmc& planner, int n_rollouts,
                              control::TrajScorer scorer, SamplerKind kind,
                              diffusion::SampleOptions opts) {
    if (planner.state_dim() != 1 || planner.action_dim() != 1)
        throw ConfigurationError("the navigation environment is 1-D in state and action");
    if (n_rollouts < 1) throw ContractError("planning needs at least one rollout");
    const control::PlannerDmc* p = &planner;
    return [p, n_rollouts, scorer, kind, opts](const Nav1DConfig&, const Nav1DState& st,
                                               Rng& rng) {
        const auto plan = p->plan({st.s}, n_rollouts, scorer, kind, rng, opts);
        return plan.first_action[0];
    };
}

// --- Collapse detection --------------------------------------------------------------

void CollapseDetector::validate() const {
    if (return_drop < 0.0 || return_drop > 1.0)
        throw ContractError("collapse return_drop must lie in [0, 1]");
    if (!(loss_spike > 0.0)) throw ContractError("collapse loss_spike must be positive");
    if (median_window < 1) throw ContractError("collapse median_window must be >= 1");
}

CollapseVerdict detect_collapse(const EvalHistory& history, const CollapseDetector& detector) {
    detector.validate();
    if (history.returns.empty())
        throw ContractError("collapse detection needs at least one evaluation");

    for (double r : history.returns)
        if (!std::isfinite(r)) return {true, "non-finite"};
    for (double l : history.losses)
        if (!std::isfinite(l)) return {true, "non-finite"};

    const double current = history.returns.back();
    const double best = *std::max_element(history.returns.begin(), history.returns.end());
    if (current < (1.0 - detector.return_drop) * best) return {true, "return-drop"};

    // Spike rule on magnitudes, so it also covers signed surrogate losses.
    if (history.losses.size() >= 2) {
        const std::size_t prev = history.losses.size() - 1;
        const std::size_t take =
            std::min(prev, static_cast<std::size_t>(detector.median_window));
        std::vector<double> mags;
        mags.reserve(take);
        for (std::size_t i = prev - take; i < prev; ++i)
            mags.push_back(std::abs(history.losses[i]));
        std::sort(mags.begin(), mags.end());
        const double median = take % 2 ? mags[take / 2]
                                       : 0.5 * (mags[take / 2 - 1] + mags[take / 2]);
        if (median > 0.0 && std::abs(history.losses.back()) > detector.loss_spike * median)
            return {true, "loss-spike"};
    }
    return {};
}

// --- Convergence ------------------------------------------------------------------------

ConvergenceTracker::ConvergenceTracker(int window, double eps_imp)
    : window_(window), eps_imp_(eps_imp) {
    if (window < 1) throw ContractError("convergence window must be >= 1");
    if (eps_imp < 0.0) throw ContractError("convergence threshold must be >= 0");
}

bool ConvergenceTracker::push(double eval_return) {
    if (!std::isfinite(eval_return))
        throw NumericError("convergence tracking expects finite returns");
    values_.push_back(eval_return);
    if (!converged_ && static_cast<int>(values_.size()) >= window_ + 1) {
        const double cur = window_mean(values_, values_.size(), window_);
        const double prev = window_mean(values_, values_.size() - 1, window_);
        const double threshold = std::max(eps_imp_ * std::abs(cur), 1e-9);
        if (cur - prev < threshold) converged_ = true;
    }
    return converged_;
}

// --- Stage schedule ------------------------------------------------------------------------

const std::string& stage_name(StageKind stage) {
    static const std::string names[] = {"rl", "dpo", "sft"};
    return names[static_cast<int>(stage)];
}

StageKind stage_from_name(const std::string& name) {
    if (name == "rl") return StageKind::Rl;
    if (name == "dpo") return StageKind::Dpo;
    if (name == "sft") return StageKind::Sft;
    throw core::FormatError("unknown stage name '" + name + "'");
}

void StageSchedule::validate() const {
    if (stages.empty()) throw ContractError("stage schedule must list at least one stage");
    if (passes < 0) throw ContractError("stage passes must be >= 0");
    if (window < 1) throw ContractError("convergence window must be >= 1");
    if (eps_imp < 0.0) throw ContractError("improvement threshold must be >= 0");
}

// --- Online fine-tuning -----------------------------------------------------------------------

void OnlineFinetuneConfig::validate() const {
    if (activation_step < 0) throw ContractError("online activation step must be >= 0");
    if (episodes_per_injection < 1) throw ContractError("online injection needs >= 1 episode");
    if (buffer_cap < 1) throw ContractError("replay buffer cap must be >= 1");
    if (q_steps < 0) throw ContractError("critic continuation steps must be >= 0");
}

OnlineInjectResult online_inject(const Controller& controller, const Nav1DConfig* world,
                                 OfflineDataset& buffer, const OnlineFinetuneConfig& cfg,
                                 long wall_step, qvalue::QFunction* qf,
                                 const qvalue::IqlConfig* q_cfg, Rng& rng) {
    cfg.validate();
    OnlineInjectResult out;
    if (!cfg.enabled || wall_step < cfg.activation_step) {
        out.skipped = true;
        return out;
    }
    if (!world) {
        out.skipped = true;
        out.warning = "online injection: environment unavailable, continuing offline";
        return out;
    }
    if (!controller) throw ConfigurationError("online injection requires a rollout controller");

    for (int e = 0; e < cfg.episodes_per_injection; ++e) {
        envs::Episode ep;
        Nav1DState st{rng.uniform(-1.0, 1.0), 0};
        for (int t = 0; t < world->horizon; ++t) {
            const double a = controller(*world, st, rng);
            const auto res = envs::nav1d_step(*world, st, a);
            envs::Transition tr;
            tr.obs = envs::nav1d_observation(*world, st);
            tr.action = {a};
            tr.reward = res.reward;
            tr.next_obs = envs::nav1d_observation(*world, res.next);
            tr.done = res.done;
            ep.steps.push_back(std::move(tr));
            st = res.next;
        }
        out.transitions_added += ep.steps.size();
        buffer.episodes.push_back(std::move(ep));
        ++out.episodes;
    }
    while (buffer.num_transitions() > cfg.buffer_cap && buffer.episodes.size() > 1)
        buffer.episodes.erase(buffer.episodes.begin());

    if (cfg.q_continue) {
        if (!qf || !q_cfg)
            throw ConfigurationError("online Q-continue requires a critic and its config");
        if (cfg.q_steps > 0) {
            qvalue::train_iql_steps(*qf, buffer, *q_cfg, cfg.q_steps, rng);
            out.q_updated = true;
        }
    }
    return out;
}

// --- Sequential alignment ------------------------------------------------------------------------

void SequenceConfig::validate(int T) const {
    schedule.validate();
    rl.validate(T);
    dpo.validate();
    sft.validate();
    collapse.validate();
    if (updates_per_stage < 1) throw ContractError("updates_per_stage must be >= 1");
    if (eval_interval < 1) throw ContractError("eval_interval must be >= 1");
    if (dpo_groups < 1) throw ContractError("dpo_groups must be >= 1");
    if (dpo_group_size < 2)
        throw ContractError("dpo_group_size must be >= 2 to admit a preference");
    if (!(dpo_quantile > 0.0) || dpo_quantile > 0.5)
        throw ContractError("dpo_quantile must lie in (0, 0.5]");
    if (max_rollbacks_per_stage < 0) throw ContractError("max_rollbacks_per_stage must be >= 0");
}

SequenceResult run_sequence(DiffusionModel& model, const SequenceConfig& cfg,
                            const SequenceHooks& hooks, Rng& rng) {
    const int T = model.schedule().T;
    cfg.validate(T);

    const bool has_rl = std::find(cfg.schedule.stages.begin(), cfg.schedule.stages.end(),
                                  StageKind::Rl) != cfg.schedule.stages.end();
    const bool has_sft = std::find(cfg.schedule.stages.begin(), cfg.schedule.stages.end(),
                                   StageKind::Sft) != cfg.schedule.stages.end();

    if (!hooks.reward) throw ConfigurationError("sequential alignment requires a reward function");
    if (!hooks.evaluate) throw ConfigurationError("sequential alignment requires an evaluate hook");
    if (model.cond_dim() > 0 && !hooks.cond_sampler)
        throw ConfigurationError("a conditional model requires a condition sampler");
    if (has_rl && (cfg.arbitrate_rl || cfg.rl.method == align::RlMethod::QvPg) && !hooks.scorer)
        throw ConfigurationError("QV-PG (and RL arbitration) requires a differentiable scorer");
    if (has_sft && hooks.sft_rows.empty())
        throw ConfigurationError("the SFT stage requires likelihood-threshold reference rows");
    if (!hooks.sft_conds.empty() && hooks.sft_conds.size() != hooks.sft_rows.size())
        throw DimensionError("one SFT reference condition per reference row required");

    SequenceResult out;
    if (cfg.schedule.passes == 0) return out; // bit-identical weights, empty logs

    const DiffusionModel foundation = model.clone();

    double sft_threshold = 0.0;
    if (has_sft)
        sft_threshold =
            align::elbo_threshold(foundation, hooks.sft_rows, cfg.sft.threshold_quantile,
                                  cfg.sft.elbo_draws, rng,
                                  hooks.sft_conds.empty() ? nullptr : &hooks.sft_conds);

    long wall = 0;
    int eval_counter = 0;
    std::vector<double> global_returns;
    double best_return = -std::numeric_limits<double>::infinity();
    DiffusionModel best_ckpt = model.clone();
    double current_return = 0.0;

    auto measure_gap = [&](const DiffusionModel& m) {
        if (!cfg.divergence) return std::numeric_limits<double>::quiet_NaN();
        Rng div_rng(kDivergenceSeedBase + static_cast<std::uint64_t>(eval_counter));
        return align::divergence_check(m, foundation, *cfg.divergence, div_rng, std::nullopt,
                                       hooks.cond_sampler)
            .measured_gap;
    };

    auto log_eval = [&](const DiffusionModel& m, const std::string& label, int pass, double loss,
                        double gnorm) {
        const EvalResult er = hooks.evaluate(m);
        const double gap = measure_gap(m);
        ++eval_counter;
        out.log.append({wall, label, pass, er.mean_return, er.std_return, er.coherency, gap, loss,
                        gnorm, cfg.seed_label});
        if (hooks.online) {
            const std::string warn = hooks.online(wall, rng);
            if (!warn.empty()) out.warnings.push_back(warn);
        }
        return er;
    };

    { // Pre-alignment baseline: the reference row every drop test compares to.
        const EvalResult er = log_eval(model, "foundation", 0, 0.0, 0.0);
        global_returns.push_back(er.mean_return);
        best_return = er.mean_return;
        out.foundation_return = er.mean_return;
        current_return = er.mean_return;
    }

    for (int pass = 0; pass < cfg.schedule.passes; ++pass) {
        for (StageKind stage : cfg.schedule.stages) {
            StageOutcome oc;
            oc.stage = stage;
            oc.pass = pass;
            oc.rl_method_used = cfg.rl.method;
            const std::string& label = stage_name(stage);
            const DiffusionModel stage_ref = model.clone();
            double stage_lr = stage == StageKind::Rl    ? cfg.rl.lr
                              : stage == StageKind::Dpo ? cfg.dpo.lr
                                                        : cfg.sft.lr;
            align::RlMethod method = cfg.rl.method;
            int budget = cfg.updates_per_stage;

            if (stage == StageKind::Rl && cfg.arbitrate_rl) {
                const int probe = std::max(1, cfg.updates_per_stage / 10);
                auto run_probe = [&](align::RlMethod m, const std::string& probe_label) {
                    DiffusionModel cand = stage_ref.clone();
                    Adam popt(cand.net().trainable_params(), stage_lr);
                    double loss = 0.0, gnorm = 0.0;
                    for (int u = 0; u < probe; ++u) {
                        align::RlAlignConfig rc = cfg.rl;
                        rc.method = m;
                        const align::RlStats st =
                            m == align::RlMethod::Reinforce
                                ? align::reinforce_update(cand, &stage_ref, hooks.reward, rc, popt,
                                                          rng, hooks.cond_sampler)
                                : align::qvpg_update(cand, &stage_ref, hooks.scorer, rc, popt, rng,
                                                     hooks.cond_sampler);
                        ++wall;
                        loss = st.loss;
                        gnorm = st.grad_norm;
                    }
                    const EvalResult er = log_eval(cand, probe_label, pass, loss, gnorm);
                    return std::make_pair(er.mean_return, std::move(cand));
                };
                auto [ret_re, cand_re] = run_probe(align::RlMethod::Reinforce,
                                                   "rl-probe-reinforce");
                auto [ret_qv, cand_qv] = run_probe(align::RlMethod::QvPg, "rl-probe-qvpg");
                const bool keep_qvpg = ret_qv > ret_re;
                method = keep_qvpg ? align::RlMethod::QvPg : align::RlMethod::Reinforce;
                copy_weights(model.net(), (keep_qvpg ? cand_qv : cand_re).net());
                const double kept = keep_qvpg ? ret_qv : ret_re;
                global_returns.push_back(kept);
                current_return = kept;
                oc.final_return = kept;
                if (kept > best_return) {
                    best_return = kept;
                    best_ckpt = model.clone();
                }
                oc.updates += probe;
                oc.rl_method_used = method;
                budget = std::max(0, budget - 2 * probe);
            }

            Adam opt(model.net().trainable_params(), stage_lr);
            ConvergenceTracker tracker(cfg.schedule.window, cfg.schedule.eps_imp);
            std::vector<double> stage_losses;
            double last_loss = 0.0, last_gnorm = 0.0;

            for (int u = 0; u < budget; ++u) {
                switch (stage) {
                case StageKind::Rl: {
                    align::RlAlignConfig rc = cfg.rl;
                    rc.method = method;
                    rc.truncation_k = align::effective_k(cfg.rl, u, budget);
                    rc.truncation_k_final = 0;
                    const align::RlStats st =
                        method == align::RlMethod::Reinforce
                            ? align::reinforce_update(model, &stage_ref, hooks.reward, rc, opt,
                                                      rng, hooks.cond_sampler)
                            : align::qvpg_update(model, &stage_ref, hooks.scorer, rc, opt, rng,
                                                 hooks.cond_sampler);
                    last_loss = st.loss;
                    last_gnorm = st.grad_norm;
                    break;
                }
                case StageKind::Dpo: {
                    std::vector<align::CandidateGroup> groups(
                        static_cast<std::size_t>(cfg.dpo_groups));
                    for (auto& g : groups) {
                        if (hooks.cond_sampler) g.condition = hooks.cond_sampler(rng);
                        diffusion::SampleOptions so;
                        if (!g.condition.empty()) so.cond = &g.condition;
                        g.candidates.reserve(static_cast<std::size_t>(cfg.dpo_group_size));
                        for (int j = 0; j < cfg.dpo_group_size; ++j)
                            g.candidates.push_back(model.sample(SamplerKind::Ddim, rng, so));
                    }
                    auto pairs =
                        align::make_preference_pairs(groups, hooks.reward, cfg.dpo_quantile, rng);
                    if (pairs.empty()) {
                        out.warnings.push_back(label + " pass " + std::to_string(pass) +
                                               " update " + std::to_string(u) +
                                               ": no strict preference pairs, update skipped");
                    } else {
                        if (static_cast<int>(pairs.size()) > cfg.dpo.pairs_per_update)
                            pairs.resize(static_cast<std::size_t>(cfg.dpo.pairs_per_update));
                        const align::DpoStats st =
                            align::dpo_update(model, stage_ref, pairs, cfg.dpo, opt, rng);
                        last_loss = st.loss;
                        last_gnorm = st.grad_norm;
                    }
                    break;
                }
                case StageKind::Sft: {
                    const align::SftStats st =
                        align::sft_round(model, foundation, hooks.reward, cfg.sft, sft_threshold,
                                         opt, rng, hooks.cond_sampler);
                    if (st.skipped) {
                        out.warnings.push_back(label + " pass " + std::to_string(pass) +
                                               " update " + std::to_string(u) + ": " + st.warning);
                    } else {
                        last_loss = st.loss;
                        last_gnorm = st.grad_norm;
                    }
                    break;
                }
                }
                ++wall;
                ++oc.updates;

                if ((u + 1) % cfg.eval_interval == 0 || u + 1 == budget) {
                    const EvalResult er = log_eval(model, label, pass, last_loss, last_gnorm);
                    ++oc.evals;
                    global_returns.push_back(er.mean_return);
                    stage_losses.push_back(last_loss);
                    const CollapseVerdict verdict =
                        detect_collapse({global_returns, stage_losses}, cfg.collapse);
                    if (verdict.collapsed) {
                        ++oc.rollbacks;
                        copy_weights(model.net(), best_ckpt.net());
                        current_return = best_return;
                        if (oc.rollbacks > cfg.max_rollbacks_per_stage) {
                            oc.skipped = true;
                            oc.final_return = best_return;
                            out.warnings.push_back(label + " pass " + std::to_string(pass) +
                                                   ": collapse (" + verdict.reason +
                                                   "), rollback budget exhausted, stage skipped");
                            break;
                        }
                        stage_lr *= 0.5;
                        opt = Adam(model.net().trainable_params(), stage_lr);
                        out.warnings.push_back(label + " pass " + std::to_string(pass) +
                                               ": collapse (" + verdict.reason +
                                               "), rolled back to the best checkpoint, lr -> " +
                                               std::to_string(stage_lr));
                        continue;
                    }
                    current_return = er.mean_return;
                    oc.final_return = er.mean_return;
                    if (er.mean_return > best_return) {
                        best_return = er.mean_return;
                        best_ckpt = model.clone();
                    }
                    if (tracker.push(er.mean_return)) {
                        oc.converged = true;
                        break;
                    }
                }
            }

            if (hooks.on_stage_end) hooks.on_stage_end(stage, pass, model);
            out.stage_log.push_back(std::move(oc));
        }
    }

    out.final_return = current_return;
    out.wall_steps = wall;
    return out;
}

// --- Foundation training helpers ---------------------------------------------------------------

namespace {

void check_mlp_dims(const std::vector<int>& hidden, int time_embed) {
    if (hidden.empty()) throw ContractError("foundation training needs at least one hidden layer");
    for (int h : hidden)
        if (h < 1) throw ContractError("hidden widths must be >= 1");
    if (time_embed < 0) throw ContractError("time embedding width must be >= 0");
}

void staircase(Adam& opt, double lr, int step, int budget) {
    if (step == budget / 2) opt.set_lr(lr / 3.0);
    if (step == 3 * budget / 4) opt.set_lr(std::min(lr / 10.0, 1e-4));
}

} // namespace

void PolicyTrainConfig::validate() const {
    if (T < 2) throw ContractError("policy training: schedule length must be >= 2");
    check_mlp_dims(hidden, time_embed);
    if (steps < 1 || batch_size < 1) throw ContractError("policy training: steps and batch >= 1");
    if (!(lr > 0.0)) throw ContractError("policy training: lr must be positive");
    if (window < 1 || chunk < 1) throw ContractError("policy training: window and chunk >= 1");
}

control::PolicyDmc train_policy_foundation(const OfflineDataset& data,
                                           const PolicyTrainConfig& cfg, Rng& rng) {
    cfg.validate();
    if (data.episodes.empty()) throw ContractError("policy training needs a non-empty dataset");
    for (const auto& ep : data.episodes)
        if (static_cast<int>(ep.steps.size()) < cfg.chunk)
            throw ContractError("policy training: an episode is shorter than the action chunk");

    const int x_dim = cfg.chunk * data.action_dim;
    const int cond_dim = cfg.window * (data.obs_dim + 1);
    std::vector<int> widths;
    widths.push_back(x_dim + cond_dim + cfg.time_embed);
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(x_dim);

    Mlp net(widths, cfg.time_embed, core::Activation::Tanh, rng);
    DiffusionModel model(std::move(net), diffusion::make_schedule(diffusion::ScheduleKind::Cosine,
                                                                  cfg.T),
                         diffusion::Parameterization::Epsilon, x_dim, cond_dim);
    control::PolicyDmc policy(std::move(model), data.obs_dim, data.action_dim, cfg.window,
                              cfg.chunk);

    Adam opt(policy.model().net().trainable_params(), cfg.lr);
    const int n_eps = static_cast<int>(data.episodes.size());
    for (int step = 0; step < cfg.steps; ++step) {
        staircase(opt, cfg.lr, step, cfg.steps);
        std::vector<std::vector<double>> batch;
        std::vector<std::vector<double>> conds;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        conds.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& ep = data.episodes[static_cast<std::size_t>(rng.uniform_int(0, n_eps - 1))];
            const int last_start = static_cast<int>(ep.steps.size()) - cfg.chunk;
            const int j = rng.uniform_int(0, last_start);
            std::vector<double> x0;
            x0.reserve(static_cast<std::size_t>(x_dim));
            for (int c = 0; c < cfg.chunk; ++c) {
                const auto& a = ep.steps[static_cast<std::size_t>(j + c)].action;
                x0.insert(x0.end(), a.begin(), a.end());
            }
            std::vector<std::vector<double>> history;
            for (int k = std::max(0, j - cfg.window + 1); k <= j; ++k)
                history.push_back(ep.steps[static_cast<std::size_t>(k)].obs);
            batch.push_back(std::move(x0));
            conds.push_back(
                control::ContextWindow::build(history, cfg.window, data.obs_dim).flatten());
        }
        const Tensor loss = policy.model().ddpm_loss(batch, rng, &conds);
        opt.zero_grad();
        core::backward(loss);
        opt.step();
    }
    return policy;
}

void PlannerTrainConfig::validate() const {
    if (T < 2) throw ContractError("planner training: schedule length must be >= 2");
    check_mlp_dims(hidden, time_embed);
    if (steps < 1 || batch_size < 1)
        throw ContractError("planner training: steps and batch >= 1");
    if (!(lr > 0.0)) throw ContractError("planner training: lr must be positive");
    if (uncond_prob < 0.0 || uncond_prob > 1.0)
        throw ContractError("planner training: uncond_prob must lie in [0, 1]");
}

control::PlannerDmc train_planner_foundation(const OfflineDataset& data, int horizon,
                                             int state_dim, int action_dim,
                                             const PlannerTrainConfig& cfg, Rng& rng) {
    cfg.validate();
    if (data.episodes.empty()) throw ContractError("planner training needs a non-empty dataset");
    if (horizon < 1 || state_dim < 1 || action_dim < 1)
        throw ContractError("planner training: horizon and dims must be >= 1");

    const int traj_dim = (horizon + 1) * state_dim + horizon * action_dim;
    std::vector<int> widths;
    widths.push_back(traj_dim + cfg.time_embed);
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(traj_dim);

    Mlp net(widths, cfg.time_embed, core::Activation::Tanh, rng);
    DiffusionModel model(std::move(net), diffusion::make_schedule(diffusion::ScheduleKind::Cosine,
                                                                  cfg.T),
                         diffusion::Parameterization::Epsilon, traj_dim, 0);
    control::PlannerDmc planner(std::move(model), horizon, state_dim, action_dim);

    Adam opt(planner.model().net().trainable_params(), cfg.lr);
    for (int step = 0; step < cfg.steps; ++step) {
        staircase(opt, cfg.lr, step, cfg.steps);
        const auto mb =
            control::masked_training_batch(planner, data, cfg.batch_size, cfg.uncond_prob, rng);
        const Tensor loss = planner.model().ddpm_loss(mb.x0, rng, nullptr, nullptr, &mb.masks);
        opt.zero_grad();
        core::backward(loss);
        opt.step();
    }
    return planner;
}

// --- Nav1D policy-alignment plumbing ----------------------------------------------------------

namespace {

void check_one_slot(const control::PolicyDmc& policy, const char* where) {
    if (policy.window() != 1)
        throw ConfigurationError(std::string(where) + ": only one-slot context windows supported");
}

std::vector<double> obs_from_condition(const std::vector<double>& cond, int obs_dim,
                                       const char* where) {
    if (static_cast<int>(cond.size()) != obs_dim + 1)
        throw DimensionError(std::string(where) +
                             ": condition must be one observation slot plus its validity flag");
    if (cond.back() == 0.0)
        throw ContractError(std::string(where) + ": condition slot holds no observation");
    return std::vector<double>(cond.begin(), cond.begin() + obs_dim);
}

} // namespace

align::CondSampler dataset_obs_sampler(const OfflineDataset& data,
                                       const control::PolicyDmc& policy) {
    check_one_slot(policy, "dataset_obs_sampler");
    if (data.num_transitions() == 0)
        throw ContractError("dataset_obs_sampler: the dataset has no transitions");
    if (data.obs_dim != policy.obs_dim())
        throw DimensionError("dataset_obs_sampler: dataset and policy disagree on obs_dim");
    const OfflineDataset* d = &data;
    const int window = policy.window();
    const int obs_dim = policy.obs_dim();
    const int n = static_cast<int>(data.num_transitions());
    return [d, window, obs_dim, n](Rng& rng) {
        const auto& tr = d->flat_at(static_cast<std::size_t>(rng.uniform_int(0, n - 1)));
        return control::ContextWindow::build({tr.obs}, window, obs_dim).flatten();
    };
}

align::RewardFn q_action_reward(const qvalue::QFunction& qf, const control::PolicyDmc& policy) {
    check_one_slot(policy, "q_action_reward");
    if (qf.obs_dim() != policy.obs_dim() || qf.action_dim() != policy.action_dim())
        throw ConfigurationError("q_action_reward: critic and policy disagree on dimensions");
    const qvalue::QFunction* q = &qf;
    const int obs_dim = policy.obs_dim();
    const int act_dim = policy.action_dim();
    return [q, obs_dim, act_dim](const std::vector<double>& x0, const std::vector<double>& cond) {
        const auto obs = obs_from_condition(cond, obs_dim, "q_action_reward");
        if (static_cast<int>(x0.size()) < act_dim)
            throw DimensionError("q_action_reward: sample shorter than one action");
        std::vector<double> a(x0.begin(), x0.begin() + act_dim);
        // Score the action as it would execute.
        for (double& v : a) v = std::clamp(v, control::kActionLo, control::kActionHi);
        return q->q(obs, a);
    };
}

align::TensorScorer policy_q_scorer(const qvalue::QFunction& qf,
                                    const control::PolicyDmc& policy) {
    check_one_slot(policy, "policy_q_scorer");
    if (qf.obs_dim() != policy.obs_dim() || qf.action_dim() != policy.action_dim())
        throw ConfigurationError("policy_q_scorer: critic and policy disagree on dimensions");
    const qvalue::QFunction* q = &qf;
    const int obs_dim = policy.obs_dim();
    const int act_dim = policy.action_dim();
    return [q, obs_dim, act_dim](const Tensor& x0_row, const std::vector<double>& cond) {
        const auto obs = obs_from_condition(cond, obs_dim, "policy_q_scorer");
        const Tensor obs_row = Tensor::from({1, obs_dim}, obs);
        const Tensor act = x0_row.shape()[1] == act_dim ? x0_row
                                                        : core::slice_cols(x0_row, 0, act_dim);
        return q->q_forward(core::concat_cols(obs_row, act));
    };
}

control::TrajScorer plan_q_scorer(const control::PlannerDmc& planner,
                                  const qvalue::QFunction& qf, const Nav1DConfig& world) {
    if (planner.state_dim() != 1 || planner.action_dim() != 1)
        throw ConfigurationError("plan_q_scorer: the navigation world is 1-D");
    if (qf.obs_dim() != 2 || qf.action_dim() != 1)
        throw ConfigurationError("plan_q_scorer: expected a (position, time) critic");
    const control::PlannerDmc* p = &planner;
    const qvalue::QFunction* q = &qf;
    const Nav1DConfig w = world;
    return [p, q, w](const std::vector<double>& traj) {
        double total = 0.0;
        for (int i = 0; i < p->plan_horizon(); ++i) {
            const Nav1DState st{p->state_at(traj, i)[0], i};
            total += q->q(envs::nav1d_observation(w, st), p->action_at(traj, i));
        }
        return total;
    };
}

SequenceHooks make_nav1d_policy_hooks(const control::PolicyDmc& policy,
                                      const qvalue::QFunction& qf, const Nav1DConfig& world,
                                      const OfflineDataset& data,
                                      const Nav1dPolicyHooksConfig& cfg) {
    check_one_slot(policy, "make_nav1d_policy_hooks");
    if (policy.chunk_len() != 1)
        throw ConfigurationError("make_nav1d_policy_hooks: single-action chunks only");
    if (cfg.eval_episodes < 1) throw ContractError("hooks need at least one eval episode");
    if (cfg.sft_reference_rows < 1) throw ContractError("hooks need >= 1 SFT reference row");
    if (cfg.eval_ddim_stride < 1) throw ContractError("eval ddim stride must be >= 1");
    if (data.num_transitions() == 0) throw ContractError("hooks need a non-empty dataset");

    SequenceHooks hooks;
    hooks.reward = q_action_reward(qf, policy);
    hooks.scorer = policy_q_scorer(qf, policy);
    hooks.cond_sampler = dataset_obs_sampler(data, policy);

    control::ActionSelector selector = cfg.selector;
    if (selector.kind == control::SelectorKind::GreedyQ && !selector.q) {
        const qvalue::QFunction* q = &qf;
        selector.q = [q](const std::vector<double>& obs, const std::vector<double>& action) {
            return q->q(obs, action);
        };
    }

    const control::PolicyDmc* p = &policy;
    const Nav1DConfig* w = &world;
    const OfflineDataset* d = &data;
    const int episodes = cfg.eval_episodes;
    const SamplerKind kind = cfg.eval_sampler;
    diffusion::SampleOptions so;
    so.ddim_stride = cfg.eval_ddim_stride;
    hooks.evaluate = [p, w, d, episodes, selector, kind, so](const DiffusionModel& m) {
        // The sequence runner evaluates clones (e.g. arbitration candidates),
        // so the wrapper is rebuilt around whichever weights arrive here.
        control::PolicyDmc probe(m.clone(), p->obs_dim(), p->action_dim(), p->window(),
                                 p->chunk_len());
        return evaluate_controller(*w, episodes, policy_controller(probe, selector, kind, so), d);
    };

    const std::size_t total = data.num_transitions();
    const std::size_t want =
        std::min<std::size_t>(total, static_cast<std::size_t>(cfg.sft_reference_rows));
    const std::size_t stride = std::max<std::size_t>(1, total / want);
    for (std::size_t i = 0; i < total && hooks.sft_rows.size() < want; i += stride) {
        const auto& tr = data.flat_at(i);
        hooks.sft_rows.push_back(tr.action);
        hooks.sft_conds.push_back(
            control::ContextWindow::build({tr.obs}, policy.window(), policy.obs_dim()).flatten());
    }
    return hooks;
}

} // namespace dmc::pipeline
