#include "dmc/align.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "dmc/errors.hpp"

namespace dmc::align {

using core::ConfigurationError;
using core::ContractError;
using core::DimensionError;
using core::NoGradGuard;
using core::NumericError;
using diffusion::Parameterization;

namespace {

// [n, d] constant tensor whose row i is filled with per_row[i].
Tensor rep_rows(const std::vector<double>& per_row, int d) {
    const int n = static_cast<int>(per_row.size());
    std::vector<double> flat(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        std::fill_n(flat.begin() + static_cast<size_t>(i) * d, d, per_row[i]);
    return Tensor::from({n, d}, std::move(flat));
}

Tensor col(std::vector<double> v) {
    const int n = static_cast<int>(v.size());
    return Tensor::from({n, 1}, std::move(v));
}

void require_ancestral(const DiffusionModel& model, const char* what) {
    if (model.parameterization() == Parameterization::FlowVelocity)
        throw ConfigurationError(std::string(what) +
                                 " needs an ancestral denoising chain; flow-velocity models are "
                                 "not supported here");
}

// Raw network output -> epsilon prediction, row-wise (score nets predict
// -eps / sqrt(1 - abar_t)).
Tensor to_epsilon(const DiffusionModel& model, const Tensor& raw, const std::vector<double>& ts) {
    if (model.parameterization() != Parameterization::Score) return raw;
    std::vector<double> c(ts.size());
    for (size_t i = 0; i < ts.size(); ++i)
        c[i] = -std::sqrt(1.0 - model.schedule().alpha_bar_at(static_cast<int>(ts[i])));
    return mul(raw, rep_rows(c, model.data_dim()));
}

std::vector<double> sample_cond(const CondSampler& cond_sampler, const DiffusionModel& model,
                                Rng& rng) {
    std::vector<double> cond;
    if (cond_sampler) cond = cond_sampler(rng);
    if (static_cast<int>(cond.size()) != model.cond_dim())
        throw DimensionError("condition size " + std::to_string(cond.size()) +
                             " does not match the model conditioning dim " +
                             std::to_string(model.cond_dim()));
    return cond;
}

void check_chain(const ChainRecord& chain, const DiffusionModel& model) {
    const int T = model.schedule().T;
    if (chain.steps() != T)
        throw ContractError("recorded chain has " + std::to_string(chain.steps()) +
                            " steps; the model schedule has " + std::to_string(T));
    for (const auto& z : chain.zs)
        if (static_cast<int>(z.size()) != model.data_dim())
            throw DimensionError("recorded chain latents do not match the model data dim");
    if (static_cast<int>(chain.cond.size()) != model.cond_dim())
        throw DimensionError("recorded chain condition does not match the model");
}

void check_same_geometry(const DiffusionModel& a, const DiffusionModel& b, const char* role) {
    if (a.data_dim() != b.data_dim() || a.cond_dim() != b.cond_dim())
        throw DimensionError(std::string(role) + " model dimensions do not match");
    if (a.schedule().T != b.schedule().T || a.schedule().beta != b.schedule().beta)
        throw ContractError(std::string(role) + " model must share the noise schedule");
}

double quantile_sorted(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const auto idx = static_cast<size_t>(std::floor(q * static_cast<double>(v.size() - 1)));
    return v[idx];
}

} // namespace

// --- Configs --------------------------------------------------------------------

void RlAlignConfig::validate(int T) const {
    if (T < 1) throw ContractError("schedule length must be >= 1");
    if (truncation_k < 1 || truncation_k > T)
        throw ContractError("truncation depth K must lie in [1, T]");
    if (truncation_k_final != 0 && (truncation_k_final < 1 || truncation_k_final > T))
        throw ContractError("final truncation depth must lie in [1, T] (or 0 to disable)");
    if (kappa == KappaKind::Geometric && !(kappa_c > 0.0))
        throw ContractError("geometric credit decay must be positive");
    if (control == DivergenceControl::PpoClip && !(clip_eps > 0.0))
        throw ContractError("PPO clip width must be positive");
    if (kl_coef < 0.0) throw ContractError("KL coefficient must be non-negative");
    if (samples_per_update < 1) throw ContractError("samples per update must be >= 1");
    if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
}

int effective_k(const RlAlignConfig& cfg, int step, int total_steps) {
    if (cfg.truncation_k_final <= 0 || total_steps <= 1) return cfg.truncation_k;
    if (step < 0 || step >= total_steps) throw ContractError("ramp step out of range");
    const double f = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    const double k = cfg.truncation_k + f * (cfg.truncation_k_final - cfg.truncation_k);
    return static_cast<int>(std::lround(k));
}

void DpoConfig::validate() const {
    if (!(gamma > 0.0)) throw ContractError("preference temperature must be positive");
    if (pairs_per_update < 1) throw ContractError("pairs per update must be >= 1");
    if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
}

void SftConfig::validate() const {
    if (!(winner_fraction > 0.0) || winner_fraction > 1.0)
        throw ContractError("winner fraction must lie in (0, 1]");
    if (threshold_quantile < 0.0 || threshold_quantile >= 1.0)
        throw ContractError("threshold quantile must lie in [0, 1)");
    if (candidates < 1) throw ContractError("candidate count must be >= 1");
    if (update_steps < 0) throw ContractError("update step count must be >= 0");
    if (batch_size < 1) throw ContractError("batch size must be >= 1");
    if (elbo_draws < 1) throw ContractError("ELBO proxy draws must be >= 1");
    if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
    if (ddim_stride < 1) throw ContractError("DDIM stride must be >= 1");
}

// --- Chain recording and credit weights ------------------------------------------

ChainRecord record_ddpm_chain(const DiffusionModel& model, Rng& rng,
                              const std::vector<double>* cond) {
    require_ancestral(model, "chain recording");
    NoGradGuard ng;
    const auto& sched = model.schedule();
    const int d = model.data_dim();

    ChainRecord rec;
    if (cond) rec.cond = *cond;
    if (static_cast<int>(rec.cond.size()) != model.cond_dim())
        throw DimensionError("condition size does not match the model conditioning dim");

    std::vector<double> z(d);
    for (double& v : z) v = rng.normal();
    rec.zs.reserve(static_cast<size_t>(sched.T) + 1);
    rec.zs.push_back(z);

    // Every step, including t = 1, adds Gaussian noise: in the alignment MDP
    // each transition is a proper Gaussian policy with variance beta_t.
    for (int t = sched.T; t >= 1; --t) {
        const auto eps = model.predict_epsilon(z, t, cond);
        const double coef = sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t));
        const double inv = 1.0 / std::sqrt(sched.alpha_at(t));
        const double sd = std::sqrt(sched.beta_at(t));
        for (int i = 0; i < d; ++i) z[i] = (z[i] - coef * eps[i]) * inv + sd * rng.normal();
        rec.zs.push_back(z);
    }
    return rec;
}

std::vector<double> kappa_sequence(const RlAlignConfig& cfg, int T, const ChainRecord* chain) {
    if (T < 1) throw ContractError("schedule length must be >= 1");
    std::vector<double> kappa(static_cast<size_t>(T) + 1, 0.0);
    if (cfg.kappa == KappaKind::Geometric) {
        if (!(cfg.kappa_c > 0.0)) throw ContractError("geometric credit decay must be positive");
        for (int t = 1; t <= T; ++t) kappa[t] = std::pow(cfg.kappa_c, T - t);
        return kappa;
    }
    if (!chain) throw ContractError("retrospective credit weights require a completed chain");
    if (chain->steps() != T) throw ContractError("chain length does not match the schedule");
    const auto& z0 = chain->z0();
    const auto& zT = chain->zs.front();
    std::vector<double> total(z0.size());
    for (size_t i = 0; i < z0.size(); ++i) total[i] = z0[i] - zT[i];
    const double tn = std::sqrt(std::inner_product(total.begin(), total.end(), total.begin(), 0.0));
    for (int t = 1; t <= T; ++t) {
        const auto& a = chain->z_at(t - 1);
        const auto& b = chain->z_at(t);
        double dot = 0.0, sn = 0.0;
        for (size_t i = 0; i < a.size(); ++i) {
            const double step = a[i] - b[i];
            dot += step * total[i];
            sn += step * step;
        }
        sn = std::sqrt(sn);
        kappa[t] = (tn > 0.0 && sn > 0.0) ? std::max(0.0, dot / (sn * tn)) : 0.0;
    }
    return kappa;
}

// --- REINFORCE / PPO ---------------------------------------------------------------

Tensor reinforce_loss(const DiffusionModel& model, const DiffusionModel* ref,
                      const std::vector<RewardedChain>& rollouts, const RlAlignConfig& cfg,
                      int k_override) {
    require_ancestral(model, "score-function alignment");
    const auto& sched = model.schedule();
    const int T = sched.T;
    const int d = model.data_dim();
    cfg.validate(T);
    const int K = k_override > 0 ? k_override : cfg.truncation_k;
    if (K < 1 || K > T) throw ContractError("truncation depth K must lie in [1, T]");

    const bool kl_on = cfg.control == DivergenceControl::KlPenalty && cfg.kl_coef > 0.0;
    const bool need_ref = cfg.control == DivergenceControl::PpoClip || kl_on;
    if (need_ref && !ref)
        throw ConfigurationError("the selected divergence control requires a reference model");
    if (ref) check_same_geometry(model, *ref, "reference");
    if (rollouts.empty()) throw ContractError("at least one recorded rollout is required");

    const int n = static_cast<int>(rollouts.size());
    const int rows = n * K;
    std::vector<double> z_flat, zprev_flat, cond_flat;
    z_flat.reserve(static_cast<size_t>(rows) * d);
    zprev_flat.reserve(static_cast<size_t>(rows) * d);
    std::vector<double> ts, coef1, inv_sqrt_a, half_inv_beta, kap, adv;
    ts.reserve(rows);

    for (const auto& rc : rollouts) {
        check_chain(rc.chain, model);
        if (!std::isfinite(rc.advantage)) throw NumericError("rollout advantage is non-finite");
        const auto kappa = kappa_sequence(cfg, T, &rc.chain);
        for (int t = K; t >= 1; --t) {
            const auto& zt = rc.chain.z_at(t);
            const auto& zp = rc.chain.z_at(t - 1);
            z_flat.insert(z_flat.end(), zt.begin(), zt.end());
            zprev_flat.insert(zprev_flat.end(), zp.begin(), zp.end());
            if (model.cond_dim() > 0)
                cond_flat.insert(cond_flat.end(), rc.chain.cond.begin(), rc.chain.cond.end());
            ts.push_back(t);
            coef1.push_back(sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t)));
            inv_sqrt_a.push_back(1.0 / std::sqrt(sched.alpha_at(t)));
            half_inv_beta.push_back(0.5 / sched.beta_at(t));
            kap.push_back(kappa[t]);
            adv.push_back(rc.advantage);
        }
    }

    const Tensor Z = Tensor::from({rows, d}, std::move(z_flat));
    const Tensor Zprev = Tensor::from({rows, d}, std::move(zprev_flat));
    Tensor cond_rows;
    const Tensor* cond_ptr = nullptr;
    if (model.cond_dim() > 0) {
        cond_rows = Tensor::from({rows, model.cond_dim()}, std::move(cond_flat));
        cond_ptr = &cond_rows;
    }

    // Gaussian step mean from the noise prediction, batched over (chain, step).
    const Tensor eps_hat = to_epsilon(model, model.predict(Z, ts, cond_ptr), ts);
    const Tensor mu = mul(sub(Z, mul(eps_hat, rep_rows(coef1, d))), rep_rows(inv_sqrt_a, d));
    const Tensor logp = neg(mul(rows_sum(square(sub(Zprev, mu))), col(half_inv_beta)));

    std::vector<double> mu_ref, logp_ref;
    if (ref) {
        NoGradGuard ng;
        const Tensor eps_ref = to_epsilon(*ref, ref->predict(Z, ts, cond_ptr), ts);
        const Tensor mu_r = mul(sub(Z, mul(eps_ref, rep_rows(coef1, d))), rep_rows(inv_sqrt_a, d));
        const Tensor lp_r = neg(mul(rows_sum(square(sub(Zprev, mu_r))), col(half_inv_beta)));
        mu_ref = mu_r.values();
        logp_ref = lp_r.values();
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    if (cfg.control == DivergenceControl::PpoClip) {
        const Tensor ratio = exp(sub(logp, col(std::move(logp_ref))));
        const Tensor advc = col(std::move(adv));
        const Tensor surrogate = minimum(
            mul(ratio, advc), mul(clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), advc));
        return neg(scale(sum(mul(surrogate, col(std::move(kap)))), inv_n));
    }

    std::vector<double> kap_adv(kap.size());
    for (size_t i = 0; i < kap.size(); ++i) kap_adv[i] = kap[i] * adv[i];
    Tensor loss = neg(scale(sum(mul(logp, col(std::move(kap_adv)))), inv_n));
    if (kl_on) {
        const Tensor pen =
            mul(rows_sum(square(sub(mu, Tensor::from({rows, d}, std::move(mu_ref))))),
                col(half_inv_beta));
        loss = add(loss, scale(sum(pen), cfg.kl_coef * inv_n));
    }
    return loss;
}

RlStats reinforce_update(DiffusionModel& model, const DiffusionModel* ref, const RewardFn& reward,
                         const RlAlignConfig& cfg, Adam& opt, Rng& rng,
                         const CondSampler& cond_sampler) {
    cfg.validate(model.schedule().T);
    if (!reward) throw ConfigurationError("RL alignment requires a reward function");

    std::vector<RewardedChain> rollouts;
    rollouts.reserve(cfg.samples_per_update);
    double reward_sum = 0.0;
    for (int i = 0; i < cfg.samples_per_update; ++i) {
        const auto cond = sample_cond(cond_sampler, model, rng);
        auto chain = record_ddpm_chain(model, rng, cond.empty() ? nullptr : &cond);
        const double r = reward(chain.z0(), chain.cond);
        if (!std::isfinite(r)) throw NumericError("reward function returned a non-finite value");
        reward_sum += r;
        rollouts.push_back({std::move(chain), r});
    }
    const double baseline =
        cfg.reward_baseline ? reward_sum / static_cast<double>(cfg.samples_per_update) : 0.0;
    for (auto& rc : rollouts) rc.advantage -= baseline;

    const Tensor loss = reinforce_loss(model, ref, rollouts, cfg);
    opt.zero_grad();
    core::backward(loss);
    RlStats stats;
    stats.loss = loss.item();
    stats.mean_reward = reward_sum / static_cast<double>(cfg.samples_per_update);
    stats.grad_norm = grad_norm(model.net().trainable_params());
    stats.samples = cfg.samples_per_update;
    stats.k_used = cfg.truncation_k;
    opt.step();
    return stats;
}

// --- QV-PG -----------------------------------------------------------------------

QvpgRollout qvpg_loss(const DiffusionModel& model, const DiffusionModel* ref,
                      const TensorScorer& scorer, const RlAlignConfig& cfg, Rng& rng,
                      const CondSampler& cond_sampler, int k_override) {
    if (!scorer)
        throw ConfigurationError("QV-PG requires a scorer that is differentiable in the sample");
    require_ancestral(model, "reparameterized alignment");
    const auto& sched = model.schedule();
    const int T = sched.T;
    const int d = model.data_dim();
    cfg.validate(T);
    const int K = k_override > 0 ? k_override : cfg.truncation_k;
    if (K < 1 || K > T) throw ContractError("truncation depth K must lie in [1, T]");

    const bool kl_on = cfg.control == DivergenceControl::KlPenalty && cfg.kl_coef > 0.0;
    if (kl_on && !ref)
        throw ConfigurationError("the KL divergence control requires a reference model");
    if (ref) check_same_geometry(model, *ref, "reference");

    const int n = cfg.samples_per_update;
    QvpgRollout out;
    out.samples.reserve(n);
    Tensor total;
    double score_sum = 0.0;

    for (int s = 0; s < n; ++s) {
        const auto cond = sample_cond(cond_sampler, model, rng);
        const std::vector<double>* cond_ptr = cond.empty() ? nullptr : &cond;
        Tensor cond_row;
        const Tensor* cond_row_ptr = nullptr;
        if (!cond.empty()) {
            cond_row = Tensor::from({1, model.cond_dim()}, cond);
            cond_row_ptr = &cond_row;
        }

        ChainRecord rec;
        rec.cond = cond;
        std::vector<double> z(d);
        for (double& v : z) v = rng.normal();
        rec.zs.push_back(z);

        { // Value-equal prefix: same arithmetic and rng consumption, no graph.
            NoGradGuard ng;
            for (int t = T; t > K; --t) {
                const auto eps = model.predict_epsilon(z, t, cond_ptr);
                const double coef = sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t));
                const double inv = 1.0 / std::sqrt(sched.alpha_at(t));
                const double sd = std::sqrt(sched.beta_at(t));
                for (int i = 0; i < d; ++i)
                    z[i] = (z[i] - coef * eps[i]) * inv + sd * rng.normal();
                rec.zs.push_back(z);
            }
        }

        Tensor zt = Tensor::from({1, d}, z);
        Tensor kl_pen;
        for (int t = K; t >= 1; --t) {
            const std::vector<double> trow{static_cast<double>(t)};
            const Tensor eps_hat = to_epsilon(model, model.predict(zt, trow, cond_row_ptr), trow);
            const double coef = sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t));
            const double inv = 1.0 / std::sqrt(sched.alpha_at(t));
            const double sd = std::sqrt(sched.beta_at(t));
            const Tensor mu = scale(sub(zt, scale(eps_hat, coef)), inv);
            if (kl_on) {
                std::vector<double> mu_ref(d);
                {
                    NoGradGuard ng;
                    const auto eps_ref = ref->predict_epsilon(zt.values(), t, cond_ptr);
                    const auto& zv = zt.values();
                    for (int i = 0; i < d; ++i) mu_ref[i] = (zv[i] - coef * eps_ref[i]) * inv;
                }
                const Tensor gap = sub(mu, Tensor::from({1, d}, std::move(mu_ref)));
                const Tensor term = scale(sum(square(gap)), 0.5 / sched.beta_at(t));
                kl_pen = kl_pen.defined() ? add(kl_pen, term) : term;
            }
            std::vector<double> noise(d);
            for (double& v : noise) v = sd * rng.normal();
            zt = add(mu, Tensor::from({1, d}, std::move(noise)));
            rec.zs.push_back(zt.values());
        }

        const auto kappa = kappa_sequence(cfg, T, &rec);
        double kbar = 0.0;
        for (int t = 1; t <= K; ++t) kbar += kappa[t];
        kbar /= static_cast<double>(K);

        const Tensor sc = scorer(zt, cond);
        if (sc.size() != 1) throw DimensionError("the sample scorer must return a scalar");
        score_sum += sc.values()[0];
        Tensor term = scale(sc, -kbar / static_cast<double>(n));
        if (kl_on) term = add(term, scale(kl_pen, cfg.kl_coef / static_cast<double>(n)));
        total = total.defined() ? add(total, term) : term;
        out.samples.push_back(zt.values());
    }

    out.loss = total;
    out.mean_score = score_sum / static_cast<double>(n);
    return out;
}

RlStats qvpg_update(DiffusionModel& model, const DiffusionModel* ref, const TensorScorer& scorer,
                    const RlAlignConfig& cfg, Adam& opt, Rng& rng,
                    const CondSampler& cond_sampler) {
    auto rollout = qvpg_loss(model, ref, scorer, cfg, rng, cond_sampler);
    opt.zero_grad();
    core::backward(rollout.loss);
    RlStats stats;
    stats.loss = rollout.loss.item();
    stats.mean_reward = rollout.mean_score;
    stats.grad_norm = grad_norm(model.net().trainable_params());
    stats.samples = cfg.samples_per_update;
    stats.k_used = cfg.truncation_k;
    opt.step();
    return stats;
}

TensorScorer make_q_scorer(const qvalue::QFunction& q) {
    const qvalue::QFunction* qp = &q;
    return [qp](const Tensor& x0_row, const std::vector<double>& cond) {
        if (static_cast<int>(cond.size()) != qp->obs_dim())
            throw DimensionError("QV-PG condition must be the critic observation");
        const Tensor obs = Tensor::from({1, qp->obs_dim()}, cond);
        return qp->q_forward(concat_cols(obs, x0_row));
    };
}

// --- DPO -------------------------------------------------------------------------

std::vector<PreferencePair> make_preference_pairs(const std::vector<CandidateGroup>& groups,
                                                  const RewardFn& reward, double quantile,
                                                  Rng& rng) {
    if (!reward) throw ConfigurationError("preference pairing requires a reward function");
    if (!(quantile > 0.0) || quantile > 0.5)
        throw ContractError("pair quantile must lie in (0, 0.5]");

    std::vector<PreferencePair> pairs;
    for (const auto& g : groups) {
        const int n = static_cast<int>(g.candidates.size());
        if (n < 2) throw ContractError("each condition group needs at least two candidates");
        std::vector<double> r(n);
        for (int i = 0; i < n; ++i) {
            r[i] = reward(g.candidates[i], g.condition);
            if (!std::isfinite(r[i])) throw NumericError("candidate reward is non-finite");
        }
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return r[a] > r[b]; });
        const int qn = std::max(1, static_cast<int>(std::floor(quantile * n)));
        for (int wi = 0; wi < qn; ++wi) {
            for (int li = n - qn; li < n; ++li) {
                const int w = order[wi], l = order[li];
                if (r[w] > r[l])
                    pairs.push_back({g.candidates[w], g.candidates[l], g.condition, r[w] - r[l]});
            }
        }
    }
    for (size_t i = pairs.size(); i > 1; --i)
        std::swap(pairs[i - 1], pairs[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    return pairs;
}

Tensor dpo_loss(const DiffusionModel& model, const DiffusionModel& ref,
                const std::vector<PreferencePair>& pairs, const DpoConfig& cfg, Rng& rng) {
    cfg.validate();
    require_ancestral(model, "preference alignment");
    check_same_geometry(model, ref, "reference");
    if (pairs.empty()) throw ContractError("at least one preference pair is required");
    const auto& sched = model.schedule();
    const int d = model.data_dim();
    const int P = static_cast<int>(pairs.size());

    std::vector<double> w_flat, l_flat, eps_flat, cond_flat, ts, gw;
    w_flat.reserve(static_cast<size_t>(P) * d);
    for (const auto& p : pairs) {
        if (static_cast<int>(p.winner.size()) != d || static_cast<int>(p.loser.size()) != d)
            throw DimensionError("preference samples do not match the model data dim");
        if (static_cast<int>(p.condition.size()) != model.cond_dim())
            throw DimensionError("preference condition does not match the model");
        const int t = rng.uniform_int(1, sched.T);
        std::vector<double> eps(d);
        for (double& v : eps) v = rng.normal();
        const auto zw = model.q_sample(p.winner, t, eps);
        const auto zl = model.q_sample(p.loser, t, eps);
        w_flat.insert(w_flat.end(), zw.begin(), zw.end());
        l_flat.insert(l_flat.end(), zl.begin(), zl.end());
        eps_flat.insert(eps_flat.end(), eps.begin(), eps.end());
        if (model.cond_dim() > 0)
            cond_flat.insert(cond_flat.end(), p.condition.begin(), p.condition.end());
        ts.push_back(t);
        const double ab = sched.alpha_bar_at(t);
        gw.push_back(cfg.gamma * (cfg.omega == DpoWeight::Snr ? ab / (1.0 - ab) : 1.0));
    }

    const Tensor Zw = Tensor::from({P, d}, std::move(w_flat));
    const Tensor Zl = Tensor::from({P, d}, std::move(l_flat));
    const Tensor Eps = Tensor::from({P, d}, std::move(eps_flat));
    Tensor cond_rows;
    const Tensor* cond_ptr = nullptr;
    if (model.cond_dim() > 0) {
        cond_rows = Tensor::from({P, model.cond_dim()}, std::move(cond_flat));
        cond_ptr = &cond_rows;
    }

    const Tensor res_w = rows_sum(square(sub(Eps, to_epsilon(model, model.predict(Zw, ts, cond_ptr), ts))));
    const Tensor res_l = rows_sum(square(sub(Eps, to_epsilon(model, model.predict(Zl, ts, cond_ptr), ts))));

    std::vector<double> ref_w, ref_l;
    {
        NoGradGuard ng;
        ref_w = rows_sum(square(sub(Eps, to_epsilon(ref, ref.predict(Zw, ts, cond_ptr), ts)))).values();
        ref_l = rows_sum(square(sub(Eps, to_epsilon(ref, ref.predict(Zl, ts, cond_ptr), ts)))).values();
    }

    // F_w - F_l with the reference residuals folded into one constant column.
    std::vector<double> ref_gap(P);
    for (int i = 0; i < P; ++i) ref_gap[i] = ref_w[i] - ref_l[i];
    const Tensor diff = sub(sub(res_w, res_l), col(std::move(ref_gap)));
    return mean(softplus(mul(diff, col(std::move(gw)))));
}

DpoStats dpo_update(DiffusionModel& model, const DiffusionModel& ref,
                    const std::vector<PreferencePair>& pairs, const DpoConfig& cfg, Adam& opt,
                    Rng& rng) {
    const Tensor loss = dpo_loss(model, ref, pairs, cfg, rng);
    opt.zero_grad();
    core::backward(loss);
    DpoStats stats;
    stats.loss = loss.item();
    stats.grad_norm = grad_norm(model.net().trainable_params());
    stats.pairs = static_cast<int>(pairs.size());
    double gap = 0.0;
    for (const auto& p : pairs) gap += p.reward_gap;
    stats.mean_gap = gap / static_cast<double>(pairs.size());
    opt.step();
    return stats;
}

// --- SFT -------------------------------------------------------------------------

double elbo_threshold(const DiffusionModel& foundation,
                      const std::vector<std::vector<double>>& rows, double quantile, int draws,
                      Rng& rng, const std::vector<std::vector<double>>* conds) {
    if (rows.empty()) throw ContractError("threshold estimation needs at least one data row");
    if (quantile < 0.0 || quantile >= 1.0)
        throw ContractError("threshold quantile must lie in [0, 1)");
    if (draws < 1) throw ContractError("ELBO proxy draws must be >= 1");
    if (conds && conds->size() != rows.size())
        throw DimensionError("threshold estimation: one condition per data row required");
    std::vector<double> scores(rows.size());
    for (size_t i = 0; i < rows.size(); ++i)
        scores[i] = foundation.elbo_proxy(rows[i], draws, rng, conds ? &(*conds)[i] : nullptr);
    return quantile_sorted(std::move(scores), quantile);
}

SftStats sft_round(DiffusionModel& model, const DiffusionModel& foundation, const RewardFn& reward,
                   const SftConfig& cfg, double threshold, Adam& opt, Rng& rng,
                   const CondSampler& cond_sampler) {
    cfg.validate();
    if (!reward) throw ConfigurationError("SFT requires a reward function");
    if (!std::isfinite(threshold)) throw ContractError("likelihood threshold must be finite");
    check_same_geometry(model, foundation, "foundation");

    struct Survivor {
        std::vector<double> x;
        std::vector<double> cond;
        double reward;
    };
    const DiffusionModel& synth = cfg.synthesize_from_finetuned ? model : foundation;

    SftStats stats;
    stats.generated = cfg.candidates;
    std::vector<Survivor> survivors;
    for (int i = 0; i < cfg.candidates; ++i) {
        const auto cond = sample_cond(cond_sampler, model, rng);
        diffusion::SampleOptions so;
        so.ddim_stride = cfg.ddim_stride;
        if (!cond.empty()) so.cond = &cond;
        const auto x = synth.sample(cfg.sampler, rng, so);
        const double proxy =
            foundation.elbo_proxy(x, cfg.elbo_draws, rng, cond.empty() ? nullptr : &cond);
        if (proxy < threshold) continue;
        const double r = reward(x, cond);
        if (!std::isfinite(r)) throw NumericError("reward function returned a non-finite value");
        survivors.push_back({x, cond, r});
    }
    stats.survivors = static_cast<int>(survivors.size());

    if (survivors.empty()) {
        stats.skipped = true;
        stats.warning = "sft round skipped: none of " + std::to_string(cfg.candidates) +
                        " candidates met the foundation likelihood threshold";
        return stats;
    }

    std::stable_sort(survivors.begin(), survivors.end(),
                     [](const Survivor& a, const Survivor& b) { return a.reward > b.reward; });
    const int winners = std::max(
        1, static_cast<int>(std::floor(cfg.winner_fraction * static_cast<double>(survivors.size()))));
    survivors.resize(winners);
    stats.winners = winners;
    for (const auto& s : survivors) stats.mean_winner_reward += s.reward;
    stats.mean_winner_reward /= static_cast<double>(winners);

    for (int u = 0; u < cfg.update_steps; ++u) {
        std::vector<std::vector<double>> batch;
        std::vector<std::vector<double>> conds;
        batch.reserve(cfg.batch_size);
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& s = survivors[rng.uniform_int(0, winners - 1)];
            batch.push_back(s.x);
            if (model.cond_dim() > 0) conds.push_back(s.cond);
        }
        const Tensor loss = model.ddpm_loss(batch, rng, conds.empty() ? nullptr : &conds);
        opt.zero_grad();
        core::backward(loss);
        stats.loss = loss.item();
        stats.grad_norm = grad_norm(model.net().trainable_params());
        opt.step();
        ++stats.updates;
    }
    return stats;
}

// --- Divergence monitoring ----------------------------------------------------------

DivergenceReport divergence_check(const DiffusionModel& model, const DiffusionModel& foundation,
                                  const DivergenceBudget& budget, Rng& rng,
                                  const std::optional<double>& coherency,
                                  const CondSampler& cond_sampler) {
    if (budget.eval_samples < 1) throw ContractError("evaluation batch must be >= 1");
    if (budget.elbo_draws < 1) throw ContractError("ELBO proxy draws must be >= 1");
    if (budget.max_proxy_drop < 0.0) throw ContractError("allowed proxy drop must be >= 0");
    if (!std::isfinite(budget.baseline_proxy))
        throw ContractError("the offline-dataset baseline proxy must be finite");
    check_same_geometry(model, foundation, "foundation");
    if (model.cond_dim() > 0 && !cond_sampler)
        throw ConfigurationError("a conditional model needs a condition sampler for evaluation");

    double proxy_sum = 0.0;
    for (int i = 0; i < budget.eval_samples; ++i) {
        const auto cond = sample_cond(cond_sampler, model, rng);
        diffusion::SampleOptions so;
        so.ddim_stride = budget.ddim_stride;
        if (!cond.empty()) so.cond = &cond;
        const auto x = model.sample(budget.sampler, rng, so);
        proxy_sum += foundation.elbo_proxy(x, budget.elbo_draws, rng, cond.empty() ? nullptr : &cond);
    }

    DivergenceReport report;
    report.model_proxy = proxy_sum / static_cast<double>(budget.eval_samples);
    report.baseline_proxy = budget.baseline_proxy;
    report.measured_gap = budget.baseline_proxy - report.model_proxy;
    report.delta = budget.max_proxy_drop;
    report.min_coherency = budget.min_coherency;
    report.pass = report.measured_gap <= budget.max_proxy_drop;
    if (coherency) {
        report.coherency_checked = true;
        report.coherency = *coherency;
        if (*coherency < budget.min_coherency) report.pass = false;
    }
    return report;
}

// --- Dispersion regularizer -----------------------------------------------------------

Tensor entropy_bonus(const Tensor& candidates) {
    const auto& shape = candidates.shape();
    if (shape.size() != 2) throw DimensionError("candidates must form a [B, d] row batch");
    const int B = shape[0];
    if (B < 2) throw ContractError("the dispersion bonus needs at least two candidates");
    const Tensor sq = sum(square(candidates));
    const Tensor colsum = cols_sum(candidates);
    return scale(sub(scale(sq, static_cast<double>(B)), sum(square(colsum))),
                 2.0 / (static_cast<double>(B) * static_cast<double>(B - 1)));
}

double grad_norm(const std::vector<Tensor>& params) {
    double total = 0.0;
    for (const auto& p : params)
        for (double g : p.grad()) total += g * g;
    return std::sqrt(total);
}

} // namespace dmc::align
