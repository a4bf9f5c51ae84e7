#include "dmc/diffusion.hpp"

#include <cmath>
#include <utility>

#include "dmc/errors.hpp"

namespace dmc::diffusion {

using core::ContractError;
using core::DimensionError;
using core::NoGradGuard;

bool ConditionMask::any() const {
    for (unsigned char m : mask)
        if (m) return true;
    return false;
}

void ConditionMask::validate(int expected_dim) const {
    if (static_cast<int>(mask.size()) != expected_dim ||
        mask.size() != known.size())
        throw DimensionError("ConditionMask: mask/known dims must equal sample dims");
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] && !std::isfinite(known[i]))
            throw ContractError("ConditionMask: non-finite known value under a true mask");
}

namespace {

void check_same_dim(const std::vector<double>& a, const std::vector<double>& b,
                    const char* what) {
    if (a.size() != b.size()) throw DimensionError(std::string(what) + ": size mismatch");
}

} // namespace

std::vector<double> ddpm_update(const NoiseSchedule& sched, const std::vector<double>& z, int t,
                                const std::vector<double>& eps_hat, Rng& rng) {
    check_same_dim(z, eps_hat, "ddpm_update");
    const double beta = sched.beta_at(t);
    const double alpha = sched.alpha_at(t);
    const double ab = sched.alpha_bar_at(t);
    const double coef = beta / std::sqrt(1.0 - ab);
    const double sqrt_alpha = std::sqrt(alpha);
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
        out[i] = (z[i] - coef * eps_hat[i]) / sqrt_alpha;
    if (t > 1) {
        const double sigma = std::sqrt(beta);
        for (double& v : out) v += sigma * rng.normal();
    }
    return out;
}

std::vector<double> ddim_update(const NoiseSchedule& sched, const std::vector<double>& z, int t,
                                int t_next, double eta, const std::vector<double>& eps_hat,
                                Rng& rng) {
    check_same_dim(z, eps_hat, "ddim_update");
    if (t_next >= t) throw ContractError("ddim_update: step pair must strictly decrease");
    if (t_next < 0) throw ContractError("ddim_update: t_next must be >= 0");
    if (eta < 0.0 || eta > 1.0) throw ContractError("ddim_update: eta must lie in [0,1]");
    const double ab_t = sched.alpha_bar_at(t);
    const double ab_n = sched.alpha_bar_at(t_next);
    const double sigma =
        eta * std::sqrt((1.0 - ab_n) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_n);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_n - sigma * sigma));
    const double sqrt_ab_t = std::sqrt(ab_t);
    const double sqrt_one_minus_ab_t = std::sqrt(1.0 - ab_t);
    const double sqrt_ab_n = std::sqrt(ab_n);
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double x0_hat = (z[i] - sqrt_one_minus_ab_t * eps_hat[i]) / sqrt_ab_t;
        out[i] = sqrt_ab_n * x0_hat + dir * eps_hat[i];
    }
    if (sigma > 0.0)
        for (double& v : out) v += sigma * rng.normal();
    return out;
}

std::vector<double> sm_update(const NoiseSchedule& sched, const std::vector<double>& z, int t,
                              const std::vector<double>& score_hat, Rng& rng) {
    check_same_dim(z, score_hat, "sm_update");
    const double beta = sched.beta_at(t);
    const double sqrt_alpha = std::sqrt(sched.alpha_at(t));
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
        out[i] = (z[i] + beta * score_hat[i]) / sqrt_alpha;
    if (t > 1) {
        const double sigma = std::sqrt(beta);
        for (double& v : out) v += sigma * rng.normal();
    }
    return out;
}

std::vector<double> fm_integrate(
    const std::function<std::vector<double>(const std::vector<double>&, double)>& velocity,
    std::vector<double> z, int steps) {
    if (steps < 1) throw ContractError("fm_integrate: step count must be >= 1");
    const double dt = 1.0 / static_cast<double>(steps);
    for (int k = 0; k < steps; ++k) {
        const double tau = static_cast<double>(k) * dt;
        const std::vector<double> v = velocity(z, tau);
        check_same_dim(z, v, "fm_integrate");
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += dt * v[i];
    }
    return z;
}

std::vector<std::pair<int, int>> make_ddim_steps(int T, int stride) {
    if (T < 1 || stride < 1) throw ContractError("make_ddim_steps: T and stride must be >= 1");
    std::vector<std::pair<int, int>> steps;
    int t = T;
    while (t > 0) {
        const int next = std::max(0, t - stride);
        steps.emplace_back(t, next);
        t = next;
    }
    return steps;
}

DiffusionModel::DiffusionModel(Mlp net, NoiseSchedule sched, Parameterization param,
                               int data_dim, int cond_dim)
    : net_(std::move(net)), sched_(std::move(sched)), param_(param), data_dim_(data_dim),
      cond_dim_(cond_dim) {
    if (data_dim_ < 1) throw ContractError("DiffusionModel: data_dim must be positive");
    if (cond_dim_ < 0) throw ContractError("DiffusionModel: cond_dim must be non-negative");
    if (net_.input_dim() != data_dim_ + cond_dim_)
        throw DimensionError("DiffusionModel: net input width must equal data_dim + cond_dim");
    if (net_.output_dim() != data_dim_)
        throw DimensionError("DiffusionModel: net output width must equal data_dim");
}

void DiffusionModel::check_step(int t) const {
    if (t < 1 || t > sched_.T) throw ContractError("DiffusionModel: step out of [1,T]");
}

Tensor DiffusionModel::predict(const Tensor& rows, const std::vector<double>& ts,
                               const Tensor* cond_rows) const {
    if (rows.rank() != 2 || rows.dim(1) != data_dim_)
        throw DimensionError("DiffusionModel::predict: rows must be [B, data_dim]");
    Tensor input = rows;
    if (cond_dim_ > 0) {
        if (cond_rows == nullptr)
            throw DimensionError("DiffusionModel::predict: conditional model needs cond rows");
        if (cond_rows->rank() != 2 || cond_rows->dim(0) != rows.dim(0) ||
            cond_rows->dim(1) != cond_dim_)
            throw DimensionError("DiffusionModel::predict: cond rows must be [B, cond_dim]");
        input = concat_cols(rows, *cond_rows);
    } else if (cond_rows != nullptr) {
        throw DimensionError("DiffusionModel::predict: unconditional model got cond rows");
    }
    ++eval_count_;
    return net_.forward(input, &ts);
}

std::vector<double> DiffusionModel::predict_row(const std::vector<double>& z, double t_embed,
                                                const std::vector<double>* cond) const {
    NoGradGuard guard;
    Tensor rows = Tensor::from({1, data_dim_}, z);
    std::vector<double> ts = {t_embed};
    if (cond_dim_ > 0) {
        if (cond == nullptr || static_cast<int>(cond->size()) != cond_dim_)
            throw DimensionError("DiffusionModel: conditional model needs a cond vector");
        Tensor cond_rows = Tensor::from({1, cond_dim_}, *cond);
        return predict(rows, ts, &cond_rows).values();
    }
    if (cond != nullptr)
        throw DimensionError("DiffusionModel: unconditional model got a cond vector");
    return predict(rows, ts, nullptr).values();
}

std::vector<double> DiffusionModel::predict_epsilon(const std::vector<double>& z, int t,
                                                    const std::vector<double>* cond) const {
    check_step(t);
    if (static_cast<int>(z.size()) != data_dim_)
        throw DimensionError("DiffusionModel::predict_epsilon: latent dim mismatch");
    switch (param_) {
    case Parameterization::Epsilon:
        return predict_row(z, static_cast<double>(t), cond);
    case Parameterization::Score: {
        std::vector<double> s = predict_row(z, static_cast<double>(t), cond);
        const double c = -std::sqrt(1.0 - sched_.alpha_bar_at(t));
        for (double& v : s) v *= c;
        return s;
    }
    case Parameterization::FlowVelocity:
        break;
    }
    throw ContractError("DiffusionModel: flow-velocity models sample via fm_sample");
}

std::vector<double> DiffusionModel::predict_score(const std::vector<double>& z, int t,
                                                  const std::vector<double>* cond) const {
    check_step(t);
    if (static_cast<int>(z.size()) != data_dim_)
        throw DimensionError("DiffusionModel::predict_score: latent dim mismatch");
    switch (param_) {
    case Parameterization::Score:
        return predict_row(z, static_cast<double>(t), cond);
    case Parameterization::Epsilon: {
        std::vector<double> e = predict_row(z, static_cast<double>(t), cond);
        const double c = -1.0 / std::sqrt(1.0 - sched_.alpha_bar_at(t));
        for (double& v : e) v *= c;
        return e;
    }
    case Parameterization::FlowVelocity:
        break;
    }
    throw ContractError("DiffusionModel: flow-velocity models sample via fm_sample");
}

std::vector<double> DiffusionModel::q_sample(const std::vector<double>& x0, int t,
                                             const std::vector<double>& eps) const {
    check_step(t);
    if (x0.size() != eps.size() || static_cast<int>(x0.size()) != data_dim_)
        throw DimensionError("DiffusionModel::q_sample: x0/eps dims must equal data_dim");
    const double a = std::sqrt(sched_.alpha_bar_at(t));
    const double b = std::sqrt(1.0 - sched_.alpha_bar_at(t));
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Tensor DiffusionModel::ddpm_loss(const std::vector<std::vector<double>>& batch, Rng& rng,
                                 const std::vector<std::vector<double>>* conds,
                                 const std::vector<std::vector<double>>* loss_mask,
                                 const std::vector<ConditionMask>* inpaint) const {
    if (batch.empty()) throw ContractError("DiffusionModel::ddpm_loss: empty batch");
    const int B = static_cast<int>(batch.size());
    if (conds != nullptr && static_cast<int>(conds->size()) != B)
        throw DimensionError("DiffusionModel::ddpm_loss: conds size mismatch");
    if (loss_mask != nullptr && static_cast<int>(loss_mask->size()) != B)
        throw DimensionError("DiffusionModel::ddpm_loss: loss_mask size mismatch");
    if (inpaint != nullptr && static_cast<int>(inpaint->size()) != B)
        throw DimensionError("DiffusionModel::ddpm_loss: inpaint size mismatch");
    const std::size_t d = static_cast<std::size_t>(data_dim_);

    std::vector<double> noisy(static_cast<std::size_t>(B) * d);
    std::vector<double> target(static_cast<std::size_t>(B) * d);
    std::vector<double> ts(static_cast<std::size_t>(B));
    std::vector<double> row_w(static_cast<std::size_t>(B), 1.0); // score-param scale
    for (int r = 0; r < B; ++r) {
        const auto& x0 = batch[static_cast<std::size_t>(r)];
        if (x0.size() != d) throw DimensionError("DiffusionModel::ddpm_loss: row dim mismatch");
        const ConditionMask* cm = nullptr;
        if (inpaint != nullptr && (*inpaint)[static_cast<std::size_t>(r)].size() != 0) {
            cm = &(*inpaint)[static_cast<std::size_t>(r)];
            cm->validate(data_dim_);
        }
        if (param_ == Parameterization::FlowVelocity) {
            const double tau = rng.uniform();
            ts[static_cast<std::size_t>(r)] = tau * static_cast<double>(sched_.T);
            for (std::size_t i = 0; i < d; ++i) {
                const double eps = rng.normal();
                noisy[static_cast<std::size_t>(r) * d + i] = (1.0 - tau) * eps + tau * x0[i];
                target[static_cast<std::size_t>(r) * d + i] = x0[i] - eps;
            }
            if (cm != nullptr) {
                for (std::size_t i = 0; i < d; ++i) {
                    if (!cm->mask[i]) continue;
                    const double eps2 = rng.normal();
                    noisy[static_cast<std::size_t>(r) * d + i] =
                        (1.0 - tau) * eps2 + tau * cm->known[i];
                    target[static_cast<std::size_t>(r) * d + i] = cm->known[i] - eps2;
                }
            }
        } else {
            const int t = rng.uniform_int(1, sched_.T);
            ts[static_cast<std::size_t>(r)] = static_cast<double>(t);
            const double a = std::sqrt(sched_.alpha_bar_at(t));
            const double b = std::sqrt(1.0 - sched_.alpha_bar_at(t));
            row_w[static_cast<std::size_t>(r)] = b; // scales score outputs onto eps units
            for (std::size_t i = 0; i < d; ++i) {
                const double eps = rng.normal();
                noisy[static_cast<std::size_t>(r) * d + i] = a * x0[i] + b * eps;
                target[static_cast<std::size_t>(r) * d + i] = eps;
            }
            if (cm != nullptr) {
                for (std::size_t i = 0; i < d; ++i) {
                    if (!cm->mask[i]) continue;
                    const double eps2 = rng.normal();
                    noisy[static_cast<std::size_t>(r) * d + i] = a * cm->known[i] + b * eps2;
                    target[static_cast<std::size_t>(r) * d + i] = eps2;
                }
            }
        }
    }

    Tensor rows = Tensor::from({B, data_dim_}, noisy);
    Tensor cond_rows;
    if (conds != nullptr) {
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(B * cond_dim_));
        for (const auto& c : *conds) {
            if (static_cast<int>(c.size()) != cond_dim_)
                throw DimensionError("DiffusionModel::ddpm_loss: cond dim mismatch");
            flat.insert(flat.end(), c.begin(), c.end());
        }
        cond_rows = Tensor::from({B, cond_dim_}, flat);
    }
    Tensor pred = predict(rows, ts, conds != nullptr ? &cond_rows : nullptr);

    Tensor residual;
    if (param_ == Parameterization::Score) {
        // || sqrt(1-ab_t) * s_hat + eps ||^2: the eps regression in score units.
        std::vector<double> w(static_cast<std::size_t>(B) * d);
        for (int r = 0; r < B; ++r)
            for (std::size_t i = 0; i < d; ++i)
                w[static_cast<std::size_t>(r) * d + i] = row_w[static_cast<std::size_t>(r)];
        residual = add(mul(pred, Tensor::from({B, data_dim_}, w)),
                       Tensor::from({B, data_dim_}, target));
    } else {
        residual = sub(pred, Tensor::from({B, data_dim_}, target));
    }
    if (loss_mask != nullptr) {
        std::vector<double> m(static_cast<std::size_t>(B) * d);
        for (int r = 0; r < B; ++r) {
            const auto& row = (*loss_mask)[static_cast<std::size_t>(r)];
            if (row.size() != d)
                throw DimensionError("DiffusionModel::ddpm_loss: loss_mask dim mismatch");
            for (std::size_t i = 0; i < d; ++i) m[static_cast<std::size_t>(r) * d + i] = row[i];
        }
        residual = mul(residual, Tensor::from({B, data_dim_}, m));
    }
    return mean(rows_sum(square(residual)));
}

std::vector<double> DiffusionModel::ddpm_step(const std::vector<double>& z, int t, Rng& rng,
                                              const std::vector<double>* cond) const {
    return ddpm_update(sched_, z, t, predict_epsilon(z, t, cond), rng);
}

std::vector<double> DiffusionModel::ddim_step(const std::vector<double>& z, int t, int t_next,
                                              double eta, Rng& rng,
                                              const std::vector<double>* cond) const {
    return ddim_update(sched_, z, t, t_next, eta, predict_epsilon(z, t, cond), rng);
}

std::vector<double> DiffusionModel::sm_step(const std::vector<double>& z, int t, Rng& rng,
                                            const std::vector<double>* cond) const {
    return sm_update(sched_, z, t, predict_score(z, t, cond), rng);
}

std::vector<double> DiffusionModel::fm_sample(const std::vector<double>& z_init, int steps,
                                              const std::vector<double>* cond) const {
    if (param_ != Parameterization::FlowVelocity)
        throw ContractError("DiffusionModel::fm_sample: model is not flow-parameterized");
    auto velocity = [&](const std::vector<double>& z, double tau) {
        return predict_row(z, tau * static_cast<double>(sched_.T), cond);
    };
    return fm_integrate(velocity, z_init, steps);
}

std::vector<double> DiffusionModel::sample(SamplerKind kind, Rng& rng,
                                           const SampleOptions& opts) const {
    std::vector<double> z(static_cast<std::size_t>(data_dim_));
    for (double& v : z) v = rng.normal();
    switch (kind) {
    case SamplerKind::Ddpm:
        for (int t = sched_.T; t >= 1; --t) z = ddpm_step(z, t, rng, opts.cond);
        return z;
    case SamplerKind::Ddim:
        for (const auto& [t, tn] : make_ddim_steps(sched_.T, opts.ddim_stride))
            z = ddim_step(z, t, tn, opts.ddim_eta, rng, opts.cond);
        return z;
    case SamplerKind::ScoreMatching:
        for (int t = sched_.T; t >= 1; --t) z = sm_step(z, t, rng, opts.cond);
        return z;
    case SamplerKind::FlowMatching:
        return fm_sample(z, opts.fm_steps > 0 ? opts.fm_steps : sched_.T, opts.cond);
    }
    throw ContractError("DiffusionModel::sample: unknown sampler kind");
}

std::vector<double> DiffusionModel::inpaint_sample(const ConditionMask& mask, SamplerKind kind,
                                                   Rng& rng, const SampleOptions& opts) const {
    mask.validate(data_dim_);
    const bool active = mask.any();
    std::vector<double> z(static_cast<std::size_t>(data_dim_));
    for (double& v : z) v = rng.normal();

    // Reset known entries to the forward-noised ground truth at step t
    // (t = 0 means the exact known values).
    auto overwrite = [&](std::vector<double>& latent, int t) {
        if (!active) return;
        const double a = std::sqrt(sched_.alpha_bar_at(t));
        const double b = std::sqrt(1.0 - sched_.alpha_bar_at(t));
        for (std::size_t i = 0; i < latent.size(); ++i)
            if (mask.mask[i])
                latent[i] = t == 0 ? mask.known[i] : a * mask.known[i] + b * rng.normal();
    };

    switch (kind) {
    case SamplerKind::Ddpm:
        for (int t = sched_.T; t >= 1; --t) {
            overwrite(z, t);
            z = ddpm_step(z, t, rng, opts.cond);
        }
        overwrite(z, 0);
        return z;
    case SamplerKind::Ddim:
        for (const auto& [t, tn] : make_ddim_steps(sched_.T, opts.ddim_stride)) {
            overwrite(z, t);
            z = ddim_step(z, t, tn, opts.ddim_eta, rng, opts.cond);
        }
        overwrite(z, 0);
        return z;
    case SamplerKind::ScoreMatching:
        for (int t = sched_.T; t >= 1; --t) {
            overwrite(z, t);
            z = sm_step(z, t, rng, opts.cond);
        }
        overwrite(z, 0);
        return z;
    case SamplerKind::FlowMatching: {
        if (param_ != Parameterization::FlowVelocity)
            throw ContractError("DiffusionModel::inpaint_sample: model is not flow-parameterized");
        const int steps = opts.fm_steps > 0 ? opts.fm_steps : sched_.T;
        const double dt = 1.0 / static_cast<double>(steps);
        for (int k = 0; k < steps; ++k) {
            const double tau = static_cast<double>(k) * dt;
            if (active)
                for (std::size_t i = 0; i < z.size(); ++i)
                    if (mask.mask[i])
                        z[i] = (1.0 - tau) * rng.normal() + tau * mask.known[i];
            const std::vector<double> v =
                predict_row(z, tau * static_cast<double>(sched_.T), opts.cond);
            for (std::size_t i = 0; i < z.size(); ++i) z[i] += dt * v[i];
        }
        overwrite(z, 0);
        return z;
    }
    }
    throw ContractError("DiffusionModel::inpaint_sample: unknown sampler kind");
}

double DiffusionModel::elbo_proxy(const std::vector<double>& x0, int mc_draws, Rng& rng,
                                  const std::vector<double>* cond) const {
    if (mc_draws < 1) throw ContractError("DiffusionModel::elbo_proxy: mc_draws must be >= 1");
    if (static_cast<int>(x0.size()) != data_dim_)
        throw DimensionError("DiffusionModel::elbo_proxy: x0 dim mismatch");
    NoGradGuard guard;
    const std::size_t d = static_cast<std::size_t>(data_dim_);
    const int T = sched_.T;
    double total = 0.0;
    for (int draw = 0; draw < mc_draws; ++draw) {
        std::vector<double> noisy(static_cast<std::size_t>(T) * d);
        std::vector<double> eps(static_cast<std::size_t>(T) * d);
        std::vector<double> ts(static_cast<std::size_t>(T));
        for (int t = 1; t <= T; ++t) {
            const std::size_t r = static_cast<std::size_t>(t - 1);
            double a, b;
            if (param_ == Parameterization::FlowVelocity) {
                const double tau = (static_cast<double>(t) - 0.5) / static_cast<double>(T);
                ts[r] = tau * static_cast<double>(T);
                a = tau;
                b = 1.0 - tau;
            } else {
                ts[r] = static_cast<double>(t);
                a = std::sqrt(sched_.alpha_bar_at(t));
                b = std::sqrt(1.0 - sched_.alpha_bar_at(t));
            }
            for (std::size_t i = 0; i < d; ++i) {
                const double e = rng.normal();
                eps[r * d + i] = e;
                noisy[r * d + i] = a * x0[i] + b * e;
            }
        }
        Tensor rows = Tensor::from({T, data_dim_}, noisy);
        Tensor cond_rows;
        const Tensor* cond_ptr = nullptr;
        if (cond_dim_ > 0) {
            if (cond == nullptr || static_cast<int>(cond->size()) != cond_dim_)
                throw DimensionError("DiffusionModel::elbo_proxy: cond vector required");
            std::vector<double> flat;
            flat.reserve(static_cast<std::size_t>(T) * static_cast<std::size_t>(cond_dim_));
            for (int t = 0; t < T; ++t) flat.insert(flat.end(), cond->begin(), cond->end());
            cond_rows = Tensor::from({T, cond_dim_}, flat);
            cond_ptr = &cond_rows;
        }
        const std::vector<double> pred = predict(rows, ts, cond_ptr).values();
        for (int t = 1; t <= T; ++t) {
            const std::size_t r = static_cast<std::size_t>(t - 1);
            double res = 0.0;
            double w = 1.0;
            if (param_ == Parameterization::FlowVelocity) {
                for (std::size_t i = 0; i < d; ++i) {
                    const double v_target = x0[i] - eps[r * d + i];
                    const double diff = pred[r * d + i] - v_target;
                    res += diff * diff;
                }
            } else {
                const double b = std::sqrt(1.0 - sched_.alpha_bar_at(t));
                w = sched_.beta_at(t) / (2.0 * sched_.alpha_at(t) * (1.0 - sched_.alpha_bar_at(t)));
                for (std::size_t i = 0; i < d; ++i) {
                    const double eps_hat = param_ == Parameterization::Score
                                               ? -b * pred[r * d + i]
                                               : pred[r * d + i];
                    const double diff = eps_hat - eps[r * d + i];
                    res += diff * diff;
                }
            }
            total += w * res;
        }
    }
    return -total / static_cast<double>(mc_draws);
}

DiffusionModel DiffusionModel::clone() const {
    DiffusionModel copy;
    copy.net_ = net_.clone();
    copy.sched_ = sched_;
    copy.param_ = param_;
    copy.data_dim_ = data_dim_;
    copy.cond_dim_ = cond_dim_;
    return copy;
}

void model_to_checkpoint(const DiffusionModel& model, core::Checkpoint& ckpt,
                         const std::string& prefix) {
    ckpt.meta[prefix + "param"] = static_cast<double>(model.parameterization());
    ckpt.meta[prefix + "data_dim"] = static_cast<double>(model.data_dim());
    ckpt.meta[prefix + "cond_dim"] = static_cast<double>(model.cond_dim());
    ckpt.meta[prefix + "sched_kind"] = static_cast<double>(model.schedule().kind);
    ckpt.meta[prefix + "sched_T"] = static_cast<double>(model.schedule().T);
    ckpt.tensors.emplace_back(prefix + "sched/beta",
                              Tensor::from({model.schedule().T}, model.schedule().beta));
    core::mlp_to_checkpoint(model.net(), ckpt, prefix + "net/");
}

DiffusionModel model_from_checkpoint(const core::Checkpoint& ckpt, const std::string& prefix) {
    const int param_code = static_cast<int>(ckpt.meta_at(prefix + "param"));
    if (param_code < 0 || param_code > static_cast<int>(Parameterization::FlowVelocity))
        throw core::FormatError("model checkpoint: unknown parameterization code");
    const int kind_code = static_cast<int>(ckpt.meta_at(prefix + "sched_kind"));
    if (kind_code < 0 || kind_code > static_cast<int>(ScheduleKind::Cosine))
        throw core::FormatError("model checkpoint: unknown schedule kind code");

    NoiseSchedule sched;
    sched.kind = static_cast<ScheduleKind>(kind_code);
    sched.T = static_cast<int>(ckpt.meta_at(prefix + "sched_T"));
    const Tensor* beta = ckpt.find(prefix + "sched/beta");
    if (!beta) throw core::FormatError("model checkpoint: missing schedule betas");
    sched.beta = beta->values();
    if (static_cast<int>(sched.beta.size()) != sched.T)
        throw core::FormatError("model checkpoint: schedule beta length mismatch");
    sched.alpha.resize(sched.beta.size());
    sched.alpha_bar.resize(sched.beta.size());
    double ab = 1.0;
    for (size_t i = 0; i < sched.beta.size(); ++i) {
        sched.alpha[i] = 1.0 - sched.beta[i];
        ab *= sched.alpha[i];
        sched.alpha_bar[i] = ab;
    }

    return DiffusionModel(core::mlp_from_checkpoint(ckpt, prefix + "net/"), std::move(sched),
                          static_cast<Parameterization>(param_code),
                          static_cast<int>(ckpt.meta_at(prefix + "data_dim")),
                          static_cast<int>(ckpt.meta_at(prefix + "cond_dim")));
}

void save_model(const std::string& path, const DiffusionModel& model, const std::string& tag) {
    core::Checkpoint ckpt;
    ckpt.tag = tag;
    model_to_checkpoint(model, ckpt);
    core::save_checkpoint(path, ckpt);
}

DiffusionModel load_model(const std::string& path, const std::string& expected_tag) {
    const core::Checkpoint ckpt = core::load_checkpoint(path);
    if (ckpt.tag != expected_tag)
        throw core::FormatError("load_model: checkpoint tag '" + ckpt.tag + "' does not match '" +
                                expected_tag + "'");
    return model_from_checkpoint(ckpt);
}

} // namespace dmc::diffusion
