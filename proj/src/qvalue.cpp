#include "dmc/qvalue.hpp"

#include <cmath>

#include "dmc/adam.hpp"
#include "dmc/checkpoint.hpp"
#include "dmc/errors.hpp"

namespace dmc::qvalue {

using core::Activation;
using core::Adam;
using core::Checkpoint;
using core::ContractError;
using core::DimensionError;
using core::NoGradGuard;
using core::NumericError;

void IqlConfig::validate() const {
    if (!(expectile > 0.0 && expectile < 1.0))
        throw ContractError("IqlConfig: expectile must lie strictly inside (0, 1)");
    if (discount < 0.0 || discount > 1.0)
        throw ContractError("IqlConfig: discount must lie in [0, 1]");
    if (!(target_rate > 0.0 && target_rate <= 1.0))
        throw ContractError("IqlConfig: target_rate must lie in (0, 1]");
    if (steps < 1 || batch_size < 1 || hidden < 1)
        throw ContractError("IqlConfig: steps, batch_size, hidden must be positive");
    if (lr <= 0.0) throw ContractError("IqlConfig: lr must be positive");
}

Tensor expectile_loss(const Tensor& residual, double tau) {
    if (!(tau > 0.0 && tau < 1.0))
        throw ContractError("expectile_loss: tau must lie strictly inside (0, 1)");
    const auto& u = residual.values();
    std::vector<double> w(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) w[i] = u[i] < 0.0 ? 1.0 - tau : tau;
    Tensor weights = Tensor::from(residual.shape(), std::move(w));
    return mean(mul(weights, square(residual)));
}

QFunction::QFunction(int obs_dim, int action_dim, int hidden, Rng& rng)
    : obs_dim_(obs_dim), action_dim_(action_dim) {
    if (obs_dim < 1 || action_dim < 1 || hidden < 1)
        throw ContractError("QFunction: dims and hidden width must be positive");
    q_net_ = Mlp({obs_dim + action_dim, hidden, hidden, 1}, 0, Activation::Tanh, rng);
    v_net_ = Mlp({obs_dim, hidden, hidden, 1}, 0, Activation::Tanh, rng);
    target_q_ = q_net_.clone();
}

QFunction::QFunction(Mlp q, Mlp v, Mlp target, int obs_dim, int action_dim)
    : q_net_(std::move(q)), v_net_(std::move(v)), target_q_(std::move(target)),
      obs_dim_(obs_dim), action_dim_(action_dim) {
    if (obs_dim < 1 || action_dim < 1)
        throw ContractError("QFunction: dims must be positive");
    if (q_net_.input_dim() != obs_dim + action_dim || v_net_.input_dim() != obs_dim ||
        target_q_.input_dim() != obs_dim + action_dim)
        throw DimensionError("QFunction: network input widths do not match the given dims");
}

Tensor QFunction::q_forward(const Tensor& obs_actions) const {
    return q_net_.forward(obs_actions, nullptr);
}

Tensor QFunction::v_forward(const Tensor& obs_rows) const {
    return v_net_.forward(obs_rows, nullptr);
}

Tensor QFunction::target_q_forward(const Tensor& obs_actions) const {
    return target_q_.forward(obs_actions, nullptr);
}

namespace {

std::vector<double> concat_pair(const std::vector<double>& obs,
                                const std::vector<double>& action) {
    std::vector<double> sa;
    sa.reserve(obs.size() + action.size());
    sa.insert(sa.end(), obs.begin(), obs.end());
    sa.insert(sa.end(), action.begin(), action.end());
    return sa;
}

} // namespace

double QFunction::q(const std::vector<double>& obs, const std::vector<double>& action) const {
    if (static_cast<int>(obs.size()) != obs_dim_ ||
        static_cast<int>(action.size()) != action_dim_)
        throw ContractError("QFunction::q: obs/action dim mismatch");
    NoGradGuard guard;
    Tensor row = Tensor::from({1, obs_dim_ + action_dim_}, concat_pair(obs, action));
    return q_forward(row).values()[0];
}

double QFunction::v(const std::vector<double>& obs) const {
    if (static_cast<int>(obs.size()) != obs_dim_)
        throw ContractError("QFunction::v: obs dim mismatch");
    NoGradGuard guard;
    Tensor row = Tensor::from({1, obs_dim_}, obs);
    return v_forward(row).values()[0];
}

double QFunction::target_q(const std::vector<double>& obs,
                           const std::vector<double>& action) const {
    if (static_cast<int>(obs.size()) != obs_dim_ ||
        static_cast<int>(action.size()) != action_dim_)
        throw ContractError("QFunction::target_q: obs/action dim mismatch");
    NoGradGuard guard;
    Tensor row = Tensor::from({1, obs_dim_ + action_dim_}, concat_pair(obs, action));
    return target_q_forward(row).values()[0];
}

void QFunction::soft_update_target(double rate) {
    if (!(rate > 0.0 && rate <= 1.0))
        throw ContractError("QFunction::soft_update_target: rate must lie in (0, 1]");
    auto src = q_net_.trainable_params();
    auto dst = target_q_.trainable_params();
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto& t = dst[i].mutable_values();
        const auto& s = src[i].values();
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = (1.0 - rate) * t[j] + rate * s[j];
    }
}

namespace {

// One optimization step over a uniformly sampled transition batch.
void iql_step(QFunction& qf, const envs::OfflineDataset& data, const IqlConfig& cfg, Adam& opt_q,
              Adam& opt_v, Rng& rng) {
    const int B = cfg.batch_size;
    const int od = qf.obs_dim();
    const int ad = qf.action_dim();
    std::vector<double> sa(static_cast<std::size_t>(B) * (od + ad));
    std::vector<double> obs(static_cast<std::size_t>(B) * od);
    std::vector<double> next_obs(static_cast<std::size_t>(B) * od);
    std::vector<double> rewards(static_cast<std::size_t>(B));
    std::vector<double> not_done(static_cast<std::size_t>(B));
    const long n = static_cast<long>(data.num_transitions());
    for (int b = 0; b < B; ++b) {
        const auto& tr = data.flat_at(
            static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n - 1))));
        if (static_cast<int>(tr.obs.size()) != od || static_cast<int>(tr.action.size()) != ad)
            throw ContractError("train_iql: transition dims do not match the QFunction");
        for (int j = 0; j < od; ++j) {
            obs[static_cast<std::size_t>(b * od + j)] = tr.obs[static_cast<std::size_t>(j)];
            next_obs[static_cast<std::size_t>(b * od + j)] =
                tr.next_obs[static_cast<std::size_t>(j)];
            sa[static_cast<std::size_t>(b * (od + ad) + j)] = tr.obs[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < ad; ++j)
            sa[static_cast<std::size_t>(b * (od + ad) + od + j)] =
                tr.action[static_cast<std::size_t>(j)];
        rewards[static_cast<std::size_t>(b)] = tr.reward;
        not_done[static_cast<std::size_t>(b)] = tr.done ? 0.0 : 1.0;
    }

    Tensor sa_rows = Tensor::from({B, od + ad}, sa);
    Tensor obs_rows = Tensor::from({B, od}, obs);

    // V update: expectile regression toward the frozen target Q.
    std::vector<double> tq(static_cast<std::size_t>(B));
    {
        NoGradGuard guard;
        Tensor tq_rows = qf.target_q_forward(sa_rows);
        tq = tq_rows.values();
    }
    Tensor v_pred = qf.v_forward(obs_rows);
    Tensor v_residual = sub(Tensor::from({B, 1}, tq), v_pred);
    Tensor v_loss = expectile_loss(v_residual, cfg.expectile);
    if (!std::isfinite(v_loss.item())) throw NumericError("train_iql: V loss is not finite");
    opt_v.zero_grad();
    backward(v_loss);
    opt_v.step();

    // Q update: TD regression toward r + discount * V(s') (1 - done).
    std::vector<double> td(static_cast<std::size_t>(B));
    {
        NoGradGuard guard;
        Tensor vn = qf.v_forward(Tensor::from({B, od}, next_obs));
        for (int b = 0; b < B; ++b)
            td[static_cast<std::size_t>(b)] =
                rewards[static_cast<std::size_t>(b)] +
                cfg.discount * vn.values()[static_cast<std::size_t>(b)] *
                    not_done[static_cast<std::size_t>(b)];
    }
    Tensor q_pred = qf.q_forward(sa_rows);
    Tensor q_loss = mean(square(sub(q_pred, Tensor::from({B, 1}, td))));
    if (!std::isfinite(q_loss.item())) throw NumericError("train_iql: Q loss is not finite");
    opt_q.zero_grad();
    backward(q_loss);
    opt_q.step();

    qf.soft_update_target(cfg.target_rate);
}

} // namespace

QFunction train_iql(const envs::OfflineDataset& data, const IqlConfig& cfg, Rng& rng) {
    cfg.validate();
    if (data.episodes.empty() || data.num_transitions() == 0)
        throw ContractError("train_iql: empty dataset");
    QFunction qf(data.obs_dim, data.action_dim, cfg.hidden, rng);
    Adam opt_q(qf.q_net().trainable_params(), cfg.lr);
    Adam opt_v(qf.v_net().trainable_params(), cfg.lr);
    for (int step = 0; step < cfg.steps; ++step) iql_step(qf, data, cfg, opt_q, opt_v, rng);
    return qf;
}

void train_iql_steps(QFunction& qf, const envs::OfflineDataset& data, const IqlConfig& cfg,
                     int steps, Rng& rng) {
    cfg.validate();
    if (steps < 0) throw ContractError("train_iql_steps: steps must be non-negative");
    if (data.episodes.empty() || data.num_transitions() == 0)
        throw ContractError("train_iql_steps: empty dataset");
    Adam opt_q(qf.q_net().trainable_params(), cfg.lr);
    Adam opt_v(qf.v_net().trainable_params(), cfg.lr);
    for (int step = 0; step < steps; ++step) iql_step(qf, data, cfg, opt_q, opt_v, rng);
}

double pair_value(const QFunction& qf, const std::vector<double>& obs,
                  const std::vector<double>& action) {
    return qf.q(obs, action);
}

double traj_value(const PairScorer& score, const std::vector<SaPair>& trajectory,
                  double discount) {
    if (!score) throw ContractError("traj_value: missing scorer");
    double total = 0.0;
    double w = 1.0;
    for (const auto& p : trajectory) {
        total += w * score(p.obs, p.action);
        w *= discount;
    }
    return total;
}

double traj_value(const QFunction& qf, const std::vector<SaPair>& trajectory, double discount) {
    return traj_value(
        [&qf](const std::vector<double>& o, const std::vector<double>& a) { return qf.q(o, a); },
        trajectory, discount);
}

void save_qfunction(const std::string& path, const QFunction& qf) {
    Checkpoint ckpt;
    ckpt.tag = "qfunction";
    ckpt.meta["obs_dim"] = static_cast<double>(qf.obs_dim());
    ckpt.meta["action_dim"] = static_cast<double>(qf.action_dim());
    core::mlp_to_checkpoint(qf.q_net(), ckpt, "q/");
    core::mlp_to_checkpoint(qf.v_net(), ckpt, "v/");
    core::mlp_to_checkpoint(qf.target_net(), ckpt, "tq/");
    core::save_checkpoint(path, ckpt);
}

QFunction load_qfunction(const std::string& path) {
    Checkpoint ckpt = core::load_checkpoint(path);
    if (ckpt.tag != "qfunction")
        throw core::FormatError("load_qfunction: checkpoint tag is not 'qfunction'");
    return QFunction(core::mlp_from_checkpoint(ckpt, "q/"), core::mlp_from_checkpoint(ckpt, "v/"),
                     core::mlp_from_checkpoint(ckpt, "tq/"),
                     static_cast<int>(ckpt.meta_at("obs_dim")),
                     static_cast<int>(ckpt.meta_at("action_dim")));
}

} // namespace dmc::qvalue
