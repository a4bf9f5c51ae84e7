#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dmc/dataset.hpp"
#include "dmc/mlp.hpp"
#include "dmc/rng.hpp"
#include "dmc/tensor.hpp"

namespace dmc::qvalue {

using core::Mlp;
using core::Rng;
using core::Tensor;

struct IqlConfig {
    double expectile = 0.7;     // tau in (0, 1)
    double discount = 0.99;
    double target_rate = 0.005; // soft target-network update coefficient
    int steps = 4000;
    int batch_size = 128;
    int hidden = 64;
    double lr = 1e-3;

    void validate() const;
};

// Asymmetric squared error |tau - 1(u < 0)| * u^2, averaged over all entries.
// The weight is treated as a constant of the residual sign, which matches the
// almost-everywhere derivative.
Tensor expectile_loss(const Tensor& residual, double tau);

// Q(s,a) and V(s) heads with a frozen target copy of Q. Evaluation is
// deterministic given weights; only soft_update_target mutates the target.
class QFunction {
public:
    QFunction() = default;
    QFunction(int obs_dim, int action_dim, int hidden, Rng& rng);
    QFunction(Mlp q, Mlp v, Mlp target, int obs_dim, int action_dim);

    int obs_dim() const { return obs_dim_; }
    int action_dim() const { return action_dim_; }

    // Scalar conveniences (no tape).
    double q(const std::vector<double>& obs, const std::vector<double>& action) const;
    double v(const std::vector<double>& obs) const;
    double target_q(const std::vector<double>& obs, const std::vector<double>& action) const;

    // Tape-connected batched heads; gradients flow into the input rows, which
    // is what lets policy gradients differentiate Q with respect to actions.
    Tensor q_forward(const Tensor& obs_actions) const; // [B, obs+act] -> [B, 1]
    Tensor v_forward(const Tensor& obs_rows) const;    // [B, obs]     -> [B, 1]
    Tensor target_q_forward(const Tensor& obs_actions) const;

    void soft_update_target(double rate); // t <- (1-rate) t + rate q

    Mlp& q_net() { return q_net_; }
    Mlp& v_net() { return v_net_; }
    const Mlp& q_net() const { return q_net_; }
    const Mlp& v_net() const { return v_net_; }
    const Mlp& target_net() const { return target_q_; }

private:
    Mlp q_net_, v_net_, target_q_;
    int obs_dim_ = 0;
    int action_dim_ = 0;
};

// Implicit Q-learning on an offline dataset: V by expectile regression
// against the target Q at dataset actions, Q by TD regression onto
// r + discount * V(s') * (1 - done), soft target updates every step.
QFunction train_iql(const envs::OfflineDataset& data, const IqlConfig& cfg, Rng& rng);

// Continue training an existing QFunction in place (same update rule); used
// when online transitions are injected mid-run.
void train_iql_steps(QFunction& qf, const envs::OfflineDataset& data, const IqlConfig& cfg,
                     int steps, Rng& rng);

struct SaPair {
    std::vector<double> obs;
    std::vector<double> action;
};

using PairScorer =
    std::function<double(const std::vector<double>& obs, const std::vector<double>& action)>;

double pair_value(const QFunction& qf, const std::vector<double>& obs,
                  const std::vector<double>& action);

// Sum of per-pair scores along a trajectory, optionally discounted; the
// score of an empty trajectory is zero.
double traj_value(const PairScorer& score, const std::vector<SaPair>& trajectory,
                  double discount = 1.0);
double traj_value(const QFunction& qf, const std::vector<SaPair>& trajectory,
                  double discount = 1.0);

// Checkpoint plumbing (same container format as model checkpoints, distinct
// tag so loaders cannot confuse the two).
void save_qfunction(const std::string& path, const QFunction& qf);
QFunction load_qfunction(const std::string& path);

} // namespace dmc::qvalue
