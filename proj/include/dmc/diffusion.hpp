#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dmc/checkpoint.hpp"
#include "dmc/mlp.hpp"
#include "dmc/schedule.hpp"
#include "dmc/tensor.hpp"

namespace dmc::diffusion {

using core::Mlp;
using core::Rng;
using core::Tensor;

enum class Parameterization { Epsilon, Score, FlowVelocity };
enum class SamplerKind { Ddpm, Ddim, ScoreMatching, FlowMatching };

// Per-entry conditioning for Repaint-style in-painting: wherever mask is
// true, `known` carries the ground-truth value to hold fixed.
struct ConditionMask {
    std::vector<unsigned char> mask;
    std::vector<double> known;

    int size() const { return static_cast<int>(mask.size()); }
    bool any() const;
    void validate(int expected_dim) const; // throws on NaN under a true mask
};

// --- Pure sampler math, independent of any network. -------------------------
// Each update consumes the model prediction as an argument so tests can drive
// them with analytic oracles and the model methods below stay thin adapters.

// Reverse Gaussian kernel: mean from the epsilon prediction, fixed variance
// beta_t, no noise at the final step t=1.
std::vector<double> ddpm_update(const NoiseSchedule& sched, const std::vector<double>& z, int t,
                                const std::vector<double>& eps_hat, Rng& rng);

// Deterministic for eta=0; t_next may be 0 (final step). Requires t_next < t.
std::vector<double> ddim_update(const NoiseSchedule& sched, const std::vector<double>& z, int t,
                                int t_next, double eta, const std::vector<double>& eps_hat,
                                Rng& rng);

// Annealed Langevin-style update from a score prediction; noiseless at t=1.
std::vector<double> sm_update(const NoiseSchedule& sched, const std::vector<double>& z, int t,
                              const std::vector<double>& score_hat, Rng& rng);

// Fixed-step Euler integration of a velocity field over tau in [0,1].
std::vector<double> fm_integrate(
    const std::function<std::vector<double>(const std::vector<double>&, double)>& velocity,
    std::vector<double> z, int steps);

// Strided DDIM step pairs: (T, T-stride), ..., (r, 0).
std::vector<std::pair<int, int>> make_ddim_steps(int T, int stride);

// --- Model -------------------------------------------------------------------

struct SampleOptions {
    int ddim_stride = 1;
    double ddim_eta = 0.0;
    int fm_steps = 0; // 0: use the schedule's T
    const std::vector<double>* cond = nullptr;
};

// A denoiser network bound to a noise schedule under a fixed output
// parameterization. Data rows are flat vectors of length data_dim; models
// with cond_dim > 0 append the conditioning vector to every network input.
class DiffusionModel {
public:
    DiffusionModel() = default;
    DiffusionModel(Mlp net, NoiseSchedule sched, Parameterization param, int data_dim,
                   int cond_dim = 0);

    const NoiseSchedule& schedule() const { return sched_; }
    Parameterization parameterization() const { return param_; }
    int data_dim() const { return data_dim_; }
    int cond_dim() const { return cond_dim_; }
    Mlp& net() { return net_; }
    const Mlp& net() const { return net_; }

    long eval_count() const { return eval_count_; }
    void reset_eval_count() { eval_count_ = 0; }

    // Raw network output for a batch of latents, one step index per row.
    // cond_rows, when the model is conditional, is [B, cond_dim].
    Tensor predict(const Tensor& rows, const std::vector<double>& ts,
                   const Tensor* cond_rows = nullptr) const;

    // Single-latent epsilon prediction (translating score output); flow
    // models reject this and sample via fm_sample.
    std::vector<double> predict_epsilon(const std::vector<double>& z, int t,
                                        const std::vector<double>* cond = nullptr) const;
    std::vector<double> predict_score(const std::vector<double>& z, int t,
                                      const std::vector<double>* cond = nullptr) const;

    // Closed-form forward marginal sqrt(ab_t) x0 + sqrt(1-ab_t) eps.
    std::vector<double> q_sample(const std::vector<double>& x0, int t,
                                 const std::vector<double>& eps) const;

    // Denoising regression loss on the tape; the target follows the model's
    // parameterization. loss_mask rows of 0/1, when given, gate per-entry
    // residuals (entries an in-painting sampler would overwrite anyway).
    // inpaint, when given (one mask per row; empty mask = unconditional row),
    // rewrites revealed entries of the noised input with a fresh forward
    // noising of the known values — the same rule the in-painting sampler
    // applies — and retargets those entries onto the fresh noise. Per-row
    // draw order: step index, one noise draw per entry, then one fresh draw
    // per revealed entry in ascending order.
    Tensor ddpm_loss(const std::vector<std::vector<double>>& batch, Rng& rng,
                     const std::vector<std::vector<double>>* conds = nullptr,
                     const std::vector<std::vector<double>>* loss_mask = nullptr,
                     const std::vector<ConditionMask>* inpaint = nullptr) const;

    std::vector<double> ddpm_step(const std::vector<double>& z, int t, Rng& rng,
                                  const std::vector<double>* cond = nullptr) const;
    std::vector<double> ddim_step(const std::vector<double>& z, int t, int t_next, double eta,
                                  Rng& rng, const std::vector<double>* cond = nullptr) const;
    std::vector<double> sm_step(const std::vector<double>& z, int t, Rng& rng,
                                const std::vector<double>* cond = nullptr) const;
    std::vector<double> fm_sample(const std::vector<double>& z_init, int steps,
                                  const std::vector<double>* cond = nullptr) const;

    // Full reverse chain from fresh Gaussian noise.
    std::vector<double> sample(SamplerKind kind, Rng& rng,
                               const SampleOptions& opts = {}) const;

    // Repaint-style conditional sampling: before every reverse step, entries
    // under the mask are reset to the forward-noised ground truth; the final
    // output carries the known values bit-exactly.
    std::vector<double> inpaint_sample(const ConditionMask& mask, SamplerKind kind, Rng& rng,
                                       const SampleOptions& opts = {}) const;

    // Negated Monte-Carlo sum of weighted per-step denoising residuals;
    // higher means the model finds x0 more likely. Deterministic given seed.
    double elbo_proxy(const std::vector<double>& x0, int mc_draws, Rng& rng,
                      const std::vector<double>* cond = nullptr) const;

    DiffusionModel clone() const;

private:
    std::vector<double> predict_row(const std::vector<double>& z, double t_embed,
                                    const std::vector<double>* cond) const;
    void check_step(int t) const;

    Mlp net_;
    NoiseSchedule sched_;
    Parameterization param_ = Parameterization::Epsilon;
    int data_dim_ = 0;
    int cond_dim_ = 0;
    mutable long eval_count_ = 0;
};

// Embeds / restores a model (net, exact beta schedule, dims, parameterization)
// inside a checkpoint under the given name prefix, so composite artifacts can
// carry several models. The schedule round-trips bit-exactly even when it was
// not produced by make_schedule.
void model_to_checkpoint(const DiffusionModel& model, core::Checkpoint& ckpt,
                         const std::string& prefix = "");
DiffusionModel model_from_checkpoint(const core::Checkpoint& ckpt, const std::string& prefix = "");

void save_model(const std::string& path, const DiffusionModel& model,
                const std::string& tag = "model");
DiffusionModel load_model(const std::string& path, const std::string& expected_tag = "model");

} // namespace dmc::diffusion
