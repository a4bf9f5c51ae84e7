#include "dmc/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "dmc/adam.hpp"
#include "dmc/checkpoint.hpp"
#include "dmc/errors.hpp"

namespace dmc::cascade {

namespace {

using core::Checkpoint;
using core::ConfigurationError;
using core::ContractError;
using core::DimensionError;
using core::FormatError;
using core::NumericError;
using diffusion::ConditionMask;
using diffusion::SampleOptions;

void require_unconditional(const DiffusionModel& model, const char* where) {
    if (model.data_dim() <= 0)
        throw ContractError(std::string(where) + ": model is default-constructed");
    if (model.cond_dim() != 0)
        throw ConfigurationError(std::string(where) + ": expected an unconditional model, got cond_dim=" +
                                 std::to_string(model.cond_dim()));
}

double checked_score(const SampleScorer& score, const std::vector<double>& x, const char* where) {
    const double s = score(x);
    if (!std::isfinite(s))
        throw NumericError(std::string(where) + ": scorer returned a non-finite value");
    return s;
}

} // namespace

std::pair<std::vector<double>, std::vector<double>> shared_latent_duo(const DiffusionModel& model,
                                                                      int t_share, Rng& rng) {
    require_unconditional(model, "shared_latent_duo");
    const int T = model.schedule().T;
    if (t_share < 1 || t_share > T)
        throw ContractError("shared_latent_duo: t_share " + std::to_string(t_share) +
                            " outside [1, " + std::to_string(T) + "]");
    const int d = model.data_dim();
    std::vector<double> z(d);
    for (double& v : z) v = rng.normal();
    for (int t = T; t > t_share; --t) z = model.ddpm_step(z, t, rng);
    std::vector<double> a = z;
    for (int t = t_share; t >= 1; --t) a = model.ddpm_step(a, t, rng);
    std::vector<double> b = std::move(z);
    for (int t = t_share; t >= 1; --t) b = model.ddpm_step(b, t, rng);
    return {std::move(a), std::move(b)};
}

CurationResult curate_pairs(const DiffusionModel& foundation, const SampleScorer& score,
                            const CurationOptions& opts, int n, Rng& rng) {
    require_unconditional(foundation, "curate_pairs");
    if (!score) throw ConfigurationError("curate_pairs: scorer is empty");
    if (n < 1) throw ContractError("curate_pairs: n must be >= 1");
    if (!(opts.min_frac > 0.0) || opts.max_frac > 1.0 || opts.min_frac > opts.max_frac)
        throw ContractError("curate_pairs: segment fractions must satisfy 0 < min <= max <= 1");
    if (opts.ddim_stride < 1) throw ContractError("curate_pairs: ddim_stride must be >= 1");

    const int d = foundation.data_dim();
    const int T = foundation.schedule().T;
    const int t_share = opts.t_share == 0 ? std::max(1, T / 2) : opts.t_share;
    if (opts.kind == CurationKind::SharedLatent && (t_share < 1 || t_share > T))
        throw ContractError("curate_pairs: t_share " + std::to_string(opts.t_share) +
                            " outside [1, " + std::to_string(T) + "]");

    SampleOptions sopts;
    sopts.ddim_stride = opts.ddim_stride;

    CurationResult result;
    result.attempts = n;
    result.pairs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::vector<double> first, second;
        if (opts.kind == CurationKind::InpaintSubset) {
            first = foundation.sample(opts.sampler, rng, sopts);
            const double frac = rng.uniform(opts.min_frac, opts.max_frac);
            const int len = std::clamp(static_cast<int>(std::lround(frac * d)), 1, d);
            const int start = rng.uniform_int(0, d - len);
            ConditionMask mask;
            mask.mask.assign(static_cast<std::size_t>(d), 0);
            mask.known = first;
            for (int j = start; j < start + len; ++j) mask.mask[static_cast<std::size_t>(j)] = 1;
            second = foundation.inpaint_sample(mask, opts.sampler, rng, sopts);
        } else {
            auto duo = shared_latent_duo(foundation, t_share, rng);
            first = std::move(duo.first);
            second = std::move(duo.second);
        }
        const double s_first = checked_score(score, first, "curate_pairs");
        const double s_second = checked_score(score, second, "curate_pairs");
        if (s_first == s_second) {
            ++result.dropped;
            continue;
        }
        CascadePair pair;
        if (s_first > s_second) {
            pair.target = std::move(first);
            pair.condition = std::move(second);
        } else {
            pair.target = std::move(second);
            pair.condition = std::move(first);
        }
        pair.gap = std::abs(s_first - s_second);
        result.pairs.push_back(std::move(pair));
    }
    return result;
}

DiffusionModel widen_with_condition(const DiffusionModel& foundation) {
    require_unconditional(foundation, "widen_with_condition");
    if (foundation.net().has_lora())
        throw ConfigurationError("widen_with_condition: merge or drop adapters before widening");

    const int d = foundation.data_dim();
    const core::Mlp& net = foundation.net();
    const int te = net.time_embed_dim();
    std::vector<int> widths = net.widths();
    widths[0] += d;

    Rng init_rng(0); // every weight below is overwritten
    core::Mlp wide(widths, te, net.activation(), init_rng);
    auto& dst_layers = wide.layers_mut();
    const auto& src_layers = net.layers();
    for (std::size_t li = 0; li < src_layers.size(); ++li) {
        const auto& src_w = src_layers[li].weight.values();
        auto& dst_w = dst_layers[li].weight.mutable_values();
        if (li == 0) {
            // Row blocks of the widened input: data rows keep the foundation
            // weights, the inserted condition rows start at zero (so the
            // widened model is the foundation, bit-exactly, at init), and the
            // time-embedding rows keep the foundation weights.
            const int out = net.widths()[1];
            std::fill(dst_w.begin(), dst_w.end(), 0.0);
            for (int r = 0; r < d + te; ++r) {
                const int dst_r = r < d ? r : r + d;
                for (int c = 0; c < out; ++c)
                    dst_w[static_cast<std::size_t>(dst_r * out + c)] =
                        src_w[static_cast<std::size_t>(r * out + c)];
            }
        } else {
            dst_w = src_w;
        }
        dst_layers[li].bias.mutable_values() = src_layers[li].bias.values();
    }
    return DiffusionModel(std::move(wide), foundation.schedule(), foundation.parameterization(), d,
                          d);
}

void CascadeTrainConfig::validate() const {
    if (steps < 1) throw ContractError("CascadeTrainConfig: steps must be >= 1");
    if (batch_size < 1) throw ContractError("CascadeTrainConfig: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ContractError("CascadeTrainConfig: lr must be positive");
    if (pass_limit < 1) throw ContractError("CascadeTrainConfig: pass_limit must be >= 1");
}

CascadeDmc train_cascade(const DiffusionModel& foundation, const std::vector<CascadePair>& pairs,
                         const CascadeTrainConfig& cfg, Rng& rng, CascadeTrainStats* stats) {
    cfg.validate();
    if (pairs.empty()) throw ContractError("train_cascade: no curated pairs");
    const int d = foundation.data_dim();
    for (const auto& p : pairs) {
        if (static_cast<int>(p.condition.size()) != d || static_cast<int>(p.target.size()) != d)
            throw DimensionError("train_cascade: pair dims do not match the model data_dim " +
                                 std::to_string(d));
    }

    DiffusionModel model = widen_with_condition(foundation);
    core::Adam opt(model.net().trainable_params(), cfg.lr);
    const int npairs = static_cast<int>(pairs.size());
    double final_loss = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<double>> targets;
        std::vector<std::vector<double>> conds;
        targets.reserve(static_cast<std::size_t>(cfg.batch_size));
        conds.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b) {
            const int idx = rng.uniform_int(0, npairs - 1);
            targets.push_back(pairs[static_cast<std::size_t>(idx)].target);
            conds.push_back(pairs[static_cast<std::size_t>(idx)].condition);
        }
        // The condition rides on every row: no classifier-free dropout.
        core::Tensor loss = model.ddpm_loss(targets, rng, &conds);
        opt.zero_grad();
        core::backward(loss);
        opt.step();
        final_loss = loss.item();
    }
    if (stats) {
        stats->steps = cfg.steps;
        stats->final_loss = final_loss;
        stats->dropout_count = 0;
    }
    return CascadeDmc{std::move(model), cfg.kind, cfg.pass_limit};
}

UpsampleResult upsample(const CascadeDmc& cascade, const std::vector<double>& condition,
                        int passes, Rng& rng, SamplerKind kind,
                        const diffusion::SampleOptions& opts) {
    if (passes < 1) throw ContractError("upsample: passes must be >= 1");
    const int cd = cascade.model.cond_dim();
    if (static_cast<int>(condition.size()) != cd)
        throw DimensionError("upsample: condition size " + std::to_string(condition.size()) +
                             " != cond_dim " + std::to_string(cd));

    UpsampleResult result;
    result.passes = passes;
    std::vector<double> cur = condition;
    for (int p = 0; p < passes; ++p) {
        SampleOptions o = opts;
        o.cond = &cur;
        cur = cascade.model.sample(kind, rng, o);
    }
    result.sample = std::move(cur);
    if (passes > 2)
        result.warning = "upsample: " + std::to_string(passes) +
                         " passes exceed the variance-safe limit of 2; sample spread grows with "
                         "every extra pass";
    return result;
}

void save_cascade(const std::string& path, const CascadeDmc& cascade) {
    Checkpoint ckpt;
    ckpt.tag = "cascade";
    ckpt.meta["kind"] = static_cast<double>(static_cast<int>(cascade.kind));
    ckpt.meta["pass_limit"] = static_cast<double>(cascade.pass_limit);
    diffusion::model_to_checkpoint(cascade.model, ckpt, "model/");
    core::save_checkpoint(path, ckpt);
}

CascadeDmc load_cascade(const std::string& path) {
    const Checkpoint ckpt = core::load_checkpoint(path);
    if (ckpt.tag != "cascade")
        throw FormatError("load_cascade: checkpoint tag '" + ckpt.tag + "' is not 'cascade'");
    const int kind_code = static_cast<int>(ckpt.meta_at("kind"));
    if (kind_code < 0 || kind_code > static_cast<int>(CurationKind::SharedLatent))
        throw FormatError("load_cascade: unknown curation kind code " + std::to_string(kind_code));
    const int pass_limit = static_cast<int>(ckpt.meta_at("pass_limit"));
    if (pass_limit < 1) throw FormatError("load_cascade: pass_limit must be >= 1");
    CascadeDmc cascade;
    cascade.model = diffusion::model_from_checkpoint(ckpt, "model/");
    cascade.kind = static_cast<CurationKind>(kind_code);
    cascade.pass_limit = pass_limit;
    return cascade;
}

} // namespace dmc::cascade
