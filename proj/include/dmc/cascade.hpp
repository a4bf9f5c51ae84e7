#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dmc/diffusion.hpp"
#include "dmc/tensor.hpp"

namespace dmc::cascade {

using core::Rng;
using diffusion::DiffusionModel;
using diffusion::SamplerKind;

// Scalar quality score of a full sample (e.g. a Q-backed trajectory value).
using SampleScorer = std::function<double(const std::vector<double>&)>;

// How the curated pair members stay consistent with each other: in-painting a
// contiguous segment of the first member into the second, or decoding both
// from one shared latent at step t_share.
enum class CurationKind { InpaintSubset, SharedLatent };

struct CascadePair {
    std::vector<double> condition; // lower-scored member
    std::vector<double> target;    // higher-scored member
    double gap = 0.0;              // strictly positive score gap
};

struct CurationOptions {
    CurationKind kind = CurationKind::InpaintSubset;
    int t_share = 0; // SharedLatent split step; 0 means T/2
    // In-painted segment length as a fraction of the sample dim.
    double min_frac = 0.25;
    double max_frac = 0.50;
    SamplerKind sampler = SamplerKind::Ddpm; // InpaintSubset generation kernel
    int ddim_stride = 1;
};

struct CurationResult {
    std::vector<CascadePair> pairs;
    int attempts = 0;
    int dropped = 0; // attempts whose members scored exactly equal
};

// Draws n candidate duos from the foundation model, scores both members, and
// keeps strictly ordered pairs oriented so the higher-scored member is the
// target. Equal scores drop the attempt (counted, never an error).
CurationResult curate_pairs(const DiffusionModel& foundation, const SampleScorer& score,
                            const CurationOptions& opts, int n, Rng& rng);

// One reverse chain to step t_share, then two independent stochastic decodes
// of the remaining steps. t_share = 1 leaves only the noiseless final step, so
// the duo coincides; t_share = T shares nothing beyond the initial latent.
std::pair<std::vector<double>, std::vector<double>> shared_latent_duo(const DiffusionModel& model,
                                                                      int t_share, Rng& rng);

// Conditional clone of an unconditional foundation: the condition vector (one
// full sample) enters the first layer through zero-initialized weights, so at
// initialization the widened model reproduces the foundation bit-exactly for
// every condition.
DiffusionModel widen_with_condition(const DiffusionModel& foundation);

struct CascadeDmc {
    DiffusionModel model; // cond_dim == data_dim
    CurationKind kind = CurationKind::InpaintSubset;
    int pass_limit = 1;
};

struct CascadeTrainConfig {
    int steps = 400;
    int batch_size = 32;
    double lr = 1e-3;
    CurationKind kind = CurationKind::InpaintSubset;
    int pass_limit = 1;

    void validate() const;
};

struct CascadeTrainStats {
    int steps = 0;
    double final_loss = 0.0;
    // Conditioning is attached on every row (no classifier-free dropout);
    // the counter documents that contract for audit logs.
    int dropout_count = 0;
};

// Warm-starts a conditional up-sampler from the foundation weights and trains
// it with the standard denoising loss on (target | condition) pairs.
CascadeDmc train_cascade(const DiffusionModel& foundation, const std::vector<CascadePair>& pairs,
                         const CascadeTrainConfig& cfg, Rng& rng,
                         CascadeTrainStats* stats = nullptr);

struct UpsampleResult {
    std::vector<double> sample;
    int passes = 0;
    std::string warning; // set when passes exceed the variance-safe limit of 2
};

// Iterates the conditional sampler, feeding each output back as the next
// condition. passes must be >= 1.
UpsampleResult upsample(const CascadeDmc& cascade, const std::vector<double>& condition,
                        int passes, Rng& rng, SamplerKind kind = SamplerKind::Ddim,
                        const diffusion::SampleOptions& opts = {});

void save_cascade(const std::string& path, const CascadeDmc& cascade);
CascadeDmc load_cascade(const std::string& path);

} // namespace dmc::cascade
