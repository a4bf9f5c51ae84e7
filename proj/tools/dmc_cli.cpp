// dmc — command-line front end for training, aligning, and evaluating
// diffusion models for control on the 1-D navigation task.
//
// Every subcommand reads one sectioned key-value config file, resolves its
// artifact paths against the run directory, and writes into the fixed run
// layout: config.cfg (verbatim copy), checkpoints/, metrics.csv,
// warnings.log. Unknown config sections or keys abort with the offending
// name. All randomness derives from [run] seed, so a rerun with the same
// config and seed reproduces every output byte for byte.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dmc/align.hpp"
#include "dmc/cascade.hpp"
#include "dmc/config.hpp"
#include "dmc/control.hpp"
#include "dmc/dataset.hpp"
#include "dmc/diffusion.hpp"
#include "dmc/errors.hpp"
#include "dmc/metrics.hpp"
#include "dmc/nav1d.hpp"
#include "dmc/pipeline.hpp"
#include "dmc/qvalue.hpp"
#include "dmc/rng.hpp"

namespace fs = std::filesystem;
using dmc::core::ConfigurationError;
using dmc::core::Rng;
using dmc::pipeline::Config;

namespace {

// ---- config schema -----------------------------------------------------------------

struct SectionSchema {
    const char* name;
    std::vector<std::string> keys;
};

const std::vector<SectionSchema>& schema() {
    static const std::vector<SectionSchema> s = {
        {"run", {"seed"}},
        {"world", {"seed", "horizon", "step_size", "partial_lo", "partial_hi"}},
        {"data", {"coverage", "episodes"}},
        {"artifacts", {"dataset", "foundation", "qfunction", "aligned", "cascade"}},
        {"foundation",
         {"kind", "t", "hidden", "time_embed", "steps", "batch_size", "lr", "window", "chunk",
          "uncond_prob"}},
        {"q", {"expectile", "discount", "target_rate", "steps", "batch_size", "hidden", "lr"}},
        {"align",
         {"passes", "stages", "window", "eps_imp", "updates_per_stage", "eval_interval",
          "dpo_groups", "dpo_group_size", "dpo_quantile", "arbitrate_rl", "max_rollbacks",
          "eval_episodes", "selector", "candidates", "sft_reference_rows", "eval_ddim_stride"}},
        {"rl",
         {"method", "truncation_k", "truncation_k_final", "kappa", "kappa_c", "control",
          "clip_eps", "kl_coef", "samples_per_update", "lr", "reward_baseline"}},
        {"dpo", {"gamma", "omega", "pairs_per_update", "lr"}},
        {"sft",
         {"winner_fraction", "threshold_quantile", "synthesize_from_finetuned", "candidates",
          "update_steps", "batch_size", "elbo_draws", "lr", "sampler", "ddim_stride"}},
        {"collapse", {"return_drop", "loss_spike", "median_window"}},
        {"divergence",
         {"enabled", "max_proxy_drop", "min_coherency", "eval_samples", "elbo_draws", "sampler",
          "ddim_stride"}},
        {"online",
         {"enabled", "activation_step", "episodes_per_injection", "buffer_cap", "q_continue",
          "q_steps"}},
        {"cascade",
         {"kind", "t_share", "min_frac", "max_frac", "sampler", "ddim_stride", "pairs", "steps",
          "batch_size", "lr", "pass_limit"}},
        {"eval", {"model", "seeds", "selector", "candidates", "ddim_stride", "n_rollouts"}},
        {"plots", {"svg"}},
    };
    return s;
}

void validate_config(const Config& cfg) {
    for (const auto& section : cfg.sections()) {
        const SectionSchema* found = nullptr;
        for (const auto& s : schema())
            if (section == s.name) found = &s;
        if (!found) throw ConfigurationError("unknown config section '" + section + "'");
        cfg.require_known(section, found->keys);
    }
}

// ---- small parsers -----------------------------------------------------------------

std::vector<int> parse_int_list(const std::string& text, const std::string& entry) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigurationError("config entry '" + entry + "': bad integer list '" + text +
                                     "'");
        }
    }
    if (out.empty())
        throw ConfigurationError("config entry '" + entry + "': empty integer list");
    return out;
}

template <typename T>
T parse_enum(const std::string& v, const std::vector<std::pair<std::string, T>>& table,
             const std::string& entry) {
    for (const auto& [name, value] : table)
        if (v == name) return value;
    std::string allowed;
    for (const auto& [name, value] : table) {
        if (!allowed.empty()) allowed += ", ";
        allowed += name;
    }
    throw ConfigurationError("config entry '" + entry + "': '" + v + "' is not one of {" +
                             allowed + "}");
}

dmc::envs::Coverage parse_coverage(const std::string& v, const std::string& entry) {
    using dmc::envs::Coverage;
    return parse_enum<Coverage>(v,
                                {{"partial", Coverage::Partial},
                                 {"full", Coverage::Full},
                                 {"expert", Coverage::Expert}},
                                entry);
}

dmc::diffusion::SamplerKind parse_sampler(const std::string& v, const std::string& entry) {
    using dmc::diffusion::SamplerKind;
    return parse_enum<SamplerKind>(
        v, {{"ddpm", SamplerKind::Ddpm}, {"ddim", SamplerKind::Ddim}}, entry);
}

dmc::control::ActionSelector parse_selector(const Config& cfg, const std::string& section) {
    dmc::control::ActionSelector sel;
    using dmc::control::SelectorKind;
    sel.kind = parse_enum<SelectorKind>(cfg.get_string_or(section, "selector", "expectation"),
                                        {{"expectation", SelectorKind::Expectation},
                                         {"greedy-q", SelectorKind::GreedyQ}},
                                        section + ".selector");
    sel.candidates = static_cast<int>(cfg.get_int_or(section, "candidates", 8));
    return sel;
}

// ---- run-directory plumbing ----------------------------------------------------------

struct RunContext {
    fs::path run_dir;
    Config cfg;
    std::uint64_t seed = 0;
};

RunContext open_run(const std::string& config_path, const std::string& run_dir) {
    RunContext ctx;
    ctx.cfg = Config::load(config_path);
    validate_config(ctx.cfg);
    ctx.run_dir = fs::path(run_dir);
    fs::create_directories(ctx.run_dir / "checkpoints");
    std::ofstream copy(ctx.run_dir / "config.cfg", std::ios::binary);
    copy << ctx.cfg.text();
    ctx.seed = static_cast<std::uint64_t>(ctx.cfg.get_int_or("run", "seed", 1));
    return ctx;
}

fs::path artifact_path(const RunContext& ctx, const std::string& key,
                       const std::string& fallback) {
    const std::string v = ctx.cfg.get_string_or("artifacts", key, fallback);
    const fs::path p(v);
    return p.is_absolute() ? p : ctx.run_dir / p;
}

void write_warnings(const RunContext& ctx, const std::vector<std::string>& warnings) {
    std::ofstream out(ctx.run_dir / "warnings.log", std::ios::binary);
    for (const auto& w : warnings) out << w << '\n';
}

bool resumed(bool resume, const fs::path& artifact, const char* what) {
    if (resume && fs::exists(artifact)) {
        std::cout << what << ": " << artifact.string() << " already present, skipping\n";
        return true;
    }
    return false;
}

// ---- config -> library structs -------------------------------------------------------

dmc::envs::Nav1DConfig world_from(const Config& cfg) {
    auto world = dmc::envs::make_nav1d_world(
        static_cast<std::uint64_t>(cfg.get_int_or("world", "seed", 3)),
        static_cast<int>(cfg.get_int_or("world", "horizon", 8)),
        cfg.get_double_or("world", "step_size", 0.25));
    world.partial_start_lo = cfg.get_double_or("world", "partial_lo", -1.0);
    world.partial_start_hi = cfg.get_double_or("world", "partial_hi", 0.0);
    return world;
}

dmc::qvalue::IqlConfig iql_from(const Config& cfg) {
    dmc::qvalue::IqlConfig q;
    q.expectile = cfg.get_double_or("q", "expectile", q.expectile);
    q.discount = cfg.get_double_or("q", "discount", q.discount);
    q.target_rate = cfg.get_double_or("q", "target_rate", q.target_rate);
    q.steps = static_cast<int>(cfg.get_int_or("q", "steps", q.steps));
    q.batch_size = static_cast<int>(cfg.get_int_or("q", "batch_size", q.batch_size));
    q.hidden = static_cast<int>(cfg.get_int_or("q", "hidden", q.hidden));
    q.lr = cfg.get_double_or("q", "lr", q.lr);
    return q;
}

dmc::pipeline::SequenceConfig sequence_from(const Config& cfg) {
    using namespace dmc;
    pipeline::SequenceConfig sc;

    sc.schedule.stages.clear();
    std::stringstream ss(cfg.get_string_or("align", "stages", "rl,dpo,sft"));
    std::string item;
    while (std::getline(ss, item, ','))
        sc.schedule.stages.push_back(pipeline::stage_from_name(item));
    sc.schedule.passes = static_cast<int>(cfg.get_int_or("align", "passes", 2));
    sc.schedule.window = static_cast<int>(cfg.get_int_or("align", "window", 5));
    sc.schedule.eps_imp = cfg.get_double_or("align", "eps_imp", 0.01);
    sc.updates_per_stage =
        static_cast<int>(cfg.get_int_or("align", "updates_per_stage", sc.updates_per_stage));
    sc.eval_interval = static_cast<int>(cfg.get_int_or("align", "eval_interval", sc.eval_interval));
    sc.dpo_groups = static_cast<int>(cfg.get_int_or("align", "dpo_groups", sc.dpo_groups));
    sc.dpo_group_size =
        static_cast<int>(cfg.get_int_or("align", "dpo_group_size", sc.dpo_group_size));
    sc.dpo_quantile = cfg.get_double_or("align", "dpo_quantile", sc.dpo_quantile);
    sc.arbitrate_rl = cfg.get_bool_or("align", "arbitrate_rl", false);
    sc.max_rollbacks_per_stage =
        static_cast<int>(cfg.get_int_or("align", "max_rollbacks", sc.max_rollbacks_per_stage));

    sc.rl.method = parse_enum<align::RlMethod>(
        cfg.get_string_or("rl", "method", "reinforce"),
        {{"reinforce", align::RlMethod::Reinforce}, {"qvpg", align::RlMethod::QvPg}}, "rl.method");
    sc.rl.truncation_k = static_cast<int>(cfg.get_int_or("rl", "truncation_k", sc.rl.truncation_k));
    sc.rl.truncation_k_final =
        static_cast<int>(cfg.get_int_or("rl", "truncation_k_final", sc.rl.truncation_k_final));
    sc.rl.kappa = parse_enum<align::KappaKind>(
        cfg.get_string_or("rl", "kappa", "geometric"),
        {{"geometric", align::KappaKind::Geometric},
         {"retrospective", align::KappaKind::Retrospective}},
        "rl.kappa");
    sc.rl.kappa_c = cfg.get_double_or("rl", "kappa_c", sc.rl.kappa_c);
    sc.rl.control = parse_enum<align::DivergenceControl>(
        cfg.get_string_or("rl", "control", "ppo-clip"),
        {{"ppo-clip", align::DivergenceControl::PpoClip},
         {"kl", align::DivergenceControl::KlPenalty}},
        "rl.control");
    sc.rl.clip_eps = cfg.get_double_or("rl", "clip_eps", sc.rl.clip_eps);
    sc.rl.kl_coef = cfg.get_double_or("rl", "kl_coef", sc.rl.kl_coef);
    sc.rl.samples_per_update =
        static_cast<int>(cfg.get_int_or("rl", "samples_per_update", sc.rl.samples_per_update));
    sc.rl.lr = cfg.get_double_or("rl", "lr", sc.rl.lr);
    sc.rl.reward_baseline = cfg.get_bool_or("rl", "reward_baseline", sc.rl.reward_baseline);

    sc.dpo.gamma = cfg.get_double_or("dpo", "gamma", sc.dpo.gamma);
    sc.dpo.omega = parse_enum<align::DpoWeight>(
        cfg.get_string_or("dpo", "omega", "constant"),
        {{"constant", align::DpoWeight::Constant}, {"snr", align::DpoWeight::Snr}}, "dpo.omega");
    sc.dpo.pairs_per_update =
        static_cast<int>(cfg.get_int_or("dpo", "pairs_per_update", sc.dpo.pairs_per_update));
    sc.dpo.lr = cfg.get_double_or("dpo", "lr", sc.dpo.lr);

    sc.sft.winner_fraction = cfg.get_double_or("sft", "winner_fraction", sc.sft.winner_fraction);
    sc.sft.threshold_quantile =
        cfg.get_double_or("sft", "threshold_quantile", sc.sft.threshold_quantile);
    sc.sft.synthesize_from_finetuned =
        cfg.get_bool_or("sft", "synthesize_from_finetuned", sc.sft.synthesize_from_finetuned);
    sc.sft.candidates = static_cast<int>(cfg.get_int_or("sft", "candidates", sc.sft.candidates));
    sc.sft.update_steps =
        static_cast<int>(cfg.get_int_or("sft", "update_steps", sc.sft.update_steps));
    sc.sft.batch_size = static_cast<int>(cfg.get_int_or("sft", "batch_size", sc.sft.batch_size));
    sc.sft.elbo_draws = static_cast<int>(cfg.get_int_or("sft", "elbo_draws", sc.sft.elbo_draws));
    sc.sft.lr = cfg.get_double_or("sft", "lr", sc.sft.lr);
    sc.sft.sampler = parse_sampler(cfg.get_string_or("sft", "sampler", "ddim"), "sft.sampler");
    sc.sft.ddim_stride = static_cast<int>(cfg.get_int_or("sft", "ddim_stride", sc.sft.ddim_stride));

    sc.collapse.return_drop = cfg.get_double_or("collapse", "return_drop", sc.collapse.return_drop);
    sc.collapse.loss_spike = cfg.get_double_or("collapse", "loss_spike", sc.collapse.loss_spike);
    sc.collapse.median_window =
        static_cast<int>(cfg.get_int_or("collapse", "median_window", sc.collapse.median_window));

    if (cfg.get_bool_or("divergence", "enabled", false)) {
        align::DivergenceBudget budget;
        budget.max_proxy_drop = cfg.get_double_or("divergence", "max_proxy_drop", 1.0);
        budget.min_coherency = cfg.get_double_or("divergence", "min_coherency", 0.0);
        budget.eval_samples =
            static_cast<int>(cfg.get_int_or("divergence", "eval_samples", budget.eval_samples));
        budget.elbo_draws =
            static_cast<int>(cfg.get_int_or("divergence", "elbo_draws", budget.elbo_draws));
        budget.sampler =
            parse_sampler(cfg.get_string_or("divergence", "sampler", "ddpm"), "divergence.sampler");
        budget.ddim_stride =
            static_cast<int>(cfg.get_int_or("divergence", "ddim_stride", budget.ddim_stride));
        sc.divergence = budget;
    }
    return sc;
}

dmc::pipeline::OnlineFinetuneConfig online_from(const Config& cfg) {
    dmc::pipeline::OnlineFinetuneConfig oc;
    oc.enabled = cfg.get_bool_or("online", "enabled", false);
    oc.activation_step = cfg.get_int_or("online", "activation_step", oc.activation_step);
    oc.episodes_per_injection = static_cast<int>(
        cfg.get_int_or("online", "episodes_per_injection", oc.episodes_per_injection));
    oc.buffer_cap = static_cast<std::size_t>(
        cfg.get_int_or("online", "buffer_cap", static_cast<long>(oc.buffer_cap)));
    oc.q_continue = cfg.get_bool_or("online", "q_continue", oc.q_continue);
    oc.q_steps = static_cast<int>(cfg.get_int_or("online", "q_steps", oc.q_steps));
    return oc;
}

std::string foundation_kind(const Config& cfg) {
    const std::string kind = cfg.get_string_or("foundation", "kind", "policy");
    if (kind != "policy" && kind != "planner")
        throw ConfigurationError("config entry 'foundation.kind': '" + kind +
                                 "' is not one of {policy, planner}");
    return kind;
}

dmc::envs::OfflineDataset load_dataset(const RunContext& ctx) {
    return dmc::envs::read_dataset(artifact_path(ctx, "dataset", "data.ds").string());
}

dmc::control::PolicyDmc wrap_policy(const RunContext& ctx, dmc::diffusion::DiffusionModel model) {
    const int window = static_cast<int>(ctx.cfg.get_int_or("foundation", "window", 1));
    const int chunk = static_cast<int>(ctx.cfg.get_int_or("foundation", "chunk", 1));
    return dmc::control::PolicyDmc(std::move(model), 2, 1, window, chunk);
}

// ---- subcommands --------------------------------------------------------------------

int cmd_synth_data(const RunContext& ctx, const std::string& coverage_override) {
    const auto world = world_from(ctx.cfg);
    const std::string cov_text = !coverage_override.empty()
                                     ? coverage_override
                                     : ctx.cfg.get_string_or("data", "coverage", "partial");
    const auto coverage = parse_coverage(cov_text, "data.coverage");
    const int episodes = static_cast<int>(ctx.cfg.get_int_or("data", "episodes", 200));

    Rng rng(ctx.seed);
    const auto data = dmc::envs::gen_dataset(world, coverage, episodes, rng);
    const fs::path path = artifact_path(ctx, "dataset", "data.ds");
    fs::create_directories(path.parent_path());
    dmc::envs::write_dataset(path.string(), data);

    // Round-trip check: the stored artifact must replay exactly.
    const auto back = dmc::envs::read_dataset(path.string());
    if (back.num_transitions() != data.num_transitions() ||
        back.mean_return() != data.mean_return())
        throw dmc::core::FormatError("dataset round trip mismatch at " + path.string());

    std::cout << "synth-data: " << cov_text << " coverage, " << data.episodes.size()
              << " episodes, " << data.num_transitions() << " transitions, mean return "
              << data.mean_return() << "\n    -> " << path.string() << "\n";
    return 0;
}

int cmd_train_foundation(const RunContext& ctx, bool resume) {
    const fs::path out = artifact_path(ctx, "foundation", "checkpoints/foundation.dmc");
    if (resumed(resume, out, "train-foundation")) return 0;
    const auto data = load_dataset(ctx);
    const auto& cfg = ctx.cfg;
    Rng rng(ctx.seed);

    const std::string entry = "foundation.hidden";
    if (foundation_kind(cfg) == "policy") {
        dmc::pipeline::PolicyTrainConfig pc;
        pc.T = static_cast<int>(cfg.get_int_or("foundation", "t", pc.T));
        pc.hidden = parse_int_list(cfg.get_string_or("foundation", "hidden", "64,64"), entry);
        pc.time_embed = static_cast<int>(cfg.get_int_or("foundation", "time_embed", pc.time_embed));
        pc.steps = static_cast<int>(cfg.get_int_or("foundation", "steps", pc.steps));
        pc.batch_size = static_cast<int>(cfg.get_int_or("foundation", "batch_size", pc.batch_size));
        pc.lr = cfg.get_double_or("foundation", "lr", pc.lr);
        pc.window = static_cast<int>(cfg.get_int_or("foundation", "window", pc.window));
        pc.chunk = static_cast<int>(cfg.get_int_or("foundation", "chunk", pc.chunk));
        const auto policy = dmc::pipeline::train_policy_foundation(data, pc, rng);
        dmc::diffusion::save_model(out.string(), policy.model());
        std::cout << "train-foundation: policy model (" << pc.steps << " steps) -> "
                  << out.string() << "\n";
    } else {
        const auto world = world_from(cfg);
        dmc::pipeline::PlannerTrainConfig pc;
        pc.T = static_cast<int>(cfg.get_int_or("foundation", "t", pc.T));
        pc.hidden = parse_int_list(cfg.get_string_or("foundation", "hidden", "64,64"), entry);
        pc.time_embed = static_cast<int>(cfg.get_int_or("foundation", "time_embed", pc.time_embed));
        pc.steps = static_cast<int>(cfg.get_int_or("foundation", "steps", pc.steps));
        pc.batch_size = static_cast<int>(cfg.get_int_or("foundation", "batch_size", pc.batch_size));
        pc.lr = cfg.get_double_or("foundation", "lr", pc.lr);
        pc.uncond_prob = cfg.get_double_or("foundation", "uncond_prob", pc.uncond_prob);
        const auto planner =
            dmc::pipeline::train_planner_foundation(data, world.horizon, 1, 1, pc, rng);
        dmc::diffusion::save_model(out.string(), planner.model());
        std::cout << "train-foundation: planner model (" << pc.steps << " steps) -> "
                  << out.string() << "\n";
    }
    return 0;
}

int cmd_train_q(const RunContext& ctx, bool resume) {
    const fs::path out = artifact_path(ctx, "qfunction", "checkpoints/qfunction.dmc");
    if (resumed(resume, out, "train-q")) return 0;
    const auto data = load_dataset(ctx);
    const auto cfg = iql_from(ctx.cfg);
    Rng rng(ctx.seed);
    const auto qf = dmc::qvalue::train_iql(data, cfg, rng);
    dmc::qvalue::save_qfunction(out.string(), qf);
    std::cout << "train-q: " << cfg.steps << " IQL steps -> " << out.string() << "\n";
    return 0;
}

int cmd_align(const RunContext& ctx, long passes_override, bool resume) {
    const fs::path out = artifact_path(ctx, "aligned", "checkpoints/aligned.dmc");
    const fs::path metrics_path = ctx.run_dir / "metrics.csv";
    if (resumed(resume, out, "align")) return 0;

    if (foundation_kind(ctx.cfg) != "policy")
        throw ConfigurationError("align: only policy foundations are supported");

    const auto world = world_from(ctx.cfg);
    const auto data = load_dataset(ctx);
    auto policy = wrap_policy(
        ctx, dmc::diffusion::load_model(
                 artifact_path(ctx, "foundation", "checkpoints/foundation.dmc").string()));
    auto qf = dmc::qvalue::load_qfunction(
        artifact_path(ctx, "qfunction", "checkpoints/qfunction.dmc").string());

    auto sc = sequence_from(ctx.cfg);
    if (passes_override >= 0) sc.schedule.passes = static_cast<int>(passes_override);
    sc.seed_label = ctx.seed;

    dmc::pipeline::Nav1dPolicyHooksConfig hc;
    hc.eval_episodes = static_cast<int>(ctx.cfg.get_int_or("align", "eval_episodes", 16));
    hc.selector = parse_selector(ctx.cfg, "align");
    hc.eval_ddim_stride = static_cast<int>(ctx.cfg.get_int_or("align", "eval_ddim_stride", 1));
    hc.sft_reference_rows =
        static_cast<int>(ctx.cfg.get_int_or("align", "sft_reference_rows", 256));
    auto hooks = dmc::pipeline::make_nav1d_policy_hooks(policy, qf, world, data, hc);

    Rng rng(ctx.seed);
    if (sc.divergence) {
        // Baseline: the foundation's mean ELBO proxy over dataset reference rows.
        const std::size_t n = std::min<std::size_t>(
            static_cast<std::size_t>(sc.divergence->eval_samples), hooks.sft_rows.size());
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            acc += policy.model().elbo_proxy(hooks.sft_rows[i], sc.divergence->elbo_draws, rng,
                                             &hooks.sft_conds[i]);
        sc.divergence->baseline_proxy = acc / static_cast<double>(n);
    }

    const auto online_cfg = online_from(ctx.cfg);
    auto buffer = std::make_shared<dmc::envs::OfflineDataset>(data);
    const auto iql = iql_from(ctx.cfg);
    if (online_cfg.enabled) {
        const auto controller = dmc::pipeline::policy_controller(policy, hc.selector);
        hooks.online = [&, controller, buffer](long wall, Rng& r) {
            const auto res = dmc::pipeline::online_inject(controller, &world, *buffer, online_cfg,
                                                          wall, &qf, &iql, r);
            return res.warning;
        };
    }

    hooks.on_stage_end = [&](dmc::pipeline::StageKind stage, int pass,
                             const dmc::diffusion::DiffusionModel& m) {
        const fs::path ckpt = ctx.run_dir / "checkpoints" /
                              ("pass" + std::to_string(pass) + "-" +
                               dmc::pipeline::stage_name(stage) + ".dmc");
        dmc::diffusion::save_model(ckpt.string(), m);
    };

    const auto res = dmc::pipeline::run_sequence(policy.model(), sc, hooks, rng);

    dmc::diffusion::save_model(out.string(), policy.model());
    res.log.write_csv(metrics_path.string());
    write_warnings(ctx, res.warnings);

    std::cout << "align: " << res.stage_log.size() << " stages, " << res.wall_steps
              << " updates, return " << res.foundation_return << " -> " << res.final_return
              << "\n    metrics: " << metrics_path.string() << "\n    model:   " << out.string()
              << "\n";
    if (!res.warnings.empty())
        std::cout << "    warnings: " << res.warnings.size() << " (see warnings.log)\n";
    return 0;
}

int cmd_cascade(const RunContext& ctx, bool resume) {
    const fs::path out = artifact_path(ctx, "cascade", "checkpoints/cascade.dmc");
    if (resumed(resume, out, "cascade")) return 0;
    if (foundation_kind(ctx.cfg) != "planner")
        throw ConfigurationError("cascade: a planner foundation is required");

    const auto world = world_from(ctx.cfg);
    auto foundation = dmc::diffusion::load_model(
        artifact_path(ctx, "foundation", "checkpoints/foundation.dmc").string());
    const dmc::control::PlannerDmc planner(foundation.clone(), world.horizon, 1, 1);
    const auto qf = dmc::qvalue::load_qfunction(
        artifact_path(ctx, "qfunction", "checkpoints/qfunction.dmc").string());
    const auto score = dmc::pipeline::plan_q_scorer(planner, qf, world);

    const auto& cfg = ctx.cfg;
    dmc::cascade::CurationOptions opts;
    opts.kind = parse_enum<dmc::cascade::CurationKind>(
        cfg.get_string_or("cascade", "kind", "inpaint-subset"),
        {{"inpaint-subset", dmc::cascade::CurationKind::InpaintSubset},
         {"shared-latent", dmc::cascade::CurationKind::SharedLatent}},
        "cascade.kind");
    opts.t_share = static_cast<int>(cfg.get_int_or("cascade", "t_share", 0));
    opts.min_frac = cfg.get_double_or("cascade", "min_frac", opts.min_frac);
    opts.max_frac = cfg.get_double_or("cascade", "max_frac", opts.max_frac);
    opts.sampler = parse_sampler(cfg.get_string_or("cascade", "sampler", "ddpm"),
                                 "cascade.sampler");
    opts.ddim_stride = static_cast<int>(cfg.get_int_or("cascade", "ddim_stride", 1));

    Rng rng(ctx.seed);
    const int pairs = static_cast<int>(cfg.get_int_or("cascade", "pairs", 256));
    const auto curated = dmc::cascade::curate_pairs(foundation, score, opts, pairs, rng);

    dmc::cascade::CascadeTrainConfig tc;
    tc.steps = static_cast<int>(cfg.get_int_or("cascade", "steps", tc.steps));
    tc.batch_size = static_cast<int>(cfg.get_int_or("cascade", "batch_size", tc.batch_size));
    tc.lr = cfg.get_double_or("cascade", "lr", tc.lr);
    tc.kind = opts.kind;
    tc.pass_limit = static_cast<int>(cfg.get_int_or("cascade", "pass_limit", 2));

    dmc::cascade::CascadeTrainStats stats;
    const auto cascade = dmc::cascade::train_cascade(foundation, curated.pairs, tc, rng, &stats);
    dmc::cascade::save_cascade(out.string(), cascade);

    std::cout << "cascade: " << curated.pairs.size() << " pairs (" << curated.dropped
              << " dropped of " << curated.attempts << " attempts), " << stats.steps
              << " steps, final loss " << stats.final_loss << "\n    -> " << out.string() << "\n";
    return 0;
}

int cmd_eval(const RunContext& ctx, long seeds_override) {
    const auto world = world_from(ctx.cfg);
    const auto& cfg = ctx.cfg;
    const int episodes = static_cast<int>(seeds_override > 0
                                              ? seeds_override
                                              : cfg.get_int_or("eval", "seeds", 64));
    const std::string which = cfg.get_string_or("eval", "model", "aligned");

    dmc::diffusion::SampleOptions so;
    so.ddim_stride = static_cast<int>(cfg.get_int_or("eval", "ddim_stride", 1));

    dmc::qvalue::QFunction qf;
    auto need_q = [&]() {
        qf = dmc::qvalue::load_qfunction(
            artifact_path(ctx, "qfunction", "checkpoints/qfunction.dmc").string());
    };

    dmc::pipeline::Controller controller;
    dmc::control::PolicyDmc policy;   // keep wrappers alive through evaluation
    dmc::control::PlannerDmc planner;
    if (which == "expert") {
        controller = dmc::pipeline::expert_controller();
    } else if (which == "zero") {
        controller = dmc::pipeline::zero_controller();
    } else if (which == "foundation" && foundation_kind(cfg) == "planner") {
        planner = dmc::control::PlannerDmc(
            dmc::diffusion::load_model(
                artifact_path(ctx, "foundation", "checkpoints/foundation.dmc").string()),
            world.horizon, 1, 1);
        need_q();
        const int rollouts = static_cast<int>(cfg.get_int_or("eval", "n_rollouts", 8));
        controller = dmc::pipeline::planner_controller(
            planner, rollouts, dmc::pipeline::plan_q_scorer(planner, qf, world),
            dmc::diffusion::SamplerKind::Ddim, so);
    } else if (which == "foundation" || which == "aligned") {
        const char* fallback = which == "foundation" ? "checkpoints/foundation.dmc"
                                                     : "checkpoints/aligned.dmc";
        policy = wrap_policy(ctx, dmc::diffusion::load_model(
                                      artifact_path(ctx, which, fallback).string()));
        auto sel = parse_selector(cfg, "eval");
        if (sel.kind == dmc::control::SelectorKind::GreedyQ) {
            need_q();
            sel.q = [&qf](const std::vector<double>& obs, const std::vector<double>& action) {
                return qf.q(obs, action);
            };
        }
        controller = dmc::pipeline::policy_controller(policy, sel,
                                                      dmc::diffusion::SamplerKind::Ddim, so);
    } else {
        throw ConfigurationError("config entry 'eval.model': '" + which +
                                 "' is not one of {foundation, aligned, expert, zero}");
    }

    dmc::envs::OfflineDataset data;
    const fs::path data_path = artifact_path(ctx, "dataset", "data.ds");
    const bool have_data = fs::exists(data_path);
    if (have_data) data = dmc::envs::read_dataset(data_path.string());

    std::vector<double> returns;
    const auto er = dmc::pipeline::evaluate_controller(world, episodes, controller,
                                                       have_data ? &data : nullptr, &returns);

    const fs::path out = ctx.run_dir / "eval.csv";
    {
        std::ofstream f(out, std::ios::binary);
        f << "episode,seed,return\n";
        f.precision(17);
        for (int i = 0; i < episodes; ++i)
            f << i << ',' << (dmc::pipeline::kEvalSeedBase + static_cast<std::uint64_t>(i)) << ','
              << returns[static_cast<std::size_t>(i)] << '\n';
    }
    std::cout << "eval: " << which << " over " << episodes << " episodes: mean "
              << er.mean_return << ", std " << er.std_return << ", coherency " << er.coherency
              << "\n    -> " << out.string() << "\n";
    return 0;
}

// ---- plots ---------------------------------------------------------------------------

std::string fmt(double v, int prec = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    return buf;
}

struct Series {
    std::vector<double> x, y;
};

// Minimal hand-rolled SVG line chart: optional ±band polygon, one polyline per
// series, and an optional dashed vertical marker (the online activation step).
void write_svg(const fs::path& path, const std::string& title, const Series& mean,
               const Series* lo, const Series* hi, double marker_x, bool marker) {
    const double W = 720, H = 420, L = 64, R = 20, T = 36, B = 44;
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    auto widen = [&](const Series& s) {
        for (double v : s.x) { xmin = std::min(xmin, v); xmax = std::max(xmax, v); }
        for (double v : s.y) { ymin = std::min(ymin, v); ymax = std::max(ymax, v); }
    };
    widen(mean);
    if (lo) widen(*lo);
    if (hi) widen(*hi);
    if (!(xmax > xmin)) xmax = xmin + 1.0;
    if (!(ymax > ymin)) ymax = ymin + 1.0;
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;

    auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
    auto pts = [&](const Series& s, bool reversed) {
        std::string out;
        const std::size_t n = s.x.size();
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = reversed ? n - 1 - k : k;
            out += fmt(px(s.x[i]), 7) + "," + fmt(py(s.y[i]), 7) + " ";
        }
        return out;
    };

    std::ofstream f(path, std::ios::binary);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\" "
         "font-family=\"sans-serif\">" << title << "</text>\n";
    if (lo && hi && !lo->x.empty())
        f << "<polygon points=\"" << pts(*hi, false) << pts(*lo, true)
          << "\" fill=\"#aec7e8\" fill-opacity=\"0.5\" stroke=\"none\"/>\n";
    if (marker && marker_x >= xmin && marker_x <= xmax)
        f << "<line x1=\"" << fmt(px(marker_x)) << "\" y1=\"" << T << "\" x2=\""
          << fmt(px(marker_x)) << "\" y2=\"" << H - B
          << "\" stroke=\"#e0b400\" stroke-width=\"2\" stroke-dasharray=\"6,4\"/>\n";
    f << "<polyline points=\"" << pts(mean, false)
      << "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << L << "\" y=\"" << H - B + 18
      << "\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\">" << fmt(xmin)
      << "</text>\n"
      << "<text x=\"" << W - R << "\" y=\"" << H - B + 18
      << "\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"middle\">" << fmt(xmax)
      << "</text>\n"
      << "<text x=\"" << L - 8 << "\" y=\"" << H - B + 4
      << "\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"end\">" << fmt(ymin)
      << "</text>\n"
      << "<text x=\"" << L - 8 << "\" y=\"" << T + 4
      << "\" font-size=\"12\" font-family=\"sans-serif\" text-anchor=\"end\">" << fmt(ymax)
      << "</text>\n</svg>\n";
}

int cmd_export_plots(const RunContext& ctx) {
    const fs::path metrics_path = ctx.run_dir / "metrics.csv";
    const auto log = dmc::pipeline::MetricsLog::read_csv(metrics_path.string());
    const fs::path plot_dir = ctx.run_dir / "plots";
    fs::create_directories(plot_dir);

    const fs::path curve = plot_dir / "learning_curve.csv";
    {
        std::ofstream f(curve, std::ios::binary);
        f << "step,stage,return_mean,return_std,coherency\n";
        f.precision(17);
        for (const auto& row : log.rows())
            f << row.step << ',' << row.stage << ',' << row.return_mean << ',' << row.return_std
              << ',' << row.coherency << '\n';
    }

    int files = 1;
    if (ctx.cfg.get_bool_or("plots", "svg", true)) {
        Series mean, lo, hi, coh;
        for (const auto& row : log.rows()) {
            const double step = static_cast<double>(row.step);
            mean.x.push_back(step);
            mean.y.push_back(row.return_mean);
            lo.x.push_back(step);
            lo.y.push_back(row.return_mean - row.return_std);
            hi.x.push_back(step);
            hi.y.push_back(row.return_mean + row.return_std);
            coh.x.push_back(step);
            coh.y.push_back(row.coherency);
        }
        const auto online = online_from(ctx.cfg);
        const bool marker = online.enabled;
        const double marker_x = static_cast<double>(online.activation_step);
        if (!mean.x.empty()) {
            write_svg(plot_dir / "return.svg", "Evaluation return vs wall step", mean, &lo, &hi,
                      marker_x, marker);
            write_svg(plot_dir / "coherency.svg", "Coherency vs wall step", coh, nullptr, nullptr,
                      marker_x, marker);
            files += 2;
        }
    }
    std::cout << "export-plots: " << log.size() << " rows -> " << plot_dir.string() << " ("
              << files << " files)\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dmc — small diffusion models for control: training, alignment, evaluation"};
    app.require_subcommand(1);

    std::string config_path;
    std::string run_dir;
    app.add_option("-c,--config", config_path, "Path to the run config file")->required();
    app.add_option("-r,--run-dir", run_dir, "Run directory for artifacts")->required();

    bool resume = false;
    app.add_flag("--resume", resume,
                 "Skip a subcommand whose final artifact already exists");

    auto* synth = app.add_subcommand("synth-data", "Generate and store an offline dataset");
    std::string coverage_override;
    synth->add_option("--coverage", coverage_override,
                      "Override [data] coverage: partial | full | expert");

    auto* train_f =
        app.add_subcommand("train-foundation", "Train the foundation model on the dataset");
    auto* train_q = app.add_subcommand("train-q", "Train the IQL critic on the dataset");

    auto* align = app.add_subcommand("align", "Run sequential alignment on the foundation");
    long passes_override = -1;
    align->add_option("--passes", passes_override, "Override [align] passes");

    auto* cascade =
        app.add_subcommand("cascade", "Curate pairs and train a cascade on the foundation");

    auto* eval = app.add_subcommand("eval", "Evaluate a stored model over fixed episode seeds");
    long seeds_override = 0;
    eval->add_option("--seeds", seeds_override, "Number of fixed episode seeds");

    auto* plots = app.add_subcommand("export-plots",
                                     "Export learning-curve CSV and SVG charts from metrics.csv");

    CLI11_PARSE(app, argc, argv);

    try {
        const RunContext ctx = open_run(config_path, run_dir);
        if (synth->parsed()) return cmd_synth_data(ctx, coverage_override);
        if (train_f->parsed()) return cmd_train_foundation(ctx, resume);
        if (train_q->parsed()) return cmd_train_q(ctx, resume);
        if (align->parsed()) return cmd_align(ctx, passes_override, resume);
        if (cascade->parsed()) return cmd_cascade(ctx, resume);
        if (eval->parsed()) return cmd_eval(ctx, seeds_override);
        if (plots->parsed()) return cmd_export_plots(ctx);
    } catch (const dmc::core::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const dmc::core::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const dmc::core::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const dmc::core::ConfigurationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
