#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "dmc/align.hpp"
#include "dmc/config.hpp"
#include "dmc/control.hpp"
#include "dmc/dataset.hpp"
#include "dmc/errors.hpp"
#include "dmc/metrics.hpp"
#include "dmc/mlp.hpp"
#include "dmc/nav1d.hpp"
#include "dmc/pipeline.hpp"
#include "dmc/qvalue.hpp"
#include "dmc/rng.hpp"
#include "doctest.h"

using namespace dmc;
using namespace dmc::pipeline;
using core::ConfigurationError;
using core::ContractError;
using core::DimensionError;
using core::FormatError;
using core::Mlp;
using core::Rng;
using core::Tensor;
using diffusion::DiffusionModel;
using diffusion::SamplerKind;

namespace {

// A 4-step world with fixed centers so closed-form replays stay hand-checkable.
envs::Nav1DConfig tiny_world() {
    envs::Nav1DConfig w;
    w.horizon = 4;
    w.step_size = 0.25;
    w.mu = {0.1, -0.2, 0.3, 0.0};
    w.sigma = {0.2, 0.3, 0.25, 0.15};
    return w;
}

// Unconditional scalar diffusion model, small enough for per-test training.
DiffusionModel tiny_model(std::uint64_t seed, int cond_dim = 0) {
    Rng rng(seed);
    const int te = 4;
    Mlp net({1 + cond_dim + te, 16, 1}, te, core::Activation::Tanh, rng);
    return DiffusionModel(std::move(net),
                          diffusion::make_schedule(diffusion::ScheduleKind::Cosine, 8),
                          diffusion::Parameterization::Epsilon, 1, cond_dim);
}

std::vector<double> flat_weights(const DiffusionModel& m) {
    std::vector<double> out;
    for (const auto& layer : m.net().layers()) {
        out.insert(out.end(), layer.weight.values().begin(), layer.weight.values().end());
        out.insert(out.end(), layer.bias.values().begin(), layer.bias.values().end());
    }
    return out;
}

// Minimal hooks: reward prefers samples near 0.7, evaluation reports the mean
// reward of a fixed-seed sample batch.
SequenceHooks basic_hooks() {
    SequenceHooks hooks;
    hooks.reward = [](const std::vector<double>& x0, const std::vector<double>&) {
        const double d = x0[0] - 0.7;
        return std::exp(-d * d / 0.08);
    };
    hooks.scorer = [](const Tensor& x0_row, const std::vector<double>&) {
        return core::neg(core::mean(core::square(core::add_scalar(x0_row, -0.7))));
    };
    hooks.evaluate = [](const DiffusionModel& m) {
        Rng rng(424242);
        double acc = 0.0;
        const int n = 16;
        for (int i = 0; i < n; ++i) {
            const double x = m.sample(SamplerKind::Ddim, rng)[0];
            const double d = x - 0.7;
            acc += std::exp(-d * d / 0.08);
        }
        EvalResult er;
        er.mean_return = acc / n;
        er.episodes = n;
        return er;
    };
    return hooks;
}

SequenceConfig basic_config() {
    SequenceConfig cfg;
    cfg.schedule.stages = {StageKind::Rl};
    cfg.schedule.passes = 1;
    cfg.rl.truncation_k = 2;
    cfg.rl.samples_per_update = 4;
    cfg.rl.lr = 1e-3;
    cfg.updates_per_stage = 4;
    cfg.eval_interval = 2;
    return cfg;
}

std::string temp_path(const std::string& name) { return "/tmp/" + name; }

} // namespace

TEST_CASE("config: parsing, typed getters, and unknown-key rejection") {
    const std::string clean =
        "# run settings\n"
        "; alt comment style\n"
        "[run]\n"
        "seed = 7\n"
        "out_dir = runs/a1\n"
        "\n"
        "[train]\n"
        "lr = 2.5e-3\n"
        "steps = 4000\n"
        "resume = false\n"
        "verbose = YES\n";
    const Config cfg = Config::parse(clean);

    CHECK(cfg.has_section("run"));
    CHECK(cfg.has("train", "lr"));
    CHECK_FALSE(cfg.has("train", "missing"));
    CHECK(cfg.get_int("run", "seed") == 7);
    CHECK(cfg.get_string("run", "out_dir") == "runs/a1");
    CHECK(cfg.get_double("train", "lr") == doctest::Approx(2.5e-3).epsilon(1e-15));
    CHECK(cfg.get_int("train", "steps") == 4000);
    CHECK_FALSE(cfg.get_bool("train", "resume"));
    CHECK(cfg.get_bool("train", "verbose"));
    CHECK(cfg.get_int_or("train", "absent", 9) == 9);
    CHECK(cfg.get_string_or("run", "absent", "dflt") == "dflt");
    CHECK(cfg.get_double_or("run", "absent", 1.5) == 1.5);
    CHECK(cfg.get_bool_or("run", "absent", true));
    CHECK(cfg.text() == clean);

    const auto secs = cfg.sections();
    CHECK(std::find(secs.begin(), secs.end(), "run") != secs.end());
    CHECK(std::find(secs.begin(), secs.end(), "train") != secs.end());
    const auto keys = cfg.keys("train");
    CHECK(keys.size() == 4);

    SUBCASE("typed getter failures") {
        CHECK_THROWS_AS((void)cfg.get_int("run", "out_dir"), FormatError);
        CHECK_THROWS_AS((void)cfg.get_bool("run", "seed_x"), ConfigurationError);
        CHECK_THROWS_AS((void)cfg.get_double("run", "out_dir"), FormatError);
        CHECK_THROWS_AS((void)cfg.get_string("nope", "x"), ConfigurationError);
    }

    SUBCASE("require_known names the offending entry") {
        CHECK_NOTHROW(cfg.require_known("run", {"seed", "out_dir"}));
        try {
            cfg.require_known("run", {"seed"});
            FAIL("expected ConfigurationError");
        } catch (const ConfigurationError& e) {
            CHECK(std::string(e.what()).find("run.out_dir") != std::string::npos);
        }
    }

    SUBCASE("syntax errors carry line numbers") {
        CHECK_THROWS_AS((void)Config::parse("x = 1\n"), FormatError);         // before any section
        CHECK_THROWS_AS((void)Config::parse("[s]\nUPPER = 1\n"), FormatError); // bad key name
        CHECK_THROWS_AS((void)Config::parse("[s]\na = 1\na = 2\n"), FormatError); // duplicate
        CHECK_THROWS_AS((void)Config::parse("[s]\nnoequals\n"), FormatError);
        try {
            (void)Config::parse("[s]\nok = 1\nbad line\n");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        }
    }

    SUBCASE("load round trip") {
        const std::string path = temp_path("dmc_cfg_test.cfg");
        {
            std::FILE* f = std::fopen(path.c_str(), "w");
            REQUIRE(f != nullptr);
            std::fwrite(clean.data(), 1, clean.size(), f);
            std::fclose(f);
        }
        const Config loaded = Config::load(path);
        CHECK(loaded.get_int("run", "seed") == 7);
        CHECK(loaded.text() == clean);
        std::remove(path.c_str());
        CHECK_THROWS_AS((void)Config::load("/tmp/definitely_missing_dmc.cfg"), FormatError);
    }
}

TEST_CASE("metrics: exact CSV round trip and monotone wall steps") {
    MetricsLog log;
    MetricsRow r1{0, "foundation", 0, 1.0 / 3.0, 0.1 + 0.2, 0.875,
                  std::numeric_limits<double>::quiet_NaN(), -1e-17, 12.5, 42};
    MetricsRow r2{5, "rl", 0, -2.75, 0.0, 0.0, 0.125, 3.0000000000000004, 0.0, 42};
    log.append(r1);
    log.append(r2);
    CHECK(log.size() == 2);

    SUBCASE("steps must strictly increase and stages must be CSV-safe") {
        MetricsRow bad = r2;
        bad.step = 5;
        CHECK_THROWS_AS(log.append(bad), ContractError);
        bad.step = 4;
        CHECK_THROWS_AS(log.append(bad), ContractError);
        bad.step = 6;
        bad.stage = "a,b";
        CHECK_THROWS_AS(log.append(bad), ContractError);
        bad.stage = "";
        CHECK_THROWS_AS(log.append(bad), ContractError);
    }

    SUBCASE("round trip preserves every bit") {
        const std::string csv = log.to_csv();
        const MetricsLog back = MetricsLog::from_csv(csv);
        REQUIRE(back.size() == 2);
        const auto& a = back.rows()[0];
        CHECK(a.step == 0);
        CHECK(a.stage == "foundation");
        CHECK(a.return_mean == 1.0 / 3.0);
        CHECK(a.return_std == 0.1 + 0.2);
        CHECK(std::isnan(a.divergence_gap));
        CHECK(a.loss == -1e-17);
        CHECK(a.grad_norm == 12.5);
        CHECK(a.seed == 42);
        const auto& b = back.rows()[1];
        CHECK(b.loss == 3.0000000000000004);
        CHECK(back.to_csv() == csv); // canonical form is a fixed point
    }

    SUBCASE("header and field-count validation") {
        CHECK_THROWS_AS((void)MetricsLog::from_csv("nope\n"), FormatError);
        const std::string header = log.to_csv().substr(0, log.to_csv().find('\n') + 1);
        CHECK_NOTHROW((void)MetricsLog::from_csv(header)); // header-only = empty log
        CHECK_THROWS_AS((void)MetricsLog::from_csv(header + "1,rl,0,0\n"), FormatError);
        CHECK_THROWS_AS((void)MetricsLog::from_csv(header + "1,rl,0,x,0,0,0,0,0,7\n"),
                        FormatError);
    }

    SUBCASE("file round trip") {
        const std::string path = temp_path("dmc_metrics_test.csv");
        log.write_csv(path);
        const MetricsLog back = MetricsLog::read_csv(path);
        CHECK(back.to_csv() == log.to_csv());
        std::remove(path.c_str());
    }
}

TEST_CASE("evaluate_controller: fixed seeds, zero-action oracle, expert sanity") {
    const auto world = tiny_world();

    SUBCASE("zero controller matches the hand-rolled replay exactly") {
        const int episodes = 16;
        const EvalResult er = evaluate_controller(world, episodes, zero_controller());
        CHECK(er.episodes == episodes);
        CHECK(er.coherency == 0.0);

        std::vector<double> expected;
        for (int i = 0; i < episodes; ++i) {
            Rng rng(kEvalSeedBase + static_cast<std::uint64_t>(i));
            const double s0 = rng.uniform(-1.0, 1.0);
            double ret = 0.0;
            for (int t = 0; t < world.horizon; ++t) {
                const double d = s0 - world.mu[static_cast<std::size_t>(t)];
                const double sg = world.sigma[static_cast<std::size_t>(t)];
                ret += std::exp(-d * d / (2.0 * sg * sg));
            }
            expected.push_back(ret);
        }
        double mean = 0.0;
        for (double r : expected) mean += r;
        mean /= episodes;
        double var = 0.0;
        for (double r : expected) var += (r - mean) * (r - mean);
        const double sd = std::sqrt(var / (episodes - 1));
        CHECK(er.mean_return == doctest::Approx(mean).epsilon(1e-12));
        CHECK(er.std_return == doctest::Approx(sd).epsilon(1e-12));
    }

    SUBCASE("repeat evaluation is bit-identical") {
        const EvalResult a = evaluate_controller(world, 8, expert_controller());
        const EvalResult b = evaluate_controller(world, 8, expert_controller());
        CHECK(a.mean_return == b.mean_return);
        CHECK(a.std_return == b.std_return);
    }

    SUBCASE("the expert dominates the zero controller") {
        const EvalResult ex = evaluate_controller(world, 32, expert_controller());
        const EvalResult ze = evaluate_controller(world, 32, zero_controller());
        CHECK(ex.mean_return > ze.mean_return);
        CHECK(ex.mean_return <= world.horizon + 1e-12);
    }

    SUBCASE("coherency is reported against a dataset") {
        Rng rng(5);
        const auto data = envs::gen_dataset(world, envs::Coverage::Expert, 24, rng);
        const EvalResult er = evaluate_controller(world, 8, expert_controller(), &data);
        CHECK(er.coherency > 0.0);
        CHECK(er.coherency <= 1.0);
    }

    SUBCASE("argument validation") {
        CHECK_THROWS_AS((void)evaluate_controller(world, 0, zero_controller()), ContractError);
        CHECK_THROWS_AS((void)evaluate_controller(world, 1, Controller{}), ConfigurationError);
    }
}

TEST_CASE("detect_collapse: drop, spike, and non-finite rules") {
    CollapseDetector det;

    SUBCASE("healthy history passes") {
        const auto v = detect_collapse({{1.0, 1.1, 1.05, 1.2}, {0.5, 0.45, 0.5}}, det);
        CHECK_FALSE(v.collapsed);
        CHECK(v.reason.empty());
    }

    SUBCASE("return drop below half of the best fires") {
        const auto v = detect_collapse({{10.0, 9.0, 4.0}, {}}, det);
        CHECK(v.collapsed);
        CHECK(v.reason == "return-drop");
        const auto ok = detect_collapse({{10.0, 9.0, 5.5}, {}}, det);
        CHECK_FALSE(ok.collapsed);
    }

    SUBCASE("loss spike against the rolling median fires") {
        const auto v = detect_collapse({{1.0, 1.0, 1.0, 1.0, 1.0},
                                        {0.5, 0.55, 0.5, 6.0}},
                                       det);
        CHECK(v.collapsed);
        CHECK(v.reason == "loss-spike");
        // Sign-flipped surrogate losses are judged by magnitude.
        const auto w = detect_collapse({{1.0, 1.0, 1.0, 1.0, 1.0},
                                        {-0.5, -0.55, -0.5, -6.0}},
                                       det);
        CHECK(w.collapsed);
        CHECK(w.reason == "loss-spike");
        const auto ok = detect_collapse({{1.0, 1.0, 1.0, 1.0}, {0.5, 0.55, 0.5, 4.0}}, det);
        CHECK_FALSE(ok.collapsed);
    }

    SUBCASE("a single loss cannot spike (no reference median)") {
        const auto v = detect_collapse({{1.0}, {1e9}}, det);
        CHECK_FALSE(v.collapsed);
    }

    SUBCASE("non-finite values collapse immediately") {
        const auto v = detect_collapse({{1.0, std::nan("")}, {}}, det);
        CHECK(v.collapsed);
        CHECK(v.reason == "non-finite");
        const auto w = detect_collapse({{1.0}, {std::numeric_limits<double>::infinity()}}, det);
        CHECK(w.collapsed);
        CHECK(w.reason == "non-finite");
    }

    SUBCASE("validation") {
        CHECK_THROWS_AS((void)detect_collapse({{}, {}}, det), ContractError);
        CollapseDetector bad;
        bad.return_drop = 1.5;
        CHECK_THROWS_AS((void)detect_collapse({{1.0}, {}}, bad), ContractError);
        bad = CollapseDetector{};
        bad.loss_spike = 0.0;
        CHECK_THROWS_AS((void)detect_collapse({{1.0}, {}}, bad), ContractError);
    }
}

TEST_CASE("ConvergenceTracker: fires on plateaus, not on steady climbs") {
    SUBCASE("steady improvement never converges") {
        ConvergenceTracker t(3, 0.01);
        bool fired = false;
        double v = 1.0;
        for (int i = 0; i < 20; ++i) {
            v *= 1.10; // 10% per eval, far above the 1% threshold
            fired = t.push(v);
        }
        CHECK_FALSE(fired);
        CHECK_FALSE(t.converged());
        CHECK(t.evals() == 20);
    }

    SUBCASE("a hard plateau converges within one window") {
        ConvergenceTracker t(3, 0.01);
        for (double v : {1.0, 2.0, 3.0, 4.0}) t.push(v);
        CHECK_FALSE(t.converged());
        int extra = 0;
        while (!t.converged()) {
            t.push(4.0);
            ++extra;
            REQUIRE(extra <= 3); // window-mean improvement dies within W_c evals
        }
        CHECK(t.converged());
        // Latches: later improvements do not un-converge it.
        CHECK(t.push(100.0));
    }

    SUBCASE("validation and finiteness") {
        CHECK_THROWS_AS(ConvergenceTracker(0, 0.01), ContractError);
        CHECK_THROWS_AS(ConvergenceTracker(3, -0.1), ContractError);
        ConvergenceTracker t(2, 0.01);
        CHECK_THROWS_AS(t.push(std::nan("")), core::NumericError);
    }
}

TEST_CASE("online_inject: activation gating, buffer growth, eviction, Q-continue") {
    const auto world = tiny_world();
    envs::OfflineDataset buffer;
    buffer.obs_dim = 2;
    buffer.action_dim = 1;
    OnlineFinetuneConfig cfg;
    cfg.enabled = true;
    cfg.activation_step = 5;
    cfg.episodes_per_injection = 2;
    cfg.buffer_cap = 10;
    Rng rng(31);

    SUBCASE("before the activation step nothing happens") {
        const auto r = online_inject(zero_controller(), &world, buffer, cfg, 3, nullptr, nullptr,
                                     rng);
        CHECK(r.skipped);
        CHECK(r.warning.empty());
        CHECK(buffer.episodes.empty());
    }

    SUBCASE("disabled config is a silent no-op even past activation") {
        OnlineFinetuneConfig off = cfg;
        off.enabled = false;
        const auto r = online_inject(zero_controller(), &world, buffer, off, 100, nullptr,
                                     nullptr, rng);
        CHECK(r.skipped);
        CHECK(buffer.episodes.empty());
    }

    SUBCASE("each injection adds episodes * horizon transitions") {
        const auto r = online_inject(expert_controller(), &world, buffer, cfg, 5, nullptr,
                                     nullptr, rng);
        CHECK_FALSE(r.skipped);
        CHECK(r.episodes == 2);
        CHECK(r.transitions_added == 8);
        CHECK(buffer.num_transitions() == 8);
        REQUIRE(buffer.episodes.size() == 2);
        const auto& tr = buffer.episodes[0].steps[0];
        CHECK(tr.obs.size() == 2);
        CHECK(tr.action.size() == 1);
        CHECK(buffer.episodes[0].steps.back().done);

        // A second injection overflows the cap; the oldest episodes go first.
        const auto r2 = online_inject(expert_controller(), &world, buffer, cfg, 6, nullptr,
                                      nullptr, rng);
        CHECK(r2.episodes == 2);
        CHECK(buffer.num_transitions() <= cfg.buffer_cap);
        CHECK(buffer.num_transitions() == 8);
        CHECK(buffer.episodes.size() == 2);
    }

    SUBCASE("a missing environment skips with a warning") {
        const auto r = online_inject(zero_controller(), nullptr, buffer, cfg, 9, nullptr, nullptr,
                                     rng);
        CHECK(r.skipped);
        CHECK_FALSE(r.warning.empty());
        CHECK(buffer.episodes.empty());
    }

    SUBCASE("q_continue trains the critic on the grown buffer") {
        Rng qrng(7);
        qvalue::QFunction qf(2, 1, 16, qrng);
        qvalue::IqlConfig iql;
        iql.batch_size = 8;
        OnlineFinetuneConfig qc = cfg;
        qc.q_continue = true;
        qc.q_steps = 5;
        const double before = qf.q({0.2, 0.25}, {0.5});
        const auto r = online_inject(expert_controller(), &world, buffer, qc, 5, &qf, &iql, rng);
        CHECK(r.q_updated);
        CHECK(qf.q({0.2, 0.25}, {0.5}) != before);

        CHECK_THROWS_AS((void)online_inject(expert_controller(), &world, buffer, qc, 5, nullptr,
                                            nullptr, rng),
                        ConfigurationError);
    }

    SUBCASE("null controller is rejected once active") {
        CHECK_THROWS_AS((void)online_inject(Controller{}, &world, buffer, cfg, 5, nullptr,
                                            nullptr, rng),
                        ConfigurationError);
    }
}

TEST_CASE("run_sequence: zero passes leave the model untouched") {
    DiffusionModel model = tiny_model(11);
    const auto before = flat_weights(model);
    SequenceConfig cfg = basic_config();
    cfg.schedule.passes = 0;
    Rng rng(1);
    const SequenceResult res = run_sequence(model, cfg, basic_hooks(), rng);
    CHECK(flat_weights(model) == before);
    CHECK(res.log.empty());
    CHECK(res.stage_log.empty());
    CHECK(res.wall_steps == 0);
}

TEST_CASE("run_sequence: prerequisites are validated before any training") {
    Rng rng(2);
    SequenceConfig cfg = basic_config();

    SUBCASE("reward and evaluate hooks are mandatory") {
        DiffusionModel model = tiny_model(12);
        SequenceHooks h = basic_hooks();
        h.reward = nullptr;
        CHECK_THROWS_AS((void)run_sequence(model, cfg, h, rng), ConfigurationError);
        h = basic_hooks();
        h.evaluate = nullptr;
        CHECK_THROWS_AS((void)run_sequence(model, cfg, h, rng), ConfigurationError);
    }

    SUBCASE("a conditional model needs a condition sampler") {
        DiffusionModel model = tiny_model(13, 1);
        const SequenceHooks h = basic_hooks(); // no cond_sampler
        CHECK_THROWS_AS((void)run_sequence(model, cfg, h, rng), ConfigurationError);
    }

    SUBCASE("QV-PG needs a differentiable scorer") {
        DiffusionModel model = tiny_model(14);
        SequenceConfig qcfg = basic_config();
        qcfg.rl.method = align::RlMethod::QvPg;
        SequenceHooks h = basic_hooks();
        h.scorer = nullptr;
        CHECK_THROWS_AS((void)run_sequence(model, qcfg, h, rng), ConfigurationError);
    }

    SUBCASE("SFT needs reference rows, with matched conditions when given") {
        DiffusionModel model = tiny_model(15);
        SequenceConfig scfg = basic_config();
        scfg.schedule.stages = {StageKind::Sft};
        SequenceHooks h = basic_hooks();
        CHECK_THROWS_AS((void)run_sequence(model, scfg, h, rng), ConfigurationError);
        h.sft_rows = {{0.1}, {0.2}};
        h.sft_conds = {{0.0}};
        CHECK_THROWS_AS((void)run_sequence(model, scfg, h, rng), DimensionError);
    }

    SUBCASE("config validation happens first") {
        DiffusionModel model = tiny_model(16);
        SequenceConfig bad = basic_config();
        bad.eval_interval = 0;
        CHECK_THROWS_AS((void)run_sequence(model, bad, basic_hooks(), rng), ContractError);
        bad = basic_config();
        bad.dpo_group_size = 1;
        CHECK_THROWS_AS((void)run_sequence(model, bad, basic_hooks(), rng), ContractError);
    }
}

TEST_CASE("run_sequence: stage ordering, metrics stream, and convergence plumbing") {
    DiffusionModel model = tiny_model(21);
    SequenceConfig cfg = basic_config();
    cfg.schedule.stages = {StageKind::Rl, StageKind::Dpo, StageKind::Sft};
    cfg.schedule.passes = 2;
    cfg.schedule.window = 2;
    cfg.schedule.eps_imp = 0.01;
    cfg.updates_per_stage = 4;
    cfg.eval_interval = 2;
    cfg.dpo_groups = 2;
    cfg.dpo_group_size = 4;
    cfg.dpo.pairs_per_update = 4;
    cfg.sft.candidates = 12;
    cfg.sft.update_steps = 2;
    cfg.sft.batch_size = 4;
    cfg.sft.elbo_draws = 1;
    cfg.seed_label = 99;
    SequenceHooks hooks = basic_hooks();
    for (int i = 0; i < 16; ++i) hooks.sft_rows.push_back({0.1 + 0.05 * i});

    int stage_end_calls = 0;
    hooks.on_stage_end = [&](StageKind, int, const DiffusionModel&) { ++stage_end_calls; };

    Rng rng(3);
    const SequenceResult res = run_sequence(model, cfg, hooks, rng);

    REQUIRE(res.stage_log.size() == 6);
    const StageKind want[] = {StageKind::Rl, StageKind::Dpo, StageKind::Sft,
                              StageKind::Rl, StageKind::Dpo, StageKind::Sft};
    for (int i = 0; i < 6; ++i) {
        CHECK(res.stage_log[static_cast<std::size_t>(i)].stage == want[i]);
        CHECK(res.stage_log[static_cast<std::size_t>(i)].pass == i / 3);
        CHECK(res.stage_log[static_cast<std::size_t>(i)].updates <= cfg.updates_per_stage);
        CHECK(res.stage_log[static_cast<std::size_t>(i)].updates >= 1);
    }
    CHECK(stage_end_calls == 6);

    REQUIRE_FALSE(res.log.empty());
    CHECK(res.log.rows().front().stage == "foundation");
    CHECK(res.log.rows().front().step == 0);
    for (const auto& row : res.log.rows()) {
        CHECK(row.seed == 99);
        CHECK(std::isnan(row.divergence_gap)); // no divergence budget configured
    }
    long prev = -1;
    for (const auto& row : res.log.rows()) {
        CHECK(row.step > prev);
        prev = row.step;
    }
    long total_updates = 0;
    for (const auto& oc : res.stage_log) total_updates += oc.updates;
    CHECK(res.wall_steps == total_updates);
    CHECK(res.foundation_return == res.log.rows().front().return_mean);
    CHECK(std::isfinite(res.final_return));
}

TEST_CASE("run_sequence: divergence budget fills the gap column") {
    DiffusionModel model = tiny_model(22);
    SequenceConfig cfg = basic_config();
    cfg.updates_per_stage = 2;
    cfg.eval_interval = 2;
    align::DivergenceBudget budget;
    budget.eval_samples = 8;
    budget.elbo_draws = 1;
    cfg.divergence = budget;
    Rng rng(4);
    const SequenceResult res = run_sequence(model, cfg, basic_hooks(), rng);
    REQUIRE_FALSE(res.log.empty());
    for (const auto& row : res.log.rows()) CHECK(std::isfinite(row.divergence_gap));
}

TEST_CASE("run_sequence: collapse triggers a bit-exact rollback to the best checkpoint") {
    DiffusionModel model = tiny_model(23);
    SequenceConfig cfg = basic_config();
    cfg.updates_per_stage = 4;
    cfg.eval_interval = 2; // evaluations after updates 2 and 4
    cfg.max_rollbacks_per_stage = 0;

    // Scripted evaluations: baseline 1.0, best 1.2, then a crash to 0.1 that
    // must trip the 50% drop rule. Weight snapshots are taken at each call so
    // the rollback target is known bit-for-bit.
    auto snaps = std::make_shared<std::vector<std::vector<double>>>();
    auto calls = std::make_shared<int>(0);
    SequenceHooks hooks = basic_hooks();
    hooks.evaluate = [snaps, calls](const DiffusionModel& m) {
        static const double script[] = {1.0, 1.2, 0.1, 0.1, 0.1};
        snaps->push_back(flat_weights(m));
        EvalResult er;
        er.mean_return = script[std::min<std::size_t>(static_cast<std::size_t>(*calls), 4)];
        er.episodes = 1;
        ++(*calls);
        return er;
    };

    Rng rng(5);
    const SequenceResult res = run_sequence(model, cfg, hooks, rng);

    REQUIRE(*calls >= 3);
    REQUIRE(res.stage_log.size() == 1);
    CHECK(res.stage_log[0].rollbacks == 1);
    CHECK(res.stage_log[0].skipped);
    CHECK(res.stage_log[0].final_return == 1.2);
    CHECK(res.final_return == 1.2);
    // The model ends exactly at the weights seen by the best evaluation.
    CHECK(flat_weights(model) == (*snaps)[1]);
    REQUIRE_FALSE(res.warnings.empty());
    bool mentioned = false;
    for (const auto& w : res.warnings)
        if (w.find("collapse") != std::string::npos) mentioned = true;
    CHECK(mentioned);
}

TEST_CASE("run_sequence: rollback with remaining budget halves the rate and continues") {
    DiffusionModel model = tiny_model(24);
    SequenceConfig cfg = basic_config();
    cfg.updates_per_stage = 6;
    cfg.eval_interval = 2;
    cfg.max_rollbacks_per_stage = 2;
    cfg.schedule.window = 10; // keep convergence out of the picture

    auto calls = std::make_shared<int>(0);
    SequenceHooks hooks = basic_hooks();
    hooks.evaluate = [calls](const DiffusionModel&) {
        // One crash in the middle, then recovery.
        static const double script[] = {1.0, 1.2, 0.1, 1.25, 1.3, 1.3, 1.3};
        EvalResult er;
        er.mean_return = script[std::min<std::size_t>(static_cast<std::size_t>(*calls), 6)];
        er.episodes = 1;
        ++(*calls);
        return er;
    };

    Rng rng(6);
    const SequenceResult res = run_sequence(model, cfg, hooks, rng);
    REQUIRE(res.stage_log.size() == 1);
    CHECK(res.stage_log[0].rollbacks == 1);
    CHECK_FALSE(res.stage_log[0].skipped);
    CHECK(res.stage_log[0].updates == 6); // the stage ran its full budget
    CHECK(res.final_return > 1.2);
    bool lr_note = false;
    for (const auto& w : res.warnings)
        if (w.find("lr") != std::string::npos) lr_note = true;
    CHECK(lr_note);
}

TEST_CASE("run_sequence: arbitration probes both RL methods and keeps the winner") {
    SequenceConfig cfg = basic_config();
    cfg.arbitrate_rl = true;
    cfg.updates_per_stage = 10; // probe budget: max(1, 10/10) = 1 update each
    cfg.eval_interval = 5;
    cfg.schedule.window = 10;

    auto run_with_script = [&](std::vector<double> script) {
        DiffusionModel model = tiny_model(25);
        auto calls = std::make_shared<int>(0);
        auto sc = std::make_shared<std::vector<double>>(std::move(script));
        SequenceHooks hooks = basic_hooks();
        hooks.evaluate = [calls, sc](const DiffusionModel&) {
            EvalResult er;
            er.mean_return =
                (*sc)[std::min<std::size_t>(static_cast<std::size_t>(*calls), sc->size() - 1)];
            er.episodes = 1;
            ++(*calls);
            return er;
        };
        Rng rng(7);
        return run_sequence(model, cfg, hooks, rng);
    };

    SUBCASE("QV-PG wins when its probe evaluates higher") {
        const SequenceResult res = run_with_script({1.0, 0.5, 2.0, 2.0, 2.0});
        REQUIRE(res.stage_log.size() == 1);
        CHECK(res.stage_log[0].rl_method_used == align::RlMethod::QvPg);
        bool saw_re = false, saw_qv = false;
        for (const auto& row : res.log.rows()) {
            if (row.stage == "rl-probe-reinforce") saw_re = true;
            if (row.stage == "rl-probe-qvpg") saw_qv = true;
        }
        CHECK(saw_re);
        CHECK(saw_qv);
    }

    SUBCASE("REINFORCE wins ties and higher probes") {
        const SequenceResult res = run_with_script({1.0, 2.0, 0.5, 2.0, 2.0});
        REQUIRE(res.stage_log.size() == 1);
        CHECK(res.stage_log[0].rl_method_used == align::RlMethod::Reinforce);
        const SequenceResult tie = run_with_script({1.0, 1.5, 1.5, 1.5, 1.5});
        CHECK(tie.stage_log[0].rl_method_used == align::RlMethod::Reinforce);
    }
}

TEST_CASE("run_sequence: online hook warnings are surfaced") {
    DiffusionModel model = tiny_model(26);
    SequenceConfig cfg = basic_config();
    cfg.updates_per_stage = 2;
    cfg.eval_interval = 1;
    SequenceHooks hooks = basic_hooks();
    auto hook_steps = std::make_shared<std::vector<long>>();
    hooks.online = [hook_steps](long wall, Rng&) {
        hook_steps->push_back(wall);
        return wall >= 2 ? std::string("replay buffer saturated") : std::string();
    };
    Rng rng(8);
    const SequenceResult res = run_sequence(model, cfg, hooks, rng);
    CHECK_FALSE(hook_steps->empty());
    bool warned = false;
    for (const auto& w : res.warnings)
        if (w.find("saturated") != std::string::npos) warned = true;
    CHECK(warned);
}

TEST_CASE("foundation trainers: dimensions, determinism, and quick-fit sanity") {
    const auto world = tiny_world();
    Rng drng(41);
    const auto data = envs::gen_dataset(world, envs::Coverage::Full, 40, drng);
    REQUIRE(data.obs_dim == 2);
    REQUIRE(data.action_dim == 1);

    SUBCASE("policy foundation wires the conditional model correctly") {
        PolicyTrainConfig cfg;
        cfg.T = 8;
        cfg.hidden = {24};
        cfg.time_embed = 4;
        cfg.steps = 40;
        cfg.batch_size = 16;
        Rng rng(42);
        const auto policy = train_policy_foundation(data, cfg, rng);
        CHECK(policy.obs_dim() == 2);
        CHECK(policy.action_dim() == 1);
        CHECK(policy.window() == 1);
        CHECK(policy.chunk_len() == 1);
        CHECK(policy.model().data_dim() == 1);
        CHECK(policy.model().cond_dim() == 3); // one obs slot + validity flag
        CHECK(policy.model().schedule().T == 8);

        Rng r1(9), r2(9);
        auto ctx = policy.make_context();
        ctx.push(envs::nav1d_observation(world, {0.2, 1}));
        control::ActionSelector sel;
        sel.candidates = 3;
        const auto a1 = policy.act(ctx, sel, SamplerKind::Ddim, r1);
        const auto a2 = policy.act(ctx, sel, SamplerKind::Ddim, r2);
        REQUIRE(a1.size() == 1);
        CHECK(a1 == a2);
        CHECK(std::isfinite(a1[0]));

        Rng rng_b(42);
        const auto policy_b = train_policy_foundation(data, cfg, rng_b);
        CHECK(flat_weights(policy.model()) == flat_weights(policy_b.model()));
    }

    SUBCASE("planner foundation trains on flattened trajectories") {
        PlannerTrainConfig cfg;
        cfg.T = 8;
        cfg.hidden = {24};
        cfg.time_embed = 4;
        cfg.steps = 30;
        cfg.batch_size = 8;
        Rng rng(43);
        const auto planner = train_planner_foundation(data, world.horizon, 1, 1, cfg, rng);
        CHECK(planner.plan_horizon() == 4);
        CHECK(planner.model().data_dim() == (4 + 1) * 1 + 4 * 1);
        CHECK(planner.model().cond_dim() == 0);

        Rng prng(10);
        const auto plan =
            planner.plan({0.1}, 2, [](const std::vector<double>&) { return 0.0; },
                         SamplerKind::Ddim, prng);
        REQUIRE(plan.first_action.size() == 1);
        CHECK(plan.first_action[0] >= control::kActionLo);
        CHECK(plan.first_action[0] <= control::kActionHi);
    }

    SUBCASE("trainer validation") {
        PolicyTrainConfig bad;
        bad.steps = 0;
        Rng rng(44);
        CHECK_THROWS_AS((void)train_policy_foundation(data, bad, rng), ContractError);
        PlannerTrainConfig pbad;
        pbad.uncond_prob = 1.5;
        CHECK_THROWS_AS((void)train_planner_foundation(data, 4, 1, 1, pbad, rng), ContractError);
        CHECK_THROWS_AS((void)train_planner_foundation(envs::OfflineDataset{}, 4, 1, 1,
                                                       PlannerTrainConfig{}, rng),
                        ContractError);
    }
}

TEST_CASE("hook builders: rewards, scorers, and condition sampling agree with the critic") {
    const auto world = tiny_world();
    Rng drng(51);
    const auto data = envs::gen_dataset(world, envs::Coverage::Full, 30, drng);

    PolicyTrainConfig pc;
    pc.T = 8;
    pc.hidden = {16};
    pc.time_embed = 4;
    pc.steps = 20;
    pc.batch_size = 8;
    Rng prng(52);
    const auto policy = train_policy_foundation(data, pc, prng);

    Rng qrng(53);
    qvalue::QFunction qf(2, 1, 16, qrng);

    SUBCASE("dataset_obs_sampler returns valid one-slot windows from the data") {
        auto sampler = dataset_obs_sampler(data, policy);
        Rng rng(54);
        for (int i = 0; i < 10; ++i) {
            const auto cond = sampler(rng);
            REQUIRE(cond.size() == 3);
            CHECK(cond[2] == 1.0); // validity flag
            bool found = false;
            for (std::size_t j = 0; j < data.num_transitions() && !found; ++j) {
                const auto& tr = data.flat_at(j);
                found = tr.obs[0] == cond[0] && tr.obs[1] == cond[1];
            }
            CHECK(found);
        }
    }

    SUBCASE("q_action_reward equals Q on the executed (clipped) action") {
        const auto reward = q_action_reward(qf, policy);
        const std::vector<double> cond = {0.3, 0.5, 1.0};
        CHECK(reward({0.4}, cond) == qf.q({0.3, 0.5}, {0.4}));
        CHECK(reward({1.7}, cond) == qf.q({0.3, 0.5}, {1.0})); // clipped at the bound
        CHECK_THROWS_AS((void)reward({0.4}, {0.3, 0.5}), DimensionError);
        CHECK_THROWS_AS((void)reward({0.4}, {0.3, 0.5, 0.0}), ContractError); // empty slot
    }

    SUBCASE("policy_q_scorer matches Q without clipping") {
        const auto scorer = policy_q_scorer(qf, policy);
        const std::vector<double> cond = {0.3, 0.5, 1.0};
        const Tensor in = Tensor::from({1, 1}, {0.4});
        CHECK(scorer(in, cond).item() == doctest::Approx(qf.q({0.3, 0.5}, {0.4})).epsilon(1e-12));
        const Tensor wide = Tensor::from({1, 1}, {1.7});
        CHECK(scorer(wide, cond).item() ==
              doctest::Approx(qf.q({0.3, 0.5}, {1.7})).epsilon(1e-12));
    }

    SUBCASE("plan_q_scorer sums stepwise Q over the flattened plan") {
        Rng mrng(55);
        const int H = world.horizon;
        Mlp net({(H + 1) + H + 4, 16, (H + 1) + H}, 4, core::Activation::Tanh, mrng);
        DiffusionModel pm(std::move(net), diffusion::make_schedule(diffusion::ScheduleKind::Cosine, 8),
                          diffusion::Parameterization::Epsilon, (H + 1) + H, 0);
        const control::PlannerDmc planner(std::move(pm), H, 1, 1);
        const auto scorer = plan_q_scorer(planner, qf, world);

        std::vector<double> traj(static_cast<std::size_t>((H + 1) + H));
        Rng trng(56);
        for (auto& v : traj) v = trng.uniform(-1.0, 1.0);
        double expected = 0.0;
        for (int i = 0; i < H; ++i) {
            const double s = planner.state_at(traj, i)[0];
            const auto obs = envs::nav1d_observation(world, {s, i});
            expected += qf.q(obs, planner.action_at(traj, i));
        }
        CHECK(scorer(traj) == doctest::Approx(expected).epsilon(1e-12));
    }

    SUBCASE("make_nav1d_policy_hooks assembles a runnable hook set") {
        Nav1dPolicyHooksConfig hc;
        hc.eval_episodes = 4;
        hc.sft_reference_rows = 20;
        const SequenceHooks hooks = make_nav1d_policy_hooks(policy, qf, world, data, hc);
        REQUIRE(hooks.reward);
        REQUIRE(hooks.scorer);
        REQUIRE(hooks.cond_sampler);
        REQUIRE(hooks.evaluate);
        CHECK(hooks.sft_rows.size() == 20);
        CHECK(hooks.sft_conds.size() == 20);
        for (const auto& row : hooks.sft_rows) CHECK(row.size() == 1);
        for (const auto& c : hooks.sft_conds) {
            REQUIRE(c.size() == 3);
            CHECK(c[2] == 1.0);
        }

        const EvalResult er = hooks.evaluate(policy.model());
        CHECK(er.episodes == 4);
        CHECK(std::isfinite(er.mean_return));
        CHECK(er.coherency > 0.0); // scored against the dataset

        // The evaluate hook must honor the weights it is handed, not the
        // policy captured at build time: a perturbed clone scores differently.
        DiffusionModel other = policy.model().clone();
        other.net().layers_mut()[0].weight.mutable_values()[0] += 0.5;
        const EvalResult er2 = hooks.evaluate(other);
        CHECK(er2.mean_return != er.mean_return);

        // GreedyQ selectors get the critic wired in automatically.
        Nav1dPolicyHooksConfig gc = hc;
        gc.selector.kind = control::SelectorKind::GreedyQ;
        gc.selector.candidates = 3;
        const SequenceHooks ghooks = make_nav1d_policy_hooks(policy, qf, world, data, gc);
        const EvalResult ger = ghooks.evaluate(policy.model());
        CHECK(std::isfinite(ger.mean_return));
    }

    SUBCASE("dimension guards") {
        qvalue::QFunction wrong(3, 1, 8, qrng);
        CHECK_THROWS_AS((void)q_action_reward(wrong, policy), ConfigurationError);
        CHECK_THROWS_AS((void)policy_q_scorer(wrong, policy), ConfigurationError);
        envs::OfflineDataset empty;
        empty.obs_dim = 2;
        empty.action_dim = 1;
        CHECK_THROWS_AS((void)dataset_obs_sampler(empty, policy), ContractError);
    }
}

TEST_CASE("stage names round-trip") {
    CHECK(stage_name(StageKind::Rl) == "rl");
    CHECK(stage_name(StageKind::Dpo) == "dpo");
    CHECK(stage_name(StageKind::Sft) == "sft");
    CHECK(stage_from_name("rl") == StageKind::Rl);
    CHECK(stage_from_name("dpo") == StageKind::Dpo);
    CHECK(stage_from_name("sft") == StageKind::Sft);
    CHECK_THROWS_AS((void)stage_from_name("ppo"), FormatError);
}
