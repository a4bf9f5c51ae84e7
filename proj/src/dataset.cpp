#include "dmc/dataset.hpp"

#include <cstring>
#include <fstream>

#include "binio.hpp"
#include "dmc/errors.hpp"

namespace dmc::envs {

using core::ContractError;
using core::FormatError;

double Episode::episode_return() const {
    double r = 0.0;
    for (const auto& s : steps) r += s.reward;
    return r;
}

std::size_t OfflineDataset::num_transitions() const {
    std::size_t n = 0;
    for (const auto& e : episodes) n += e.steps.size();
    return n;
}

double OfflineDataset::mean_return() const {
    if (episodes.empty()) return 0.0;
    double r = 0.0;
    for (const auto& e : episodes) r += e.episode_return();
    return r / static_cast<double>(episodes.size());
}

const Transition& OfflineDataset::flat_at(std::size_t i) const {
    for (const auto& e : episodes) {
        if (i < e.steps.size()) return e.steps[i];
        i -= e.steps.size();
    }
    throw ContractError("OfflineDataset::flat_at: index out of range");
}

OfflineDataset gen_dataset(const Nav1DConfig& world, Coverage coverage, int episodes, Rng& rng) {
    world.validate();
    if (episodes < 1) throw ContractError("gen_dataset: episodes must be >= 1");
    OfflineDataset ds;
    ds.coverage = coverage;
    ds.obs_dim = 2;
    ds.action_dim = 1;
    switch (coverage) {
    case Coverage::Partial: ds.policy_desc = "uniform-random actions, restricted starts"; break;
    case Coverage::Full: ds.policy_desc = "uniform-random actions, uniform starts"; break;
    case Coverage::Expert: ds.policy_desc = "greedy one-step expert"; break;
    }
    ds.episodes.reserve(static_cast<std::size_t>(episodes));
    for (int e = 0; e < episodes; ++e) {
        Nav1DState st;
        st.s = coverage == Coverage::Partial
                   ? rng.uniform(world.partial_start_lo, world.partial_start_hi)
                   : rng.uniform(-1.0, 1.0);
        st.t = 0;
        Episode ep;
        for (int t = 0; t < world.horizon; ++t) {
            const double a = coverage == Coverage::Expert ? nav1d_expert_action(world, st)
                                                          : rng.uniform(-1.0, 1.0);
            const Nav1DStepResult r = nav1d_step(world, st, a);
            Transition tr;
            tr.obs = nav1d_observation(world, st);
            tr.action = {a};
            tr.reward = r.reward;
            tr.next_obs = nav1d_observation(world, r.next);
            tr.done = r.done;
            ep.steps.push_back(std::move(tr));
            st = r.next;
        }
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

namespace {
constexpr char kMagic[4] = {'D', 'M', 'C', 'D'};
constexpr std::uint32_t kVersion = 1;
} // namespace

void write_dataset(const std::string& path, const OfflineDataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("write_dataset: cannot open " + path);
    os.write(kMagic, 4);
    binio::write_u32(os, kVersion);
    binio::write_u8(os, static_cast<std::uint8_t>(ds.coverage));
    binio::write_string(os, ds.policy_desc);
    binio::write_u32(os, static_cast<std::uint32_t>(ds.obs_dim));
    binio::write_u32(os, static_cast<std::uint32_t>(ds.action_dim));
    binio::write_u32(os, static_cast<std::uint32_t>(ds.episodes.size()));
    for (const auto& e : ds.episodes) {
        binio::write_u32(os, static_cast<std::uint32_t>(e.steps.size()));
        for (const auto& s : e.steps) {
            for (double v : s.obs) binio::write_f64(os, v);
            for (double v : s.action) binio::write_f64(os, v);
            binio::write_f64(os, s.reward);
            for (double v : s.next_obs) binio::write_f64(os, v);
            binio::write_u8(os, s.done ? 1 : 0);
        }
    }
    if (!os) throw FormatError("write_dataset: write failed: " + path);
}

OfflineDataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("read_dataset: bad magic in " + path);
    const std::uint32_t version = binio::read_u32(is);
    if (version != kVersion)
        throw FormatError("read_dataset: unsupported version " + std::to_string(version));
    OfflineDataset ds;
    const std::uint8_t cov = binio::read_u8(is);
    if (cov > 2) throw FormatError("read_dataset: unknown coverage tag");
    ds.coverage = static_cast<Coverage>(cov);
    ds.policy_desc = binio::read_string(is);
    ds.obs_dim = static_cast<int>(binio::read_u32(is));
    ds.action_dim = static_cast<int>(binio::read_u32(is));
    if (ds.obs_dim < 1 || ds.obs_dim > 1024 || ds.action_dim < 1 || ds.action_dim > 1024)
        throw FormatError("read_dataset: implausible dimensions");
    const std::uint32_t n_eps = binio::read_u32(is);
    ds.episodes.resize(n_eps);
    for (auto& e : ds.episodes) {
        const std::uint32_t n_steps = binio::read_u32(is);
        e.steps.resize(n_steps);
        for (auto& s : e.steps) {
            s.obs.resize(static_cast<std::size_t>(ds.obs_dim));
            for (double& v : s.obs) v = binio::read_f64(is);
            s.action.resize(static_cast<std::size_t>(ds.action_dim));
            for (double& v : s.action) v = binio::read_f64(is);
            s.reward = binio::read_f64(is);
            s.next_obs.resize(static_cast<std::size_t>(ds.obs_dim));
            for (double& v : s.next_obs) v = binio::read_f64(is);
            s.done = binio::read_u8(is) != 0;
        }
    }
    return ds;
}

} // namespace dmc::envs
