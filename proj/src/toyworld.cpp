#include "dmc/toyworld.hpp"

#include <cmath>

#include "dmc/errors.hpp"

namespace dmc::envs {

const ToyWorld2D::Bump& ToyWorld2D::bump(ToyField f) const {
    switch (f) {
    case ToyField::Orange: return orange;
    case ToyField::Green: return green;
    default: return blue;
    }
}

ToyWorld2D make_toy_world() {
    ToyWorld2D w;
    w.modes = {{-0.5, -0.4}, {0.5, -0.3}, {0.0, 0.5}};
    w.mode_sigma = 0.12;
    // Green and blue sit roughly 1.5 mode widths off the nearest mode; the
    // model can reach them with a mild, still-plausible shift. Orange is
    // roughly 4 widths out -- unreachable without leaving the data.
    w.green = {0.13, 0.38, 0.10};
    w.blue = {0.38, -0.18, 0.10};
    w.orange = {-0.88, -0.72, 0.15};
    // Boundary of "in distribution": the density three widths away from a
    // mode center. Green/blue maximizers clear it; orange falls well below.
    w.likelihood_threshold =
        toy_data_logpdf(w, w.modes[0][0] + 3.0 * w.mode_sigma, w.modes[0][1]);
    return w;
}

double toy_reward(const ToyWorld2D& world, ToyField field, double x, double y) {
    const auto& b = world.bump(field);
    const double dx = x - b.cx;
    const double dy = y - b.cy;
    return std::exp(-(dx * dx + dy * dy) / (2.0 * b.width * b.width));
}

std::array<double, 2> toy_maximizer(const ToyWorld2D& world, ToyField field) {
    const auto& b = world.bump(field);
    return {b.cx, b.cy};
}

std::vector<std::array<double, 2>> toy_sample_data(const ToyWorld2D& world, int n, Rng& rng) {
    if (world.modes.empty()) throw core::ContractError("toy_sample_data: world has no modes");
    if (n < 0) throw core::ContractError("toy_sample_data: n must be non-negative");
    std::vector<std::array<double, 2>> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::size_t k = static_cast<std::size_t>(
            rng.uniform(0.0, static_cast<double>(world.modes.size())));
        if (k >= world.modes.size()) k = world.modes.size() - 1;
        const auto& m = world.modes[k];
        out.push_back(
            {m[0] + world.mode_sigma * rng.normal(), m[1] + world.mode_sigma * rng.normal()});
    }
    return out;
}

double toy_data_logpdf(const ToyWorld2D& world, double x, double y) {
    if (world.modes.empty()) throw core::ContractError("toy_data_logpdf: world has no modes");
    const double s2 = world.mode_sigma * world.mode_sigma;
    // log-sum-exp over equal-weight components for numerical safety far out.
    double max_e = -1e300;
    std::vector<double> es;
    es.reserve(world.modes.size());
    for (const auto& m : world.modes) {
        const double dx = x - m[0];
        const double dy = y - m[1];
        const double e = -(dx * dx + dy * dy) / (2.0 * s2);
        es.push_back(e);
        if (e > max_e) max_e = e;
    }
    double acc = 0.0;
    for (double e : es) acc += std::exp(e - max_e);
    const double two_pi = 6.283185307179586;
    return max_e + std::log(acc) - std::log(static_cast<double>(world.modes.size())) -
           std::log(two_pi * s2);
}

bool toy_in_distribution(const ToyWorld2D& world, double x, double y) {
    return toy_data_logpdf(world, x, y) >= world.likelihood_threshold;
}

} // namespace dmc::envs
