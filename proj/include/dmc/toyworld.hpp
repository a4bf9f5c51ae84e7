#pragma once

#include <array>
#include <vector>

#include "dmc/rng.hpp"

namespace dmc::envs {

using core::Rng;

enum class ToyField { Orange, Green, Blue };

// Fixed 2-D playground: a three-mode Gaussian data distribution on [-1,1]^2
// and three smooth reward bumps. Green and blue peak near the data; orange
// peaks far outside the data hull, so chasing it means leaving the
// distribution. The likelihood threshold (on the analytic log-density scale)
// separates the two regimes.
struct ToyWorld2D {
    struct Bump {
        double cx = 0.0, cy = 0.0, width = 0.1;
    };

    std::vector<std::array<double, 2>> modes;
    double mode_sigma = 0.12;
    Bump orange, green, blue;
    double likelihood_threshold = 0.0;

    const Bump& bump(ToyField f) const;
};

ToyWorld2D make_toy_world();

// Peak-normalized bump value exp(-||p - c||^2 / (2 w^2)), max 1 at the center.
double toy_reward(const ToyWorld2D& world, ToyField field, double x, double y);
std::array<double, 2> toy_maximizer(const ToyWorld2D& world, ToyField field);

// n draws from the equal-weight isotropic mixture, one {x, y} per row.
std::vector<std::array<double, 2>> toy_sample_data(const ToyWorld2D& world, int n, Rng& rng);

// Analytic mixture log-density and the threshold test against it.
double toy_data_logpdf(const ToyWorld2D& world, double x, double y);
bool toy_in_distribution(const ToyWorld2D& world, double x, double y);

} // namespace dmc::envs
