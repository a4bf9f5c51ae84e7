#pragma once

#include <cstdint>
#include <random>

namespace dmc::core {

// Deterministic random stream. Every stochastic routine takes one of these
// explicitly; forking yields an independent child stream so parallelizable
// call sites stay reproducible regardless of evaluation order.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }

    // Inclusive on both ends.
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(gen_);
    }

    double normal() { return normal_(gen_); }

    double normal(double mean, double stddev) { return mean + stddev * normal_(gen_); }

    Rng fork() { return Rng(gen_()); }

    std::uint64_t next_seed() { return gen_(); }

private:
    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace dmc::core
