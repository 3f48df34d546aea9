#ifndef BIDSIM_ENV_HPP
#define BIDSIM_ENV_HPP

#include "bidsim/clearing.hpp"
#include "bidsim/grid.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <vector>

// The 1-step partially observable market game: agents see only the encoded
// time, place one bid each, the injected clearing function dispatches them,
// and pay-as-bid profits come back as rewards.
namespace bidsim {

struct MarketConfig {
    double p_max = 600.0;              // €/MW price cap
    double marginal_fraction = 0.10;   // marginal cost as a fraction of p_max
    int n_agents = 0;                  // 0 = take from the grid
    double p_total_mw = 0.0;           // 0 = take from the grid
    double load_noise = 0.10;          // +-10% uniform noise on each load
    int steps_per_day = 96;
    int steps_per_week = 672;
    int steps_per_year = 35136;
    std::vector<double> marginal_override;  // per agent, €/MW; empty = uniform

    double marginal_price() const { return marginal_fraction * p_max; }
};

// Sine/cosine pairs over the day, week and year frames:
// (sin_d, sin_w, sin_y, cos_d, cos_w, cos_y).
Eigen::VectorXd encode_time(long tau, const MarketConfig& config);

// Even capacity split across agents.
double agent_capacity(const MarketConfig& config);

// Deterministic synthetic load profile: daily swing dominates, with weekly
// and seasonal components; never below 0.2.
double load_profile(long tau, const MarketConfig& config);

struct Scenario {
    long tau = 0;
    Eigen::VectorXd load_scale;  // per load: profile(tau) x uniform noise
    std::uint64_t seed = 0;
};

struct StepResult {
    Eigen::VectorXd rewards;                    // per agent, €
    ClearingResult clearing;
    std::vector<Eigen::VectorXd> observations;  // per agent; all equal encode_time
};

class MarketEnv {
public:
    // Config fields left at 0 are filled from the grid; non-zero fields must
    // agree with it.
    MarketEnv(Grid grid, MarketConfig config, ClearingFn clearing);

    const Grid& grid() const { return grid_; }
    const MarketConfig& config() const { return config_; }

    double marginal_price(int agent) const;

    // Uniform tau over the year, fresh sub-seed for the noise.
    Scenario sample_scenario(std::mt19937_64& rng) const;
    // Fully reproducible variant.
    Scenario scenario_at(long tau, std::uint64_t seed) const;

    Eigen::VectorXd observation(const Scenario& scenario) const;
    StepResult step(const Scenario& scenario, const BidSet& bids) const;

private:
    Grid grid_;
    MarketConfig config_;
    ClearingFn clearing_;
};

}  // namespace bidsim

#endif
