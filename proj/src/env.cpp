#include "bidsim/env.hpp"

#include "bidsim/net.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace bidsim {

namespace {

void validate_config(const MarketConfig& c) {
    if (!(c.marginal_fraction > 0.0 && c.marginal_fraction < 1.0)) {
        throw std::invalid_argument("config: marginal fraction must be in (0, 1)");
    }
    if (c.n_agents < 1) throw std::invalid_argument("config: need at least one agent");
    if (!(c.p_total_mw > 0.0)) throw std::invalid_argument("config: P_total must be positive");
    if (!(c.p_max > 0.0)) throw std::invalid_argument("config: p_max must be positive");
    if (c.load_noise < 0.0 || c.load_noise >= 1.0) {
        throw std::invalid_argument("config: load noise must be in [0, 1)");
    }
    if (!c.marginal_override.empty() &&
        c.marginal_override.size() != static_cast<std::size_t>(c.n_agents)) {
        throw std::invalid_argument("config: marginal override size mismatch");
    }
}

}  // namespace

Eigen::VectorXd encode_time(long tau, const MarketConfig& config) {
    if (tau < 0) throw std::invalid_argument("encode_time: tau must be >= 0");
    const double frames[3] = {static_cast<double>(config.steps_per_day),
                              static_cast<double>(config.steps_per_week),
                              static_cast<double>(config.steps_per_year)};
    Eigen::VectorXd out(6);
    for (int i = 0; i < 3; ++i) {
        const double phase = 2.0 * std::numbers::pi * static_cast<double>(tau) / frames[i];
        out(i) = std::sin(phase);
        out(3 + i) = std::cos(phase);
    }
    return out;
}

double agent_capacity(const MarketConfig& config) {
    if (config.n_agents < 1) throw std::invalid_argument("agent_capacity: need agents");
    return config.p_total_mw / config.n_agents;
}

double load_profile(long tau, const MarketConfig& config) {
    const double two_pi = 2.0 * std::numbers::pi;
    const double day = two_pi * static_cast<double>(tau) / config.steps_per_day;
    const double week = two_pi * static_cast<double>(tau) / config.steps_per_week;
    const double year = two_pi * static_cast<double>(tau) / config.steps_per_year;
    const double m = 1.0 + 0.35 * std::sin(day - std::numbers::pi / 2.0) +
                     0.10 * std::sin(week) +
                     0.20 * std::sin(year - std::numbers::pi / 2.0);
    return std::max(m, 0.2);
}

MarketEnv::MarketEnv(Grid grid, MarketConfig config, ClearingFn clearing)
    : grid_(std::move(grid)), config_(std::move(config)), clearing_(std::move(clearing)) {
    if (!clearing_) throw std::invalid_argument("MarketEnv: clearing function required");
    if (config_.n_agents == 0) config_.n_agents = grid_.agent_count();
    if (config_.p_total_mw == 0.0) config_.p_total_mw = grid_.total_capacity_mw();
    validate_config(config_);
    if (config_.n_agents != grid_.agent_count()) {
        throw std::invalid_argument("config: agent count disagrees with the grid");
    }
    if (std::abs(config_.p_total_mw - grid_.total_capacity_mw()) > 1e-9) {
        throw std::invalid_argument("config: P_total disagrees with the grid");
    }
}

double MarketEnv::marginal_price(int agent) const {
    if (agent < 0 || agent >= config_.n_agents) {
        throw std::invalid_argument("marginal_price: bad agent index");
    }
    if (!config_.marginal_override.empty()) {
        return config_.marginal_override[static_cast<std::size_t>(agent)];
    }
    return config_.marginal_price();
}

Scenario MarketEnv::sample_scenario(std::mt19937_64& rng) const {
    std::uniform_int_distribution<long> tau_dist(0, config_.steps_per_year - 1);
    const long tau = tau_dist(rng);
    return scenario_at(tau, rng());
}

Scenario MarketEnv::scenario_at(long tau, std::uint64_t seed) const {
    Scenario s;
    s.tau = tau;
    s.seed = seed;
    const double base = load_profile(tau, config_);
    s.load_scale.resize(static_cast<Eigen::Index>(grid_.loads.size()));
    std::mt19937_64 noise_rng(derive_seed(seed, static_cast<std::uint64_t>(tau)));
    std::uniform_real_distribution<double> noise(1.0 - config_.load_noise,
                                                 1.0 + config_.load_noise);
    for (Eigen::Index i = 0; i < s.load_scale.size(); ++i) {
        s.load_scale(i) = base * (config_.load_noise == 0.0 ? 1.0 : noise(noise_rng));
    }
    return s;
}

Eigen::VectorXd MarketEnv::observation(const Scenario& scenario) const {
    return encode_time(scenario.tau, config_);
}

StepResult MarketEnv::step(const Scenario& scenario, const BidSet& bids) const {
    if (bids.prices.size() != config_.n_agents) {
        throw std::invalid_argument("step: bid count does not match agents");
    }
    for (Eigen::Index a = 0; a < bids.prices.size(); ++a) {
        if (bids.prices(a) < 0.0 || bids.prices(a) > bids.p_max) {
            throw std::invalid_argument("step: bid " + std::to_string(a) +
                                        " outside [0, p_max]");
        }
    }
    StepResult result;
    result.clearing = clearing_(grid_, scenario.load_scale, bids);
    result.rewards.resize(config_.n_agents);
    for (int a = 0; a < config_.n_agents; ++a) {
        result.rewards(a) =
            (bids.prices(a) - marginal_price(a)) * result.clearing.dispatch_mw(a);
    }
    const Eigen::VectorXd obs = observation(scenario);
    result.observations.assign(static_cast<std::size_t>(config_.n_agents), obs);
    return result;
}

}  // namespace bidsim
