#ifndef BIDSIM_EVALUATION_HPP
#define BIDSIM_EVALUATION_HPP

#include "bidsim/marl.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <vector>

// Regret evaluation: how much reward each agent leaves on the table against
// the best response found by seeded local search, always judged by the
// reference clearing — never by the surrogate under test.
namespace bidsim {

inline constexpr int kSearchSeeds = 13;          // equidistant bids over [0, p_max]
inline constexpr double kSearchTolFrac = 1e-3;   // bracket width target, x p_max

struct BestResponse {
    double bid = 0.0;
    double reward = 0.0;  // €
    int skipped = 0;      // candidates whose clearing failed
};

// Seeds the candidate set with the incumbent bid plus 13 equidistant bids,
// then narrows the bracket around the best seed by golden-section search.
// Returns the best candidate ever evaluated. Throws when every candidate's
// clearing fails.
BestResponse best_response_search(const MarketEnv& env, const Scenario& scenario,
                                  const BidSet& fixed_bids, int agent_index,
                                  const ClearingFn& clearing);

struct RegretDetail {
    int state_id = 0;
    int agent_id = 0;
    double current_bid = 0.0;
    double best_bid = 0.0;
    double current_reward = 0.0;
    double best_reward = 0.0;
    double regret = 0.0;  // €, >= 0 (the incumbent is a search candidate)
};

struct RegretReport {
    Eigen::VectorXd psi;  // per-agent mean regret over states, €
    double total = 0.0;   // Ψ = sum of psi
    int n_states = 0;
    std::vector<RegretDetail> details;  // ordered by (state, agent)
    int search_seeds = kSearchSeeds;
    double search_tol_frac = kSearchTolFrac;
};

// Freezes every agent's noiseless bid per sampled state, then searches each
// agent's best response with the reference clearing. States are evaluated by
// a worker pool (workers = 0 picks the hardware count); results do not
// depend on scheduling. Agents are never mutated.
RegretReport regret_test(const MarketEnv& env, const std::vector<BiddingAgent>& agents,
                         int n_states, std::uint64_t seed, int workers = 0);

// Same protocol with i.i.d. uniform bids over [0, p_max].
RegretReport random_baseline(const MarketEnv& env, int n_states, std::uint64_t seed,
                             int workers = 0);

struct MapeReport {
    double mape_percent = 0.0;  // NaN when every sample was excluded
    int n_samples = 0;
    int excluded = 0;  // reference clearing failures
};

// Cost error of the surrogate's dispatch against the reference clearing over
// random (scenario, uniform-bid) samples. Both costs add penalty * w_pen *
// p_max * P_total on top of the market cost; the denominator is floored at
// 1e-6 * p_max * P_total.
MapeReport opf_mape(const SurrogateAgent& surrogate, const ClearingFn& reference,
                    const MarketEnv& env, int n_samples, std::uint64_t seed,
                    int workers = 0);

// Detail rows, one per (state, agent), then per-agent summary rows
// (state_id -1) and a total row (state_id -1, agent_id -1).
void write_regret_csv(std::ostream& out, const RegretReport& report);

}  // namespace bidsim

#endif
