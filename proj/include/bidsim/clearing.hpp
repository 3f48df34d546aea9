#ifndef BIDSIM_CLEARING_HPP
#define BIDSIM_CLEARING_HPP

#include "bidsim/grid.hpp"

#include <Eigen/Dense>

#include <functional>

// Pay-as-bid market clearing: minimize total procurement cost over dispatch
// setpoints subject to the network constraints, with residual demand served
// by the slack at the price cap. Includes a brute-force lattice oracle used
// to validate the reference solver on tiny grids.
namespace bidsim {

struct BidSet {
    Eigen::VectorXd prices;  // per agent, €/MW
    double p_max = 600.0;    // price cap, €/MW
};

// Total cost: sum of pay-as-bid payments plus slack energy at the cap.
// Negative slack power (export) earns nothing.
double objective(const BidSet& bids, const Eigen::VectorXd& dispatch_mw,
                 double slack_mw);

struct ClearingResult {
    Eigen::VectorXd dispatch_mw;  // per agent
    double p_slack_mw = 0.0;
    double objective_eur = 0.0;
    PenaltyBreakdown penalty;
    bool power_flow_converged = false;  // at the returned point
    int iterations = 0;
    double wall_seconds = 0.0;
};

// Projected-gradient reference solver. Throws "infeasible scenario" when the
// power flow diverges at every point it ever tries.
ClearingResult clear_market(const Grid& grid, const Eigen::VectorXd& load_scale,
                            const BidSet& bids);

// Exhaustive lattice search; the validation oracle. Feasible points are those
// with zero penalty; when none exists the score is J + p_max*P_total*penalty.
// Requires at most 3 agents and at most 1e7 lattice points.
ClearingResult brute_force_clear(const Grid& grid, const Eigen::VectorXd& load_scale,
                                 const BidSet& bids, double step_mw);

// Substitution seam: the environment accepts any clearing implementation
// with this shape (reference OPF, surrogate, or a test stub).
using ClearingFn =
    std::function<ClearingResult(const Grid&, const Eigen::VectorXd&, const BidSet&)>;

}  // namespace bidsim

#endif
