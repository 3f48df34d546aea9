#include "bidsim/clearing.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace bidsim {

namespace {

void validate_inputs(const Grid& grid, const Eigen::VectorXd& load_scale,
                     const BidSet& bids) {
    if (bids.prices.size() != grid.agent_count()) {
        throw std::invalid_argument("clearing: bid count does not match agents");
    }
    if (!(bids.p_max > 0.0)) throw std::invalid_argument("clearing: p_max must be positive");
    for (Eigen::Index i = 0; i < bids.prices.size(); ++i) {
        if (bids.prices(i) < 0.0 || bids.prices(i) > bids.p_max) {
            throw std::invalid_argument("clearing: bid " + std::to_string(i) +
                                        " outside [0, p_max]");
        }
    }
    if (load_scale.size() != static_cast<Eigen::Index>(grid.loads.size())) {
        throw std::invalid_argument("clearing: scale count does not match loads");
    }
}

struct Eval {
    double objective = 0.0;       // market cost J, or the divergence sentinel
    PenaltyBreakdown penalty;
    double p_slack_mw = 0.0;
    bool converged = false;
    double merit(double weight) const { return objective + weight * penalty.total; }
};

Eval evaluate(const Grid& grid, const Eigen::VectorXd& load_scale, const BidSet& bids,
              const Eigen::VectorXd& dispatch) {
    Eval e;
    PowerFlowSolution sol = run_power_flow(grid, dispatch, load_scale);
    e.converged = sol.converged;
    if (!sol.converged) {
        e.objective = grid.total_capacity_mw() * bids.p_max;
        e.penalty = PenaltyBreakdown::divergence();
        return e;
    }
    e.p_slack_mw = sol.p_slack_mw;
    e.penalty = penalties(sol, grid);
    e.objective = objective(bids, dispatch, sol.p_slack_mw);
    return e;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

double objective(const BidSet& bids, const Eigen::VectorXd& dispatch_mw,
                 double slack_mw) {
    if (dispatch_mw.size() != bids.prices.size()) {
        throw std::invalid_argument("objective: dimension mismatch");
    }
    return bids.prices.dot(dispatch_mw) + std::max(slack_mw * bids.p_max, 0.0);
}

ClearingResult clear_market(const Grid& grid, const Eigen::VectorXd& load_scale,
                            const BidSet& bids) {
    validate_inputs(grid, load_scale, bids);
    const auto start = Clock::now();
    const int n = grid.agent_count();
    const double p_total = grid.total_capacity_mw();
    const double stop_delta = 1e-4 * bids.p_max * p_total;

    Eigen::VectorXd cap(n), base_step(n);
    for (int a = 0; a < n; ++a) {
        cap(a) = grid.gens[a].p_max_mw;
        base_step(a) = 0.02 * cap(a) / bids.p_max;  // a full-cap-price gradient moves 2% of the box
    }
    Eigen::VectorXd point = 0.5 * cap;

    bool any_converged = false;
    int iterations = 0;
    double weight = 10.0 * bids.p_max;
    Eval cur = evaluate(grid, load_scale, bids, point);
    any_converged |= cur.converged;

    // The slack-cost kink at P_slack = 0 makes the cost surface a valley
    // whose floor (total dispatch = load + losses) is non-increasing only
    // along zero-sum redistributions. The raw gradient never has mixed
    // signs there, so alongside the plain projected-gradient step we try an
    // "exchange" direction: the gradient projected onto the active
    // slack-balance constraint, moving cheap agents up and expensive ones
    // down with zero net dispatch change.
    for (int round = 0; round < 8; ++round) {
        double scale = 1.0;
        int small_steps = 0;
        for (int it = 0; it < 500 && small_steps < 5 && scale >= 1e-6; ++it) {
            ++iterations;
            Eigen::VectorXd grad(n);
            if (!cur.converged) {
                // Divergence is almost always unserved load; push dispatch up.
                grad.setConstant(-bids.p_max);
            } else {
                const double slack_price = cur.p_slack_mw > 0.0 ? bids.p_max : 0.0;
                for (int a = 0; a < n; ++a) grad(a) = bids.prices(a) - slack_price;
                if (cur.penalty.total > 0.0) {
                    // Central differences of the weighted penalty, only while
                    // a constraint is actually violated.
                    for (int a = 0; a < n; ++a) {
                        const double h = std::max(1e-3, 1e-3 * cap(a));
                        Eigen::VectorXd up = point, dn = point;
                        up(a) = std::min(cap(a), point(a) + h);
                        dn(a) = std::max(0.0, point(a) - h);
                        if (up(a) == dn(a)) continue;
                        Eval eu = evaluate(grid, load_scale, bids, up);
                        Eval ed = evaluate(grid, load_scale, bids, dn);
                        any_converged |= eu.converged || ed.converged;
                        grad(a) += weight * (eu.penalty.total - ed.penalty.total) /
                                   (up(a) - dn(a));
                    }
                }
            }

            std::vector<Eigen::VectorXd> directions;
            directions.push_back(grad);
            if (n > 1) {
                const double mean_bid =
                    base_step.cwiseProduct(bids.prices).sum() / base_step.sum();
                Eigen::VectorXd exchange = bids.prices.array() - mean_bid;
                const double span = exchange.cwiseAbs().maxCoeff();
                if (span > 1e-12) directions.push_back(exchange * (bids.p_max / span));
            }

            bool improved = false;
            for (const Eigen::VectorXd& dir : directions) {
                Eigen::VectorXd next = (point - scale * base_step.cwiseProduct(dir))
                                           .cwiseMax(0.0)
                                           .cwiseMin(cap);
                if ((next - point).cwiseAbs().maxCoeff() == 0.0) continue;
                Eval cand = evaluate(grid, load_scale, bids, next);
                any_converged |= cand.converged;
                const double improvement = cur.merit(weight) - cand.merit(weight);
                if (improvement > 0.0) {
                    point = next;
                    cur = cand;
                    // Substantive progress resets the convergence clock; a
                    // tiny accepted step merely freezes it, because with the
                    // growing gain below it may be the start of a crawl out
                    // of a near-flat valley (bids just under the slack
                    // price), not convergence.
                    if (improvement >= stop_delta) small_steps = 0;
                    improved = true;
                    scale = std::min(scale * 2.0, 1e6);
                    break;
                }
            }
            if (!improved) {
                scale *= 0.5;
                ++small_steps;
            }
        }
        if (cur.converged && cur.penalty.total <= 1e-4) break;
        weight *= 2.0;
    }

    if (!any_converged) throw std::runtime_error("infeasible scenario");

    ClearingResult result;
    result.dispatch_mw = point;
    result.p_slack_mw = cur.p_slack_mw;
    result.objective_eur = cur.objective;
    result.penalty = cur.penalty;
    result.power_flow_converged = cur.converged;
    result.iterations = iterations;
    result.wall_seconds = seconds_since(start);
    return result;
}

ClearingResult brute_force_clear(const Grid& grid, const Eigen::VectorXd& load_scale,
                                 const BidSet& bids, double step_mw) {
    validate_inputs(grid, load_scale, bids);
    if (!(step_mw > 0.0)) throw std::invalid_argument("brute force: step must be positive");
    const int n = grid.agent_count();
    if (n > 3) throw std::invalid_argument("brute force: more than 3 agents");

    std::vector<std::vector<double>> axes(n);
    double lattice_size = 1.0;
    for (int a = 0; a < n; ++a) {
        const double cap = grid.gens[a].p_max_mw;
        for (double v = 0.0; v < cap - 1e-9; v += step_mw) axes[a].push_back(v);
        axes[a].push_back(cap);
        lattice_size *= static_cast<double>(axes[a].size());
    }
    if (lattice_size > 1e7) {
        throw std::invalid_argument("brute force: lattice exceeds 1e7 points");
    }

    const auto start = Clock::now();
    const double p_total = grid.total_capacity_mw();

    ClearingResult best;
    double best_score = std::numeric_limits<double>::infinity();
    bool best_feasible = false;
    int count = 0;

    std::vector<std::size_t> idx(n, 0);
    Eigen::VectorXd dispatch(n);
    while (true) {
        for (int a = 0; a < n; ++a) dispatch(a) = axes[a][idx[a]];
        Eval e = evaluate(grid, load_scale, bids, dispatch);
        ++count;
        const bool feasible = e.converged && e.penalty.total == 0.0;
        const double score =
            feasible ? e.objective : e.objective + bids.p_max * p_total * e.penalty.total;
        const bool better = best_feasible
                                ? (feasible && score < best_score)
                                : (feasible || score < best_score);
        if (better) {
            best_feasible = feasible;
            best_score = score;
            best.dispatch_mw = dispatch;
            best.p_slack_mw = e.p_slack_mw;
            best.objective_eur = e.objective;
            best.penalty = e.penalty;
            best.power_flow_converged = e.converged;
        }
        int a = 0;
        for (; a < n; ++a) {
            if (++idx[a] < axes[a].size()) break;
            idx[a] = 0;
        }
        if (a == n) break;
    }
    best.iterations = count;
    best.wall_seconds = seconds_since(start);
    return best;
}

}  // namespace bidsim
