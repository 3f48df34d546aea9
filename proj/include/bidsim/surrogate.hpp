#ifndef BIDSIM_SURROGATE_HPP
#define BIDSIM_SURROGATE_HPP

#include "bidsim/clearing.hpp"
#include "bidsim/env.hpp"
#include "bidsim/net.hpp"
#include "bidsim/replay.hpp"

#include <Eigen/Dense>

#include <random>

// Learned market clearing: a DDPG agent whose actor maps (loads, bids) to
// dispatch setpoints and whose critic learns only the unknown part of the
// reward — slack cost and constraint penalties — while the pay-as-bid cost
// term is hardcoded into the actor loss.
namespace bidsim {

struct SurrogateHyper {
    int batch = 128;
    double actor_lr = 1e-4;
    double critic_lr = 1e-3;
    int hidden = 256;
    double noise_std = 0.2;
    int start_train = 1000;
    double w_pen = 10.0;  // penalty weight on the normalized reward scale
};

struct SurrogateAgent {
    MlpNet actor;   // obs -> setpoint fractions in [0,1]
    MlpNet critic;  // obs + action fractions -> unknown reward part
    OptimizerState actor_opt;
    OptimizerState critic_opt;
    SurrogateHyper hyper;
    Eigen::VectorXd caps_mw;  // per agent
    double p_max = 600.0;
    double p_total_mw = 0.0;
    int n_loads = 0;

    int obs_size() const { return 2 * n_loads + static_cast<int>(caps_mw.size()); }
    int n_agents() const { return static_cast<int>(caps_mw.size()); }

    static SurrogateAgent make(const Grid& grid, double p_max, std::uint64_t seed,
                               SurrogateHyper hyper = {});
};

// Observation [P_l, Q_l, p_a]: loads normalized by their nominal values (so
// the entries are the scenario multipliers) and bids by p_max.
Eigen::VectorXd surrogate_observe(const Scenario& scenario, const BidSet& bids,
                                  const Grid& grid);

// Normalized reward: -J/(p_max*P_total) - w_pen * total penalty.
double surrogate_reward(const ClearingResult& result, double p_max,
                        double p_total_mw, double w_pen = 10.0);

// Power-flow evaluation of externally chosen setpoints: the environment side
// of surrogate training, and the fair way to cost its dispatch afterwards.
ClearingResult evaluate_dispatch(const Grid& grid, const Eigen::VectorXd& load_scale,
                                 const BidSet& bids, const Eigen::VectorXd& dispatch_mw);

// Deterministic actor forward, scaled to MW.
Eigen::VectorXd predict_dispatch(const SurrogateAgent& agent,
                                 const Eigen::VectorXd& observation);

// Differentiable variant used by the model-based bidding agents: the result
// node holds per-agent MW.
Tape::NodeId predict_dispatch_node(const SurrogateAgent& agent, Tape& tape,
                                   Tape::NodeId observation);

// Exploration: Gaussian noise on the fractions, clamped back into [0, 1].
Eigen::VectorXd noisy_dispatch(const SurrogateAgent& agent,
                               const Eigen::VectorXd& observation,
                               std::mt19937_64& rng);

struct SurrogateLosses {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    bool trained = false;
};

// One DDPG update (critic regression + hardcoded-cost actor step). A no-op
// reporting trained=false until the buffer reaches the start threshold.
SurrogateLosses ddpg_train_step(SurrogateAgent& agent, const ReplayBuffer& buffer,
                                std::mt19937_64& rng);

}  // namespace bidsim

#endif
