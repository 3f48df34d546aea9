#include "bidsim/surrogate.hpp"

#include <chrono>
#include <stdexcept>

namespace bidsim {

SurrogateAgent SurrogateAgent::make(const Grid& grid, double p_max, std::uint64_t seed,
                                    SurrogateHyper hyper) {
    SurrogateAgent agent;
    agent.hyper = hyper;
    agent.p_max = p_max;
    agent.n_loads = static_cast<int>(grid.loads.size());
    agent.caps_mw.resize(grid.agent_count());
    for (int a = 0; a < grid.agent_count(); ++a) {
        agent.caps_mw(a) = grid.gens[static_cast<std::size_t>(a)].p_max_mw;
    }
    agent.p_total_mw = agent.caps_mw.sum();
    const int obs = agent.obs_size();
    const int n = agent.n_agents();
    agent.actor = MlpNet::make({obs, hyper.hidden, n}, Activation::Relu,
                               Activation::Sigmoid, derive_seed(seed, 1));
    agent.critic = MlpNet::make({obs + n, hyper.hidden, 1}, Activation::Relu,
                                Activation::Identity, derive_seed(seed, 2));
    agent.actor_opt = OptimizerState::make(OptAlgo::Adam, hyper.actor_lr, agent.actor);
    agent.critic_opt = OptimizerState::make(OptAlgo::Adam, hyper.critic_lr, agent.critic);
    return agent;
}

Eigen::VectorXd surrogate_observe(const Scenario& scenario, const BidSet& bids,
                                  const Grid& grid) {
    const Eigen::Index n_loads = static_cast<Eigen::Index>(grid.loads.size());
    if (scenario.load_scale.size() != n_loads) {
        throw std::invalid_argument("surrogate_observe: scenario does not match grid loads");
    }
    if (bids.prices.size() != grid.agent_count()) {
        throw std::invalid_argument("surrogate_observe: bid count does not match agents");
    }
    Eigen::VectorXd obs(2 * n_loads + bids.prices.size());
    obs.segment(0, n_loads) = scenario.load_scale;          // P_l / nominal
    obs.segment(n_loads, n_loads) = scenario.load_scale;    // Q_l / nominal
    obs.segment(2 * n_loads, bids.prices.size()) = bids.prices / bids.p_max;
    return obs;
}

double surrogate_reward(const ClearingResult& result, double p_max,
                        double p_total_mw, double w_pen) {
    return -result.objective_eur / (p_max * p_total_mw) - w_pen * result.penalty.total;
}

ClearingResult evaluate_dispatch(const Grid& grid, const Eigen::VectorXd& load_scale,
                                 const BidSet& bids, const Eigen::VectorXd& dispatch_mw) {
    if (dispatch_mw.size() != grid.agent_count()) {
        throw std::invalid_argument("evaluate_dispatch: dispatch count does not match agents");
    }
    const auto start = std::chrono::steady_clock::now();
    ClearingResult r;
    r.dispatch_mw = dispatch_mw;
    PowerFlowSolution sol = run_power_flow(grid, dispatch_mw, load_scale);
    r.power_flow_converged = sol.converged;
    if (sol.converged) {
        r.p_slack_mw = sol.p_slack_mw;
        r.penalty = penalties(sol, grid);
        r.objective_eur = objective(bids, dispatch_mw, sol.p_slack_mw);
    } else {
        r.penalty = PenaltyBreakdown::divergence();
        r.objective_eur = grid.total_capacity_mw() * bids.p_max;
    }
    r.iterations = sol.iterations;
    r.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

Eigen::VectorXd predict_dispatch(const SurrogateAgent& agent,
                                 const Eigen::VectorXd& observation) {
    return forward(agent.actor, observation).cwiseProduct(agent.caps_mw);
}

Tape::NodeId predict_dispatch_node(const SurrogateAgent& agent, Tape& tape,
                                   Tape::NodeId observation) {
    Tape::NodeId frac = tape.forward(agent.actor, observation);
    return tape.scale_cols(frac, agent.caps_mw.transpose());
}

Eigen::VectorXd noisy_dispatch(const SurrogateAgent& agent,
                               const Eigen::VectorXd& observation,
                               std::mt19937_64& rng) {
    Eigen::VectorXd frac = forward(agent.actor, observation) +
                           gaussian_noise(agent.n_agents(), agent.hyper.noise_std, rng);
    return frac.cwiseMax(0.0).cwiseMin(1.0).cwiseProduct(agent.caps_mw);
}

namespace {

// Shared batch assembly: observation rows, action-fraction rows and the
// critic's regression target (the reward part the actor cannot compute).
struct Batch {
    Eigen::MatrixXd obs;
    Eigen::MatrixXd act_frac;
    Eigen::MatrixXd target;     // batch x 1
    Eigen::MatrixXd cost_w;     // bids*caps/(p_max*P_total), per row/agent
};

Batch assemble(const SurrogateAgent& agent, const std::vector<const Transition*>& sample) {
    const int rows = static_cast<int>(sample.size());
    const int n_loads = agent.n_loads;
    const int n = agent.n_agents();
    const double norm = agent.p_max * agent.p_total_mw;

    Batch b;
    b.obs.resize(rows, agent.obs_size());
    b.act_frac.resize(rows, n);
    b.target.resize(rows, 1);
    b.cost_w.resize(rows, n);
    for (int r = 0; r < rows; ++r) {
        const Transition& t = *sample[static_cast<std::size_t>(r)];
        b.obs.row(r).segment(0, n_loads) = t.load_scale.transpose();
        b.obs.row(r).segment(n_loads, n_loads) = t.load_scale.transpose();
        b.obs.row(r).segment(2 * n_loads, n) = t.bids.transpose() / agent.p_max;
        b.act_frac.row(r) = t.dispatch_mw.cwiseQuotient(agent.caps_mw).transpose();
        const double known_cost = t.bids.dot(t.dispatch_mw);
        b.target(r, 0) = -(t.objective_eur - known_cost) / norm -
                         agent.hyper.w_pen * t.penalty_total;
        b.cost_w.row(r) = t.bids.cwiseProduct(agent.caps_mw).transpose() / norm;
    }
    return b;
}

}  // namespace

SurrogateLosses ddpg_train_step(SurrogateAgent& agent, const ReplayBuffer& buffer,
                                std::mt19937_64& rng) {
    SurrogateLosses out;
    if (buffer.size() < static_cast<std::size_t>(agent.hyper.start_train)) return out;
    const auto sample = buffer.sample(agent.hyper.batch, rng);
    Batch b = assemble(agent, sample);
    const int n = agent.n_agents();

    {  // critic regression toward the observed unknown reward part
        Tape tape;
        Tape::NodeId obs = tape.constant(b.obs);
        Tape::NodeId act = tape.constant(b.act_frac);
        std::array<Tape::NodeId, 2> parts{obs, act};
        Tape::NodeId q = tape.forward(agent.critic, tape.concat_cols(parts));
        Tape::NodeId err = tape.sub(q, tape.constant(b.target));
        Tape::NodeId loss = tape.mean_all(tape.mul(err, err));
        tape.backward_scalar(loss);
        out.critic_loss = tape.value(loss)(0, 0);
        optimize_step(agent.critic_opt, agent.critic, *tape.grads_for(agent.critic));
    }
    {  // actor: known pay-as-bid cost plus the critic's penalty estimate
        Tape tape;
        Tape::NodeId obs = tape.constant(b.obs);
        Tape::NodeId frac = tape.forward(agent.actor, obs);
        Tape::NodeId cost =
            tape.affine(tape.mean_all(tape.mul(frac, tape.constant(b.cost_w))),
                        static_cast<double>(n), 0.0);
        std::array<Tape::NodeId, 2> parts{obs, frac};
        Tape::NodeId q = tape.forward(agent.critic, tape.concat_cols(parts));
        Tape::NodeId loss = tape.add(cost, tape.affine(tape.mean_all(q), -1.0, 0.0));
        tape.backward_scalar(loss);
        out.actor_loss = tape.value(loss)(0, 0);
        // Gradients also land on the critic; only the actor is updated here.
        optimize_step(agent.actor_opt, agent.actor, *tape.grads_for(agent.actor));
    }
    out.trained = true;
    return out;
}

}  // namespace bidsim
