#include "bidsim/marl.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace bidsim {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

constexpr int kObsSize = 6;

}  // namespace

const char* mode_name(TrainMode mode) {
    switch (mode) {
        case TrainMode::Maddpg: return "maddpg";
        case TrainMode::MMaddpg: return "m-maddpg";
        case TrainMode::Pretrain: return "pretrain";
    }
    return "maddpg";
}

long mmaddpg_start_threshold(int n_agents) {
    return std::max<long>(150L * n_agents, 2000L);
}

BiddingAgent BiddingAgent::make(TrainMode mode, int n_agents, const TrainHyper& hyper,
                                std::uint64_t seed) {
    BiddingAgent agent;
    agent.actor = MlpNet::make({kObsSize, hyper.actor_hidden, 1}, Activation::Relu,
                               Activation::Sigmoid, derive_seed(seed, 1));
    agent.actor_opt = OptimizerState::make(OptAlgo::RmsProp, hyper.actor_lr, agent.actor);
    if (mode == TrainMode::Maddpg) {
        agent.critic =
            MlpNet::make({kObsSize * n_agents + n_agents, hyper.critic_hidden, 1},
                         Activation::Relu, Activation::Identity, derive_seed(seed, 2));
        agent.critic_opt =
            OptimizerState::make(OptAlgo::RmsProp, hyper.critic_lr, agent.critic);
        agent.has_critic = true;
    }
    return agent;
}

std::vector<BiddingAgent> make_agents(TrainMode mode, int n_agents,
                                      const TrainHyper& hyper, std::uint64_t seed) {
    std::vector<BiddingAgent> agents;
    agents.reserve(static_cast<std::size_t>(n_agents));
    for (int a = 0; a < n_agents; ++a) {
        agents.push_back(BiddingAgent::make(mode, n_agents, hyper,
                                            derive_seed(seed, 100 + static_cast<std::uint64_t>(a))));
    }
    return agents;
}

BidSet select_bids(const std::vector<BiddingAgent>& agents,
                   const std::vector<Eigen::VectorXd>& observations, double p_max,
                   double noise_std, std::mt19937_64& rng) {
    if (observations.size() != agents.size()) {
        throw std::invalid_argument("select_bids: one observation per agent required");
    }
    BidSet bids;
    bids.p_max = p_max;
    bids.prices.resize(static_cast<Eigen::Index>(agents.size()));
    for (std::size_t a = 0; a < agents.size(); ++a) {
        double frac = forward(agents[a].actor, observations[a])(0);
        frac += gaussian_noise(1, noise_std, rng)(0);
        bids.prices(static_cast<Eigen::Index>(a)) = std::clamp(frac, 0.0, 1.0) * p_max;
    }
    return bids;
}

namespace {

// Shared batch layout for both trainers.
struct AgentBatch {
    Eigen::MatrixXd obs6;     // rows x 6, the common time encoding
    Eigen::MatrixXd all_obs;  // rows x 6|A|, per-agent observations side by side
    Eigen::MatrixXd frac;     // rows x |A|, bids / p_max
    Eigen::MatrixXd rewards;  // rows x |A|, €
    Eigen::MatrixXd loads;    // rows x 2L, load multipliers twice (P and Q)
};

AgentBatch assemble(const std::vector<const Transition*>& sample, int n_agents,
                    double p_max) {
    const int rows = static_cast<int>(sample.size());
    const auto n_loads = sample.front()->load_scale.size();
    AgentBatch b;
    b.obs6.resize(rows, kObsSize);
    b.all_obs.resize(rows, kObsSize * n_agents);
    b.frac.resize(rows, n_agents);
    b.rewards.resize(rows, n_agents);
    b.loads.resize(rows, 2 * n_loads);
    for (int r = 0; r < rows; ++r) {
        const Transition& t = *sample[static_cast<std::size_t>(r)];
        if (t.obs.size() != kObsSize || t.bids.size() != n_agents ||
            t.load_scale.size() != n_loads) {
            throw std::invalid_argument("train step: transition shape mismatch");
        }
        b.obs6.row(r) = t.obs.transpose();
        for (int a = 0; a < n_agents; ++a) {
            b.all_obs.row(r).segment(a * kObsSize, kObsSize) = t.obs.transpose();
        }
        b.frac.row(r) = t.bids.transpose() / p_max;
        b.rewards.row(r) = t.rewards.transpose();
        b.loads.row(r).segment(0, n_loads) = t.load_scale.transpose();
        b.loads.row(r).segment(n_loads, n_loads) = t.load_scale.transpose();
    }
    return b;
}

}  // namespace

StepLosses maddpg_train_step(std::vector<BiddingAgent>& agents,
                             const ReplayBuffer& buffer, double p_max,
                             double reward_scale, const TrainHyper& hyper,
                             std::mt19937_64& rng) {
    if (!(reward_scale > 0.0)) {
        throw std::invalid_argument("maddpg_train_step: reward_scale must be > 0");
    }
    const int n = static_cast<int>(agents.size());
    StepLosses out;
    out.threshold = hyper.maddpg_start;
    if (buffer.size() < static_cast<std::size_t>(hyper.maddpg_start)) return out;

    const auto sample = buffer.sample(hyper.batch, rng);
    AgentBatch b = assemble(sample, n, p_max);
    out.critic_loss.resize(n);
    out.actor_loss.resize(n);

    for (int a = 0; a < n; ++a) {
        {  // critic regression to the observed 1-step reward
            Tape tape;
            std::array<Tape::NodeId, 2> parts{tape.constant(b.all_obs),
                                              tape.constant(b.frac)};
            Tape::NodeId q = tape.forward(agents[static_cast<std::size_t>(a)].critic,
                                          tape.concat_cols(parts));
            Tape::NodeId err = tape.sub(q, tape.constant(b.rewards.col(a) / reward_scale));
            Tape::NodeId loss = tape.mean_all(tape.mul(err, err));
            tape.backward_scalar(loss);
            out.critic_loss(a) = tape.value(loss)(0, 0);
            auto& agent = agents[static_cast<std::size_t>(a)];
            optimize_step(agent.critic_opt, agent.critic, *tape.grads_for(agent.critic));
        }
        {  // actor ascent on the own critic, other actions from the batch
            Tape tape;
            auto& agent = agents[static_cast<std::size_t>(a)];
            Tape::NodeId own = tape.forward(agent.actor, tape.constant(b.obs6));
            std::vector<Tape::NodeId> parts{tape.constant(b.all_obs)};
            for (int j = 0; j < n; ++j) {
                parts.push_back(j == a ? own : tape.constant(b.frac.col(j)));
            }
            Tape::NodeId q = tape.forward(agent.critic, tape.concat_cols(parts));
            Tape::NodeId loss = tape.affine(tape.mean_all(q), -1.0, 0.0);
            tape.backward_scalar(loss);
            out.actor_loss(a) = tape.value(loss)(0, 0);
            // The critic's own gradients from this pass are discarded.
            optimize_step(agent.actor_opt, agent.actor, *tape.grads_for(agent.actor));
        }
    }
    out.trained = true;
    return out;
}

StepLosses mmaddpg_train_step(std::vector<BiddingAgent>& agents,
                              const ReplayBuffer& buffer,
                              const SurrogateAgent& snapshot,
                              const Eigen::VectorXd& marginal_eur,
                              const TrainHyper& hyper, std::mt19937_64& rng) {
    const int n = static_cast<int>(agents.size());
    StepLosses out;
    out.threshold = mmaddpg_start_threshold(n);
    if (marginal_eur.size() != n) {
        throw std::invalid_argument("mmaddpg_train_step: one marginal price per agent");
    }
    if (snapshot.n_agents() != n) {
        throw std::invalid_argument("mmaddpg_train_step: snapshot agent count mismatch");
    }
    if (buffer.total_pushed() < static_cast<std::size_t>(out.threshold)) return out;

    const auto sample = buffer.sample(hyper.batch, rng);
    AgentBatch b = assemble(sample, n, snapshot.p_max);
    if (b.loads.cols() != 2 * snapshot.n_loads) {
        throw std::invalid_argument("mmaddpg_train_step: snapshot load count mismatch");
    }
    out.actor_loss.resize(n);

    for (int a = 0; a < n; ++a) {
        auto& agent = agents[static_cast<std::size_t>(a)];
        Tape tape;
        Tape::NodeId own = tape.forward(agent.actor, tape.constant(b.obs6));
        std::vector<Tape::NodeId> parts{tape.constant(b.loads)};
        for (int j = 0; j < n; ++j) {
            parts.push_back(j == a ? own : tape.constant(b.frac.col(j)));
        }
        Tape::NodeId dispatch =
            predict_dispatch_node(snapshot, tape, tape.concat_cols(parts));
        Tape::NodeId own_mw = tape.slice_cols(dispatch, a, 1);
        Tape::NodeId price = tape.affine(own, snapshot.p_max, -marginal_eur(a));
        Tape::NodeId loss =
            tape.affine(tape.mean_all(tape.mul(price, own_mw)), -1.0, 0.0);
        tape.backward_scalar(loss);
        out.actor_loss(a) = tape.value(loss)(0, 0);
        // Snapshot gradients exist on the tape but are never applied.
        optimize_step(agent.actor_opt, agent.actor, *tape.grads_for(agent.actor));
    }
    out.trained = true;
    return out;
}

namespace {

struct Window {
    double bid_sum = 0.0, bid_sq = 0.0;
    double reward_sum = 0.0;
    double env_sec = 0.0, train_sec = 0.0;
    long bid_count = 0, steps = 0;

    void reset() { *this = Window{}; }
};

double probe_mape(const MarketEnv& env, const std::vector<BiddingAgent>& agents,
                  const SurrogateAgent& surrogate, int probes, std::mt19937_64& rng) {
    const double norm = surrogate.p_max * surrogate.p_total_mw;
    const double eps = 1e-6 * norm;
    double sum = 0.0;
    int used = 0;
    for (int k = 0; k < probes; ++k) {
        Scenario sc = env.sample_scenario(rng);
        std::vector<Eigen::VectorXd> obs(agents.size(), env.observation(sc));
        BidSet bids = select_bids(agents, obs, env.config().p_max, 0.0, rng);
        ClearingResult ref;
        try {
            ref = clear_market(env.grid(), sc.load_scale, bids);
        } catch (const std::runtime_error&) {
            continue;  // infeasible probe scenario
        }
        Eigen::VectorXd sobs = surrogate_observe(sc, bids, env.grid());
        ClearingResult ev = evaluate_dispatch(env.grid(), sc.load_scale, bids,
                                              predict_dispatch(surrogate, sobs));
        const double w = surrogate.hyper.w_pen * norm;
        const double j_ref = ref.objective_eur + w * ref.penalty.total;
        const double j_sur = ev.objective_eur + w * ev.penalty.total;
        sum += std::abs(j_sur - j_ref) / std::max(std::abs(j_ref), eps);
        ++used;
    }
    return used > 0 ? 100.0 * sum / used : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TrainResult training_loop(const Grid& grid, const MarketConfig& market,
                          const TrainLoopConfig& config, const RunSinks& sinks) {
    TrainResult result;
    const int n = grid.agent_count();

    std::unique_ptr<SurrogateAgent> surrogate;
    std::mt19937_64 rng_sdisp(derive_seed(config.seed, 12));
    if (uses_surrogate(config.mode)) {
        surrogate = std::make_unique<SurrogateAgent>(SurrogateAgent::make(
            grid, market.p_max, derive_seed(config.seed, 2), config.surrogate));
    }

    // Model modes add exploration noise to the surrogate's dispatch only
    // while the surrogate itself is still learning; a pretrained-and-frozen
    // surrogate clears deterministically.
    bool explore_dispatch = true;
    ClearingFn clearing;
    if (config.mode == TrainMode::Maddpg) {
        clearing = [](const Grid& g, const Eigen::VectorXd& scale, const BidSet& b) {
            return clear_market(g, scale, b);
        };
    } else {
        SurrogateAgent* s = surrogate.get();
        const bool* explore = &explore_dispatch;
        clearing = [s, explore, &rng_sdisp](const Grid& g, const Eigen::VectorXd& scale,
                                            const BidSet& b) {
            Scenario sc;
            sc.load_scale = scale;
            Eigen::VectorXd obs = surrogate_observe(sc, b, g);
            Eigen::VectorXd dispatch = *explore ? noisy_dispatch(*s, obs, rng_sdisp)
                                                : predict_dispatch(*s, obs);
            return evaluate_dispatch(g, scale, b, dispatch);
        };
    }
    MarketEnv env(grid, market, clearing);

    result.agents = make_agents(config.mode, n, config.hyper, derive_seed(config.seed, 1));
    Eigen::VectorXd marginal(n);
    for (int a = 0; a < n; ++a) marginal(a) = env.marginal_price(a);

    ReplayBuffer buffer(config.hyper.buffer_capacity);
    std::mt19937_64 rng_scen(derive_seed(config.seed, 10));
    std::mt19937_64 rng_noise(derive_seed(config.seed, 11));
    std::mt19937_64 rng_maddpg(derive_seed(config.seed, 13));
    std::mt19937_64 rng_surr(derive_seed(config.seed, 14));
    std::mt19937_64 rng_mape(derive_seed(config.seed, 15));

    std::unique_ptr<SurrogateAgent> snapshot;
    long agent_updates = 0;
    long last_checkpoint = -1;
    Window window;

    if (config.mode == TrainMode::Pretrain) {
        // Sequential variant: the surrogate learns the clearing first, on
        // uniformly random bids (the bid distribution is unknown before the
        // agents train), then freezes. This preamble is not metered and does
        // not feed the agents' buffer.
        ReplayBuffer pre_buffer(config.hyper.buffer_capacity);
        std::mt19937_64 rng_pre(derive_seed(config.seed, 16));
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        for (long ps = 1; ps <= config.pretrain_steps; ++ps) {
            Scenario sc = env.sample_scenario(rng_pre);
            BidSet bids;
            bids.p_max = market.p_max;
            bids.prices.resize(n);
            for (int a = 0; a < n; ++a) bids.prices(a) = uniform(rng_pre) * market.p_max;
            StepResult sr = env.step(sc, bids);

            Transition t;
            t.tau = sc.tau;
            t.seed = sc.seed;
            t.load_scale = sc.load_scale;
            t.obs = env.observation(sc);
            t.bids = bids.prices;
            t.dispatch_mw = sr.clearing.dispatch_mw;
            t.p_slack_mw = sr.clearing.p_slack_mw;
            t.objective_eur = sr.clearing.objective_eur;
            t.penalty_total = sr.clearing.penalty.total;
            t.converged = sr.clearing.power_flow_converged;
            t.rewards = sr.rewards;
            pre_buffer.push(std::move(t));

            ddpg_train_step(*surrogate, pre_buffer, rng_surr);
        }
        snapshot = std::make_unique<SurrogateAgent>(*surrogate);
        explore_dispatch = false;
    }

    auto checkpoint = [&](long step) {
        if (sinks.on_checkpoint) sinks.on_checkpoint(step, result.agents, surrogate.get());
        last_checkpoint = step;
    };

    long step = 0;
    try {
        for (step = 1; step <= config.steps; ++step) {
            Scenario sc = env.sample_scenario(rng_scen);
            std::vector<Eigen::VectorXd> obs(static_cast<std::size_t>(n),
                                             env.observation(sc));
            BidSet bids = select_bids(result.agents, obs, market.p_max,
                                      config.hyper.noise_std, rng_noise);

            const auto env_start = Clock::now();
            StepResult sr = env.step(sc, bids);
            const double env_sec = seconds_since(env_start);

            Transition t;
            t.tau = sc.tau;
            t.seed = sc.seed;
            t.load_scale = sc.load_scale;
            t.obs = obs.front();
            t.bids = bids.prices;
            t.dispatch_mw = sr.clearing.dispatch_mw;
            t.p_slack_mw = sr.clearing.p_slack_mw;
            t.objective_eur = sr.clearing.objective_eur;
            t.penalty_total = sr.clearing.penalty.total;
            t.converged = sr.clearing.power_flow_converged;
            t.rewards = sr.rewards;
            buffer.push(std::move(t));

            const auto train_start = Clock::now();
            if (config.mode == TrainMode::Maddpg) {
                maddpg_train_step(result.agents, buffer, env.config().p_max,
                                  env.config().p_max * env.config().p_total_mw,
                                  config.hyper, rng_maddpg);
            } else if (config.mode == TrainMode::MMaddpg) {
                ddpg_train_step(*surrogate, buffer, rng_surr);
                if (buffer.total_pushed() >=
                    static_cast<std::size_t>(mmaddpg_start_threshold(n))) {
                    if (!snapshot || agent_updates % config.hyper.snapshot_refresh == 0) {
                        snapshot = std::make_unique<SurrogateAgent>(*surrogate);
                    }
                    mmaddpg_train_step(result.agents, buffer, *snapshot, marginal,
                                       config.hyper, rng_maddpg);
                    ++agent_updates;
                }
            } else {
                // Pretrain: the surrogate is frozen; agents wait only for the
                // generic minimum buffer fill, not the parallel-mode schedule.
                if (buffer.total_pushed() >=
                    static_cast<std::size_t>(config.hyper.maddpg_start)) {
                    mmaddpg_train_step(result.agents, buffer, *snapshot, marginal,
                                       config.hyper, rng_maddpg);
                    ++agent_updates;
                }
            }
            const double train_sec = seconds_since(train_start);

            result.env_seconds_total += env_sec;
            result.train_seconds_total += train_sec;
            window.env_sec += env_sec;
            window.train_sec += train_sec;
            window.bid_sum += bids.prices.sum();
            window.bid_sq += bids.prices.squaredNorm();
            window.bid_count += n;
            window.reward_sum += sr.rewards.sum();
            ++window.steps;

            if (config.metric_every > 0 && step % config.metric_every == 0) {
                MetricRow row;
                row.step = step;
                row.mode = config.mode;
                const double nb = static_cast<double>(window.bid_count);
                row.mean_bid = window.bid_sum / nb;
                row.std_bid = std::sqrt(
                    std::max(0.0, window.bid_sq / nb - row.mean_bid * row.mean_bid));
                row.mean_reward = window.reward_sum / nb;
                row.env_step_seconds = window.env_sec / static_cast<double>(window.steps);
                row.train_step_seconds =
                    window.train_sec / static_cast<double>(window.steps);
                if (uses_surrogate(config.mode) && config.mape_probes > 0) {
                    row.surrogate_mape = probe_mape(env, result.agents, *surrogate,
                                                    config.mape_probes, rng_mape);
                }
                if (sinks.on_metrics) sinks.on_metrics(row);
                window.reset();
            }
            if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
                checkpoint(step);
            }
        }
    } catch (...) {
        checkpoint(std::min(step, config.steps));  // abort still leaves a checkpoint
        throw;
    }

    result.steps = config.steps;
    if (last_checkpoint != config.steps) checkpoint(config.steps);
    result.surrogate = std::move(surrogate);
    return result;
}

}  // namespace bidsim
