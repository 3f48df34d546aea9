#ifndef BIDSIM_MARL_HPP
#define BIDSIM_MARL_HPP

#include "bidsim/env.hpp"
#include "bidsim/replay.hpp"
#include "bidsim/surrogate.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

// Bidding agents: baseline MADDPG (per-agent actors, centralized critics)
// and the model-based variant that differentiates a hardcoded profit loss
// through a frozen surrogate snapshot instead of learning critics.
namespace bidsim {

// Pretrain is the sequential variant of the model-based mode: the surrogate
// is trained first on uniformly random bids, then frozen while the agents
// train against it.
enum class TrainMode { Maddpg, MMaddpg, Pretrain };

const char* mode_name(TrainMode mode);  // "maddpg" / "m-maddpg" / "pretrain"

// Model-based modes train bidding agents through a surrogate instead of
// learned critics.
inline bool uses_surrogate(TrainMode mode) { return mode != TrainMode::Maddpg; }

struct TrainHyper {
    int batch = 256;
    double actor_lr = 1e-3;
    double critic_lr = 1e-3;
    int actor_hidden = 128;
    int critic_hidden = 256;
    double noise_std = 0.2;
    int maddpg_start = 1000;            // minimum buffer size before updates
    std::size_t buffer_capacity = 50000;
    int snapshot_refresh = 100;         // agent updates between surrogate snapshots
};

// Model-based agents start only after max(150*|A|, 2000) environment steps,
// so the shared buffer seeds the surrogate with wide random-bid coverage.
long mmaddpg_start_threshold(int n_agents);

struct BiddingAgent {
    MlpNet actor;   // 6 -> 1, sigmoid output scaled to [0, p_max]
    MlpNet critic;  // MADDPG only: all observations + all actions -> value
    OptimizerState actor_opt;
    OptimizerState critic_opt;
    bool has_critic = false;

    static BiddingAgent make(TrainMode mode, int n_agents, const TrainHyper& hyper,
                             std::uint64_t seed);
};

std::vector<BiddingAgent> make_agents(TrainMode mode, int n_agents,
                                      const TrainHyper& hyper, std::uint64_t seed);

// Decentralized execution: each agent reads only its own observation.
// Gaussian noise lands on the sigmoid fraction before scaling to [0, p_max].
BidSet select_bids(const std::vector<BiddingAgent>& agents,
                   const std::vector<Eigen::VectorXd>& observations, double p_max,
                   double noise_std, std::mt19937_64& rng);

struct StepLosses {
    Eigen::VectorXd critic_loss;  // per agent; empty when no critics exist
    Eigen::VectorXd actor_loss;
    bool trained = false;
    long threshold = 0;  // the applicable start threshold
};

// Per agent: critic regression of Q(all obs, all actions) to the observed
// 1-step reward expressed in units of reward_scale, then actor ascent on the
// own critic with the other agents' actions taken from the batch. No-op
// below the buffer threshold. The training loop passes p_max * P_total so
// the regression targets stay O(1) — raw € targets (~1e4) would spend
// thousands of RMSprop updates just scaling the critic's output layer.
StepLosses maddpg_train_step(std::vector<BiddingAgent>& agents,
                             const ReplayBuffer& buffer, double p_max,
                             double reward_scale, const TrainHyper& hyper,
                             std::mt19937_64& rng);

// Per agent: own bid from the actor joins the batch bids of the others in
// the surrogate observation; the loss -(p_a - marginal_a) * P_a(surrogate)
// backpropagates through the frozen snapshot into the actor only. No-op
// before the start threshold, which is reported either way.
StepLosses mmaddpg_train_step(std::vector<BiddingAgent>& agents,
                              const ReplayBuffer& buffer,
                              const SurrogateAgent& snapshot,
                              const Eigen::VectorXd& marginal_eur,
                              const TrainHyper& hyper, std::mt19937_64& rng);

struct MetricRow {
    long step = 0;  // last step of the aggregation window
    TrainMode mode = TrainMode::Maddpg;
    double mean_bid = 0.0;  // €/MW over the window's executed bids
    double std_bid = 0.0;
    double mean_reward = 0.0;  // € per agent-step
    double surrogate_mape = std::numeric_limits<double>::quiet_NaN();  // % (model mode)
    double env_step_seconds = 0.0;    // window means
    double train_step_seconds = 0.0;
};

struct RunSinks {
    std::function<void(const MetricRow&)> on_metrics;
    // surrogate is null in MADDPG mode; called on the checkpoint cadence,
    // once more at the end, and on abort before the error propagates.
    std::function<void(long step, const std::vector<BiddingAgent>& agents,
                       const SurrogateAgent* surrogate)>
        on_checkpoint;
};

struct TrainLoopConfig {
    TrainMode mode = TrainMode::Maddpg;
    long steps = 20000;
    int metric_every = 100;
    long checkpoint_every = 5000;
    std::uint64_t seed = 1;
    TrainHyper hyper;
    SurrogateHyper surrogate;
    int mape_probes = 5;  // reference clearings per metric row (model mode)
    // Pretrain mode only: surrogate-only steps on uniform random bids before
    // the metered agent-training loop starts.
    long pretrain_steps = 5000;
};

struct TrainResult {
    std::vector<BiddingAgent> agents;
    std::unique_ptr<SurrogateAgent> surrogate;  // null in MADDPG mode
    long steps = 0;
    double env_seconds_total = 0.0;
    double train_seconds_total = 0.0;

    double mean_env_step_seconds() const {
        return steps > 0 ? env_seconds_total / static_cast<double>(steps) : 0.0;
    }
};

// One seeded run: sample scenario, select noisy bids, clear (reference OPF,
// or noisy surrogate dispatch evaluated by power flow in model mode), store
// the transition in the shared buffer, then the applicable train steps.
// Environment and update wall time accumulate separately. Any error aborts
// after a final checkpoint.
TrainResult training_loop(const Grid& grid, const MarketConfig& market,
                          const TrainLoopConfig& config, const RunSinks& sinks);

}  // namespace bidsim

#endif
