#include "doctest.h"

#include "bidsim/marl.hpp"

#include <random>
#include <string>
#include <vector>

using namespace bidsim;

namespace {

std::string data_path(const std::string& name) {
    return std::string(BIDSIM_DATA_DIR) + "/" + name;
}

TrainHyper small_hyper() {
    TrainHyper h;
    h.batch = 32;
    h.actor_hidden = 16;
    h.critic_hidden = 32;
    h.maddpg_start = 10;
    return h;
}

Eigen::VectorXd time_obs() {
    Eigen::VectorXd obs(6);
    obs << 0.0, 0.0, 0.0, 1.0, 1.0, 1.0;
    return obs;
}

Transition agent_transition(const Eigen::VectorXd& obs, const Eigen::Vector2d& bids,
                            const Eigen::Vector2d& rewards) {
    Transition t;
    t.obs = obs;
    t.load_scale = Eigen::VectorXd::Constant(1, 1.0);
    t.bids = bids;
    t.dispatch_mw = Eigen::Vector2d(5.0, 5.0);
    t.rewards = rewards;
    return t;
}

}  // namespace

TEST_CASE("select_bids scales, clamps and reproduces") {
    TrainHyper h = small_hyper();
    std::vector<BiddingAgent> agents = make_agents(TrainMode::Maddpg, 2, h, 3);
    for (auto& a : agents) {
        a.actor = MlpNet::zeros({6, 16, 1}, Activation::Tanh, Activation::Sigmoid);
    }
    std::vector<Eigen::VectorXd> obs(2, time_obs());
    std::mt19937_64 rng(1);

    BidSet quiet = select_bids(agents, obs, 600.0, 0.0, rng);
    CHECK(quiet.prices(0) == doctest::Approx(300.0));  // sigmoid(0) * p_max
    CHECK(quiet.prices(1) == doctest::Approx(300.0));

    std::vector<BiddingAgent> twin_a = make_agents(TrainMode::Maddpg, 2, h, 9);
    std::vector<BiddingAgent> twin_b = make_agents(TrainMode::Maddpg, 2, h, 9);
    BidSet ba = select_bids(twin_a, obs, 600.0, 0.0, rng);
    BidSet bb = select_bids(twin_b, obs, 600.0, 0.0, rng);
    CHECK(ba.prices == bb.prices);

    for (int i = 0; i < 200; ++i) {
        BidSet noisy = select_bids(agents, obs, 600.0, 0.8, rng);
        for (int a = 0; a < 2; ++a) {
            CHECK(noisy.prices(a) >= 0.0);
            CHECK(noisy.prices(a) <= 600.0);
        }
    }

    std::vector<Eigen::VectorXd> short_obs(1, time_obs());
    CHECK_THROWS_AS((void)select_bids(agents, short_obs, 600.0, 0.0, rng),
                    std::invalid_argument);
}

TEST_CASE("model-based start threshold follows the agent count") {
    CHECK(mmaddpg_start_threshold(4) == 2000);
    CHECK(mmaddpg_start_threshold(10) == 2000);
    CHECK(mmaddpg_start_threshold(13) == 2000);
    CHECK(mmaddpg_start_threshold(14) == 2100);
    CHECK(mmaddpg_start_threshold(20) == 3000);
}

TEST_CASE("both trainers are no-ops below their thresholds") {
    TrainHyper h = small_hyper();
    h.maddpg_start = 50;
    std::vector<BiddingAgent> agents = make_agents(TrainMode::Maddpg, 2, h, 5);
    const auto actor_before = net_bytes(agents[0].actor);
    const auto critic_before = net_bytes(agents[0].critic);

    ReplayBuffer buffer(256);
    for (int i = 0; i < 49; ++i) {
        buffer.push(agent_transition(time_obs(), {100.0, 200.0}, {40.0, 80.0}));
    }
    std::mt19937_64 rng(2);
    StepLosses quiet = maddpg_train_step(agents, buffer, 600.0, 1.0, h, rng);
    CHECK_FALSE(quiet.trained);
    CHECK(quiet.threshold == 50);
    CHECK(net_bytes(agents[0].actor) == actor_before);
    CHECK(net_bytes(agents[0].critic) == critic_before);

    buffer.push(agent_transition(time_obs(), {100.0, 200.0}, {40.0, 80.0}));
    StepLosses live = maddpg_train_step(agents, buffer, 600.0, 1.0, h, rng);
    CHECK(live.trained);
    CHECK(net_bytes(agents[0].actor) != actor_before);

    // Model-based variant: threshold counts environment steps, not buffer size.
    Grid g = load_grid_file(data_path("case2.grid"));
    SurrogateHyper sh;
    sh.hidden = 16;
    SurrogateAgent snapshot = SurrogateAgent::make(g, 600.0, 7, sh);
    std::vector<BiddingAgent> magents = make_agents(TrainMode::MMaddpg, 2, h, 6);
    CHECK_FALSE(magents[0].has_critic);
    const auto mbytes = net_bytes(magents[0].actor);
    Eigen::VectorXd marginal = Eigen::VectorXd::Constant(2, 60.0);

    StepLosses mq = mmaddpg_train_step(magents, buffer, snapshot, marginal, h, rng);
    CHECK_FALSE(mq.trained);
    CHECK(mq.threshold == 2000);  // max(150*2, 2000)
    CHECK(net_bytes(magents[0].actor) == mbytes);
}

TEST_CASE("the centralized critic regresses a constant reward") {
    TrainHyper h = small_hyper();
    std::vector<BiddingAgent> agents = make_agents(TrainMode::Maddpg, 2, h, 11);

    std::mt19937_64 gen(17);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    ReplayBuffer buffer(64);
    const double c = 2.0;
    for (int i = 0; i < 64; ++i) {
        Eigen::VectorXd obs(6);
        for (int k = 0; k < 6; ++k) obs(k) = u(gen);
        Eigen::Vector2d bids(300.0 * (1.0 + u(gen)), 300.0 * (1.0 + u(gen)));
        buffer.push(agent_transition(obs, bids, {c, c}));
    }

    std::mt19937_64 rng(3);
    StepLosses first = maddpg_train_step(agents, buffer, 600.0, 1.0, h, rng);
    REQUIRE(first.trained);
    StepLosses last;
    for (int i = 0; i < 300; ++i) last = maddpg_train_step(agents, buffer, 600.0, 1.0, h, rng);
    CHECK(last.critic_loss(0) < 0.02 * first.critic_loss(0));
    CHECK(last.critic_loss(1) < 0.02 * first.critic_loss(1));

    // Prediction at one stored point approaches the constant.
    const Transition& t = buffer[0];
    Eigen::VectorXd x(14);
    x.segment(0, 6) = t.obs;
    x.segment(6, 6) = t.obs;
    x.segment(12, 2) = t.bids / 600.0;
    CHECK(forward(agents[0].critic, x)(0) == doctest::Approx(c).epsilon(0.15));
}

TEST_CASE("the critic regresses rewards in units of the reward scale") {
    TrainHyper h = small_hyper();
    std::vector<BiddingAgent> agents = make_agents(TrainMode::Maddpg, 2, h, 29);

    ReplayBuffer buffer(64);
    const double c = 200.0;
    std::mt19937_64 gen(31);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 64; ++i) {
        Eigen::VectorXd obs(6);
        for (int k = 0; k < 6; ++k) obs(k) = u(gen);
        Eigen::Vector2d bids(300.0 * (1.0 + u(gen)), 300.0 * (1.0 + u(gen)));
        buffer.push(agent_transition(obs, bids, {c, c}));
    }

    std::mt19937_64 rng(7);
    for (int i = 0; i < 300; ++i) {
        maddpg_train_step(agents, buffer, 600.0, 100.0, h, rng);
    }
    const Transition& t = buffer[0];
    Eigen::VectorXd x(14);
    x.segment(0, 6) = t.obs;
    x.segment(6, 6) = t.obs;
    x.segment(12, 2) = t.bids / 600.0;
    CHECK(forward(agents[0].critic, x)(0) == doctest::Approx(c / 100.0).epsilon(0.15));

    CHECK_THROWS_AS((void)maddpg_train_step(agents, buffer, 600.0, 0.0, h, rng),
                    std::invalid_argument);
}

TEST_CASE("critic loss trends down on a fixed batch") {
    TrainHyper h = small_hyper();
    std::vector<BiddingAgent> agents = make_agents(TrainMode::Maddpg, 2, h, 23);
    ReplayBuffer buffer(8);
    for (int i = 0; i < 8; ++i) {
        buffer.push(agent_transition(time_obs(), {120.0, 480.0}, {250.0, -75.0}));
    }
    TrainHyper fixed = h;
    fixed.maddpg_start = 8;  // every sampled batch is the same single point

    std::mt19937_64 rng(4);
    double prev = std::numeric_limits<double>::infinity();
    int violations = 0;
    for (int i = 0; i < 100; ++i) {
        StepLosses l = maddpg_train_step(agents, buffer, 600.0, 1.0, fixed, rng);
        REQUIRE(l.trained);
        if (l.critic_loss(0) > prev) ++violations;
        prev = l.critic_loss(0);
    }
    CHECK(violations <= 10);
}

TEST_CASE("a bid-insensitive surrogate pushes bids toward the cap") {
    Grid g = load_grid_file(data_path("case2.grid"));
    SurrogateHyper sh;
    sh.hidden = 16;
    SurrogateAgent snapshot = SurrogateAgent::make(g, 600.0, 31, sh);
    // Zeroed actor: dispatch is 0.5*cap no matter the bids, so profit rises
    // monotonically in the own price and the gradient must raise every bid.
    snapshot.actor = MlpNet::zeros({4, 8, 2}, Activation::Tanh, Activation::Sigmoid);
    const auto snap_bytes = net_bytes(snapshot.actor);

    TrainHyper h = small_hyper();
    std::vector<BiddingAgent> agents = make_agents(TrainMode::MMaddpg, 2, h, 12);
    ReplayBuffer buffer(64);
    for (int i = 0; i < 2000; ++i) {
        buffer.push(agent_transition(time_obs(), {300.0, 300.0}, {1200.0, 1200.0}));
    }
    Eigen::VectorXd marginal = Eigen::VectorXd::Constant(2, 60.0);

    std::vector<Eigen::VectorXd> obs(2, time_obs());
    std::mt19937_64 rng(5);
    BidSet before = select_bids(agents, obs, 600.0, 0.0, rng);
    StepLosses l;
    for (int i = 0; i < 50; ++i) {
        l = mmaddpg_train_step(agents, buffer, snapshot, marginal, h, rng);
        REQUIRE(l.trained);
    }
    BidSet after = select_bids(agents, obs, 600.0, 0.0, rng);
    CHECK(after.prices(0) > before.prices(0));
    CHECK(after.prices(1) > before.prices(1));
    // Loss is the negated profit of a 5 MW constant dispatch.
    CHECK(l.actor_loss(0) < -(before.prices(0) - 60.0) * 5.0);
    CHECK(net_bytes(snapshot.actor) == snap_bytes);  // frozen during backprop
}

TEST_CASE("a zero-step budget is a valid empty run") {
    Grid g = load_grid_file(data_path("case2.grid"));
    TrainLoopConfig cfg;
    cfg.mode = TrainMode::Maddpg;
    cfg.steps = 0;
    cfg.seed = 77;
    cfg.hyper = small_hyper();

    int rows = 0;
    std::vector<long> checkpoints;
    RunSinks sinks;
    sinks.on_metrics = [&](const MetricRow&) { ++rows; };
    sinks.on_checkpoint = [&](long step, const std::vector<BiddingAgent>& agents,
                              const SurrogateAgent* s) {
        checkpoints.push_back(step);
        CHECK(agents.size() == 2);
        CHECK(s == nullptr);
    };
    TrainResult r = training_loop(g, MarketConfig{}, cfg, sinks);
    CHECK(rows == 0);
    REQUIRE(checkpoints.size() == 1);
    CHECK(checkpoints[0] == 0);
    CHECK(r.steps == 0);
    CHECK(r.mean_env_step_seconds() == 0.0);
}

TEST_CASE("identical config and seed reproduce identical metrics") {
    Grid g = load_grid_file(data_path("case2.grid"));
    TrainLoopConfig cfg;
    cfg.mode = TrainMode::Maddpg;
    cfg.steps = 120;
    cfg.metric_every = 40;
    cfg.checkpoint_every = 0;
    cfg.seed = 123;
    cfg.hyper = small_hyper();
    cfg.hyper.batch = 16;
    cfg.hyper.maddpg_start = 50;

    auto capture = [&]() {
        std::vector<MetricRow> rows;
        RunSinks sinks;
        sinks.on_metrics = [&](const MetricRow& m) { rows.push_back(m); };
        TrainResult r = training_loop(g, MarketConfig{}, cfg, sinks);
        return std::make_pair(std::move(rows), net_bytes(r.agents[0].actor));
    };
    auto [rows_a, bytes_a] = capture();
    auto [rows_b, bytes_b] = capture();

    REQUIRE(rows_a.size() == 3);
    REQUIRE(rows_b.size() == 3);
    for (std::size_t i = 0; i < rows_a.size(); ++i) {
        CHECK(rows_a[i].step == rows_b[i].step);
        CHECK(rows_a[i].mean_bid == rows_b[i].mean_bid);  // bitwise
        CHECK(rows_a[i].std_bid == rows_b[i].std_bid);
        CHECK(rows_a[i].mean_reward == rows_b[i].mean_reward);
    }
    CHECK(bytes_a == bytes_b);
}

TEST_CASE("no agent parameters move before the start thresholds") {
    Grid g = load_grid_file(data_path("case2.grid"));

    SUBCASE("maddpg waits for the buffer threshold") {
        TrainLoopConfig cfg;
        cfg.mode = TrainMode::Maddpg;
        cfg.steps = 1050;
        cfg.metric_every = 0;
        cfg.checkpoint_every = 500;
        cfg.seed = 9;
        cfg.hyper.batch = 64;
        cfg.hyper.actor_hidden = 16;
        cfg.hyper.critic_hidden = 32;  // maddpg_start stays at 1000

        std::vector<BiddingAgent> init =
            make_agents(cfg.mode, 2, cfg.hyper, derive_seed(cfg.seed, 1));
        std::vector<std::pair<long, bool>> moved;  // (step, actor changed)
        RunSinks sinks;
        sinks.on_checkpoint = [&](long step, const std::vector<BiddingAgent>& agents,
                                  const SurrogateAgent*) {
            bool changed = false;
            for (std::size_t a = 0; a < agents.size(); ++a) {
                if (net_bytes(agents[a].actor) != net_bytes(init[a].actor)) changed = true;
            }
            moved.emplace_back(step, changed);
        };
        training_loop(g, MarketConfig{}, cfg, sinks);
        REQUIRE(moved.size() == 3);  // 500, 1000, final 1050
        CHECK(moved[0] == std::make_pair(500L, false));
        CHECK(moved[1] == std::make_pair(1000L, true));
        CHECK(moved[2] == std::make_pair(1050L, true));
    }

    SUBCASE("model-based agents wait for the step threshold") {
        TrainLoopConfig cfg;
        cfg.mode = TrainMode::MMaddpg;
        cfg.steps = 2050;
        cfg.metric_every = 0;
        cfg.checkpoint_every = 1000;
        cfg.seed = 10;
        cfg.hyper.batch = 16;
        cfg.hyper.actor_hidden = 16;
        cfg.surrogate.hidden = 16;
        cfg.surrogate.batch = 16;
        cfg.surrogate.start_train = 500;
        cfg.mape_probes = 0;

        std::vector<BiddingAgent> init =
            make_agents(cfg.mode, 2, cfg.hyper, derive_seed(cfg.seed, 1));
        const auto surr_init = net_bytes(
            SurrogateAgent::make(g, 600.0, derive_seed(cfg.seed, 2), cfg.surrogate).actor);
        std::vector<std::pair<long, bool>> moved;
        bool surrogate_moved_at_1000 = false;
        RunSinks sinks;
        sinks.on_checkpoint = [&](long step, const std::vector<BiddingAgent>& agents,
                                  const SurrogateAgent* s) {
            REQUIRE(s != nullptr);
            bool changed = false;
            for (std::size_t a = 0; a < agents.size(); ++a) {
                if (net_bytes(agents[a].actor) != net_bytes(init[a].actor)) changed = true;
            }
            moved.emplace_back(step, changed);
            if (step == 1000) surrogate_moved_at_1000 = net_bytes(s->actor) != surr_init;
        };
        TrainResult r = training_loop(g, MarketConfig{}, cfg, sinks);
        REQUIRE(moved.size() == 3);  // 1000, 2000, final 2050
        CHECK(moved[0] == std::make_pair(1000L, false));
        CHECK(moved[1] == std::make_pair(2000L, true));  // max(300, 2000) = 2000
        CHECK(moved[2] == std::make_pair(2050L, true));
        CHECK(surrogate_moved_at_1000);  // the surrogate trains much earlier
        REQUIRE(r.surrogate != nullptr);
        CHECK(r.env_seconds_total > 0.0);
    }
}
