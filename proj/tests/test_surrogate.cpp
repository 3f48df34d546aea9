#include "doctest.h"

#include "bidsim/clearing.hpp"
#include "bidsim/grid.hpp"
#include "bidsim/surrogate.hpp"

#include <random>
#include <string>

using namespace bidsim;

namespace {

std::string data_path(const std::string& name) {
    return std::string(BIDSIM_DATA_DIR) + "/" + name;
}

SurrogateHyper small_hyper() {
    SurrogateHyper h;
    h.hidden = 32;
    h.batch = 32;
    h.start_train = 10;
    return h;
}

Transition make_transition(double scale, const Eigen::Vector2d& bids,
                           const Eigen::Vector2d& dispatch, double objective,
                           double penalty) {
    Transition t;
    t.load_scale = Eigen::VectorXd::Constant(1, scale);
    t.bids = bids;
    t.dispatch_mw = dispatch;
    t.objective_eur = objective;
    t.penalty_total = penalty;
    return t;
}

}  // namespace

TEST_CASE("observation stacks load multipliers and normalized bids") {
    Grid g = load_grid_file(data_path("case2.grid"));
    Scenario sc;
    sc.load_scale = Eigen::VectorXd::Constant(1, 1.0);
    BidSet bids{Eigen::Vector2d(600.0, 300.0), 600.0};

    Eigen::VectorXd obs = surrogate_observe(sc, bids, g);
    REQUIRE(obs.size() == 4);  // 2 loads entries + 2 agents
    CHECK(obs(0) == doctest::Approx(1.0));
    CHECK(obs(1) == doctest::Approx(1.0));
    CHECK(obs(2) == doctest::Approx(1.0));
    CHECK(obs(3) == doctest::Approx(0.5));

    sc.load_scale(0) = 0.8;
    bids.prices = Eigen::Vector2d(0.0, 600.0);
    obs = surrogate_observe(sc, bids, g);
    CHECK(obs(0) == doctest::Approx(0.8));
    CHECK(obs(1) == doctest::Approx(0.8));
    CHECK(obs(2) == doctest::Approx(0.0));
    CHECK(obs(3) == doctest::Approx(1.0));

    Scenario bad;
    bad.load_scale = Eigen::VectorXd::Constant(2, 1.0);
    CHECK_THROWS_AS((void)surrogate_observe(bad, bids, g), std::invalid_argument);
    BidSet wide{Eigen::Vector3d(1.0, 2.0, 3.0), 600.0};
    CHECK_THROWS_AS((void)surrogate_observe(sc, wide, g), std::invalid_argument);
}

TEST_CASE("reward normalizes cost and weights penalties") {
    ClearingResult r;
    r.objective_eur = 0.0;
    CHECK(surrogate_reward(r, 600.0, 20.0) == doctest::Approx(0.0));

    r.objective_eur = 0.5 * 600.0 * 20.0;
    CHECK(surrogate_reward(r, 600.0, 20.0) == doctest::Approx(-0.5));

    r.penalty.total = 0.2;
    CHECK(surrogate_reward(r, 600.0, 20.0) == doctest::Approx(-2.5));
    CHECK(surrogate_reward(r, 600.0, 20.0, 1.0) == doctest::Approx(-0.7));
}

TEST_CASE("evaluate_dispatch reproduces the reference cost at the same point") {
    Grid g = load_grid_file(data_path("case2.grid"));
    Eigen::VectorXd scale = Eigen::VectorXd::Constant(1, 1.0);
    BidSet bids{Eigen::Vector2d(50.0, 100.0), 600.0};

    ClearingResult ref = clear_market(g, scale, bids);
    ClearingResult ev = evaluate_dispatch(g, scale, bids, ref.dispatch_mw);
    CHECK(ev.power_flow_converged);
    CHECK(ev.objective_eur == doctest::Approx(ref.objective_eur).epsilon(1e-9));
    CHECK(ev.p_slack_mw == doctest::Approx(ref.p_slack_mw).epsilon(1e-9));
    CHECK(ev.penalty.total == doctest::Approx(ref.penalty.total));
    CHECK(ev.dispatch_mw.isApprox(ref.dispatch_mw));

    CHECK_THROWS_AS(
        (void)evaluate_dispatch(g, scale, bids, Eigen::VectorXd::Constant(3, 1.0)),
        std::invalid_argument);
}

TEST_CASE("evaluate_dispatch reports divergence with the sentinel cost") {
    Grid g = load_grid_file(data_path("case2.grid"));
    Eigen::VectorXd scale = Eigen::VectorXd::Constant(1, 200.0);  // 2400 MW demand
    BidSet bids{Eigen::Vector2d(50.0, 100.0), 600.0};

    ClearingResult ev = evaluate_dispatch(g, scale, bids, Eigen::Vector2d(0.0, 0.0));
    REQUIRE_FALSE(ev.power_flow_converged);
    CHECK(ev.penalty.total == doctest::Approx(PenaltyBreakdown::divergence().total));
    CHECK(ev.objective_eur == doctest::Approx(g.total_capacity_mw() * 600.0));
}

TEST_CASE("actor outputs land in the setpoint box") {
    Grid g = load_grid_file(data_path("case2.grid"));
    SurrogateAgent agent = SurrogateAgent::make(g, 600.0, 7, small_hyper());
    REQUIRE(agent.n_agents() == 2);
    REQUIRE(agent.obs_size() == 4);
    CHECK(agent.p_total_mw == doctest::Approx(20.0));

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.7);
    for (int i = 0; i < 50; ++i) {
        Eigen::VectorXd obs(4);
        for (int k = 0; k < 4; ++k) obs(k) = u(rng);
        Eigen::VectorXd d = predict_dispatch(agent, obs);
        Eigen::VectorXd dn = noisy_dispatch(agent, obs, rng);
        for (int a = 0; a < 2; ++a) {
            CHECK(d(a) >= 0.0);
            CHECK(d(a) <= agent.caps_mw(a));
            CHECK(dn(a) >= 0.0);
            CHECK(dn(a) <= agent.caps_mw(a));
        }
        CHECK(predict_dispatch(agent, obs).isApprox(d));  // deterministic
    }

    // A zeroed actor sits at the midpoint of the box (sigmoid output).
    agent.actor = MlpNet::zeros({4, 8, 2}, Activation::Tanh, Activation::Sigmoid);
    Eigen::VectorXd mid = predict_dispatch(agent, Eigen::VectorXd::Constant(4, 0.3));
    CHECK(mid(0) == doctest::Approx(0.5 * agent.caps_mw(0)));
    CHECK(mid(1) == doctest::Approx(0.5 * agent.caps_mw(1)));

    agent.hyper.noise_std = 0.0;
    std::mt19937_64 rng2(3);
    CHECK(noisy_dispatch(agent, Eigen::VectorXd::Constant(4, 0.3), rng2).isApprox(mid));
}

TEST_CASE("training is a no-op until the start threshold") {
    Grid g = load_grid_file(data_path("case2.grid"));
    SurrogateHyper h = small_hyper();
    h.start_train = 50;
    h.batch = 16;
    SurrogateAgent agent = SurrogateAgent::make(g, 600.0, 21, h);
    const auto actor_before = net_bytes(agent.actor);
    const auto critic_before = net_bytes(agent.critic);

    ReplayBuffer buffer(256);
    Transition t = make_transition(1.0, {200.0, 400.0}, {5.0, 2.0}, 2100.0, 0.0);
    for (int i = 0; i < 49; ++i) buffer.push(t);

    std::mt19937_64 rng(4);
    SurrogateLosses quiet = ddpg_train_step(agent, buffer, rng);
    CHECK_FALSE(quiet.trained);
    CHECK(quiet.critic_loss == 0.0);
    CHECK(net_bytes(agent.actor) == actor_before);
    CHECK(net_bytes(agent.critic) == critic_before);

    buffer.push(t);
    SurrogateLosses live = ddpg_train_step(agent, buffer, rng);
    CHECK(live.trained);
    CHECK(net_bytes(agent.actor) != actor_before);
    CHECK(net_bytes(agent.critic) != critic_before);
}

TEST_CASE("the critic regresses the unknown reward part") {
    Grid g = load_grid_file(data_path("case2.grid"));
    SurrogateAgent agent = SurrogateAgent::make(g, 600.0, 33, small_hyper());

    // Known pay-as-bid cost 200*5 + 400*2 = 1800; the remaining 300 of slack
    // cost plus the 0.01 penalty is what the critic must learn:
    // -300/12000 - 10*0.01 = -0.125.
    Transition t = make_transition(0.9, {200.0, 400.0}, {5.0, 2.0}, 2100.0, 0.01);
    ReplayBuffer buffer(64);
    for (int i = 0; i < 10; ++i) buffer.push(t);

    std::mt19937_64 rng(8);
    SurrogateLosses first = ddpg_train_step(agent, buffer, rng);
    REQUIRE(first.trained);
    SurrogateLosses last;
    for (int i = 0; i < 400; ++i) last = ddpg_train_step(agent, buffer, rng);

    CHECK(last.critic_loss < 0.01 * first.critic_loss + 1e-8);

    Eigen::VectorXd x(6);
    x << 0.9, 0.9, 200.0 / 600.0, 400.0 / 600.0, 0.5, 0.2;  // obs + fractions
    CHECK(forward(agent.critic, x)(0) == doctest::Approx(-0.125).epsilon(0.05));
}

TEST_CASE("with a zero critic the actor loss is exactly the hardcoded bid cost") {
    Grid g = load_grid_file(data_path("case2.grid"));
    SurrogateHyper h = small_hyper();
    SurrogateAgent agent = SurrogateAgent::make(g, 600.0, 5, h);
    agent.critic = MlpNet::zeros({6, h.hidden, 1}, Activation::Tanh, Activation::Identity);
    agent.critic_opt = OptimizerState::make(OptAlgo::Adam, h.critic_lr, agent.critic);

    // objective == pay-as-bid cost and zero penalty: the critic's regression
    // target is 0, so its gradient stays zero and it never moves.
    Transition t = make_transition(0.9, {200.0, 400.0}, {5.0, 2.0}, 1800.0, 0.0);
    ReplayBuffer buffer(64);
    for (int i = 0; i < 10; ++i) buffer.push(t);
    const auto critic_before = net_bytes(agent.critic);

    Eigen::VectorXd obs(4);
    obs << 0.9, 0.9, 200.0 / 600.0, 400.0 / 600.0;
    Eigen::VectorXd frac0 = forward(agent.actor, obs);
    const double expected = (frac0(0) * 200.0 * 10.0 + frac0(1) * 400.0 * 10.0) / 12000.0;

    std::mt19937_64 rng(9);
    SurrogateLosses first = ddpg_train_step(agent, buffer, rng);
    CHECK(first.actor_loss == doctest::Approx(expected).epsilon(1e-12));
    CHECK(first.critic_loss == doctest::Approx(0.0));

    SurrogateLosses last;
    for (int i = 0; i < 300; ++i) last = ddpg_train_step(agent, buffer, rng);
    CHECK(last.actor_loss < 0.9 * first.actor_loss);  // descending on the cost
    Eigen::VectorXd d = predict_dispatch(agent, obs);
    CHECK(d(0) < 10.0 * frac0(0));
    CHECK(d(1) < 10.0 * frac0(1));
    CHECK(net_bytes(agent.critic) == critic_before);  // untouched throughout
}

TEST_CASE("identical seeds reproduce identical training") {
    Grid g = load_grid_file(data_path("case2.grid"));
    SurrogateHyper h = small_hyper();
    SurrogateAgent a1 = SurrogateAgent::make(g, 600.0, 42, h);
    SurrogateAgent a2 = SurrogateAgent::make(g, 600.0, 42, h);
    CHECK(net_bytes(a1.actor) == net_bytes(a2.actor));

    ReplayBuffer buffer(128);
    for (int i = 0; i < 40; ++i) {
        const double s = 0.5 + 0.02 * i;
        buffer.push(make_transition(s, {10.0 * i, 600.0 - 10.0 * i},
                                    {0.25 * i, 10.0 - 0.2 * i}, 900.0 + 30.0 * i,
                                    (i % 5 == 0) ? 0.02 : 0.0));
    }

    std::mt19937_64 r1(5), r2(5);
    SurrogateLosses l1, l2;
    for (int i = 0; i < 5; ++i) {
        l1 = ddpg_train_step(a1, buffer, r1);
        l2 = ddpg_train_step(a2, buffer, r2);
    }
    CHECK(l1.critic_loss == l2.critic_loss);
    CHECK(l1.actor_loss == l2.actor_loss);
    CHECK(net_bytes(a1.actor) == net_bytes(a2.actor));
    CHECK(net_bytes(a1.critic) == net_bytes(a2.critic));
}
