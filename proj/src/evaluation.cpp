#include "bidsim/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace bidsim {

namespace {

// Index-ordered worker pool; the first failing index wins error propagation.
void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    if (workers <= 0) {
        workers = static_cast<int>(std::thread::hardware_concurrency());
    }
    workers = std::max(1, std::min(workers, n));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(n, 1)));
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
                break;
            }
        }
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[static_cast<std::size_t>(i)] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    for (int i = 0; i < n; ++i) {
        if (errors[static_cast<std::size_t>(i)]) {
            std::rethrow_exception(errors[static_cast<std::size_t>(i)]);
        }
    }
}

double agent_reward(const MarketEnv& env, const BidSet& bids, int agent,
                    const ClearingResult& result) {
    return (bids.prices(agent) - env.marginal_price(agent)) * result.dispatch_mw(agent);
}

}  // namespace

BestResponse best_response_search(const MarketEnv& env, const Scenario& scenario,
                                  const BidSet& fixed_bids, int agent_index,
                                  const ClearingFn& clearing) {
    const double p_max = fixed_bids.p_max;
    BidSet bids = fixed_bids;
    BestResponse best;
    best.reward = -std::numeric_limits<double>::infinity();

    auto eval = [&](double bid) -> double {
        bids.prices(agent_index) = bid;
        double reward;
        try {
            ClearingResult r = clearing(env.grid(), scenario.load_scale, bids);
            reward = agent_reward(env, bids, agent_index, r);
        } catch (const std::runtime_error&) {
            ++best.skipped;
            return -std::numeric_limits<double>::infinity();
        }
        if (!std::isfinite(reward)) {
            ++best.skipped;
            return -std::numeric_limits<double>::infinity();
        }
        if (reward > best.reward) {
            best.bid = bid;
            best.reward = reward;
        }
        return reward;
    };

    eval(fixed_bids.prices(agent_index));  // the incumbent is a candidate
    std::array<double, kSearchSeeds> seed_reward{};
    for (int i = 0; i < kSearchSeeds; ++i) {
        seed_reward[static_cast<std::size_t>(i)] =
            eval(p_max * i / (kSearchSeeds - 1));
    }
    const int top = static_cast<int>(std::distance(
        seed_reward.begin(), std::max_element(seed_reward.begin(), seed_reward.end())));

    double lo = top > 0 ? p_max * (top - 1) / (kSearchSeeds - 1) : 0.0;
    double hi = top < kSearchSeeds - 1 ? p_max * (top + 1) / (kSearchSeeds - 1) : p_max;
    constexpr double kGolden = 0.6180339887498949;
    double x1 = hi - kGolden * (hi - lo);
    double x2 = lo + kGolden * (hi - lo);
    double f1 = eval(x1);
    double f2 = eval(x2);
    while (hi - lo > kSearchTolFrac * p_max) {
        if (f1 < f2) {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + kGolden * (hi - lo);
            f2 = eval(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - kGolden * (hi - lo);
            f1 = eval(x1);
        }
    }
    if (!std::isfinite(best.reward)) {
        throw std::runtime_error("best response search: every candidate failed");
    }
    return best;
}

namespace {

using BidProvider = std::function<BidSet(const Scenario&, std::mt19937_64&)>;

RegretReport regret_over(const MarketEnv& env, const BidProvider& provider,
                         int n_states, std::uint64_t seed, int workers) {
    if (n_states <= 0) throw std::invalid_argument("regret needs at least one state");
    const int n_agents = env.grid().agent_count();
    ClearingFn reference = [](const Grid& g, const Eigen::VectorXd& scale,
                              const BidSet& b) { return clear_market(g, scale, b); };

    RegretReport report;
    report.n_states = n_states;
    report.details.resize(static_cast<std::size_t>(n_states) *
                          static_cast<std::size_t>(n_agents));

    parallel_for(n_states, workers, [&](int s) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
        Scenario sc = env.sample_scenario(rng);
        BidSet bids = provider(sc, rng);
        ClearingResult current = clear_market(env.grid(), sc.load_scale, bids);
        for (int a = 0; a < n_agents; ++a) {
            BestResponse br = best_response_search(env, sc, bids, a, reference);
            RegretDetail& d =
                report.details[static_cast<std::size_t>(s) *
                                   static_cast<std::size_t>(n_agents) +
                               static_cast<std::size_t>(a)];
            d.state_id = s;
            d.agent_id = a;
            d.current_bid = bids.prices(a);
            d.best_bid = br.bid;
            d.current_reward = agent_reward(env, bids, a, current);
            d.best_reward = br.reward;
            d.regret = br.reward - d.current_reward;
        }
    });

    report.psi = Eigen::VectorXd::Zero(n_agents);
    for (const RegretDetail& d : report.details) report.psi(d.agent_id) += d.regret;
    report.psi /= static_cast<double>(n_states);
    report.total = report.psi.sum();
    return report;
}

}  // namespace

RegretReport regret_test(const MarketEnv& env, const std::vector<BiddingAgent>& agents,
                         int n_states, std::uint64_t seed, int workers) {
    if (static_cast<int>(agents.size()) != env.grid().agent_count()) {
        throw std::invalid_argument("regret_test: one agent per generator required");
    }
    BidProvider provider = [&](const Scenario& sc, std::mt19937_64& rng) {
        std::vector<Eigen::VectorXd> obs(agents.size(), env.observation(sc));
        return select_bids(agents, obs, env.config().p_max, 0.0, rng);
    };
    return regret_over(env, provider, n_states, seed, workers);
}

RegretReport random_baseline(const MarketEnv& env, int n_states, std::uint64_t seed,
                             int workers) {
    const int n_agents = env.grid().agent_count();
    BidProvider provider = [&, n_agents](const Scenario&, std::mt19937_64& rng) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        BidSet bids;
        bids.p_max = env.config().p_max;
        bids.prices.resize(n_agents);
        for (int a = 0; a < n_agents; ++a) bids.prices(a) = u(rng) * bids.p_max;
        return bids;
    };
    return regret_over(env, provider, n_states, seed, workers);
}

MapeReport opf_mape(const SurrogateAgent& surrogate, const ClearingFn& reference,
                    const MarketEnv& env, int n_samples, std::uint64_t seed,
                    int workers) {
    if (n_samples <= 0) throw std::invalid_argument("opf_mape needs samples");
    MapeReport report;
    report.n_samples = n_samples;
    const double norm = surrogate.p_max * surrogate.p_total_mw;
    const double floor = 1e-6 * norm;
    const double w_eur = surrogate.hyper.w_pen * norm;

    std::vector<double> ratio(static_cast<std::size_t>(n_samples),
                              std::numeric_limits<double>::quiet_NaN());
    parallel_for(n_samples, workers, [&](int s) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
        Scenario sc = env.sample_scenario(rng);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        BidSet bids;
        bids.p_max = env.config().p_max;
        bids.prices.resize(surrogate.n_agents());
        for (int a = 0; a < surrogate.n_agents(); ++a) {
            bids.prices(a) = u(rng) * bids.p_max;
        }
        ClearingResult ref;
        try {
            ref = reference(env.grid(), sc.load_scale, bids);
        } catch (const std::runtime_error&) {
            return;  // excluded; counted after the join
        }
        Eigen::VectorXd sobs = surrogate_observe(sc, bids, env.grid());
        ClearingResult ev = evaluate_dispatch(env.grid(), sc.load_scale, bids,
                                              predict_dispatch(surrogate, sobs));
        const double j_ref = ref.objective_eur + w_eur * ref.penalty.total;
        const double j_sur = ev.objective_eur + w_eur * ev.penalty.total;
        ratio[static_cast<std::size_t>(s)] =
            std::abs(j_sur - j_ref) / std::max(std::abs(j_ref), floor);
    });

    double sum = 0.0;
    int used = 0;
    for (double r : ratio) {
        if (std::isnan(r)) continue;
        sum += r;
        ++used;
    }
    report.excluded = n_samples - used;
    report.mape_percent = used > 0 ? 100.0 * sum / used
                                   : std::numeric_limits<double>::quiet_NaN();
    return report;
}

void write_regret_csv(std::ostream& out, const RegretReport& report) {
    out << "# schema: regret-v1\n";
    out << "state_id,agent_id,current_bid,best_bid,current_reward,best_reward,regret\n";
    const auto old_precision = out.precision(12);
    for (const RegretDetail& d : report.details) {
        out << d.state_id << ',' << d.agent_id << ',' << d.current_bid << ','
            << d.best_bid << ',' << d.current_reward << ',' << d.best_reward << ','
            << d.regret << '\n';
    }
    for (Eigen::Index a = 0; a < report.psi.size(); ++a) {
        out << "-1," << a << ",,,,," << report.psi(a) << '\n';
    }
    out << "-1,-1,,,,," << report.total << '\n';
    out.precision(old_precision);
}

}  // namespace bidsim
