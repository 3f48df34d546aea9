#include "bidsim/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ios>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace bidsim {

namespace {

// ---------------------------------------------------------------- strings

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string::size_type from = 0;
    while (true) {
        const auto at = s.find(sep, from);
        if (at == std::string::npos) {
            parts.push_back(s.substr(from));
            return parts;
        }
        parts.push_back(s.substr(from, at - from));
        from = at + 1;
    }
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string fmt(double v, int precision = 12) {
    std::ostringstream out;
    out << std::setprecision(precision) << v;
    return out.str();
}

// --------------------------------------------------------- value parsing

[[noreturn]] void bad_value(const std::string& where, const std::string& value,
                            const std::string& want) {
    throw std::invalid_argument(where + ": bad value '" + value + "' (expected " +
                                want + ")");
}

double to_double(const std::string& value, const std::string& where) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) bad_value(where, value, "a number");
        return v;
    } catch (const std::invalid_argument&) {
        bad_value(where, value, "a number");
    } catch (const std::out_of_range&) {
        bad_value(where, value, "a number in range");
    }
}

long to_long(const std::string& value, const std::string& where) {
    try {
        std::size_t pos = 0;
        const long v = std::stol(value, &pos);
        if (pos != value.size()) bad_value(where, value, "an integer");
        return v;
    } catch (const std::invalid_argument&) {
        bad_value(where, value, "an integer");
    } catch (const std::out_of_range&) {
        bad_value(where, value, "an integer in range");
    }
}

int to_int(const std::string& value, const std::string& where) {
    const long v = to_long(value, where);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
        bad_value(where, value, "an integer in range");
    }
    return static_cast<int>(v);
}

std::uint64_t to_u64(const std::string& value, const std::string& where) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size() || value.find('-') != std::string::npos) {
            bad_value(where, value, "a non-negative integer");
        }
        return v;
    } catch (const std::invalid_argument&) {
        bad_value(where, value, "a non-negative integer");
    } catch (const std::out_of_range&) {
        bad_value(where, value, "a non-negative integer in range");
    }
}

bool to_bool(const std::string& value, const std::string& where) {
    if (value == "true") return true;
    if (value == "false") return false;
    bad_value(where, value, "true or false");
}

TrainMode to_mode(const std::string& value, const std::string& where) {
    if (value == mode_name(TrainMode::Maddpg)) return TrainMode::Maddpg;
    if (value == mode_name(TrainMode::MMaddpg)) return TrainMode::MMaddpg;
    if (value == mode_name(TrainMode::Pretrain)) return TrainMode::Pretrain;
    bad_value(where, value, "'maddpg', 'm-maddpg' or 'pretrain'");
}

// ------------------------------------------------------------ config keys

const std::vector<std::string> kSections = {"run", "market", "hyper", "eval"};
const std::vector<std::string> kRunKeys = {
    "grid",       "mode", "steps",       "seed",        "eval_seed",
    "metric_every", "checkpoint_every", "mape_probes", "pretrain_steps", "out"};
const std::vector<std::string> kMarketKeys = {
    "p_max",        "marginal_fraction", "load_noise",       "steps_per_day",
    "steps_per_week", "steps_per_year",  "marginal_override"};
const std::vector<std::string> kHyperKeys = {
    "batch_size",          "actor_lr",           "critic_lr",
    "actor_hidden",        "critic_hidden",      "noise_std",
    "start_train",         "buffer_capacity",    "snapshot_refresh",
    "surrogate_batch_size", "surrogate_actor_lr", "surrogate_critic_lr",
    "surrogate_hidden",    "surrogate_noise_std", "surrogate_start_train",
    "penalty_weight"};
const std::vector<std::string> kEvalKeys = {"states", "mape_samples", "workers",
                                            "at_checkpoints"};

[[noreturn]] void unknown_key(const std::string& where, const std::string& section,
                              const std::string& key) {
    const std::vector<std::string>* valid = nullptr;
    if (section == "run") valid = &kRunKeys;
    else if (section == "market") valid = &kMarketKeys;
    else if (section == "hyper") valid = &kHyperKeys;
    else valid = &kEvalKeys;
    throw std::invalid_argument(where + ": unknown key '" + key + "' in [" + section +
                                "] (valid keys: " + join(*valid, ", ") + ")");
}

void apply_key(ExperimentConfig& cfg, const std::string& section,
               const std::string& key, const std::string& value,
               const std::string& where) {
    if (section == "run") {
        if (key == "grid") cfg.grid_file = value;
        else if (key == "mode") { cfg.mode = to_mode(value, where); cfg.has_mode = true; }
        else if (key == "steps") { cfg.steps = to_long(value, where); cfg.has_steps = true; }
        else if (key == "seed") { cfg.seed = to_u64(value, where); cfg.has_seed = true; }
        else if (key == "eval_seed") { cfg.eval_seed = to_u64(value, where); cfg.has_eval_seed = true; }
        else if (key == "metric_every") cfg.metric_every = to_int(value, where);
        else if (key == "checkpoint_every") cfg.checkpoint_every = to_long(value, where);
        else if (key == "mape_probes") cfg.mape_probes = to_int(value, where);
        else if (key == "pretrain_steps") {
            cfg.pretrain_steps = to_long(value, where);
            cfg.has_pretrain_steps = true;
        }
        else if (key == "out") cfg.out_dir = value;
        else unknown_key(where, section, key);
    } else if (section == "market") {
        if (key == "p_max") cfg.market.p_max = to_double(value, where);
        else if (key == "marginal_fraction") cfg.market.marginal_fraction = to_double(value, where);
        else if (key == "load_noise") cfg.market.load_noise = to_double(value, where);
        else if (key == "steps_per_day") cfg.market.steps_per_day = to_int(value, where);
        else if (key == "steps_per_week") cfg.market.steps_per_week = to_int(value, where);
        else if (key == "steps_per_year") cfg.market.steps_per_year = to_int(value, where);
        else if (key == "marginal_override") {
            cfg.market.marginal_override.clear();
            for (const std::string& part : split(value, ',')) {
                cfg.market.marginal_override.push_back(to_double(trim(part), where));
            }
        } else unknown_key(where, section, key);
    } else if (section == "hyper") {
        if (key == "batch_size") cfg.hyper.batch = to_int(value, where);
        else if (key == "actor_lr") cfg.hyper.actor_lr = to_double(value, where);
        else if (key == "critic_lr") cfg.hyper.critic_lr = to_double(value, where);
        else if (key == "actor_hidden") cfg.hyper.actor_hidden = to_int(value, where);
        else if (key == "critic_hidden") cfg.hyper.critic_hidden = to_int(value, where);
        else if (key == "noise_std") cfg.hyper.noise_std = to_double(value, where);
        else if (key == "start_train") cfg.hyper.maddpg_start = to_int(value, where);
        else if (key == "buffer_capacity") {
            const long v = to_long(value, where);
            if (v <= 0) bad_value(where, value, "a positive integer");
            cfg.hyper.buffer_capacity = static_cast<std::size_t>(v);
        }
        else if (key == "snapshot_refresh") cfg.hyper.snapshot_refresh = to_int(value, where);
        else if (key == "surrogate_batch_size") cfg.surrogate.batch = to_int(value, where);
        else if (key == "surrogate_actor_lr") cfg.surrogate.actor_lr = to_double(value, where);
        else if (key == "surrogate_critic_lr") cfg.surrogate.critic_lr = to_double(value, where);
        else if (key == "surrogate_hidden") cfg.surrogate.hidden = to_int(value, where);
        else if (key == "surrogate_noise_std") cfg.surrogate.noise_std = to_double(value, where);
        else if (key == "surrogate_start_train") cfg.surrogate.start_train = to_int(value, where);
        else if (key == "penalty_weight") cfg.surrogate.w_pen = to_double(value, where);
        else unknown_key(where, section, key);
    } else if (section == "eval") {
        if (key == "states") cfg.eval.states = to_int(value, where);
        else if (key == "mape_samples") cfg.eval.mape_samples = to_int(value, where);
        else if (key == "workers") cfg.eval.workers = to_int(value, where);
        else if (key == "at_checkpoints") cfg.eval.at_checkpoints = to_bool(value, where);
        else unknown_key(where, section, key);
    }
}

}  // namespace

// ---------------------------------------------------------------- config

ExperimentConfig parse_config(std::istream& in, const std::string& source) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::string section;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = source + ":" + std::to_string(line_no);
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw std::invalid_argument(where + ": malformed section header '" + line + "'");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (std::find(kSections.begin(), kSections.end(), section) == kSections.end()) {
                throw std::invalid_argument(where + ": unknown section [" + section +
                                            "] (valid sections: " + join(kSections, ", ") + ")");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(where + ": expected 'key = value', got '" + line + "'");
        }
        if (section.empty()) {
            throw std::invalid_argument(where + ": key outside any section (start with [run])");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument(where + ": empty key");
        const std::string full = section + "." + key;
        if (!seen.insert(full).second) {
            throw std::invalid_argument(where + ": duplicate key '" + full + "'");
        }
        apply_key(cfg, section, key, value, where + ": " + full);
    }
    return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config file: " + path);
    return parse_config(in, path);
}

void write_config(std::ostream& out, const ExperimentConfig& cfg) {
    out << "# resolved experiment config (config-v1)\n";
    out << "[run]\n";
    out << "grid = " << cfg.grid_file << "\n";
    out << "mode = " << mode_name(cfg.mode) << "\n";
    out << "steps = " << cfg.steps << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "eval_seed = " << cfg.eval_seed << "\n";
    out << "metric_every = " << cfg.metric_every << "\n";
    out << "checkpoint_every = " << cfg.checkpoint_every << "\n";
    out << "mape_probes = " << cfg.mape_probes << "\n";
    out << "out = " << cfg.out_dir << "\n";
    out << "\n[market]\n";
    out << "p_max = " << fmt(cfg.market.p_max, 15) << "\n";
    out << "marginal_fraction = " << fmt(cfg.market.marginal_fraction, 15) << "\n";
    out << "load_noise = " << fmt(cfg.market.load_noise, 15) << "\n";
    out << "steps_per_day = " << cfg.market.steps_per_day << "\n";
    out << "steps_per_week = " << cfg.market.steps_per_week << "\n";
    out << "steps_per_year = " << cfg.market.steps_per_year << "\n";
    if (!cfg.market.marginal_override.empty()) {
        std::vector<std::string> parts;
        for (double v : cfg.market.marginal_override) parts.push_back(fmt(v, 15));
        out << "marginal_override = " << join(parts, ",") << "\n";
    }
    out << "\n[hyper]\n";
    out << "batch_size = " << cfg.hyper.batch << "\n";
    out << "actor_lr = " << fmt(cfg.hyper.actor_lr, 15) << "\n";
    out << "critic_lr = " << fmt(cfg.hyper.critic_lr, 15) << "\n";
    out << "actor_hidden = " << cfg.hyper.actor_hidden << "\n";
    out << "critic_hidden = " << cfg.hyper.critic_hidden << "\n";
    out << "noise_std = " << fmt(cfg.hyper.noise_std, 15) << "\n";
    out << "start_train = " << cfg.hyper.maddpg_start << "\n";
    out << "buffer_capacity = " << cfg.hyper.buffer_capacity << "\n";
    out << "snapshot_refresh = " << cfg.hyper.snapshot_refresh << "\n";
    out << "surrogate_batch_size = " << cfg.surrogate.batch << "\n";
    out << "surrogate_actor_lr = " << fmt(cfg.surrogate.actor_lr, 15) << "\n";
    out << "surrogate_critic_lr = " << fmt(cfg.surrogate.critic_lr, 15) << "\n";
    out << "surrogate_hidden = " << cfg.surrogate.hidden << "\n";
    out << "surrogate_noise_std = " << fmt(cfg.surrogate.noise_std, 15) << "\n";
    out << "surrogate_start_train = " << cfg.surrogate.start_train << "\n";
    out << "penalty_weight = " << fmt(cfg.surrogate.w_pen, 15) << "\n";
    out << "\n[eval]\n";
    out << "states = " << cfg.eval.states << "\n";
    out << "mape_samples = " << cfg.eval.mape_samples << "\n";
    out << "workers = " << cfg.eval.workers << "\n";
    out << "at_checkpoints = " << (cfg.eval.at_checkpoints ? "true" : "false") << "\n";
}

void validate_config(const ExperimentConfig& cfg) {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
    if (cfg.grid_file.empty()) fail("run.grid is required");
    if (!fs::exists(cfg.grid_file)) fail("run.grid does not exist: " + cfg.grid_file);
    if (!cfg.has_mode) fail("run.mode is required ('maddpg' or 'm-maddpg')");
    if (!cfg.has_steps) fail("run.steps is required");
    if (cfg.steps < 0) fail("run.steps must be >= 0");
    if (!cfg.has_seed) fail("run.seed is required (seeds must be explicit)");
    if (!cfg.has_eval_seed) fail("run.eval_seed is required (seeds must be explicit)");
    if (cfg.metric_every < 0) fail("run.metric_every must be >= 0");
    if (cfg.checkpoint_every < 0) fail("run.checkpoint_every must be >= 0");
    if (cfg.mape_probes < 0) fail("run.mape_probes must be >= 0");
    if (cfg.out_dir.empty()) fail("run.out is required (or pass --out)");
    if (!(cfg.market.p_max > 0)) fail("market.p_max must be > 0");
    if (cfg.market.marginal_fraction < 0 || cfg.market.marginal_fraction > 1) {
        fail("market.marginal_fraction must be in [0, 1]");
    }
    if (cfg.market.load_noise < 0 || cfg.market.load_noise >= 1) {
        fail("market.load_noise must be in [0, 1)");
    }
    if (cfg.market.steps_per_day <= 0 || cfg.market.steps_per_week <= 0 ||
        cfg.market.steps_per_year <= 0) {
        fail("market.steps_per_* must be > 0");
    }
    if (cfg.hyper.batch <= 0) fail("hyper.batch_size must be > 0");
    if (!(cfg.hyper.actor_lr > 0) || !(cfg.hyper.critic_lr > 0)) {
        fail("hyper learning rates must be > 0");
    }
    if (cfg.hyper.actor_hidden <= 0 || cfg.hyper.critic_hidden <= 0) {
        fail("hyper hidden sizes must be > 0");
    }
    if (cfg.hyper.noise_std < 0) fail("hyper.noise_std must be >= 0");
    if (cfg.hyper.maddpg_start < 1) fail("hyper.start_train must be >= 1");
    if (cfg.hyper.snapshot_refresh <= 0) fail("hyper.snapshot_refresh must be > 0");
    if (cfg.surrogate.batch <= 0) fail("hyper.surrogate_batch_size must be > 0");
    if (!(cfg.surrogate.actor_lr > 0) || !(cfg.surrogate.critic_lr > 0)) {
        fail("surrogate learning rates must be > 0");
    }
    if (cfg.surrogate.hidden <= 0) fail("hyper.surrogate_hidden must be > 0");
    if (cfg.surrogate.noise_std < 0) fail("hyper.surrogate_noise_std must be >= 0");
    if (cfg.surrogate.start_train < 1) fail("hyper.surrogate_start_train must be >= 1");
    if (cfg.surrogate.w_pen < 0) fail("hyper.penalty_weight must be >= 0");
    if (cfg.eval.states < 1) fail("eval.states must be >= 1");
    if (cfg.eval.mape_samples < 0) fail("eval.mape_samples must be >= 0");
    if (cfg.eval.workers < 0) fail("eval.workers must be >= 0");
    if (cfg.eval.mape_samples > 0 && cfg.mode != TrainMode::MMaddpg) {
        fail("eval.mape_samples requires run.mode = m-maddpg (no surrogate otherwise)");
    }
}

// ------------------------------------------------------------------- CSV

namespace {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& path, const std::string& expected_schema) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open file: " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "# schema: " + expected_schema) {
        throw std::runtime_error(path.string() + ": expected schema line '# schema: " +
                                 expected_schema + "'");
    }
    CsvTable table;
    if (!std::getline(in, line)) {
        throw std::runtime_error(path.string() + ": missing header line");
    }
    table.header = split(line, ',');
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        table.rows.push_back(split(line, ','));
    }
    return table;
}

void write_metrics_head(std::ostream& out) {
    out << "# schema: metrics-v1\n";
    out << "step,mode,mean_bid,std_bid,mean_reward,surrogate_mape\n";
}

void append_metric(std::ostream& out, const MetricRow& row) {
    out << row.step << ',' << mode_name(row.mode) << ',' << fmt(row.mean_bid) << ','
        << fmt(row.std_bid) << ',' << fmt(row.mean_reward) << ',';
    if (!std::isnan(row.surrogate_mape)) out << fmt(row.surrogate_mape);
    out << '\n';
}

void write_timing_head(std::ostream& out) {
    out << "# schema: timing-v1\n";
    out << "step,env_step_seconds,train_step_seconds\n";
}

void append_timing(std::ostream& out, const MetricRow& row) {
    out << row.step << ',' << fmt(row.env_step_seconds) << ','
        << fmt(row.train_step_seconds) << '\n';
}

double regret_total_from_csv(const fs::path& path) {
    const CsvTable table = read_csv(path, "regret-v1");
    for (const auto& row : table.rows) {
        if (row.size() == 7 && row[0] == "-1" && row[1] == "-1") {
            return to_double(row[6], path.string());
        }
    }
    throw std::runtime_error(path.string() + ": no total row (-1,-1,...) found");
}

ClearingFn reference_clearing() {
    return [](const Grid& g, const Eigen::VectorXd& scale, const BidSet& b) {
        return clear_market(g, scale, b);
    };
}

}  // namespace

// ------------------------------------------------------------ checkpoints

void write_checkpoint_dir(const std::string& dir,
                          const std::vector<BiddingAgent>& agents,
                          const SurrogateAgent* surrogate) {
    fs::create_directories(dir);
    auto save = [&](const std::string& name, const MlpNet& net, const OptimizerState& opt) {
        const fs::path path = fs::path(dir) / name;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint file: " + path.string());
        save_net_with_opt(out, net, opt);
        if (!out) throw std::runtime_error("failed writing checkpoint file: " + path.string());
    };
    for (std::size_t a = 0; a < agents.size(); ++a) {
        save("agent_" + std::to_string(a) + "_actor.net", agents[a].actor,
             agents[a].actor_opt);
        if (agents[a].has_critic) {
            save("agent_" + std::to_string(a) + "_critic.net", agents[a].critic,
                 agents[a].critic_opt);
        }
    }
    if (surrogate) {
        save("surrogate_actor.net", surrogate->actor, surrogate->actor_opt);
        save("surrogate_critic.net", surrogate->critic, surrogate->critic_opt);
    }
}

std::vector<BiddingAgent> load_checkpoint_actors(const std::string& dir) {
    std::vector<BiddingAgent> agents;
    for (std::size_t a = 0;; ++a) {
        const fs::path actor_path =
            fs::path(dir) / ("agent_" + std::to_string(a) + "_actor.net");
        if (!fs::exists(actor_path)) break;
        std::ifstream in(actor_path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot read checkpoint file: " + actor_path.string());
        BiddingAgent agent;
        auto [net, opt] = load_net_with_opt(in);
        agent.actor = std::move(net);
        agent.actor_opt = std::move(opt);
        const fs::path critic_path =
            fs::path(dir) / ("agent_" + std::to_string(a) + "_critic.net");
        if (fs::exists(critic_path)) {
            std::ifstream cin_(critic_path, std::ios::binary);
            auto [cnet, copt] = load_net_with_opt(cin_);
            agent.critic = std::move(cnet);
            agent.critic_opt = std::move(copt);
            agent.has_critic = true;
        }
        agents.push_back(std::move(agent));
    }
    if (agents.empty()) {
        throw std::runtime_error("no agent checkpoints found in: " + dir);
    }
    return agents;
}

// -------------------------------------------------------------------- run

RunSummary run_experiment(const ExperimentConfig& cfg) {
    validate_config(cfg);
    const fs::path dir(cfg.out_dir);
    if (fs::exists(dir / "COMPLETE")) {
        throw std::invalid_argument("refusing to overwrite completed run: " + cfg.out_dir);
    }
    fs::create_directories(dir);
    fs::remove(dir / "FAILED");
    {
        std::ofstream out(dir / "config.resolved");
        if (!out) throw std::runtime_error("cannot write into run directory: " + cfg.out_dir);
        write_config(out, cfg);
    }

    try {
        const Grid grid = load_grid_file(cfg.grid_file);
        const MarketEnv eval_env(grid, cfg.market, reference_clearing());

        std::ofstream metrics_out(dir / "metrics.csv");
        std::ofstream timing_out(dir / "timing.csv");
        write_metrics_head(metrics_out);
        write_timing_head(timing_out);

        TrainLoopConfig loop;
        loop.mode = cfg.mode;
        loop.steps = cfg.steps;
        loop.metric_every = cfg.metric_every;
        loop.checkpoint_every = cfg.checkpoint_every;
        loop.seed = cfg.seed;
        loop.hyper = cfg.hyper;
        loop.surrogate = cfg.surrogate;
        loop.mape_probes = cfg.mape_probes;

        RunSinks sinks;
        sinks.on_metrics = [&](const MetricRow& row) {
            append_metric(metrics_out, row);
            append_timing(timing_out, row);
            metrics_out.flush();
            timing_out.flush();
        };
        sinks.on_checkpoint = [&](long step, const std::vector<BiddingAgent>& agents,
                                  const SurrogateAgent* surrogate) {
            write_checkpoint_dir((dir / "checkpoints" / ("step_" + std::to_string(step))).string(),
                                 agents, surrogate);
            if (cfg.eval.at_checkpoints && step > 0 && step < cfg.steps) {
                const RegretReport report = regret_test(eval_env, agents, cfg.eval.states,
                                                        cfg.eval_seed, cfg.eval.workers);
                std::ofstream out(dir / ("regret_step_" + std::to_string(step) + ".csv"));
                write_regret_csv(out, report);
            }
        };

        const TrainResult result = training_loop(grid, cfg.market, loop, sinks);
        metrics_out.close();
        timing_out.close();

        {
            const RegretReport report = regret_test(eval_env, result.agents, cfg.eval.states,
                                                    cfg.eval_seed, cfg.eval.workers);
            std::ofstream out(dir / "regret_final.csv");
            write_regret_csv(out, report);
        }
        if (cfg.eval.mape_samples > 0) {
            const MapeReport mape =
                opf_mape(*result.surrogate, reference_clearing(), eval_env,
                         cfg.eval.mape_samples, derive_seed(cfg.eval_seed, 20),
                         cfg.eval.workers);
            std::ofstream out(dir / "mape.csv");
            out << "# schema: mape-v1\n";
            out << "n_samples,excluded,mape_percent\n";
            out << mape.n_samples << ',' << mape.excluded << ',';
            if (!std::isnan(mape.mape_percent)) out << fmt(mape.mape_percent);
            out << '\n';
        }
        {
            std::ofstream out(dir / "timing_summary.csv");
            out << "# schema: timing-summary-v1\n";
            out << "mode,steps,total_env_seconds,total_train_seconds,"
                   "mean_env_step_seconds,mean_train_step_seconds\n";
            const double denom = result.steps > 0 ? static_cast<double>(result.steps) : 1.0;
            out << mode_name(cfg.mode) << ',' << result.steps << ','
                << fmt(result.env_seconds_total) << ',' << fmt(result.train_seconds_total)
                << ',' << fmt(result.env_seconds_total / denom) << ','
                << fmt(result.train_seconds_total / denom) << '\n';
        }
        {
            std::ofstream out(dir / "COMPLETE");
            out << "ok\n";
        }
    } catch (const std::exception& e) {
        std::ofstream out(dir / "FAILED");
        out << e.what() << "\n";
        throw;
    }
    return read_run(cfg.out_dir);
}

RunSummary read_run(const std::string& dir) {
    const fs::path path(dir);
    if (!fs::exists(path)) throw std::runtime_error("run directory does not exist: " + dir);
    if (!fs::exists(path / "COMPLETE")) {
        throw std::runtime_error("run not complete (no COMPLETE marker): " + dir);
    }
    const ExperimentConfig cfg = parse_config_file((path / "config.resolved").string());

    RunSummary summary;
    summary.dir = dir;
    summary.mode = cfg.mode;
    summary.steps = cfg.steps;

    const CsvTable metrics = read_csv(path / "metrics.csv", "metrics-v1");
    summary.metric_rows = static_cast<int>(metrics.rows.size());

    const CsvTable timing = read_csv(path / "timing_summary.csv", "timing-summary-v1");
    if (timing.rows.size() != 1 || timing.rows[0].size() != 6) {
        throw std::runtime_error(dir + ": malformed timing_summary.csv");
    }
    const auto& t = timing.rows[0];
    summary.total_env_seconds = to_double(t[2], "timing_summary");
    summary.total_train_seconds = to_double(t[3], "timing_summary");
    summary.mean_env_step_seconds = to_double(t[4], "timing_summary");
    summary.mean_train_step_seconds = to_double(t[5], "timing_summary");

    summary.final_regret_total = regret_total_from_csv(path / "regret_final.csv");

    if (fs::exists(path / "mape.csv")) {
        const CsvTable mape = read_csv(path / "mape.csv", "mape-v1");
        if (mape.rows.size() == 1 && mape.rows[0].size() == 3 && !mape.rows[0][2].empty()) {
            summary.mape_percent = to_double(mape.rows[0][2], "mape.csv");
        }
    }
    return summary;
}

// ---------------------------------------------------------------- compare

CompareReport compare_runs(const std::string& dir_a, const std::string& dir_b) {
    CompareReport report;
    report.a = read_run(dir_a);
    report.b = read_run(dir_b);
    report.speed_up_env_step =
        report.b.mean_env_step_seconds > 0
            ? report.a.mean_env_step_seconds / report.b.mean_env_step_seconds
            : std::numeric_limits<double>::quiet_NaN();
    const double total_a = report.a.total_env_seconds + report.a.total_train_seconds;
    const double total_b = report.b.total_env_seconds + report.b.total_train_seconds;
    report.speed_up_total =
        total_b > 0 ? total_a / total_b : std::numeric_limits<double>::quiet_NaN();
    return report;
}

void write_compare(std::ostream& out, const CompareReport& report) {
    auto cell = [](double v) { return std::isnan(v) ? std::string("-") : fmt(v, 6); };
    auto row = [&](const std::string& name, const std::string& a, const std::string& b) {
        out << std::left << std::setw(26) << name << std::right << std::setw(16) << a
            << std::setw(16) << b << "\n";
    };
    row("metric", "run_a", "run_b");
    row("mode", mode_name(report.a.mode), mode_name(report.b.mode));
    row("steps", std::to_string(report.a.steps), std::to_string(report.b.steps));
    row("final_regret_total", cell(report.a.final_regret_total),
        cell(report.b.final_regret_total));
    row("mape_percent", cell(report.a.mape_percent), cell(report.b.mape_percent));
    row("mean_env_step_seconds", cell(report.a.mean_env_step_seconds),
        cell(report.b.mean_env_step_seconds));
    row("mean_train_step_seconds", cell(report.a.mean_train_step_seconds),
        cell(report.b.mean_train_step_seconds));
    row("total_seconds",
        cell(report.a.total_env_seconds + report.a.total_train_seconds),
        cell(report.b.total_env_seconds + report.b.total_train_seconds));
    out << "speed_up_env_step (a/b) = " << cell(report.speed_up_env_step) << "\n";
    out << "speed_up_total (a/b)    = " << cell(report.speed_up_total) << "\n";
}

// ------------------------------------------------------------- plot data

namespace {

std::vector<std::pair<long, double>> regret_curve_points(const fs::path& dir, long steps) {
    std::vector<std::pair<long, double>> points;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        const std::string prefix = "regret_step_";
        if (name.rfind(prefix, 0) == 0 && name.size() > prefix.size() + 4 &&
            name.substr(name.size() - 4) == ".csv") {
            const std::string num = name.substr(prefix.size(), name.size() - prefix.size() - 4);
            points.emplace_back(to_long(num, name), regret_total_from_csv(entry.path()));
        }
    }
    points.emplace_back(steps, regret_total_from_csv(dir / "regret_final.csv"));
    std::sort(points.begin(), points.end());
    return points;
}

}  // namespace

void emit_plot_data(std::ostream& out, const std::vector<std::string>& run_dirs,
                    const std::string& figure) {
    if (run_dirs.empty()) throw std::invalid_argument("emit-plot-data: no run directories given");
    if (figure == "bids") {
        out << "# schema: plot-bids-v1\n";
        out << "run,mode,step,mean_bid,std_bid\n";
        for (const std::string& dir : run_dirs) {
            const RunSummary summary = read_run(dir);
            const CsvTable metrics = read_csv(fs::path(dir) / "metrics.csv", "metrics-v1");
            for (const auto& row : metrics.rows) {
                out << dir << ',' << mode_name(summary.mode) << ',' << row[0] << ','
                    << row[2] << ',' << row[3] << '\n';
            }
        }
    } else if (figure == "regret_curve") {
        out << "# schema: plot-regret-curve-v1\n";
        out << "run,mode,step,total_regret\n";
        for (const std::string& dir : run_dirs) {
            const RunSummary summary = read_run(dir);
            for (const auto& [step, total] : regret_curve_points(dir, summary.steps)) {
                out << dir << ',' << mode_name(summary.mode) << ',' << step << ','
                    << fmt(total) << '\n';
            }
        }
    } else if (figure == "regret_box") {
        out << "# schema: plot-regret-box-v1\n";
        out << "run,mode,total_regret\n";
        for (const std::string& dir : run_dirs) {
            const RunSummary summary = read_run(dir);
            out << dir << ',' << mode_name(summary.mode) << ','
                << fmt(summary.final_regret_total) << '\n';
        }
    } else if (figure == "mape_scatter") {
        out << "# schema: plot-mape-scatter-v1\n";
        out << "run,mode,mape_percent,total_regret\n";
        for (const std::string& dir : run_dirs) {
            const RunSummary summary = read_run(dir);
            if (std::isnan(summary.mape_percent)) {
                throw std::runtime_error("mape_scatter: run has no mape.csv: " + dir);
            }
            out << dir << ',' << mode_name(summary.mode) << ','
                << fmt(summary.mape_percent) << ',' << fmt(summary.final_regret_total)
                << '\n';
        }
    } else {
        throw std::invalid_argument(
            "unknown figure '" + figure +
            "' (valid: bids, regret_curve, regret_box, mape_scatter)");
    }
}

// -------------------------------------------------------------------- CLI

namespace {

void print_usage(std::ostream& out) {
    out << "usage: bidsim <subcommand> [options]\n"
           "\n"
           "subcommands:\n"
           "  run --config FILE [--seed N] [--out DIR] [--steps N] [--mode M]\n"
           "      execute an experiment into its run directory\n"
           "  compare RUN_A RUN_B\n"
           "      paired report of two completed runs (speed-up = a/b)\n"
           "  emit-plot-data FIGURE RUN... [--out FILE]\n"
           "      tidy CSV for FIGURE in {bids, regret_curve, regret_box, mape_scatter}\n"
           "  regret-test RUN [--states N] [--seed N] [--out FILE]\n"
           "      evaluate the final checkpoint of a completed run\n"
           "  oracle-check --grid FILE [--samples N] [--seed N] [--step-mw X]\n"
           "      reference clearing vs. exhaustive lattice on a tiny grid\n";
}

// All flags take a value; unknown or duplicate flags and missing values are
// usage errors.
std::map<std::string, std::string> take_flags(std::vector<std::string>& args,
                                              const std::vector<std::string>& allowed) {
    std::map<std::string, std::string> flags;
    std::vector<std::string> positional;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& arg = args[i];
        if (arg.rfind("--", 0) == 0) {
            if (std::find(allowed.begin(), allowed.end(), arg) == allowed.end()) {
                throw std::invalid_argument("unknown flag '" + arg +
                                            "' (valid: " + join(allowed, ", ") + ")");
            }
            if (i + 1 >= args.size()) {
                throw std::invalid_argument("flag '" + arg + "' needs a value");
            }
            if (!flags.emplace(arg, args[i + 1]).second) {
                throw std::invalid_argument("duplicate flag '" + arg + "'");
            }
            ++i;
        } else {
            positional.push_back(arg);
        }
    }
    args = positional;
    return flags;
}

int cmd_run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    ExperimentConfig cfg;
    try {
        const auto flags = take_flags(args, {"--config", "--seed", "--out", "--steps", "--mode"});
        if (!args.empty()) {
            throw std::invalid_argument("run takes no positional arguments");
        }
        const auto config_it = flags.find("--config");
        if (config_it == flags.end()) {
            throw std::invalid_argument("run requires --config FILE");
        }
        cfg = parse_config_file(config_it->second);
        if (auto it = flags.find("--seed"); it != flags.end()) {
            cfg.seed = to_u64(it->second, "--seed");
            cfg.has_seed = true;
        }
        if (auto it = flags.find("--out"); it != flags.end()) cfg.out_dir = it->second;
        if (auto it = flags.find("--steps"); it != flags.end()) {
            cfg.steps = to_long(it->second, "--steps");
            cfg.has_steps = true;
        }
        if (auto it = flags.find("--mode"); it != flags.end()) {
            cfg.mode = to_mode(it->second, "--mode");
            cfg.has_mode = true;
        }
        validate_config(cfg);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    try {
        const RunSummary summary = run_experiment(cfg);
        out << "run complete: " << summary.dir << "\n";
        out << "mode: " << mode_name(summary.mode) << "  steps: " << summary.steps
            << "  metric rows: " << summary.metric_rows << "\n";
        out << "final total regret: " << fmt(summary.final_regret_total, 6) << "\n";
        if (!std::isnan(summary.mape_percent)) {
            out << "surrogate mape: " << fmt(summary.mape_percent, 6) << "%\n";
        }
        out << "mean env-step seconds: " << fmt(summary.mean_env_step_seconds, 6) << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_compare(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    try {
        take_flags(args, {});
        if (args.size() != 2) {
            throw std::invalid_argument("compare takes exactly two run directories");
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    try {
        write_compare(out, compare_runs(args[0], args[1]));
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_emit_plot_data(std::vector<std::string> args, std::ostream& out,
                       std::ostream& err) {
    std::map<std::string, std::string> flags;
    try {
        flags = take_flags(args, {"--out"});
        if (args.size() < 2) {
            throw std::invalid_argument(
                "emit-plot-data takes a figure name and at least one run directory");
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    try {
        const std::string figure = args[0];
        const std::vector<std::string> dirs(args.begin() + 1, args.end());
        if (auto it = flags.find("--out"); it != flags.end()) {
            std::ofstream file(it->second);
            if (!file) throw std::runtime_error("cannot write: " + it->second);
            emit_plot_data(file, dirs, figure);
        } else {
            emit_plot_data(out, dirs, figure);
        }
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_regret_test(std::vector<std::string> args, std::ostream& out,
                    std::ostream& err) {
    std::map<std::string, std::string> flags;
    try {
        flags = take_flags(args, {"--states", "--seed", "--out"});
        if (args.size() != 1) {
            throw std::invalid_argument("regret-test takes exactly one run directory");
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    try {
        const std::string dir = args[0];
        const RunSummary run = read_run(dir);
        const ExperimentConfig cfg =
            parse_config_file((fs::path(dir) / "config.resolved").string());
        int states = cfg.eval.states;
        std::uint64_t seed = cfg.eval_seed;
        if (auto it = flags.find("--states"); it != flags.end()) {
            states = to_int(it->second, "--states");
        }
        if (auto it = flags.find("--seed"); it != flags.end()) {
            seed = to_u64(it->second, "--seed");
        }

        const Grid grid = load_grid_file(cfg.grid_file);
        const MarketEnv env(grid, cfg.market, reference_clearing());
        const std::vector<BiddingAgent> agents = load_checkpoint_actors(
            (fs::path(dir) / "checkpoints" / ("step_" + std::to_string(cfg.steps))).string());

        const RegretReport trained = regret_test(env, agents, states, seed, cfg.eval.workers);
        const RegretReport baseline = random_baseline(env, states, seed, cfg.eval.workers);
        out << "run: " << dir << "  states: " << states << "\n";
        out << "trained total regret: " << fmt(trained.total, 6) << "\n";
        out << "random baseline total regret: " << fmt(baseline.total, 6) << "\n";
        out << "baseline / trained ratio: "
            << (trained.total > 0 ? fmt(baseline.total / trained.total, 6) : "inf") << "\n";
        if (auto it = flags.find("--out"); it != flags.end()) {
            std::ofstream file(it->second);
            if (!file) throw std::runtime_error("cannot write: " + it->second);
            write_regret_csv(file, trained);
        }
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_oracle_check(std::vector<std::string> args, std::ostream& out,
                     std::ostream& err) {
    std::map<std::string, std::string> flags;
    try {
        flags = take_flags(args, {"--grid", "--samples", "--seed", "--step-mw"});
        if (!args.empty()) {
            throw std::invalid_argument("oracle-check takes no positional arguments");
        }
        if (flags.find("--grid") == flags.end()) {
            throw std::invalid_argument("oracle-check requires --grid FILE");
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    try {
        const std::string grid_file = flags.at("--grid");
        int samples = 50;
        std::uint64_t seed = 1;
        double step_mw = 0.5;
        if (auto it = flags.find("--samples"); it != flags.end()) {
            samples = to_int(it->second, "--samples");
        }
        if (auto it = flags.find("--seed"); it != flags.end()) {
            seed = to_u64(it->second, "--seed");
        }
        if (auto it = flags.find("--step-mw"); it != flags.end()) {
            step_mw = to_double(it->second, "--step-mw");
        }

        const Grid grid = load_grid_file(grid_file);
        const MarketEnv env(grid, MarketConfig{}, reference_clearing());
        const int n = grid.agent_count();
        const double p_max = env.config().p_max;
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> price(0.0, p_max);

        int violations = 0;
        double max_excess = -std::numeric_limits<double>::infinity();
        double tolerance = 0.0;
        for (int i = 0; i < samples; ++i) {
            const Scenario sc = env.sample_scenario(rng);
            BidSet bids;
            bids.p_max = p_max;
            bids.prices = Eigen::VectorXd::NullaryExpr(n, [&](Eigen::Index) {
                return price(rng);
            });
            const ClearingResult ref = clear_market(grid, sc.load_scale, bids);
            const ClearingResult oracle =
                brute_force_clear(grid, sc.load_scale, bids, step_mw);
            // One lattice move per agent changes the cost by at most
            // step * p_max, which is the resolution of the oracle itself.
            tolerance = std::max(0.02 * std::abs(oracle.objective_eur),
                                 n * step_mw * p_max);
            const double excess = ref.objective_eur - oracle.objective_eur;
            max_excess = std::max(max_excess, excess);
            if (excess > tolerance) {
                ++violations;
                out << "sample " << i << ": reference " << fmt(ref.objective_eur, 6)
                    << " exceeds oracle " << fmt(oracle.objective_eur, 6)
                    << " by more than " << fmt(tolerance, 6) << "\n";
            }
        }
        out << "oracle-check: " << samples << " samples on " << grid_file << "\n";
        out << "max excess over oracle: " << fmt(max_excess, 6)
            << " (last tolerance: " << fmt(tolerance, 6) << ")\n";
        out << "violations: " << violations << "\n";
        return violations == 0 ? 0 : 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    if (args.empty()) {
        print_usage(err);
        return 2;
    }
    const std::string& cmd = args[0];
    const std::vector<std::string> rest(args.begin() + 1, args.end());
    if (cmd == "--help" || cmd == "help") {
        print_usage(out);
        return 0;
    }
    if (cmd == "run") return cmd_run(rest, out, err);
    if (cmd == "compare") return cmd_compare(rest, out, err);
    if (cmd == "emit-plot-data") return cmd_emit_plot_data(rest, out, err);
    if (cmd == "regret-test") return cmd_regret_test(rest, out, err);
    if (cmd == "oracle-check") return cmd_oracle_check(rest, out, err);
    err << "error: unknown subcommand '" << cmd
        << "' (valid: run, compare, emit-plot-data, regret-test, oracle-check)\n";
    return 2;
}

}  // namespace bidsim
