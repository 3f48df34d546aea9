#ifndef BIDSIM_EXPERIMENT_HPP
#define BIDSIM_EXPERIMENT_HPP

#include "bidsim/evaluation.hpp"
#include "bidsim/marl.hpp"

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

// Experiment front end: config files, run orchestration and persistence,
// run comparison, and plot-data emission. Everything a run needs to be
// reproduced lands inside its run directory.
namespace bidsim {

struct EvalConfig {
    int states = 50;        // regret evaluation states
    int mape_samples = 0;   // > 0 writes mape.csv (model mode only)
    int workers = 0;        // 0 = hardware concurrency
    bool at_checkpoints = false;  // regret CSV at every training checkpoint
};

// Mirrors the config file: sections [run], [market], [hyper], [eval].
// Seeds and the step budget must be explicit; there are no wall-clock
// defaults anywhere.
struct ExperimentConfig {
    // [run]
    std::string grid_file;
    TrainMode mode = TrainMode::Maddpg;
    bool has_mode = false;
    long steps = -1;
    bool has_steps = false;
    std::uint64_t seed = 0;
    bool has_seed = false;
    std::uint64_t eval_seed = 0;
    bool has_eval_seed = false;
    int metric_every = 100;
    long checkpoint_every = 5000;
    int mape_probes = 5;
    long pretrain_steps = 5000;  // pretrain mode only
    bool has_pretrain_steps = false;
    std::string out_dir;
    // [market] / [hyper] / [eval]
    MarketConfig market;
    TrainHyper hyper;
    SurrogateHyper surrogate;
    EvalConfig eval;
};

// INI-style parser: '#' comments, 'key = value' lines under a [section]
// header. Unknown sections or keys and duplicate keys are hard errors that
// name the offender and list the valid alternatives.
ExperimentConfig parse_config(std::istream& in, const std::string& source);
ExperimentConfig parse_config_file(const std::string& path);

// Resolved snapshot with every key explicit; parse_config round-trips it.
void write_config(std::ostream& out, const ExperimentConfig& config);

// Semantic checks parsing cannot do (required keys, file existence, value
// ranges). Throws std::invalid_argument naming the offending key.
void validate_config(const ExperimentConfig& config);

struct RunSummary {
    std::string dir;
    TrainMode mode = TrainMode::Maddpg;
    long steps = 0;
    int metric_rows = 0;
    double total_env_seconds = 0.0;
    double total_train_seconds = 0.0;
    double mean_env_step_seconds = 0.0;
    double mean_train_step_seconds = 0.0;
    double final_regret_total = 0.0;
    double mape_percent = std::numeric_limits<double>::quiet_NaN();
};

// Executes the experiment into config.out_dir. Artifacts: config.resolved,
// metrics.csv (deterministic columns only; byte-identical across reruns),
// timing.csv + timing_summary.csv (wall-clock, reported separately so the
// metrics stay reproducible), regret_final.csv (plus regret_step_<n>.csv
// when eval.at_checkpoints), checkpoints/step_<n>/*.net, and a COMPLETE
// marker. Any failure leaves a FAILED marker with the message plus whatever
// artifacts were already written, then rethrows.
RunSummary run_experiment(const ExperimentConfig& config);

// Reads the artifacts of a completed run; throws when COMPLETE is missing.
RunSummary read_run(const std::string& dir);

struct CompareReport {
    RunSummary a;
    RunSummary b;
    double speed_up_env_step = 0.0;  // a.mean_env_step_seconds / b's
    double speed_up_total = 0.0;     // a.total wall time / b's
};

CompareReport compare_runs(const std::string& dir_a, const std::string& dir_b);
void write_compare(std::ostream& out, const CompareReport& report);

// figure: bids | regret_curve | regret_box | mape_scatter. Emits a tidy CSV
// with a schema line; unknown figure kinds are errors listing the valid
// ones.
void emit_plot_data(std::ostream& out, const std::vector<std::string>& run_dirs,
                    const std::string& figure);

// Checkpoint persistence (nets + optimizer state per agent, plus the
// surrogate pair in model mode).
void write_checkpoint_dir(const std::string& dir,
                          const std::vector<BiddingAgent>& agents,
                          const SurrogateAgent* surrogate);
std::vector<BiddingAgent> load_checkpoint_actors(const std::string& dir);

// Testable CLI core; tools/bidsim forwards argv here. Returns the process
// exit code: 0 success, 1 runtime failure, 2 usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace bidsim

#endif
