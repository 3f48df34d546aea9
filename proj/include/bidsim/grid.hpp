#ifndef BIDSIM_GRID_HPP
#define BIDSIM_GRID_HPP

#include <Eigen/Dense>

#include <iosfwd>
#include <string>
#include <vector>

// Power network model: gridfile parsing, Newton-Raphson AC power flow and
// the linear constraint-violation penalties. All impedances are per-unit on
// a 100 MVA base; powers cross the API in MW/MVAr.
namespace bidsim {

inline constexpr double kBaseMva = 100.0;
inline constexpr double kPfTolerancePu = 1e-8;
inline constexpr int kPfMaxIterations = 30;

struct Bus {
    int id = 0;  // id as written in the grid file
    double u_min = 0.0;
    double u_max = 0.0;
    bool slack = false;
};

// Lines and trafos share the electrical model (tap fixed at 1.0); they are
// kept in separate lists so their penalty sums stay reportable separately.
struct Branch {
    int from = 0;  // bus indices, not file ids
    int to = 0;
    double r_pu = 0.0;
    double x_pu = 0.0;
    double s_max_mva = 0.0;
};

struct Load {
    int bus = 0;
    double p_mw = 0.0;
    double q_mvar = 0.0;
};

struct Generator {
    int bus = 0;
    double p_max_mw = 0.0;
    int agent = 0;
};

struct Grid {
    std::vector<Bus> buses;
    std::vector<Branch> lines;
    std::vector<Branch> trafos;
    std::vector<Load> loads;      // generators are sorted so gens[i].agent == i
    std::vector<Generator> gens;
    int slack = 0;                // bus index

    int agent_count() const { return static_cast<int>(gens.size()); }
    double total_capacity_mw() const;
    double nominal_load_mw() const;
};

// Parses the `gridfile v1` format: sections [bus], [line], [trafo], [load],
// [gen], whitespace-separated fields, '#' comments. Throws std::runtime_error
// with a line/field location on parse errors and named invariant violations.
Grid load_grid(std::istream& in);
Grid load_grid_file(const std::string& path);

struct PowerFlowSolution {
    Eigen::VectorXd u;            // per-bus magnitude, pu
    Eigen::VectorXd angle;        // per-bus angle, radians
    Eigen::VectorXd s_line_mva;   // per-line apparent power (max of both ends)
    Eigen::VectorXd s_trafo_mva;
    double p_slack_mw = 0.0;
    double p_loss_mw = 0.0;
    bool converged = false;
    int iterations = 0;
    double max_mismatch_pu = 0.0;
};

// Flat-start Newton-Raphson with generators as PQ injections (Q = 0).
// Non-convergence is reported through the flag, not an exception.
PowerFlowSolution run_power_flow(const Grid& grid,
                                 const Eigen::VectorXd& gen_setpoints_mw,
                                 const Eigen::VectorXd& load_scale);

struct PenaltyBreakdown {
    double voltage_penalty = 0.0;
    double line_penalty = 0.0;
    double trafo_penalty = 0.0;
    double total = 0.0;

    // Sentinel used by callers when the power flow diverged.
    static PenaltyBreakdown divergence();
};

PenaltyBreakdown penalties(const PowerFlowSolution& solution, const Grid& grid);

}  // namespace bidsim

#endif
