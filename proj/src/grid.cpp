#include "bidsim/grid.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace bidsim {

double Grid::total_capacity_mw() const {
    double total = 0.0;
    for (const auto& g : gens) total += g.p_max_mw;
    return total;
}

double Grid::nominal_load_mw() const {
    double total = 0.0;
    for (const auto& l : loads) total += l.p_mw;
    return total;
}

namespace {

[[noreturn]] void fail(int line, const std::string& msg) {
    throw std::runtime_error("line " + std::to_string(line) + ": " + msg);
}

double parse_num(int line, const std::string& tok, int field) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(tok, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != tok.size()) {
        fail(line, "field " + std::to_string(field) + " ('" + tok + "') is not a number");
    }
    return v;
}

int parse_int(int line, const std::string& tok, int field) {
    const double v = parse_num(line, tok, field);
    if (v != std::floor(v) || std::abs(v) > 1e9) {
        fail(line, "field " + std::to_string(field) + " ('" + tok + "') is not an integer");
    }
    return static_cast<int>(v);
}

struct RawRecord {
    int line;
    std::vector<std::string> fields;
};

}  // namespace

Grid load_grid(std::istream& in) {
    std::map<std::string, std::vector<RawRecord>> sections;
    std::string current;
    std::string raw;
    int line_no = 0;
    bool saw_header = false;

    while (std::getline(in, raw)) {
        ++line_no;
        if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
        std::istringstream ss(raw);
        std::vector<std::string> toks;
        for (std::string t; ss >> t;) toks.push_back(t);
        if (toks.empty()) continue;

        if (!saw_header) {
            if (toks.size() != 2 || toks[0] != "gridfile" || toks[1] != "v1") {
                fail(line_no, "expected 'gridfile v1' header");
            }
            saw_header = true;
            continue;
        }
        if (toks[0].front() == '[') {
            if (toks.size() != 1 || toks[0].back() != ']') fail(line_no, "malformed section header");
            current = toks[0].substr(1, toks[0].size() - 2);
            if (current != "bus" && current != "line" && current != "trafo" &&
                current != "load" && current != "gen") {
                fail(line_no, "unknown section [" + current + "]");
            }
            continue;
        }
        if (current.empty()) fail(line_no, "record before any section header");
        sections[current].push_back({line_no, std::move(toks)});
    }
    if (!saw_header) throw std::runtime_error("empty grid file: expected 'gridfile v1' header");

    Grid grid;
    std::map<int, int> bus_index;
    for (const auto& rec : sections["bus"]) {
        if (rec.fields.size() != 4) {
            fail(rec.line, "[bus] expects 4 fields (id u_min u_max slack), got " +
                               std::to_string(rec.fields.size()));
        }
        Bus b;
        b.id = parse_int(rec.line, rec.fields[0], 1);
        b.u_min = parse_num(rec.line, rec.fields[1], 2);
        b.u_max = parse_num(rec.line, rec.fields[2], 3);
        const int flag = parse_int(rec.line, rec.fields[3], 4);
        if (flag != 0 && flag != 1) fail(rec.line, "slack flag must be 0 or 1");
        b.slack = flag == 1;
        if (!(b.u_min < b.u_max)) fail(rec.line, "u_min must be below u_max");
        if (b.u_min <= 0.0) fail(rec.line, "u_min must be positive");
        if (bus_index.count(b.id)) fail(rec.line, "duplicate bus id " + std::to_string(b.id));
        bus_index[b.id] = static_cast<int>(grid.buses.size());
        grid.buses.push_back(b);
    }
    if (grid.buses.empty()) throw std::runtime_error("grid has no buses");

    auto resolve_bus = [&](int line, const std::string& tok, int field, const char* section) {
        const int id = parse_int(line, tok, field);
        auto it = bus_index.find(id);
        if (it == bus_index.end()) {
            fail(line, std::string("[") + section + "] references unknown bus id " +
                           std::to_string(id));
        }
        return it->second;
    };

    auto parse_branch = [&](const RawRecord& rec, const char* section) {
        if (rec.fields.size() != 5) {
            fail(rec.line, std::string("[") + section +
                               "] expects 5 fields (from to r_pu x_pu s_max_mva), got " +
                               std::to_string(rec.fields.size()));
        }
        Branch br;
        br.from = resolve_bus(rec.line, rec.fields[0], 1, section);
        br.to = resolve_bus(rec.line, rec.fields[1], 2, section);
        br.r_pu = parse_num(rec.line, rec.fields[2], 3);
        br.x_pu = parse_num(rec.line, rec.fields[3], 4);
        br.s_max_mva = parse_num(rec.line, rec.fields[4], 5);
        if (br.from == br.to) fail(rec.line, "branch endpoints must differ");
        if (br.r_pu * br.r_pu + br.x_pu * br.x_pu <= 0.0) {
            fail(rec.line, "branch impedance must be nonzero");
        }
        if (br.s_max_mva <= 0.0) fail(rec.line, "s_max must be positive");
        return br;
    };
    for (const auto& rec : sections["line"]) grid.lines.push_back(parse_branch(rec, "line"));
    for (const auto& rec : sections["trafo"]) grid.trafos.push_back(parse_branch(rec, "trafo"));

    for (const auto& rec : sections["load"]) {
        if (rec.fields.size() != 3) {
            fail(rec.line, "[load] expects 3 fields (bus p_mw q_mvar), got " +
                               std::to_string(rec.fields.size()));
        }
        Load ld;
        ld.bus = resolve_bus(rec.line, rec.fields[0], 1, "load");
        ld.p_mw = parse_num(rec.line, rec.fields[1], 2);
        ld.q_mvar = parse_num(rec.line, rec.fields[2], 3);
        if (ld.p_mw < 0.0) fail(rec.line, "load p_mw must be >= 0");
        grid.loads.push_back(ld);
    }
    for (const auto& rec : sections["gen"]) {
        if (rec.fields.size() != 3) {
            fail(rec.line, "[gen] expects 3 fields (bus p_max_mw agent), got " +
                               std::to_string(rec.fields.size()));
        }
        Generator g;
        g.bus = resolve_bus(rec.line, rec.fields[0], 1, "gen");
        g.p_max_mw = parse_num(rec.line, rec.fields[1], 2);
        g.agent = parse_int(rec.line, rec.fields[2], 3);
        if (g.p_max_mw <= 0.0) fail(rec.line, "p_max must be positive");
        grid.gens.push_back(g);
    }

    int slack_count = 0;
    for (std::size_t i = 0; i < grid.buses.size(); ++i) {
        if (grid.buses[i].slack) {
            ++slack_count;
            grid.slack = static_cast<int>(i);
        }
    }
    if (slack_count == 0) throw std::runtime_error("no slack bus");
    if (slack_count == 2) throw std::runtime_error("two slack buses");
    if (slack_count > 2) {
        throw std::runtime_error(std::to_string(slack_count) + " slack buses");
    }

    // Connectivity over lines + trafos.
    std::vector<int> seen(grid.buses.size(), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    while (!stack.empty()) {
        const int at = stack.back();
        stack.pop_back();
        auto visit = [&](const Branch& br) {
            if (br.from == at && !seen[br.to]) { seen[br.to] = 1; stack.push_back(br.to); }
            if (br.to == at && !seen[br.from]) { seen[br.from] = 1; stack.push_back(br.from); }
        };
        for (const auto& br : grid.lines) visit(br);
        for (const auto& br : grid.trafos) visit(br);
    }
    if (grid.buses.size() > 1 &&
        std::count(seen.begin(), seen.end(), 1) != static_cast<long>(grid.buses.size())) {
        throw std::runtime_error("grid is not connected");
    }

    // One generator per agent, ids 0..N-1, so per-agent vectors index gens
    // directly.
    std::sort(grid.gens.begin(), grid.gens.end(),
              [](const Generator& a, const Generator& b) { return a.agent < b.agent; });
    for (std::size_t i = 0; i < grid.gens.size(); ++i) {
        if (grid.gens[i].agent != static_cast<int>(i)) {
            throw std::runtime_error(
                "generator agent ids must be 0..N-1 with one generator each");
        }
    }
    return grid;
}

Grid load_grid_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open grid file: " + path);
    try {
        return load_grid(in);
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

namespace {

Eigen::MatrixXcd build_ybus(const Grid& grid) {
    const int n = static_cast<int>(grid.buses.size());
    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
    auto stamp = [&](const Branch& br) {
        const std::complex<double> adm = 1.0 / std::complex<double>(br.r_pu, br.x_pu);
        y(br.from, br.from) += adm;
        y(br.to, br.to) += adm;
        y(br.from, br.to) -= adm;
        y(br.to, br.from) -= adm;
    };
    for (const auto& br : grid.lines) stamp(br);
    for (const auto& br : grid.trafos) stamp(br);
    return y;
}

}  // namespace

PowerFlowSolution run_power_flow(const Grid& grid,
                                 const Eigen::VectorXd& gen_setpoints_mw,
                                 const Eigen::VectorXd& load_scale) {
    const int n = static_cast<int>(grid.buses.size());
    if (gen_setpoints_mw.size() != static_cast<Eigen::Index>(grid.gens.size())) {
        throw std::invalid_argument("run_power_flow: setpoint count does not match generators");
    }
    if (load_scale.size() != static_cast<Eigen::Index>(grid.loads.size())) {
        throw std::invalid_argument("run_power_flow: scale count does not match loads");
    }
    for (Eigen::Index i = 0; i < gen_setpoints_mw.size(); ++i) {
        if (gen_setpoints_mw(i) < -1e-9 || gen_setpoints_mw(i) > grid.gens[i].p_max_mw + 1e-9) {
            throw std::invalid_argument("run_power_flow: setpoint " + std::to_string(i) +
                                        " outside [0, P_max]");
        }
    }
    for (Eigen::Index i = 0; i < load_scale.size(); ++i) {
        if (!(load_scale(i) > 0.0)) {
            throw std::invalid_argument("run_power_flow: load scale " + std::to_string(i) +
                                        " must be positive");
        }
    }

    const Eigen::MatrixXcd ybus = build_ybus(grid);
    const Eigen::MatrixXd g = ybus.real();
    const Eigen::MatrixXd b = ybus.imag();

    // Specified injections (pu): generators are PQ with Q = 0.
    Eigen::VectorXd p_spec = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd q_spec = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < grid.gens.size(); ++i) {
        p_spec(grid.gens[i].bus) += gen_setpoints_mw(static_cast<Eigen::Index>(i)) / kBaseMva;
    }
    for (std::size_t i = 0; i < grid.loads.size(); ++i) {
        const double s = load_scale(static_cast<Eigen::Index>(i));
        p_spec(grid.loads[i].bus) -= grid.loads[i].p_mw * s / kBaseMva;
        q_spec(grid.loads[i].bus) -= grid.loads[i].q_mvar * s / kBaseMva;
    }

    std::vector<int> pq;  // every non-slack bus
    pq.reserve(n - 1);
    for (int i = 0; i < n; ++i) {
        if (i != grid.slack) pq.push_back(i);
    }
    const int m = static_cast<int>(pq.size());

    PowerFlowSolution sol;
    sol.u = Eigen::VectorXd::Ones(n);
    sol.angle = Eigen::VectorXd::Zero(n);

    Eigen::VectorXd p_calc(n), q_calc(n);
    auto recompute = [&]() {
        Eigen::VectorXcd v(n);
        for (int i = 0; i < n; ++i) v(i) = std::polar(sol.u(i), sol.angle(i));
        const Eigen::VectorXcd s = v.cwiseProduct((ybus * v).conjugate());
        p_calc = s.real();
        q_calc = s.imag();
    };

    bool numeric_breakdown = false;
    while (true) {
        recompute();
        double worst = 0.0;
        for (int k = 0; k < m; ++k) {
            worst = std::max(worst, std::abs(p_spec(pq[k]) - p_calc(pq[k])));
            worst = std::max(worst, std::abs(q_spec(pq[k]) - q_calc(pq[k])));
        }
        sol.max_mismatch_pu = worst;
        if (!std::isfinite(worst)) {
            numeric_breakdown = true;
            break;
        }
        if (worst < kPfTolerancePu) {
            sol.converged = true;
            break;
        }
        if (sol.iterations >= kPfMaxIterations) break;

        Eigen::MatrixXd jac(2 * m, 2 * m);
        for (int r = 0; r < m; ++r) {
            const int i = pq[r];
            for (int c = 0; c < m; ++c) {
                const int k = pq[c];
                if (i == k) {
                    jac(r, c) = -q_calc(i) - b(i, i) * sol.u(i) * sol.u(i);
                    jac(r, m + c) = p_calc(i) / sol.u(i) + g(i, i) * sol.u(i);
                    jac(m + r, c) = p_calc(i) - g(i, i) * sol.u(i) * sol.u(i);
                    jac(m + r, m + c) = q_calc(i) / sol.u(i) - b(i, i) * sol.u(i);
                } else {
                    const double th = sol.angle(i) - sol.angle(k);
                    const double gc = g(i, k) * std::cos(th) + b(i, k) * std::sin(th);
                    const double gs = g(i, k) * std::sin(th) - b(i, k) * std::cos(th);
                    jac(r, c) = sol.u(i) * sol.u(k) * gs;
                    jac(r, m + c) = sol.u(i) * gc;
                    jac(m + r, c) = -sol.u(i) * sol.u(k) * gc;
                    jac(m + r, m + c) = sol.u(i) * gs;
                }
            }
        }
        Eigen::VectorXd rhs(2 * m);
        for (int k = 0; k < m; ++k) {
            rhs(k) = p_spec(pq[k]) - p_calc(pq[k]);
            rhs(m + k) = q_spec(pq[k]) - q_calc(pq[k]);
        }
        const Eigen::VectorXd dx = jac.partialPivLu().solve(rhs);
        if (!dx.allFinite()) {
            numeric_breakdown = true;
            break;
        }
        for (int k = 0; k < m; ++k) {
            sol.angle(pq[k]) += dx(k);
            sol.u(pq[k]) += dx(m + k);
            if (sol.u(pq[k]) < 1e-4) {
                numeric_breakdown = true;
            }
        }
        ++sol.iterations;
        if (numeric_breakdown) break;
    }

    if (numeric_breakdown) {
        sol.converged = false;
        // Leave a defined (if meaningless) state for callers that inspect it.
        for (int i = 0; i < n; ++i) {
            if (!std::isfinite(sol.u(i)) || sol.u(i) < 1e-4) sol.u(i) = 1e-4;
            if (!std::isfinite(sol.angle(i))) sol.angle(i) = 0.0;
        }
        recompute();
    }

    // Branch flows from the final voltages.
    Eigen::VectorXcd v(n);
    for (int i = 0; i < n; ++i) v(i) = std::polar(sol.u(i), sol.angle(i));
    double loss_pu = 0.0;
    auto branch_flow = [&](const Branch& br, double& out_mva) {
        const std::complex<double> adm = 1.0 / std::complex<double>(br.r_pu, br.x_pu);
        const std::complex<double> i_ft = adm * (v(br.from) - v(br.to));
        const std::complex<double> s_f = v(br.from) * std::conj(i_ft);
        const std::complex<double> s_t = v(br.to) * std::conj(-i_ft);
        out_mva = std::max(std::abs(s_f), std::abs(s_t)) * kBaseMva;
        loss_pu += (s_f + s_t).real();
    };
    sol.s_line_mva.resize(static_cast<Eigen::Index>(grid.lines.size()));
    for (std::size_t i = 0; i < grid.lines.size(); ++i) {
        branch_flow(grid.lines[i], sol.s_line_mva(static_cast<Eigen::Index>(i)));
    }
    sol.s_trafo_mva.resize(static_cast<Eigen::Index>(grid.trafos.size()));
    for (std::size_t i = 0; i < grid.trafos.size(); ++i) {
        branch_flow(grid.trafos[i], sol.s_trafo_mva(static_cast<Eigen::Index>(i)));
    }
    sol.p_loss_mw = loss_pu * kBaseMva;

    // Slack power = balancing injection beyond the scheduled gens/loads at
    // the slack bus.
    double scheduled = 0.0;
    for (std::size_t i = 0; i < grid.gens.size(); ++i) {
        if (grid.gens[i].bus == grid.slack) scheduled += gen_setpoints_mw(static_cast<Eigen::Index>(i));
    }
    for (std::size_t i = 0; i < grid.loads.size(); ++i) {
        if (grid.loads[i].bus == grid.slack) {
            scheduled -= grid.loads[i].p_mw * load_scale(static_cast<Eigen::Index>(i));
        }
    }
    sol.p_slack_mw = p_calc(grid.slack) * kBaseMva - scheduled;
    return sol;
}

PenaltyBreakdown PenaltyBreakdown::divergence() {
    PenaltyBreakdown p;
    p.voltage_penalty = 10.0;
    p.line_penalty = 10.0;
    p.trafo_penalty = 10.0;
    p.total = 30.0;
    return p;
}

PenaltyBreakdown penalties(const PowerFlowSolution& solution, const Grid& grid) {
    PenaltyBreakdown out;
    for (std::size_t i = 0; i < grid.buses.size(); ++i) {
        const double u = solution.u(static_cast<Eigen::Index>(i));
        out.voltage_penalty +=
            std::max({u - grid.buses[i].u_max, grid.buses[i].u_min - u, 0.0});
    }
    for (std::size_t i = 0; i < grid.lines.size(); ++i) {
        const double loading = solution.s_line_mva(static_cast<Eigen::Index>(i)) /
                               grid.lines[i].s_max_mva;
        out.line_penalty += std::max(loading - 1.0, 0.0);
    }
    for (std::size_t i = 0; i < grid.trafos.size(); ++i) {
        const double loading = solution.s_trafo_mva(static_cast<Eigen::Index>(i)) /
                               grid.trafos[i].s_max_mva;
        out.trafo_penalty += std::max(loading - 1.0, 0.0);
    }
    out.total = out.voltage_penalty + out.line_penalty + out.trafo_penalty;
    return out;
}

}  // namespace bidsim
