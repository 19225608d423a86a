#include "ems/powerflow.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ems/timing.hpp"

namespace ems::pf {

namespace {

constexpr double kExtremeQ = 5.0;  // pu; PV reactive output beyond this is flagged

struct MatrixBuilder {
    std::map<std::pair<int, int>, int> slot;  // (row, col) -> entry index
    sparse::SparseSystem sys;

    int add(int r, int c, double v) {
        auto [it, inserted] = slot.try_emplace({r, c}, static_cast<int>(sys.entries.size()));
        if (inserted)
            sys.entries.push_back({r, c, v});
        else
            sys.entries[it->second].value += v;
        return it->second;
    }
};

}  // namespace

DecoupledSystem build_decoupled(const model::BusBranchGraph& g) {
    Stopwatch sw;
    DecoupledSystem sys;
    const int nbus = static_cast<int>(g.buses.size());
    sys.bp_row.assign(nbus, -1);
    sys.bpp_row.assign(nbus, -1);

    bool any_energized = false;
    for (int i = 0; i < nbus; ++i) {
        const auto& bus = g.buses[i];
        if (!bus.energized) continue;
        any_energized = true;
        if (bus.type != model::BusType::Slack) {
            sys.bp_row[i] = static_cast<int>(sys.bp_bus.size());
            sys.bp_bus.push_back(i);
        }
        if (bus.type == model::BusType::PQ) {
            sys.bpp_row[i] = static_cast<int>(sys.bpp_bus.size());
            sys.bpp_bus.push_back(i);
        }
    }
    if (!any_energized)
        throw ModelError("power flow requires at least one energized island with a slack");

    MatrixBuilder bp, bpp;
    bp.sys.n = static_cast<int>(sys.bp_bus.size());
    bpp.sys.n = static_cast<int>(sys.bpp_bus.size());
    sys.branch_bp.assign(g.branches.size(), {});
    sys.branch_bpp.assign(g.branches.size(), {});

    for (std::size_t bi = 0; bi < g.branches.size(); ++bi) {
        const auto& br = g.branches[bi];
        if (!br.in_service) continue;
        const int f = g.bus_index(br.from);
        const int t = g.bus_index(br.to);
        if (!g.buses[f].energized || !g.buses[t].energized) continue;

        // B': series susceptance with resistance, charging and taps
        // dropped.
        const double w = 1.0 / br.x;
        const int rf = sys.bp_row[f], rt = sys.bp_row[t];
        auto track_bp = [&](int entry, double v) {
            sys.branch_bp[bi].push_back({entry, v});
        };
        if (rf >= 0) track_bp(bp.add(rf, rf, w), w);
        if (rt >= 0) track_bp(bp.add(rt, rt, w), w);
        if (rf >= 0 && rt >= 0) {
            track_bp(bp.add(rf, rt, -w), -w);
            track_bp(bp.add(rt, rf, -w), -w);
        }

        // B'': negated imaginary part of the full pi-model admittance.
        const auto adm = model::branch_admittance(br);
        const int pf_ = sys.bpp_row[f], pt = sys.bpp_row[t];
        auto track_bpp = [&](int entry, double v) {
            sys.branch_bpp[bi].push_back({entry, v});
        };
        if (pf_ >= 0) track_bpp(bpp.add(pf_, pf_, -adm.y_ff.imag()), -adm.y_ff.imag());
        if (pt >= 0) track_bpp(bpp.add(pt, pt, -adm.y_tt.imag()), -adm.y_tt.imag());
        if (pf_ >= 0 && pt >= 0) {
            track_bpp(bpp.add(pf_, pt, -adm.y_ft.imag()), -adm.y_ft.imag());
            track_bpp(bpp.add(pt, pf_, -adm.y_tf.imag()), -adm.y_tf.imag());
        }
    }
    // Bus shunts enter B'' diagonals only.
    for (int i = 0; i < nbus; ++i) {
        if (sys.bpp_row[i] >= 0 && g.buses[i].b_shunt != 0.0)
            bpp.add(sys.bpp_row[i], sys.bpp_row[i], -g.buses[i].b_shunt);
    }

    sys.bprime = std::move(bp.sys);
    sys.bdbl = std::move(bpp.sys);
    sys.build_ms = sw.ms();
    return sys;
}

void ensure_factors(DecoupledSystem& sys, int jobs) {
    auto run = [&](sparse::SparseSystem& m, std::shared_ptr<const sparse::SymbolicStructure>& sym,
                   std::shared_ptr<const sparse::NumericFactors>& fac) {
        if (m.n == 0 || fac) return;
        if (!sym) {
            Stopwatch s2;
            auto perm = sparse::order(m);
            sym = std::make_shared<sparse::SymbolicStructure>(sparse::symbolic_analyze(m, perm));
            sys.symbolic_ms += s2.ms();
        }
        Stopwatch s3;
        fac = std::make_shared<sparse::NumericFactors>(sparse::factorize(m, sym, {.jobs = jobs}));
        sys.factor_ms += s3.ms();
    };
    run(sys.bprime, sys.sym_p, sys.fac_p);
    run(sys.bdbl, sys.sym_pp, sys.fac_pp);
}

BranchFlow branch_flow(const model::Branch& br, const StateVector& x, int f, int t) {
    const auto adm = model::branch_admittance(br);
    const double th = x.theta[f] - x.theta[t];
    const double c = std::cos(th), s = std::sin(th);
    const double vf = x.v[f], vt = x.v[t];
    BranchFlow fl;
    fl.p_from = vf * vf * adm.y_ff.real() + vf * vt * (adm.y_ft.real() * c + adm.y_ft.imag() * s);
    fl.q_from = -vf * vf * adm.y_ff.imag() + vf * vt * (adm.y_ft.real() * s - adm.y_ft.imag() * c);
    // theta_tf = -th: cos flips nothing, sin flips sign.
    fl.p_to = vt * vt * adm.y_tt.real() + vt * vf * (adm.y_tf.real() * c - adm.y_tf.imag() * s);
    fl.q_to = -vt * vt * adm.y_tt.imag() + vt * vf * (-adm.y_tf.real() * s - adm.y_tf.imag() * c);
    fl.mva_from = std::hypot(fl.p_from, fl.q_from);
    fl.mva_to = std::hypot(fl.p_to, fl.q_to);
    return fl;
}

Mismatch compute_mismatch(const model::BusBranchGraph& g, const StateVector& x, int skip_branch) {
    if (!x.compatible_with(g.buses.size())) throw ModelError("state does not match graph");
    const int nbus = static_cast<int>(g.buses.size());
    std::vector<double> p_calc(nbus, 0.0), q_calc(nbus, 0.0);

    for (std::size_t bi = 0; bi < g.branches.size(); ++bi) {
        if (static_cast<int>(bi) == skip_branch) continue;
        const auto& br = g.branches[bi];
        if (!br.in_service) continue;
        const int f = g.bus_index(br.from);
        const int t = g.bus_index(br.to);
        if (!g.buses[f].energized || !g.buses[t].energized) continue;
        const BranchFlow fl = branch_flow(br, x, f, t);
        p_calc[f] += fl.p_from;
        q_calc[f] += fl.q_from;
        p_calc[t] += fl.p_to;
        q_calc[t] += fl.q_to;
    }
    for (int i = 0; i < nbus; ++i)
        if (g.buses[i].energized) q_calc[i] -= g.buses[i].b_shunt * x.v[i] * x.v[i];

    Mismatch mm;
    mm.dp.assign(nbus, 0.0);
    mm.dq.assign(nbus, 0.0);
    for (int i = 0; i < nbus; ++i) {
        const auto& bus = g.buses[i];
        if (!bus.energized) continue;
        mm.dp[i] = bus.p_inj - p_calc[i];
        mm.dq[i] = bus.q_inj - q_calc[i];
        if (bus.type != model::BusType::Slack)
            mm.max_p = std::max(mm.max_p, std::abs(mm.dp[i]) / x.v[i]);
        if (bus.type == model::BusType::PQ)
            mm.max_q = std::max(mm.max_q, std::abs(mm.dq[i]) / x.v[i]);
    }
    return mm;
}

PowerFlowResult fdpf_solve(DecoupledSystem& sys, const model::BusBranchGraph& g,
                           const std::optional<StateVector>& warm, const FdpfOptions& opts,
                           int skip_branch, const HalfSolveHooks* hooks) {
    PowerFlowResult res;

    Stopwatch init_sw;
    if (!sys.factored()) ensure_factors(sys, opts.jobs);
    res.symbolic_ms = sys.symbolic_ms;
    res.factor_ms = sys.factor_ms;

    StateVector x;
    if (warm) {
        if (!warm->compatible_with(g.buses.size()))
            throw ModelError("warm-start state does not match graph");
        x = *warm;
    } else {
        x.v.resize(g.buses.size());
        x.theta.assign(g.buses.size(), 0.0);
        for (std::size_t i = 0; i < g.buses.size(); ++i) {
            const auto& bus = g.buses[i];
            x.v[i] = (bus.type != model::BusType::PQ && bus.v_set > 0) ? bus.v_set : 1.0;
        }
    }
    // PV magnitudes are held at their setpoints in either start mode.
    for (std::size_t i = 0; i < g.buses.size(); ++i)
        if (g.buses[i].energized && g.buses[i].type == model::BusType::PV &&
            g.buses[i].v_set > 0)
            x.v[i] = g.buses[i].v_set;
    res.init_ms = sys.build_ms + init_sw.ms();

    Stopwatch solve_sw;
    std::vector<double> rhs_p(sys.bprime.n), rhs_q(sys.bdbl.n);
    bool next_is_p = true;
    int halves = 0;
    for (;;) {
        const Mismatch mm = compute_mismatch(g, x, skip_branch);
        res.mismatch_history.push_back(std::max(mm.max_p, mm.max_q));
        if (mm.max_p < opts.tol && mm.max_q < opts.tol) {
            res.converged = true;
            break;
        }
        if (halves >= opts.max_half_iterations) break;

        if (next_is_p) {
            if (sys.bprime.n > 0 && mm.max_p >= opts.tol) {
                for (int r = 0; r < sys.bprime.n; ++r) {
                    const int bus = sys.bp_bus[r];
                    rhs_p[r] = mm.dp[bus] / x.v[bus];
                }
                std::vector<double> dth = hooks && hooks->solver
                                              ? hooks->solver(true, rhs_p)
                                              : sparse::solve(*sys.fac_p, rhs_p);
                for (int r = 0; r < sys.bprime.n; ++r) x.theta[sys.bp_bus[r]] += dth[r];
                ++res.p_half_iterations;
                ++halves;
            }
            next_is_p = false;
        } else {
            if (sys.bdbl.n > 0 && mm.max_q >= opts.tol) {
                for (int r = 0; r < sys.bdbl.n; ++r) {
                    const int bus = sys.bpp_bus[r];
                    rhs_q[r] = mm.dq[bus] / x.v[bus];
                }
                std::vector<double> dv = hooks && hooks->solver
                                             ? hooks->solver(false, rhs_q)
                                             : sparse::solve(*sys.fac_pp, rhs_q);
                for (int r = 0; r < sys.bdbl.n; ++r) x.v[sys.bpp_bus[r]] += dv[r];
                ++res.q_half_iterations;
                ++halves;
            }
            next_is_p = true;
        }
    }
    res.solve_ms = solve_sw.ms();

    // Flag PV buses whose implied reactive output is extreme.
    if (res.converged) {
        const Mismatch mm = compute_mismatch(g, x, skip_branch);
        for (std::size_t i = 0; i < g.buses.size(); ++i) {
            const auto& bus = g.buses[i];
            if (bus.energized && bus.type == model::BusType::PV) {
                const double q_needed = -mm.dq[i] + bus.q_inj;  // computed network Q
                if (std::abs(q_needed) > kExtremeQ)
                    res.extreme_q_buses.push_back(bus.id);
            }
        }
    }
    res.state = std::move(x);
    return res;
}

}  // namespace ems::pf
