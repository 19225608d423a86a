#include "ems/contingency.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "ems/ntp.hpp"
#include "ems/parallel.hpp"
#include "ems/timing.hpp"

namespace ems::ca {

const char* to_string(Screening s) {
    switch (s) {
        case Screening::Runnable: return "runnable";
        case Screening::Islanding: return "islanding";
        case Screening::EndPointIsolation: return "end-point-isolation";
    }
    return "?";
}

const char* to_string(Scheme s) {
    return s == Scheme::Fdpf ? "fdpf" : "pcg";
}

BaseCase prepare_base(const model::BusBranchGraph& g, const pf::FdpfOptions& opts) {
    BaseCase base;
    base.graph = &g;
    base.sys = pf::build_decoupled(g);
    pf::ensure_factors(base.sys, opts.jobs);
    base.base_result = pf::fdpf_solve(base.sys, g, std::nullopt, opts);
    if (!base.base_result.converged)
        throw ModelError("base-case power flow did not converge; contingency analysis aborted");
    base.state = base.base_result.state;
    base.branch_p_from.assign(g.branches.size(), 0.0);
    for (std::size_t bi = 0; bi < g.branches.size(); ++bi) {
        const auto& br = g.branches[bi];
        if (!br.in_service) continue;
        int f = g.bus_index(br.from), t = g.bus_index(br.to);
        if (!g.buses[f].energized) continue;
        base.branch_p_from[bi] = pf::branch_flow(br, base.state, f, t).p_from;
    }
    return base;
}

std::vector<ContingencyCase> enumerate_cases(const model::BusBranchGraph& g,
                                             bool include_generators) {
    std::vector<ContingencyCase> cases;
    for (const auto& br : g.branches) {
        if (!br.in_service) continue;
        int f = g.bus_index(br.from);
        if (!g.buses[f].energized) continue;
        ContingencyCase c;
        c.kind = CaseKind::BranchOutage;
        c.element_id = br.id;
        cases.push_back(c);
    }
    if (include_generators) {
        // One case per generator unit on an energized non-slack bus; units
        // on the island slack are excluded (no reference redistribution).
        for (const auto& bus : g.buses) {
            if (!bus.energized || bus.type == model::BusType::Slack) continue;
            for (const auto& u : bus.gen_units) {
                ContingencyCase c;
                c.kind = CaseKind::GeneratorOutage;
                c.element_id = u.device;
                cases.push_back(c);
            }
        }
    }
    std::sort(cases.begin(), cases.end(), [](const ContingencyCase& a, const ContingencyCase& b) {
        if (a.kind != b.kind) return a.kind < b.kind;
        return a.element_id < b.element_id;
    });
    for (std::size_t i = 0; i < cases.size(); ++i) cases[i].case_id = static_cast<int>(i) + 1;
    return cases;
}

Screening screen_branch(const model::BusBranchGraph& g, int branch_id) {
    const int target = g.branch_index(branch_id);
    const auto& br = g.branches[target];
    const int f = g.bus_index(br.from);
    const int t = g.bus_index(br.to);

    // Connectivity without the branch.
    std::vector<int> parent(g.buses.size());
    for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = static_cast<int>(i);
    std::function<int(int)> find = [&](int v) {
        while (parent[v] != v) {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        return v;
    };
    for (std::size_t bi = 0; bi < g.branches.size(); ++bi) {
        if (static_cast<int>(bi) == target || !g.branches[bi].in_service) continue;
        int a = find(g.bus_index(g.branches[bi].from));
        int b = find(g.bus_index(g.branches[bi].to));
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
    if (find(f) == find(t)) return Screening::Runnable;

    // The island split in two; check both sides for a slack candidate.
    bool f_side_ok = false, t_side_ok = false;
    const int rf = find(f), rt = find(t);
    for (std::size_t i = 0; i < g.buses.size(); ++i) {
        if (!g.buses[i].slack_candidate) continue;
        const int r = find(static_cast<int>(i));
        if (r == rf) f_side_ok = true;
        if (r == rt) t_side_ok = true;
    }
    return (f_side_ok && t_side_ok) ? Screening::Islanding : Screening::EndPointIsolation;
}

namespace {

// Case matrices: base values with the outaged branch's contributions
// removed; the pattern (and thus the symbolic structure) is untouched.
pf::DecoupledSystem evolve_case_system(const BaseCase& base, int branch_pos, int jobs) {
    pf::DecoupledSystem cs;
    cs.bp_row = base.sys.bp_row;
    cs.bpp_row = base.sys.bpp_row;
    cs.bp_bus = base.sys.bp_bus;
    cs.bpp_bus = base.sys.bpp_bus;
    cs.bprime = base.sys.bprime;
    cs.bdbl = base.sys.bdbl;
    for (const auto& d : base.sys.branch_bp[branch_pos])
        cs.bprime.entries[d.entry].value -= d.value;
    for (const auto& d : base.sys.branch_bpp[branch_pos])
        cs.bdbl.entries[d.entry].value -= d.value;

    cs.sym_p = base.sys.sym_p;
    cs.sym_pp = base.sys.sym_pp;
    Stopwatch sw;
    if (cs.bprime.n > 0)
        cs.fac_p = std::make_shared<sparse::NumericFactors>(
            sparse::factorize(cs.bprime, cs.sym_p, {.jobs = jobs}));
    if (cs.bdbl.n > 0)
        cs.fac_pp = std::make_shared<sparse::NumericFactors>(
            sparse::factorize(cs.bdbl, cs.sym_pp, {.jobs = jobs}));
    cs.factor_ms = sw.ms();
    return cs;
}

void collect_violations(const model::BusBranchGraph& g, const StateVector& x, int skip_branch,
                        const VoltageBand& band, CaseResult& out) {
    for (std::size_t i = 0; i < g.buses.size(); ++i) {
        const auto& bus = g.buses[i];
        if (!bus.energized) continue;
        if (x.v[i] < band.low)
            out.violations.push_back({Violation::Kind::VoltageLow, bus.id, x.v[i], band.low});
        else if (x.v[i] > band.high)
            out.violations.push_back({Violation::Kind::VoltageHigh, bus.id, x.v[i], band.high});
    }
    for (std::size_t bi = 0; bi < g.branches.size(); ++bi) {
        if (static_cast<int>(bi) == skip_branch) continue;
        const auto& br = g.branches[bi];
        if (!br.in_service || br.rate <= 0.0) continue;
        int f = g.bus_index(br.from), t = g.bus_index(br.to);
        if (!g.buses[f].energized || !g.buses[t].energized) continue;
        const auto fl = pf::branch_flow(br, x, f, t);
        const double loading = std::max(fl.mva_from, fl.mva_to);
        if (loading > br.rate)
            out.violations.push_back(
                {Violation::Kind::BranchOverload, br.id, loading, br.rate});
    }
}

CaseResult run_branch_case(const ContingencyCase& c, const BaseCase& base, const RunOptions& opts,
                           bool use_pcg) {
    Stopwatch sw;
    CaseResult res;
    res.case_id = c.case_id;
    res.kind = c.kind;
    res.element_id = c.element_id;

    const model::BusBranchGraph& g = *base.graph;
    const int branch_pos = g.branch_index(c.element_id);

    try {
        pf::DecoupledSystem cs = evolve_case_system(base, branch_pos, 1);
        res.solved = true;

        pf::HalfSolveHooks hooks;
        int pcg_total = 0;
        int pcg_max = 0;
        bool pcg_failed = false;
        sparse::CsrMatrix csr_p, csr_pp;
        if (use_pcg) {
            csr_p = sparse::CsrMatrix::from(cs.bprime);
            if (cs.bdbl.n > 0) csr_pp = sparse::CsrMatrix::from(cs.bdbl);
            hooks.solver = [&](bool p_half, const std::vector<double>& rhs) {
                const auto& m = p_half ? csr_p : csr_pp;
                const auto* pre = p_half ? base.sys.fac_p.get() : base.sys.fac_pp.get();
                auto r = sparse::pcg_solve(m, rhs, pre, opts.pcg_tol, opts.pcg_max_iter);
                pcg_failed |= !r.converged;
                pcg_total += r.iterations;
                pcg_max = std::max(pcg_max, r.iterations);
                return r.x;
            };
        }

        auto pfres = pf::fdpf_solve(cs, g, base.state, opts.fdpf, branch_pos,
                                    use_pcg ? &hooks : nullptr);
        res.converged = pfres.converged && !pcg_failed;
        res.half_iterations = pfres.p_half_iterations + pfres.q_half_iterations;
        res.pcg_iterations = pcg_total;
        res.max_pcg_per_solve = pcg_max;
        if (res.converged) {
            collect_violations(g, pfres.state, branch_pos, opts.band, res);
        } else {
            res.note = pcg_failed ? "alert: pcg did not converge" : "alert: case did not converge";
        }
        if (opts.keep_states || !res.converged) res.state = std::move(pfres.state);
    } catch (const Error& e) {
        res.solved = false;
        res.converged = false;
        res.note = std::string("setup/solve failure: ") + e.what();
    }
    res.wall_ms = sw.ms();
    return res;
}

// Generator outage: the unit's injection leaves the schedule (the slack
// absorbs the imbalance); a bus left without units becomes PQ, which grows
// B'', so that half-matrix is rebuilt while the untouched B' factors are
// shared from the base.
model::BusBranchGraph generator_outage_graph(const model::BusBranchGraph& g, int gen_device) {
    model::BusBranchGraph gc = g;
    bool found = false;
    for (auto& bus : gc.buses) {
        for (std::size_t u = 0; u < bus.gen_units.size(); ++u) {
            if (bus.gen_units[u].device != gen_device) continue;
            const auto unit = bus.gen_units[u];
            bus.p_inj -= unit.p;
            bus.q_inj -= unit.q;
            bus.gen_units.erase(bus.gen_units.begin() + static_cast<long>(u));
            bus.has_generator = !bus.gen_units.empty();
            bus.slack_candidate = false;
            bus.v_set = 0.0;
            bool vset_from_slack = false;
            for (std::size_t k = 0; k < bus.gen_units.size(); ++k) {
                const auto& rem = bus.gen_units[k];
                if (rem.slack) bus.slack_candidate = true;
                if (k == 0 || (rem.slack && !vset_from_slack)) {
                    bus.v_set = rem.v_set;
                    vset_from_slack = rem.slack;
                }
            }
            found = true;
            break;
        }
        if (found) break;
    }
    if (!found) throw ModelError("generator device " + std::to_string(gen_device) + " not found");
    gc.rebuild_adjacency();
    ntp::detect_islands(gc);
    return gc;
}

CaseResult run_generator_case(const ContingencyCase& c, const BaseCase& base,
                              const RunOptions& opts, int* symbolic_count) {
    Stopwatch sw;
    CaseResult res;
    res.case_id = c.case_id;
    res.kind = c.kind;
    res.element_id = c.element_id;
    try {
        model::BusBranchGraph gc = generator_outage_graph(*base.graph, c.element_id);
        pf::DecoupledSystem cs = pf::build_decoupled(gc);
        if (opts.reuse && cs.bprime.n == base.sys.bprime.n) {
            cs.sym_p = base.sys.sym_p;  // B' identical: rows and values
            cs.fac_p = base.sys.fac_p;
        }
        pf::ensure_factors(cs, 1);
        if (symbolic_count) ++*symbolic_count;  // B'' pattern changed
        res.solved = true;

        auto pfres = pf::fdpf_solve(cs, gc, opts.reuse ? std::optional(base.state) : std::nullopt,
                                    opts.fdpf);
        res.converged = pfres.converged;
        res.half_iterations = pfres.p_half_iterations + pfres.q_half_iterations;
        if (pfres.converged)
            collect_violations(gc, pfres.state, -1, opts.band, res);
        else
            res.note = "alert: case did not converge";
        if (opts.keep_states || !pfres.converged) res.state = std::move(pfres.state);
    } catch (const Error& e) {
        res.solved = false;
        res.note = std::string("setup/solve failure: ") + e.what();
    }
    res.wall_ms = sw.ms();
    return res;
}

// From-scratch path: structural removal, fresh ordering/symbolic/numeric,
// flat start. Used when reuse is disabled and by the oracle tests.
CaseResult run_branch_case_scratch(const ContingencyCase& c, const model::BusBranchGraph& g,
                                   const RunOptions& opts, int* symbolic_count) {
    Stopwatch sw;
    CaseResult res;
    res.case_id = c.case_id;
    res.kind = c.kind;
    res.element_id = c.element_id;
    try {
        model::BusBranchGraph gc = g;
        const int pos = gc.branch_index(c.element_id);
        gc.branches[pos].in_service = false;
        gc.rebuild_adjacency();
        ntp::detect_islands(gc);

        pf::DecoupledSystem cs = pf::build_decoupled(gc);
        pf::ensure_factors(cs, 1);
        if (symbolic_count) ++*symbolic_count;
        res.solved = true;

        auto pfres = pf::fdpf_solve(cs, gc, std::nullopt, opts.fdpf);
        res.converged = pfres.converged;
        res.half_iterations = pfres.p_half_iterations + pfres.q_half_iterations;
        if (pfres.converged)
            collect_violations(gc, pfres.state, -1, opts.band, res);
        else
            res.note = "alert: case did not converge";
        if (opts.keep_states || !pfres.converged) res.state = std::move(pfres.state);
    } catch (const Error& e) {
        res.solved = false;
        res.note = std::string("setup/solve failure: ") + e.what();
    }
    res.wall_ms = sw.ms();
    return res;
}

}  // namespace

CaseResult run_case_fdpf(const ContingencyCase& c, const BaseCase& base, const RunOptions& opts) {
    return run_branch_case(c, base, opts, false);
}

CaseResult run_case_pcg(const ContingencyCase& c, const BaseCase& base, const RunOptions& opts) {
    return run_branch_case(c, base, opts, true);
}

ContingencyReport run_all(const model::BusBranchGraph& g, const BaseCase& base,
                          const RunOptions& opts) {
    Stopwatch total;
    ContingencyReport rep;
    rep.scheme = opts.scheme;
    rep.reuse = opts.reuse;
    rep.cases = enumerate_cases(g, opts.include_generators);
    rep.cases_enumerated = static_cast<int>(rep.cases.size());

    for (auto& c : rep.cases)
        if (c.kind == CaseKind::BranchOutage) c.screening = screen_branch(g, c.element_id);

    std::vector<const ContingencyCase*> runnable;
    for (const auto& c : rep.cases)
        if (c.screening == Screening::Runnable) runnable.push_back(&c);
    rep.cases_screened = rep.cases_enumerated - static_cast<int>(runnable.size());
    rep.cases_run = static_cast<int>(runnable.size());

    rep.results.resize(runnable.size());
    std::vector<int> symbolic_counts(runnable.size(), 0);
    parallel_for(runnable.size(), opts.jobs, [&](std::size_t i) {
        const ContingencyCase& c = *runnable[i];
        if (c.kind == CaseKind::GeneratorOutage) {
            rep.results[i] = run_generator_case(c, base, opts, &symbolic_counts[i]);
        } else if (opts.reuse) {
            rep.results[i] = opts.scheme == Scheme::Pcg ? run_case_pcg(c, base, opts)
                                                        : run_case_fdpf(c, base, opts);
        } else {
            rep.results[i] = run_branch_case_scratch(c, g, opts, &symbolic_counts[i]);
        }
    });

    rep.symbolic_invocations = base.symbolic_invocations;
    for (int s : symbolic_counts) rep.symbolic_invocations += s;
    for (const auto& r : rep.results)
        if (r.solved && !r.converged) ++rep.not_converged;
    rep.total_wall_ms = total.ms();
    return rep;
}

}  // namespace ems::ca
