#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "ems/grid_model.hpp"
#include "ems/sparse.hpp"
#include "ems/state.hpp"

namespace ems::pf {

// The two decoupled half-systems (XB scheme): B' couples angle updates of
// every energized non-slack bus and drops resistance, shunts, charging and
// taps; B'' couples voltage updates of energized PQ buses and is the
// negated imaginary part of Y on those rows. Immutable once factorized, so
// contingency fan-out can share one instance across threads.
struct DecoupledSystem {
    std::vector<int> bp_row;   // bus position -> B' row, -1 if absent
    std::vector<int> bpp_row;  // bus position -> B'' row, -1 if absent
    std::vector<int> bp_bus;   // row -> bus position
    std::vector<int> bpp_bus;

    sparse::SparseSystem bprime;  // n = 0 when every bus is slack
    sparse::SparseSystem bdbl;    // n = 0 when no PQ bus exists

    std::shared_ptr<const sparse::SymbolicStructure> sym_p, sym_pp;
    std::shared_ptr<const sparse::NumericFactors> fac_p, fac_pp;

    // Contingency support: per branch position, the entry indices its
    // susceptance landed on, with the contributed value. Zeroing them
    // evolves the base matrices to the post-outage case on an unchanged
    // pattern.
    struct EntryDelta {
        int entry = 0;
        double value = 0.0;
    };
    std::vector<std::vector<EntryDelta>> branch_bp;
    std::vector<std::vector<EntryDelta>> branch_bpp;

    double build_ms = 0.0;
    double symbolic_ms = 0.0;
    double factor_ms = 0.0;

    bool factored() const {
        return (bprime.n == 0 || fac_p != nullptr) && (bdbl.n == 0 || fac_pp != nullptr);
    }
};

DecoupledSystem build_decoupled(const model::BusBranchGraph& g);

// Orders, analyzes and factorizes both half-matrices; repeated calls are
// no-ops. Counts one symbolic analysis per half-matrix actually analyzed.
void ensure_factors(DecoupledSystem& sys, int jobs = 1);

struct FdpfOptions {
    double tol = 1e-8;  // on max |dP|/V, |dQ|/V
    int max_half_iterations = 50;
    int jobs = 1;
};

struct Mismatch {
    std::vector<double> dp, dq;        // scheduled minus calculated, by bus position
    double max_p = 0.0, max_q = 0.0;   // V-normalized, over the tested buses
};

// Full AC mismatch; slack P and PV-bus Q never enter the max. skip_branch
// (a branch position) treats that branch as out of service.
Mismatch compute_mismatch(const model::BusBranchGraph& g, const StateVector& x,
                          int skip_branch = -1);

struct BranchFlow {
    double p_from = 0.0, q_from = 0.0, p_to = 0.0, q_to = 0.0;
    double mva_from = 0.0, mva_to = 0.0;
};
BranchFlow branch_flow(const model::Branch& br, const StateVector& x, int from_pos, int to_pos);

struct PowerFlowResult {
    StateVector state;
    bool converged = false;
    int p_half_iterations = 0;
    int q_half_iterations = 0;
    std::vector<double> mismatch_history;  // max scaled mismatch at every check
    std::vector<int> extreme_q_buses;      // PV buses whose computed Q is extreme

    double init_ms = 0.0;      // B build + start-vector assignment
    double symbolic_ms = 0.0;  // ordering + analysis (0 when reused)
    double factor_ms = 0.0;
    double solve_ms = 0.0;     // substitutions + mismatch evaluation + updates

    double total_stage_ms() const { return init_ms + symbolic_ms + factor_ms + solve_ms; }
};

// Alternating half-iterations B' dθ = ΔP/V, B'' dV = ΔQ/V until the full
// AC mismatch passes opts.tol or the half-iteration cap is hit. A solver
// delegate lets contingency analysis swap direct substitution for PCG.
struct HalfSolveHooks {
    // Returns the update; defaults to direct F/B substitution.
    std::function<std::vector<double>(bool p_half, const std::vector<double>& rhs)> solver;
};

PowerFlowResult fdpf_solve(DecoupledSystem& sys, const model::BusBranchGraph& g,
                           const std::optional<StateVector>& warm = std::nullopt,
                           const FdpfOptions& opts = {}, int skip_branch = -1,
                           const HalfSolveHooks* hooks = nullptr);

}  // namespace ems::pf
