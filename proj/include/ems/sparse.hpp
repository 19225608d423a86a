#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ems/errors.hpp"

namespace ems::sparse {

struct Triplet {
    int row = 0;
    int col = 0;
    double value = 0.0;
};

enum class Symmetry { PatternSymmetric, General };

// A real n-by-n system in coordinate form. Duplicate (row, col) pairs are
// rejected by validate(); symmetry refers to the nonzero pattern only.
struct SparseSystem {
    int n = 0;
    std::vector<Triplet> entries;
    Symmetry symmetry = Symmetry::PatternSymmetric;

    void validate() const;  // throws ModelError on duplicates / bad indices
    double max_abs() const;
};

// Fill-reducing permutation by classical minimum degree on the pattern of
// A (symmetrized as A + A^T for general systems). Ties break toward the
// smallest original index, so the result is deterministic.
std::vector<int> order(const SparseSystem& sys);

std::vector<int> identity_order(int n);

// Ordering, fill pattern, elimination tree and level schedule of the
// permuted matrix. Immutable once built; shared by every refactorization
// that keeps the same pattern.
struct SymbolicStructure {
    int n = 0;
    std::vector<int> perm;      // original index -> ordered position
    std::vector<int> inv_perm;  // ordered position -> original index

    // Combined L+U fill pattern, compressed by column of the permuted
    // matrix. Rows are sorted ascending; diag_ptr[j] locates row j.
    std::vector<int> col_ptr;
    std::vector<int> row_idx;
    std::vector<int> diag_ptr;

    std::vector<int> parent;  // elimination tree, -1 at roots
    std::vector<int> level;   // leaves at 0; parent > max(children)
    std::vector<std::vector<int>> level_sets;

    std::int64_t input_nonzeros = 0;  // symmetrized off-diagonal + diagonal count
    std::int64_t fill_count = 0;      // entries created beyond the input pattern

    std::int64_t pattern_size() const { return static_cast<std::int64_t>(row_idx.size()); }
    int num_levels() const { return static_cast<int>(level_sets.size()); }
};

SymbolicStructure symbolic_analyze(const SparseSystem& sys, const std::vector<int>& perm);

// L and U values laid out on the symbolic fill pattern (L has an implied
// unit diagonal). Refactorizing with new values on the same pattern reuses
// the structure unchanged.
struct NumericFactors {
    std::shared_ptr<const SymbolicStructure> sym;
    std::vector<double> values;  // aligned with sym->row_idx
    double input_max_abs = 0.0;

    int n() const { return sym ? sym->n : 0; }
};

struct FactorizeOptions {
    int jobs = 1;  // vertices within one elimination-tree level may run concurrently
    double pivot_rel_tol = 1e-12;
};

// Numeric LU on a fixed symbolic structure. The system's pattern must be
// contained in the fill pattern (a contingency that zeroes entries of the
// base pattern trivially satisfies this). No numeric pivoting: a pivot
// below pivot_rel_tol * max|A| raises SingularMatrixError naming the
// vertex in original indices. Levels are processed as barriers; the result
// is bit-identical for any job count.
NumericFactors factorize(const SparseSystem& sys,
                         std::shared_ptr<const SymbolicStructure> sym,
                         const FactorizeOptions& opts = {});

// Convenience: order + symbolic_analyze + factorize.
NumericFactors factorize_fresh(const SparseSystem& sys, const FactorizeOptions& opts = {});

// Forward/backward substitution through the permutation. b.size() must be n.
std::vector<double> solve(const NumericFactors& fac, const std::vector<double>& b);

// In-place variant used on hot paths.
void solve_in_place(const NumericFactors& fac, std::vector<double>& b);

struct PcgResult {
    std::vector<double> x;
    int iterations = 0;
    bool converged = false;
    double relative_residual = 0.0;
};

// Conjugate gradient on a symmetric positive definite system, optionally
// preconditioned by LU factors of a nearby matrix (pass nullptr to run
// plain CG). Convergence is ||b - Ax||_2 <= tol * ||b||_2; hitting
// max_iter reports converged = false with the final residual.
PcgResult pcg_solve(const SparseSystem& sys, const std::vector<double>& b,
                    const NumericFactors* precond, double tol, int max_iter);

// Row-compressed view used for repeated mat-vec products.
struct CsrMatrix {
    int n = 0;
    std::vector<int> row_ptr;
    std::vector<int> col_idx;
    std::vector<double> values;

    static CsrMatrix from(const SparseSystem& sys);
    void apply(const std::vector<double>& x, std::vector<double>& y) const;
};

PcgResult pcg_solve(const CsrMatrix& a, const std::vector<double>& b,
                    const NumericFactors* precond, double tol, int max_iter);

// Coordinate text exchange ("n" header, then one "row col value" line per
// entry, 1-based) for cross-checks against external tooling.
std::string write_coord(const SparseSystem& sys);
SparseSystem read_coord(const std::string& text);

}  // namespace ems::sparse
