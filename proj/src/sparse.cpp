#include "ems/sparse.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <set>
#include <sstream>
#include <string_view>
#include <thread>
#include <tuple>

namespace ems::sparse {

void SparseSystem::validate() const {
    if (n < 1) throw ModelError("sparse system dimension must be >= 1, got " + std::to_string(n));
    std::vector<std::vector<int>> seen(n);
    for (const auto& e : entries) {
        if (e.row < 0 || e.row >= n || e.col < 0 || e.col >= n)
            throw ModelError("entry (" + std::to_string(e.row) + "," + std::to_string(e.col) +
                             ") outside " + std::to_string(n) + "x" + std::to_string(n) + " system");
        seen[e.row].push_back(e.col);
    }
    for (int r = 0; r < n; ++r) {
        auto& cols = seen[r];
        std::sort(cols.begin(), cols.end());
        if (std::adjacent_find(cols.begin(), cols.end()) != cols.end())
            throw ModelError("duplicate entry in row " + std::to_string(r));
    }
}

double SparseSystem::max_abs() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, std::abs(e.value));
    return m;
}

std::vector<int> identity_order(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    return p;
}

namespace {

// Undirected adjacency of the symmetrized off-diagonal pattern.
std::vector<std::set<int>> symmetrized_adjacency(const SparseSystem& sys) {
    std::vector<std::set<int>> adj(sys.n);
    for (const auto& e : sys.entries) {
        if (e.row == e.col) continue;
        adj[e.row].insert(e.col);
        adj[e.col].insert(e.row);
    }
    return adj;
}

}  // namespace

std::vector<int> order(const SparseSystem& sys) {
    auto adj = symmetrized_adjacency(sys);
    const int n = sys.n;
    std::vector<int> perm(n, -1);
    std::vector<bool> eliminated(n, false);

    for (int step = 0; step < n; ++step) {
        // Minimum degree, ties to the smallest original index.
        int best = -1;
        std::size_t best_deg = 0;
        for (int v = 0; v < n; ++v) {
            if (eliminated[v]) continue;
            std::size_t d = adj[v].size();
            if (best < 0 || d < best_deg) {
                best = v;
                best_deg = d;
            }
        }
        perm[best] = step;
        eliminated[best] = true;

        // Eliminate: neighbours become a clique.
        std::vector<int> nbrs(adj[best].begin(), adj[best].end());
        for (int u : nbrs) adj[u].erase(best);
        for (std::size_t i = 0; i < nbrs.size(); ++i)
            for (std::size_t j = i + 1; j < nbrs.size(); ++j) {
                adj[nbrs[i]].insert(nbrs[j]);
                adj[nbrs[j]].insert(nbrs[i]);
            }
        adj[best].clear();
    }
    return perm;
}

SymbolicStructure symbolic_analyze(const SparseSystem& sys, const std::vector<int>& perm) {
    const int n = sys.n;
    if (static_cast<int>(perm.size()) != n) throw ModelError("permutation size mismatch");
    {
        std::vector<bool> hit(n, false);
        for (int p : perm) {
            if (p < 0 || p >= n || hit[p]) throw ModelError("invalid permutation");
            hit[p] = true;
        }
    }

    SymbolicStructure sym;
    sym.n = n;
    sym.perm = perm;
    sym.inv_perm.assign(n, 0);
    for (int i = 0; i < n; ++i) sym.inv_perm[perm[i]] = i;

    // Strict lower-triangle pattern of the permuted, symmetrized matrix:
    // for column j, the rows i > j with a structural entry.
    std::vector<std::vector<int>> lower(n);
    std::int64_t input_offdiag = 0;
    {
        std::set<std::pair<int, int>> dedup;
        for (const auto& e : sys.entries) {
            int r = perm[e.row], c = perm[e.col];
            if (r == c) continue;
            int i = std::max(r, c), j = std::min(r, c);
            if (dedup.insert({i, j}).second) {
                lower[j].push_back(i);
                ++input_offdiag;
            }
        }
        for (auto& col : lower) std::sort(col.begin(), col.end());
    }
    sym.input_nonzeros = 2 * input_offdiag + n;

    // Row structures of L: row i collects every vertex on the elimination
    // tree paths from its structural entries up to i. Parents are
    // discovered on the fly (rows are processed in ascending order, so the
    // first row reaching an orphan vertex is its true parent). The walk
    // follows real parent edges; shortcuts would drop path vertices and
    // leave the fill pattern unclosed.
    sym.parent.assign(n, -1);
    std::vector<int> mark(n, -1);
    // row_cols[i] = column structure of row i of L (strictly below diagonal).
    std::vector<std::vector<int>> row_cols(n);
    // Transposed access: entries of the permuted lower pattern by row.
    std::vector<std::vector<int>> row_of(n);
    for (int j = 0; j < n; ++j)
        for (int i : lower[j]) row_of[i].push_back(j);

    for (int i = 0; i < n; ++i) {
        mark[i] = i;
        for (int k : row_of[i]) {
            int r = k;
            while (mark[r] != i) {
                mark[r] = i;
                row_cols[i].push_back(r);
                if (sym.parent[r] == -1) sym.parent[r] = i;
                r = sym.parent[r];
            }
        }
    }

    // Column counts of the combined L+U pattern. Pattern symmetry gives
    // U(:,j) rows = { k < j : L(j,k) != 0 } = row_cols[j].
    std::vector<int> count(n, 1);  // diagonal
    for (int i = 0; i < n; ++i)
        for (int k : row_cols[i]) {
            ++count[k];  // L(i,k): row i in column k
            ++count[i];  // U(k,i): row k in column i
        }

    sym.col_ptr.assign(n + 1, 0);
    for (int j = 0; j < n; ++j) sym.col_ptr[j + 1] = sym.col_ptr[j] + count[j];
    sym.row_idx.assign(sym.col_ptr[n], 0);
    sym.diag_ptr.assign(n, 0);

    std::vector<int> fill_pos(sym.col_ptr.begin(), sym.col_ptr.end() - 1);
    // U part first (rows ascending, all < j), then the diagonal, then L rows.
    for (int j = 0; j < n; ++j) {
        std::vector<int> urows = row_cols[j];
        std::sort(urows.begin(), urows.end());
        for (int k : urows) sym.row_idx[fill_pos[j]++] = k;
        sym.diag_ptr[j] = fill_pos[j];
        sym.row_idx[fill_pos[j]++] = j;
    }
    // L rows, ascending by construction of the row-subtree walk order? Not
    // guaranteed; gather then sort per column.
    {
        std::vector<std::vector<int>> lrows(n);
        for (int i = 0; i < n; ++i)
            for (int k : row_cols[i]) lrows[k].push_back(i);
        for (int j = 0; j < n; ++j) {
            std::sort(lrows[j].begin(), lrows[j].end());
            for (int i : lrows[j]) sym.row_idx[fill_pos[j]++] = i;
        }
    }

    sym.fill_count = sym.pattern_size() - sym.input_nonzeros;

    // Longest-path level from the leaves; parents always have larger index.
    sym.level.assign(n, 0);
    int max_level = 0;
    for (int v = 0; v < n; ++v) {
        int p = sym.parent[v];
        if (p >= 0) sym.level[p] = std::max(sym.level[p], sym.level[v] + 1);
        max_level = std::max(max_level, sym.level[v]);
    }
    sym.level_sets.assign(max_level + 1, {});
    for (int v = 0; v < n; ++v) sym.level_sets[sym.level[v]].push_back(v);

    return sym;
}

NumericFactors factorize(const SparseSystem& sys, std::shared_ptr<const SymbolicStructure> sym,
                         const FactorizeOptions& opts) {
    if (!sym) throw ModelError("factorize: null symbolic structure");
    const SymbolicStructure& s = *sym;
    if (sys.n != s.n) throw ModelError("factorize: dimension mismatch");

    const int n = s.n;
    NumericFactors fac;
    fac.sym = sym;
    fac.values.assign(s.row_idx.size(), 0.0);
    fac.input_max_abs = sys.max_abs();

    // Position lookup for scattering input values: per ordered column, the
    // pattern slots sorted by row let us binary-search.
    // Build permuted input columns; reject entries outside the fill pattern.
    std::vector<std::vector<std::pair<int, double>>> cols(n);
    for (const auto& e : sys.entries) {
        int r = s.perm[e.row], c = s.perm[e.col];
        cols[c].push_back({r, e.value});
    }
    std::vector<double> a_values(s.row_idx.size(), 0.0);
    for (int j = 0; j < n; ++j) {
        const int b = s.col_ptr[j], e = s.col_ptr[j + 1];
        for (auto& [r, v] : cols[j]) {
            auto it = std::lower_bound(s.row_idx.begin() + b, s.row_idx.begin() + e, r);
            if (it == s.row_idx.begin() + e || *it != r)
                throw ModelError("factorize: entry (" + std::to_string(s.inv_perm[r]) + "," +
                                 std::to_string(s.inv_perm[j]) +
                                 ") outside the symbolic fill pattern");
            a_values[it - s.row_idx.begin()] += v;
        }
    }

    const double pivot_floor = opts.pivot_rel_tol * (fac.input_max_abs > 0 ? fac.input_max_abs : 1.0);

    // Left-looking update of one column; reads only columns in lower levels.
    auto do_column = [&](int j, std::vector<double>& work) {
        const int ub = s.col_ptr[j];
        const int dg = s.diag_ptr[j];
        const int le = s.col_ptr[j + 1];
        for (int p = ub; p < le; ++p) work[s.row_idx[p]] = a_values[p];

        for (int p = ub; p < dg; ++p) {
            const int k = s.row_idx[p];  // U(k, j), k < j, ascending
            const double ukj = work[k];
            if (ukj != 0.0) {
                for (int q = s.diag_ptr[k] + 1; q < s.col_ptr[k + 1]; ++q)
                    work[s.row_idx[q]] -= fac.values[q] * ukj;
            }
            fac.values[p] = ukj;
        }

        const double pivot = work[j];
        if (std::abs(pivot) < pivot_floor)
            throw SingularMatrixError("near-zero pivot at vertex " +
                                          std::to_string(s.inv_perm[j]) + " (|pivot| = " +
                                          std::to_string(std::abs(pivot)) + ")",
                                      s.inv_perm[j]);
        fac.values[dg] = pivot;
        for (int p = dg + 1; p < le; ++p) fac.values[p] = work[s.row_idx[p]] / pivot;
    };

    int jobs = std::max(1, opts.jobs);
    if (jobs == 1) {
        std::vector<double> work(n, 0.0);
        for (const auto& level : s.level_sets)
            for (int j : level) do_column(j, work);
    } else {
        unsigned hw = std::thread::hardware_concurrency();
        int workers = static_cast<int>(std::min<unsigned>(jobs, hw ? hw : 2u));
        // One pass per level; any singular pivot is rethrown after joining.
        for (const auto& level : s.level_sets) {
            std::exception_ptr err;
            std::vector<std::thread> pool;
            std::atomic<std::size_t> next{0};
            std::mutex err_mx;
            int nw = static_cast<int>(std::min<std::size_t>(level.size(), workers));
            for (int w = 0; w < nw; ++w) {
                pool.emplace_back([&] {
                    std::vector<double> work(n, 0.0);
                    for (;;) {
                        std::size_t idx = next.fetch_add(1);
                        if (idx >= level.size()) return;
                        try {
                            do_column(level[idx], work);
                        } catch (...) {
                            std::lock_guard<std::mutex> lk(err_mx);
                            if (!err) err = std::current_exception();
                            return;
                        }
                    }
                });
            }
            for (auto& th : pool) th.join();
            if (err) std::rethrow_exception(err);
        }
    }
    return fac;
}

NumericFactors factorize_fresh(const SparseSystem& sys, const FactorizeOptions& opts) {
    auto perm = order(sys);
    auto sym = std::make_shared<SymbolicStructure>(symbolic_analyze(sys, perm));
    return factorize(sys, sym, opts);
}

void solve_in_place(const NumericFactors& fac, std::vector<double>& b) {
    const SymbolicStructure& s = *fac.sym;
    const int n = s.n;
    if (static_cast<int>(b.size()) != n) throw ModelError("solve: rhs dimension mismatch");

    std::vector<double> y(n);
    for (int i = 0; i < n; ++i) y[s.perm[i]] = b[i];

    // Ly' = Pb, unit diagonal, column-forward.
    for (int j = 0; j < n; ++j) {
        const double yj = y[j];
        if (yj == 0.0) continue;
        for (int p = s.diag_ptr[j] + 1; p < s.col_ptr[j + 1]; ++p)
            y[s.row_idx[p]] -= fac.values[p] * yj;
    }
    // Ux' = y', column-backward.
    for (int j = n - 1; j >= 0; --j) {
        const double xj = y[j] / fac.values[s.diag_ptr[j]];
        y[j] = xj;
        if (xj == 0.0) continue;
        for (int p = s.col_ptr[j]; p < s.diag_ptr[j]; ++p)
            y[s.row_idx[p]] -= fac.values[p] * xj;
    }
    for (int i = 0; i < n; ++i) b[i] = y[s.perm[i]];
}

std::vector<double> solve(const NumericFactors& fac, const std::vector<double>& b) {
    std::vector<double> x = b;
    solve_in_place(fac, x);
    return x;
}

CsrMatrix CsrMatrix::from(const SparseSystem& sys) {
    CsrMatrix m;
    m.n = sys.n;
    m.row_ptr.assign(sys.n + 1, 0);
    for (const auto& e : sys.entries) ++m.row_ptr[e.row + 1];
    for (int i = 0; i < sys.n; ++i) m.row_ptr[i + 1] += m.row_ptr[i];
    m.col_idx.assign(sys.entries.size(), 0);
    m.values.assign(sys.entries.size(), 0.0);
    std::vector<int> pos(m.row_ptr.begin(), m.row_ptr.end() - 1);
    for (const auto& e : sys.entries) {
        m.col_idx[pos[e.row]] = e.col;
        m.values[pos[e.row]] = e.value;
        ++pos[e.row];
    }
    return m;
}

void CsrMatrix::apply(const std::vector<double>& x, std::vector<double>& y) const {
    y.assign(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int p = row_ptr[i]; p < row_ptr[i + 1]; ++p) acc += values[p] * x[col_idx[p]];
        y[i] = acc;
    }
}

PcgResult pcg_solve(const CsrMatrix& a, const std::vector<double>& b,
                    const NumericFactors* precond, double tol, int max_iter) {
    const int n = a.n;
    if (static_cast<int>(b.size()) != n) throw ModelError("pcg_solve: rhs dimension mismatch");

    PcgResult res;
    res.x.assign(n, 0.0);

    auto norm2 = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double t : v) s += t * t;
        return std::sqrt(s);
    };
    const double bnorm = norm2(b);
    if (bnorm == 0.0) {
        res.converged = true;
        return res;
    }

    std::vector<double> r = b;  // x0 = 0
    std::vector<double> z = r;
    if (precond) solve_in_place(*precond, z);
    std::vector<double> p = z;
    std::vector<double> ap(n);
    double rz = 0.0;
    for (int i = 0; i < n; ++i) rz += r[i] * z[i];

    double rnorm = norm2(r);
    while (rnorm > tol * bnorm && res.iterations < max_iter) {
        a.apply(p, ap);
        double pap = 0.0;
        for (int i = 0; i < n; ++i) pap += p[i] * ap[i];
        const double alpha = rz / pap;
        for (int i = 0; i < n; ++i) {
            res.x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        z = r;
        if (precond) solve_in_place(*precond, z);
        double rz_next = 0.0;
        for (int i = 0; i < n; ++i) rz_next += r[i] * z[i];
        const double beta = rz_next / rz;
        rz = rz_next;
        for (int i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
        ++res.iterations;
        rnorm = norm2(r);
    }
    res.relative_residual = rnorm / bnorm;
    res.converged = rnorm <= tol * bnorm;
    return res;
}

PcgResult pcg_solve(const SparseSystem& sys, const std::vector<double>& b,
                    const NumericFactors* precond, double tol, int max_iter) {
    return pcg_solve(CsrMatrix::from(sys), b, precond, tol, max_iter);
}

std::string write_coord(const SparseSystem& sys) {
    std::ostringstream os;
    os << sys.n << "\n";
    auto sorted = sys.entries;
    std::sort(sorted.begin(), sorted.end(), [](const Triplet& a, const Triplet& b) {
        return std::tie(a.row, a.col) < std::tie(b.row, b.col);
    });
    for (const auto& e : sorted) {
        char buf[32];
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, e.value);
        os << (e.row + 1) << " " << (e.col + 1) << " " << std::string_view(buf, ptr - buf) << "\n";
    }
    return os.str();
}

SparseSystem read_coord(const std::string& text) {
    SparseSystem sys;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    bool have_n = false;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        if (!have_n) {
            if (ls >> sys.n) {
                if (sys.n < 1) throw IoError("coordinate input: dimension must be >= 1");
                have_n = true;
            }
            continue;
        }
        int r, c;
        double v;
        if (ls >> r >> c >> v) {
            if (r < 1 || c < 1 || r > sys.n || c > sys.n)
                throw IoError("coordinate input line " + std::to_string(lineno) +
                              ": index out of range");
            sys.entries.push_back({r - 1, c - 1, v});
        } else if (line.find_first_not_of(" \t\r") != std::string::npos) {
            throw IoError("coordinate input line " + std::to_string(lineno) + ": malformed entry");
        }
    }
    if (!have_n) throw IoError("coordinate input: missing dimension header");
    return sys;
}

}  // namespace ems::sparse
