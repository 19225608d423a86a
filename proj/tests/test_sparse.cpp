#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "ems/sparse.hpp"
#include "oracles.hpp"

using namespace ems::sparse;
using oracle::Rng;

namespace {

SparseSystem from_dense(const std::vector<std::vector<double>>& a) {
    SparseSystem sys;
    sys.n = static_cast<int>(a.size());
    for (int i = 0; i < sys.n; ++i)
        for (int j = 0; j < sys.n; ++j)
            if (a[i][j] != 0.0) sys.entries.push_back({i, j, a[i][j]});
    return sys;
}

SparseSystem diagonal(int n) {
    SparseSystem sys;
    sys.n = n;
    for (int i = 0; i < n; ++i) sys.entries.push_back({i, i, 2.0 + i});
    return sys;
}

}  // namespace

TEST_CASE("ordering: diagonal matrix keeps the identity permutation") {
    auto perm = order(diagonal(6));
    for (int i = 0; i < 6; ++i) CHECK(perm[i] == i);
}

TEST_CASE("ordering: star graph eliminates the hub last with zero fill") {
    // Leaves 0..4, hub = vertex 5.
    SparseSystem sys;
    sys.n = 6;
    for (int i = 0; i < 6; ++i) sys.entries.push_back({i, i, 4.0});
    std::vector<std::pair<int, int>> offdiag;
    for (int leaf = 0; leaf < 5; ++leaf) {
        sys.entries.push_back({5, leaf, -1.0});
        sys.entries.push_back({leaf, 5, -1.0});
        offdiag.push_back({5, leaf});
    }
    auto perm = order(sys);
    CHECK(perm[5] == 5);  // hub goes last
    CHECK(oracle::dense_fill_count(6, offdiag, perm) == 0);

    // Exhaustive check: no permutation beats the min-degree fill count.
    std::vector<int> p(6);
    std::iota(p.begin(), p.end(), 0);
    std::int64_t best = 1 << 20;
    do {
        best = std::min(best, oracle::dense_fill_count(6, offdiag, p));
    } while (std::next_permutation(p.begin(), p.end()));
    CHECK(best == 0);
    CHECK(oracle::dense_fill_count(6, offdiag, perm) == best);
}

TEST_CASE("ordering: beats natural order on most random 50x50 systems") {
    int wins = 0;
    const int trials = 40;
    for (int t = 0; t < trials; ++t) {
        Rng rng(1000 + t);
        auto sys = oracle::random_dd_system(50, 0.06, rng);
        std::vector<std::pair<int, int>> offdiag;
        for (const auto& e : sys.entries)
            if (e.row < e.col) offdiag.push_back({e.row, e.col});
        auto md = oracle::dense_fill_count(50, offdiag, order(sys));
        auto natural = oracle::dense_fill_count(50, offdiag, identity_order(50));
        if (md <= natural) ++wins;
    }
    CHECK(wins >= trials * 95 / 100);
}

TEST_CASE("symbolic: tridiagonal in natural order gives a chain with no fill") {
    const int n = 8;
    SparseSystem sys;
    sys.n = n;
    for (int i = 0; i < n; ++i) sys.entries.push_back({i, i, 4.0});
    for (int i = 0; i + 1 < n; ++i) {
        sys.entries.push_back({i, i + 1, -1.0});
        sys.entries.push_back({i + 1, i, -1.0});
    }
    auto sym = symbolic_analyze(sys, identity_order(n));
    CHECK(sym.fill_count == 0);
    CHECK(sym.num_levels() == n);
    for (int i = 0; i + 1 < n; ++i) CHECK(sym.parent[i] == i + 1);
    CHECK(sym.parent[n - 1] == -1);
}

TEST_CASE("symbolic: diagonal matrix is a forest of singletons on one level") {
    auto sys = diagonal(5);
    auto sym = symbolic_analyze(sys, identity_order(5));
    CHECK(sym.num_levels() == 1);
    CHECK(sym.fill_count == 0);
    for (int i = 0; i < 5; ++i) CHECK(sym.parent[i] == -1);
}

TEST_CASE("symbolic: arrowhead ordered hub-first fills in completely") {
    const int n = 7;
    SparseSystem sys;
    sys.n = n;
    std::vector<std::pair<int, int>> offdiag;
    for (int i = 0; i < n; ++i) sys.entries.push_back({i, i, 4.0});
    for (int i = 1; i < n; ++i) {
        sys.entries.push_back({0, i, -1.0});
        sys.entries.push_back({i, 0, -1.0});
        offdiag.push_back({0, i});
    }
    auto sym = symbolic_analyze(sys, identity_order(n));  // hub eliminated first
    CHECK(sym.fill_count == oracle::dense_fill_count(n, offdiag, identity_order(n)));
    CHECK(sym.pattern_size() == static_cast<std::int64_t>(n) * n);  // fully filled
}

TEST_CASE("factorize: identity gives unit factors") {
    SparseSystem sys;
    sys.n = 4;
    for (int i = 0; i < 4; ++i) sys.entries.push_back({i, i, 1.0});
    auto fac = factorize_fresh(sys);
    for (int j = 0; j < 4; ++j) CHECK(fac.values[fac.sym->diag_ptr[j]] == 1.0);
    CHECK(oracle::factor_residual(sys, fac) == 0.0);
}

TEST_CASE("factorize: 2x2 closed form") {
    auto sys = from_dense({{4, 1}, {1, 3}});
    auto sym = std::make_shared<SymbolicStructure>(symbolic_analyze(sys, identity_order(2)));
    auto fac = factorize(sys, sym);
    // L = [[1,0],[0.25,1]], U = [[4,1],[0,2.75]] on the natural order.
    CHECK(fac.values[sym->diag_ptr[0]] == doctest::Approx(4.0).epsilon(1e-14));
    CHECK(fac.values[sym->col_ptr[1]] == doctest::Approx(1.0).epsilon(1e-14));      // U(0,1)
    CHECK(fac.values[sym->diag_ptr[0] + 1] == doctest::Approx(0.25).epsilon(1e-14));  // L(1,0)
    CHECK(fac.values[sym->diag_ptr[1]] == doctest::Approx(2.75).epsilon(1e-14));
}

TEST_CASE("factorize: random 200x200 diagonally dominant stays within 1e-9") {
    Rng rng(42);
    auto sys = oracle::random_dd_system(200, 0.02, rng);
    auto fac = factorize_fresh(sys);
    CHECK(oracle::factor_residual(sys, fac) <= 1e-9 * sys.max_abs());
}

TEST_CASE("solve: identity returns rhs, 2x2 matches the dense oracle") {
    SparseSystem eye;
    eye.n = 3;
    for (int i = 0; i < 3; ++i) eye.entries.push_back({i, i, 1.0});
    auto fac = factorize_fresh(eye);
    std::vector<double> b{3.0, -1.0, 0.5};
    auto x = solve(fac, b);
    CHECK(x == b);

    auto sys = from_dense({{4, 1}, {1, 3}});
    auto x2 = solve(factorize_fresh(sys), {9.0, 7.0});
    auto expect = oracle::dense_solve(oracle::to_dense(sys), {9.0, 7.0}, 2);
    CHECK(x2[0] == doctest::Approx(expect[0]).epsilon(1e-14));
    CHECK(x2[1] == doctest::Approx(expect[1]).epsilon(1e-14));
    // Cramer: det = 11, x = (20/11, 19/11); frozen from the oracle run.
    CHECK(expect[0] == doctest::Approx(20.0 / 11.0).epsilon(1e-12));
    CHECK(expect[1] == doctest::Approx(19.0 / 11.0).epsilon(1e-12));
}

TEST_CASE("solve: random systems match the dense oracle") {
    for (int t = 0; t < 6; ++t) {
        Rng rng(77 + t);
        const int n = 20 + rng.pick(180);
        auto sys = oracle::random_dd_system(n, 0.05, rng);
        std::vector<double> b(n);
        for (auto& v : b) v = rng.uniform(-2.0, 2.0);
        auto x = solve(factorize_fresh(sys), b);
        double bnorm = 0;
        for (double v : b) bnorm = std::max(bnorm, std::abs(v));
        CHECK(oracle::solve_residual_inf(sys, x, b) <= 1e-9 * bnorm);
        auto xd = oracle::dense_solve(oracle::to_dense(sys), b, n);
        for (int i = 0; i < n; ++i) CHECK(x[i] == doctest::Approx(xd[i]).epsilon(1e-8));
    }
}

TEST_CASE("refactorization on a shared pattern equals a fresh analysis") {
    Rng rng(5);
    auto sys = oracle::random_dd_system(80, 0.04, rng);
    auto perm = order(sys);
    auto sym = std::make_shared<SymbolicStructure>(symbolic_analyze(sys, perm));
    auto fac1 = factorize(sys, sym);

    // Same pattern, new values.
    auto sys2 = sys;
    for (auto& e : sys2.entries) e.value *= (e.row == e.col ? 1.7 : 0.9);
    auto reused = factorize(sys2, sym);
    auto fresh = factorize(sys2, std::make_shared<SymbolicStructure>(
                                     symbolic_analyze(sys2, order(sys2))));

    // Values may be ordered differently under a different permutation, so
    // compare through solves.
    std::vector<double> b(sys.n);
    for (auto& v : b) v = rng.uniform(-1.0, 1.0);
    auto xa = solve(reused, b);
    auto xb = solve(fresh, b);
    for (int i = 0; i < sys.n; ++i) CHECK(xa[i] == doctest::Approx(xb[i]).epsilon(1e-12));
}

TEST_CASE("pattern-subset refactorization is the contingency path") {
    Rng rng(6);
    auto sys = oracle::random_dd_system(60, 0.05, rng);
    auto perm = order(sys);
    auto sym = std::make_shared<SymbolicStructure>(symbolic_analyze(sys, perm));

    // Zero one symmetric off-diagonal pair (entries stay on the pattern).
    auto sys2 = sys;
    int zapped = 0;
    for (auto& e : sys2.entries) {
        if (e.row != e.col && zapped < 2) {
            e.value = 0.0;
            ++zapped;
        }
    }
    auto fac = factorize(sys2, sym);
    std::vector<double> b(sys.n, 1.0);
    auto x = solve(fac, b);
    CHECK(oracle::solve_residual_inf(sys2, x, b) <= 1e-9);
}

TEST_CASE("factorize rejects entries outside the symbolic pattern") {
    auto sys = from_dense({{4, 0, 0}, {0, 3, 0}, {0, 0, 5}});
    auto sym = std::make_shared<SymbolicStructure>(symbolic_analyze(sys, identity_order(3)));
    auto bad = sys;
    bad.entries.push_back({0, 2, 1.0});
    CHECK_THROWS_AS(factorize(bad, sym), ems::ModelError);
}

TEST_CASE("near-zero pivot raises a singularity error naming the vertex") {
    auto sys = from_dense({{1, 1}, {1, 1}});  // second pivot collapses to 0
    auto sym = std::make_shared<SymbolicStructure>(symbolic_analyze(sys, identity_order(2)));
    CHECK_THROWS_AS(factorize(sys, sym), ems::SingularMatrixError);
    try {
        factorize(sys, sym);
    } catch (const ems::SingularMatrixError& e) {
        CHECK(e.vertex == 1);
    }
}

TEST_CASE("level schedule: children always sit strictly below their parent") {
    Rng rng(9);
    auto sys = oracle::random_dd_system(120, 0.03, rng);
    auto sym = symbolic_analyze(sys, order(sys));
    for (int v = 0; v < sym.n; ++v) {
        if (sym.parent[v] >= 0) CHECK(sym.level[v] < sym.level[sym.parent[v]]);
    }
    // level_sets partition the vertices
    std::size_t total = 0;
    for (const auto& l : sym.level_sets) total += l.size();
    CHECK(total == static_cast<std::size_t>(sym.n));
}

TEST_CASE("parallel factorization is bit-identical to serial") {
    Rng rng(11);
    auto sys = oracle::random_dd_system(300, 0.02, rng);
    auto perm = order(sys);
    auto sym = std::make_shared<SymbolicStructure>(symbolic_analyze(sys, perm));
    auto serial = factorize(sys, sym, {.jobs = 1});
    auto parallel = factorize(sys, sym, {.jobs = 4});
    REQUIRE(serial.values.size() == parallel.values.size());
    for (std::size_t i = 0; i < serial.values.size(); ++i)
        CHECK(serial.values[i] == parallel.values[i]);
}

TEST_CASE("solutions are permutation invariant") {
    Rng rng(13);
    auto sys = oracle::random_dd_system(90, 0.04, rng);
    std::vector<double> b(sys.n);
    for (auto& v : b) v = rng.uniform(-1.0, 1.0);

    auto x_md = solve(factorize(sys, std::make_shared<SymbolicStructure>(
                                         symbolic_analyze(sys, order(sys)))),
                      b);
    auto x_nat = solve(factorize(sys, std::make_shared<SymbolicStructure>(symbolic_analyze(
                                          sys, identity_order(sys.n)))),
                       b);
    std::vector<int> rev(sys.n);
    for (int i = 0; i < sys.n; ++i) rev[i] = sys.n - 1 - i;
    auto x_rev = solve(
        factorize(sys, std::make_shared<SymbolicStructure>(symbolic_analyze(sys, rev))), b);
    for (int i = 0; i < sys.n; ++i) {
        CHECK(x_md[i] == doctest::Approx(x_nat[i]).epsilon(1e-9));
        CHECK(x_md[i] == doctest::Approx(x_rev[i]).epsilon(1e-9));
    }
}

TEST_CASE("pcg: exact preconditioner and identity converge in one iteration") {
    SparseSystem eye;
    eye.n = 5;
    for (int i = 0; i < 5; ++i) eye.entries.push_back({i, i, 1.0});
    std::vector<double> b{1, -2, 3, 0.5, 4};
    auto r = pcg_solve(eye, b, nullptr, 1e-12, 50);
    CHECK(r.converged);
    CHECK(r.iterations == 1);
    for (int i = 0; i < 5; ++i) CHECK(r.x[i] == doctest::Approx(b[i]).epsilon(1e-12));

    Rng rng(17);
    auto spd = oracle::random_dd_system(40, 0.05, rng);
    // Symmetrize values to make it SPD.
    SparseSystem sym_sys;
    sym_sys.n = spd.n;
    {
        auto dense = oracle::to_dense(spd);
        for (int i = 0; i < spd.n; ++i)
            for (int j = 0; j < spd.n; ++j) {
                double v = 0.5 * (dense[static_cast<std::size_t>(i) * spd.n + j] +
                                  dense[static_cast<std::size_t>(j) * spd.n + i]);
                if (v != 0.0) sym_sys.entries.push_back({i, j, v});
            }
    }
    auto fac = factorize_fresh(sym_sys);
    std::vector<double> rhs(sym_sys.n, 1.0);
    auto pre = pcg_solve(sym_sys, rhs, &fac, 1e-10, 100);
    CHECK(pre.converged);
    CHECK(pre.iterations == 1);
    auto plain = pcg_solve(sym_sys, rhs, nullptr, 1e-10, 1000);
    CHECK(plain.converged);
    CHECK(pre.iterations < plain.iterations);
}

TEST_CASE("pcg reports non-convergence instead of silently stopping") {
    SparseSystem sys;
    sys.n = 3;
    sys.entries = {{0, 0, 1.0}, {1, 1, 1e6}, {2, 2, 1e-6}};
    std::vector<double> b{1, 1, 1};
    auto r = pcg_solve(sys, b, nullptr, 1e-14, 1);
    CHECK(!r.converged);
    CHECK(r.relative_residual > 0.0);
}

TEST_CASE("coordinate text round-trips") {
    Rng rng(23);
    auto sys = oracle::random_dd_system(12, 0.2, rng);
    auto text = write_coord(sys);
    auto back = read_coord(text);
    CHECK(back.n == sys.n);
    CHECK(back.entries.size() == sys.entries.size());
    auto x1 = solve(factorize_fresh(sys), std::vector<double>(sys.n, 1.0));
    auto x2 = solve(factorize_fresh(back), std::vector<double>(back.n, 1.0));
    for (int i = 0; i < sys.n; ++i) CHECK(x1[i] == doctest::Approx(x2[i]).epsilon(1e-12));
}

TEST_CASE("coordinate text rejects malformed input") {
    CHECK_THROWS_AS(read_coord("not a matrix"), ems::IoError);
    CHECK_THROWS_AS(read_coord("3\n5 1 2.0\n"), ems::IoError);
    CHECK_THROWS_AS(read_coord(""), ems::IoError);
}
