#include "ems/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ems/timing.hpp"

namespace ems::se {

std::vector<Measurement> resolve_measurements(const model::BusBranchGraph& g,
                                              const std::vector<cime::MeasurementDef>& defs,
                                              const std::map<int, double>& values) {
    std::vector<Measurement> out;
    out.reserve(defs.size());
    for (const auto& d : defs) {
        Measurement m;
        m.id = d.id;
        m.kind = d.kind;
        m.sigma = d.sigma;
        if (d.kind == cime::MeasKind::PFlow || d.kind == cime::MeasKind::QFlow) {
            if (g.branch_index(d.branch) < 0)
                throw ModelError("measurement " + std::to_string(d.id) +
                                 " references unknown branch " + std::to_string(d.branch));
            m.branch_id = d.branch;
            m.at_from = d.at_from;
        } else {
            auto it = g.device_to_bus.find(d.device);
            if (it == g.device_to_bus.end())
                throw ModelError("measurement " + std::to_string(d.id) +
                                 " location device " + std::to_string(d.device) +
                                 " is not mapped to a bus");
            m.bus_id = it->second;
        }
        auto vit = values.find(d.id);
        m.z = vit != values.end() ? vit->second : d.value.value_or(0.0);
        out.push_back(m);
    }
    return out;
}

StateIndex StateIndex::build(const model::BusBranchGraph& g) {
    StateIndex idx;
    idx.theta_var.assign(g.buses.size(), -1);
    idx.v_var.assign(g.buses.size(), -1);
    for (std::size_t i = 0; i < g.buses.size(); ++i) {
        const auto& bus = g.buses[i];
        if (!bus.energized) continue;
        if (bus.type != model::BusType::Slack) {
            idx.theta_var[i] = idx.nvars++;
            idx.var_bus.push_back(static_cast<int>(i));
            idx.var_is_theta.push_back(true);
        }
        idx.v_var[i] = idx.nvars++;
        idx.var_bus.push_back(static_cast<int>(i));
        idx.var_is_theta.push_back(false);
    }
    return idx;
}

MeasurementModel::MeasurementModel(const model::BusBranchGraph& g, const StateIndex& index)
    : graph_(&g), index_(index) {
    const auto y = model::build_admittance(g);
    y_rows_.assign(g.buses.size(), {});
    for (std::size_t i = 0; i < g.buses.size(); ++i)
        y_rows_[i].push_back({static_cast<int>(i), y.diag[i].real(), y.diag[i].imag()});
    for (const auto& m : y.mutual) {
        y_rows_[m.from].push_back({m.to, m.y_ft.real(), m.y_ft.imag()});
        y_rows_[m.to].push_back({m.from, m.y_tf.real(), m.y_tf.imag()});
    }
    branch_adm_.resize(g.branches.size());
    for (std::size_t bi = 0; bi < g.branches.size(); ++bi)
        branch_adm_[bi] = model::branch_admittance(g.branches[bi]);
}

Evaluation MeasurementModel::evaluate(const StateVector& x,
                                      const std::vector<Measurement>& meas) const {
    const auto& g = *graph_;
    if (!x.compatible_with(g.buses.size()))
        throw ModelError("state vector does not match the graph");

    Evaluation ev;
    ev.h.assign(meas.size(), 0.0);
    ev.jac_rows.assign(meas.size(), {});
    ev.used.assign(meas.size(), true);

    auto add = [&](std::size_t row, int var, double val) {
        if (var >= 0 && val != 0.0) ev.jac_rows[row].push_back({var, val});
    };

    for (std::size_t r = 0; r < meas.size(); ++r) {
        const Measurement& m = meas[r];
        switch (m.kind) {
            case cime::MeasKind::VoltageMag: {
                int i = g.bus_index(m.bus_id);
                if (i < 0 || !g.buses[i].energized) {
                    ev.used[r] = false;
                    break;
                }
                ev.h[r] = x.v[i];
                add(r, index_.v_var[i], 1.0);
                break;
            }
            case cime::MeasKind::PInjection:
            case cime::MeasKind::QInjection: {
                int i = g.bus_index(m.bus_id);
                if (i < 0 || !g.buses[i].energized) {
                    ev.used[r] = false;
                    break;
                }
                const bool is_p = m.kind == cime::MeasKind::PInjection;
                // Full injections from the admittance row; the diagonal
                // (stored first) carries shunts, charging and taps already.
                double p = 0.0, q = 0.0;
                for (const auto& e : y_rows_[i]) {
                    const double th = x.theta[i] - x.theta[e.bus];
                    const double c = std::cos(th), s = std::sin(th);
                    p += x.v[i] * x.v[e.bus] * (e.g * c + e.b * s);
                    q += x.v[i] * x.v[e.bus] * (e.g * s - e.b * c);
                }
                const double gii = y_rows_[i].front().g;
                const double bii = y_rows_[i].front().b;
                ev.h[r] = is_p ? p : q;
                if (is_p) {
                    add(r, index_.theta_var[i], -q - bii * x.v[i] * x.v[i]);
                    add(r, index_.v_var[i], p / x.v[i] + gii * x.v[i]);
                } else {
                    add(r, index_.theta_var[i], p - gii * x.v[i] * x.v[i]);
                    add(r, index_.v_var[i], q / x.v[i] - bii * x.v[i]);
                }
                for (const auto& e : y_rows_[i]) {
                    if (e.bus == i) continue;
                    const double th = x.theta[i] - x.theta[e.bus];
                    const double c = std::cos(th), s = std::sin(th);
                    const double vij = x.v[i] * x.v[e.bus];
                    if (is_p) {
                        add(r, index_.theta_var[e.bus], vij * (e.g * s - e.b * c));
                        add(r, index_.v_var[e.bus], x.v[i] * (e.g * c + e.b * s));
                    } else {
                        add(r, index_.theta_var[e.bus], -vij * (e.g * c + e.b * s));
                        add(r, index_.v_var[e.bus], x.v[i] * (e.g * s - e.b * c));
                    }
                }
                break;
            }
            case cime::MeasKind::PFlow:
            case cime::MeasKind::QFlow: {
                int bi = g.branch_index(m.branch_id);
                if (bi < 0 || !g.branches[bi].in_service) {
                    ev.used[r] = false;
                    break;
                }
                const auto& br = g.branches[bi];
                int f = g.bus_index(br.from), t = g.bus_index(br.to);
                if (!g.buses[f].energized || !g.buses[t].energized) {
                    ev.used[r] = false;
                    break;
                }
                const auto& adm = branch_adm_[bi];
                // Work in the measured end's frame.
                int a = m.at_from ? f : t;
                int b = m.at_from ? t : f;
                const double gaa = m.at_from ? adm.y_ff.real() : adm.y_tt.real();
                const double baa = m.at_from ? adm.y_ff.imag() : adm.y_tt.imag();
                const double gab = m.at_from ? adm.y_ft.real() : adm.y_tf.real();
                const double bab = m.at_from ? adm.y_ft.imag() : adm.y_tf.imag();
                const double th = x.theta[a] - x.theta[b];
                const double c = std::cos(th), s = std::sin(th);
                const double va = x.v[a], vb = x.v[b];
                const bool is_p = m.kind == cime::MeasKind::PFlow;
                if (is_p) {
                    ev.h[r] = va * va * gaa + va * vb * (gab * c + bab * s);
                    const double dth = va * vb * (-gab * s + bab * c);
                    add(r, index_.theta_var[a], dth);
                    add(r, index_.theta_var[b], -dth);
                    add(r, index_.v_var[a], 2.0 * gaa * va + vb * (gab * c + bab * s));
                    add(r, index_.v_var[b], va * (gab * c + bab * s));
                } else {
                    ev.h[r] = -va * va * baa + va * vb * (gab * s - bab * c);
                    const double dth = va * vb * (gab * c + bab * s);
                    add(r, index_.theta_var[a], dth);
                    add(r, index_.theta_var[b], -dth);
                    add(r, index_.v_var[a], -2.0 * baa * va + vb * (gab * s - bab * c));
                    add(r, index_.v_var[b], va * (gab * s - bab * c));
                }
                break;
            }
        }
    }
    return ev;
}

Evaluation evaluate_h(const model::BusBranchGraph& g, const StateVector& x,
                      const std::vector<Measurement>& meas) {
    MeasurementModel model(g, StateIndex::build(g));
    return model.evaluate(x, meas);
}

namespace {

StateVector start_state(const model::BusBranchGraph& g) {
    StateVector x;
    x.v.resize(g.buses.size());
    x.theta.assign(g.buses.size(), 0.0);
    for (std::size_t i = 0; i < g.buses.size(); ++i) {
        const auto& bus = g.buses[i];
        x.v[i] = (bus.type != model::BusType::PQ && bus.v_set > 0) ? bus.v_set : 1.0;
    }
    return x;
}

}  // namespace

EstimationResult estimate(const model::BusBranchGraph& g, const std::vector<Measurement>& meas,
                          const EstimateOptions& opts) {
    Stopwatch total;
    EstimationResult res;

    const StateIndex index = StateIndex::build(g);
    if (index.nvars == 0) throw EstimationError("no energized island to estimate");
    MeasurementModel mm(g, index);

    const bool reuse = opts.warm && !opts.topology_changed && opts.previous &&
                       opts.previous->gain && opts.previous->gain->index.same_shape(index) &&
                       opts.previous->state.compatible_with(g.buses.size());

    StateVector x = reuse ? opts.previous->state : start_state(g);

    std::shared_ptr<const GainCache> gain;

    // Forms G = H^T R^-1 H at a given state and factorizes it. The dense
    // accumulation keeps the triple product simple at EMS problem sizes;
    // zero entries never materialize.
    auto rebuild_gain = [&](const StateVector& at) {
        Stopwatch sw;
        Evaluation ev0 = mm.evaluate(at, meas);
        sparse::SparseSystem gsys;
        gsys.n = index.nvars;
        std::vector<double> dense(static_cast<std::size_t>(index.nvars) * index.nvars, 0.0);
        for (std::size_t r = 0; r < meas.size(); ++r) {
            if (!ev0.used[r]) continue;
            const double w = 1.0 / (meas[r].sigma * meas[r].sigma);
            for (const auto& [va, da] : ev0.jac_rows[r])
                for (const auto& [vb, db] : ev0.jac_rows[r])
                    dense[static_cast<std::size_t>(va) * index.nvars + vb] += w * da * db;
        }
        for (int a = 0; a < index.nvars; ++a)
            for (int b = 0; b < index.nvars; ++b) {
                double v = dense[static_cast<std::size_t>(a) * index.nvars + b];
                if (v != 0.0) gsys.entries.push_back({a, b, v});
            }
        res.gain_formulation_ms += sw.ms();
        ++res.gain_formulations;

        sw.reset();
        auto cache = std::make_shared<GainCache>();
        cache->index = index;
        try {
            auto perm = sparse::order(gsys);
            auto sym = std::make_shared<sparse::SymbolicStructure>(
                sparse::symbolic_analyze(gsys, perm));
            cache->factors = sparse::factorize(gsys, sym, {.jobs = opts.jobs});
        } catch (const SingularMatrixError& e) {
            int bus_pos = index.var_bus[e.vertex];
            throw EstimationError("gain matrix is singular: island " +
                                      std::to_string(g.buses[bus_pos].island) +
                                      " is unobservable (bus " +
                                      std::to_string(g.buses[bus_pos].id) + ")",
                                  g.buses[bus_pos].island);
        }
        res.gain_lu_ms += sw.ms();
        ++res.gain_factorizations;
        gain = cache;
    };

    if (reuse)
        gain = opts.previous->gain;
    else
        rebuild_gain(x);  // gain at the start state

    // Constant-gain iteration with a stall safeguard: a step that fails to
    // contract re-forms the gain at the current state (visible in the
    // counters). A flat start can sit outside the pure constant-gain basin
    // on meshed systems; warm runs on unchanged topology never trigger it.
    std::vector<double> rhs(index.nvars);
    bool converged = false;
    double dx_norm = 0.0;
    double prev_dx_norm = 0.0;
    bool just_rebuilt = true;  // the gain is fresh (or trusted) at entry
    Evaluation ev;
    for (int it = 0; it < opts.max_iter; ++it) {
        Stopwatch sw;
        ev = mm.evaluate(x, meas);
        for (auto& v : rhs) v = 0.0;
        for (std::size_t r = 0; r < meas.size(); ++r) {
            if (!ev.used[r]) continue;
            const double w = (meas[r].z - ev.h[r]) / (meas[r].sigma * meas[r].sigma);
            for (const auto& [var, d] : ev.jac_rows[r]) rhs[var] += d * w;
        }
        res.rhs_update_ms += sw.ms();

        sw.reset();
        std::vector<double> dx = sparse::solve(gain->factors, rhs);
        res.fb_substitution_ms += sw.ms();

        sw.reset();
        dx_norm = 0.0;
        for (int v = 0; v < index.nvars; ++v) {
            dx_norm = std::max(dx_norm, std::abs(dx[v]));
            int bus = index.var_bus[v];
            if (index.var_is_theta[v])
                x.theta[bus] += dx[v];
            else
                x.v[bus] += dx[v];
        }
        res.state_update_ms += sw.ms();
        ++res.iterations;
        if (dx_norm < opts.tol) {
            converged = true;
            break;
        }
        if (!just_rebuilt && dx_norm > 0.5 * prev_dx_norm) {
            rebuild_gain(x);
            just_rebuilt = true;
        } else {
            just_rebuilt = false;
        }
        prev_dx_norm = dx_norm;
    }

    res.state = std::move(x);
    res.converged = converged;
    res.final_dx_norm = dx_norm;
    res.gain = gain;

    // Residuals at the final state.
    ev = mm.evaluate(res.state, meas);
    res.residuals.assign(meas.size(), 0.0);
    res.measurement_used.assign(meas.size(), true);
    for (std::size_t r = 0; r < meas.size(); ++r) {
        res.measurement_used[r] = ev.used[r];
        res.residuals[r] = ev.used[r] ? meas[r].z - ev.h[r] : 0.0;
    }
    res.total_ms = total.ms();
    return res;
}

ResidualReport residual_report(const model::BusBranchGraph& g,
                               const std::vector<Measurement>& meas,
                               const EstimationResult& res) {
    ResidualReport rep;
    rep.normalized.assign(meas.size(), 0.0);
    double max_abs = -1.0;
    for (std::size_t r = 0; r < meas.size(); ++r) {
        if (!res.measurement_used[r]) {
            rep.normalized[r] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        const double nr = res.residuals[r] / meas[r].sigma;
        rep.normalized[r] = nr;
        rep.sum_squared_weighted += nr * nr;
        if (std::abs(nr) > max_abs) {
            max_abs = std::abs(nr);
            rep.largest_index = static_cast<int>(r);
        }
    }
    (void)g;
    return rep;
}

}  // namespace ems::se
