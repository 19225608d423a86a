#pragma once

#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "ems/cime_io.hpp"
#include "ems/grid_model.hpp"
#include "ems/sparse.hpp"
#include "ems/state.hpp"

namespace ems::se {

// A measurement bound to the current bus-branch graph.
struct Measurement {
    int id = 0;
    cime::MeasKind kind = cime::MeasKind::VoltageMag;
    int bus_id = -1;     // V / P-injection / Q-injection
    int branch_id = -1;  // P-flow / Q-flow
    bool at_from = true;
    double z = 0.0;
    double sigma = 0.01;
};

// Binds measurement definitions to bus ids via the device->bus map and
// attaches current values. Definitions whose location cannot be resolved
// raise ModelError; values default per meter class when sigma was omitted.
std::vector<Measurement> resolve_measurements(const model::BusBranchGraph& g,
                                              const std::vector<cime::MeasurementDef>& defs,
                                              const std::map<int, double>& values);

// State variable numbering over energized islands: one theta per non-slack
// bus, one V per bus; de-energized buses carry no variables.
struct StateIndex {
    std::vector<int> theta_var;  // by bus position, -1 if none
    std::vector<int> v_var;
    std::vector<int> var_bus;  // variable -> bus position
    std::vector<bool> var_is_theta;
    int nvars = 0;

    static StateIndex build(const model::BusBranchGraph& g);
    bool same_shape(const StateIndex& other) const {
        return theta_var == other.theta_var && v_var == other.v_var;
    }
};

// h(x) and its sparse Jacobian, rows aligned with the measurement list.
// Entries exist only for electrically adjacent state variables.
struct Evaluation {
    std::vector<double> h;
    std::vector<std::vector<std::pair<int, double>>> jac_rows;  // (variable, dh/dx)
    std::vector<bool> used;  // false: measurement sits on a de-energized island
};

// Precomputed admittance rows shared by repeated evaluations on one graph.
class MeasurementModel {
  public:
    MeasurementModel(const model::BusBranchGraph& g, const StateIndex& index);

    Evaluation evaluate(const StateVector& x, const std::vector<Measurement>& meas) const;
    const StateIndex& index() const { return index_; }
    const model::BusBranchGraph& graph() const { return *graph_; }

  private:
    const model::BusBranchGraph* graph_;
    StateIndex index_;
    struct YEntry {
        int bus = 0;  // neighbour position (diagonal entry: self)
        double g = 0.0, b = 0.0;
    };
    std::vector<std::vector<YEntry>> y_rows_;  // by bus position, diagonal first
    std::vector<model::BranchAdmittance> branch_adm_;  // by branch position
};

Evaluation evaluate_h(const model::BusBranchGraph& g, const StateVector& x,
                      const std::vector<Measurement>& meas);

// Factorized gain matrix kept alive between snapshots; reusable while the
// topology (and hence the state numbering) is unchanged.
struct GainCache {
    StateIndex index;
    sparse::NumericFactors factors;
};

struct EstimateOptions {
    double tol = 1e-6;          // on ||dx||_inf
    int max_iter = 25;
    bool warm = false;          // use previous state + gain when allowed
    bool topology_changed = true;
    const struct EstimationResult* previous = nullptr;
    int jobs = 1;
};

struct EstimationResult {
    StateVector state;
    bool converged = false;
    int iterations = 0;
    double final_dx_norm = 0.0;
    std::vector<double> residuals;  // z - h at the final state
    std::vector<bool> measurement_used;

    // Reuse counters; a warm pass on unchanged topology performs neither.
    int gain_formulations = 0;
    int gain_factorizations = 0;

    double total_ms = 0.0;
    double gain_formulation_ms = 0.0;
    double gain_lu_ms = 0.0;
    double rhs_update_ms = 0.0;       // accumulated over iterations
    double fb_substitution_ms = 0.0;  // accumulated
    double state_update_ms = 0.0;     // accumulated

    std::shared_ptr<const GainCache> gain;  // handle for the next snapshot
};

// Constant-gain WLS iteration: G dx = H^T R^-1 (z - h(x)) with G formed
// and factorized at the start state, or taken unmodified from the previous
// snapshot when warm and the topology is unchanged.
EstimationResult estimate(const model::BusBranchGraph& g, const std::vector<Measurement>& meas,
                          const EstimateOptions& opts = {});

struct ResidualReport {
    std::vector<double> normalized;  // (z - h)/sigma, NaN for unused rows
    double sum_squared_weighted = 0.0;  // J(x)
    int largest_index = -1;             // position of max |normalized|
};

ResidualReport residual_report(const model::BusBranchGraph& g,
                               const std::vector<Measurement>& meas,
                               const EstimationResult& res);

}  // namespace ems::se
