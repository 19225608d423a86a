#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ems/grid_model.hpp"
#include "ems/powerflow.hpp"
#include "ems/state.hpp"

namespace ems::ca {

enum class Screening { Runnable, Islanding, EndPointIsolation };
enum class CaseKind { BranchOutage, GeneratorOutage };
enum class Scheme { Fdpf, Pcg };

const char* to_string(Screening s);
const char* to_string(Scheme s);

struct ContingencyCase {
    int case_id = 0;
    CaseKind kind = CaseKind::BranchOutage;
    int element_id = 0;  // branch id, or generator device id
    Screening screening = Screening::Runnable;
};

struct Violation {
    enum class Kind { BranchOverload, VoltageLow, VoltageHigh };
    Kind kind = Kind::BranchOverload;
    int element_id = 0;  // branch id or bus id
    double value = 0.0;
    double limit = 0.0;
};

struct CaseResult {
    int case_id = 0;
    CaseKind kind = CaseKind::BranchOutage;
    int element_id = 0;
    bool solved = false;     // attempted (runnable and no setup failure)
    bool converged = false;
    int half_iterations = 0;
    int pcg_iterations = 0;      // total across half-solves (PCG scheme)
    int max_pcg_per_solve = 0;
    std::vector<Violation> violations;
    StateVector state;
    double wall_ms = 0.0;
    std::string note;  // non-convergence alert or setup failure
};

struct VoltageBand {
    double low = 0.94;
    double high = 1.06;
};

struct RunOptions {
    Scheme scheme = Scheme::Fdpf;
    int jobs = 1;
    bool reuse = true;  // share base symbolic structure + warm starts
    bool include_generators = false;
    VoltageBand band;
    pf::FdpfOptions fdpf;
    double pcg_tol = 1e-10;
    int pcg_max_iter = 2000;
    bool keep_states = true;  // false drops per-case state vectors
};

// Everything a contingency run shares read-only across cases.
struct BaseCase {
    const model::BusBranchGraph* graph = nullptr;
    pf::DecoupledSystem sys;  // factorized
    StateVector state;        // solved base state
    pf::PowerFlowResult base_result;
    std::vector<double> branch_p_from;  // base-case flows, by branch position
    int symbolic_invocations = 1;       // the base build
};

BaseCase prepare_base(const model::BusBranchGraph& g, const pf::FdpfOptions& opts = {});

// One case per in-service branch of an energized island (and optionally
// per non-slack generator device), ordered by element id.
std::vector<ContingencyCase> enumerate_cases(const model::BusBranchGraph& g,
                                             bool include_generators = false);

// Removal splitting an energized island into two slack-capable parts is
// islanding; a split that de-energizes one side is end-point isolation.
// Both are excluded from solving.
Screening screen_branch(const model::BusBranchGraph& g, int branch_id);

CaseResult run_case_fdpf(const ContingencyCase& c, const BaseCase& base, const RunOptions& opts);
CaseResult run_case_pcg(const ContingencyCase& c, const BaseCase& base, const RunOptions& opts);

struct ContingencyReport {
    std::vector<ContingencyCase> cases;   // everything enumerated
    std::vector<CaseResult> results;      // runnable cases, ordered by case id
    int cases_enumerated = 0;
    int cases_run = 0;
    int cases_screened = 0;
    int not_converged = 0;
    int symbolic_invocations = 0;  // 1 with reuse; runnable + 1 without
    double total_wall_ms = 0.0;
    Scheme scheme = Scheme::Fdpf;
    bool reuse = true;
};

ContingencyReport run_all(const model::BusBranchGraph& g, const BaseCase& base,
                          const RunOptions& opts);

}  // namespace ems::ca
