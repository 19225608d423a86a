#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ems/cime_io.hpp"
#include "ems/contingency.hpp"
#include "ems/estimation.hpp"
#include "ems/grid_model.hpp"
#include "ems/ntp.hpp"
#include "ems/powerflow.hpp"

namespace ems::pipeline {

struct StageToggles {
    bool se = true;
    bool pf = true;
    bool ca = false;
};

struct PipelineConfig {
    std::string grid_path;
    std::string delta_path;  // optional file-based delta source
    StageToggles stages;
    bool allow_warm = true;  // SE warm start / gain reuse on unchanged topology
    double se_tol = 1e-6;
    int se_max_iter = 25;
    double pf_tol = 1e-8;
    int pf_max_half = 50;
    ca::RunOptions ca;
    int jobs = 1;
    std::string out_dir;  // empty: no report files
};

struct SnapshotReport {
    std::int64_t t = 0;
    bool is_base = false;
    bool topology_changed = false;
    bool ntp_fell_back = false;

    double ntp_ms = 0.0, se_ms = 0.0, pf_ms = 0.0, ca_ms = 0.0;
    double latency_ms = 0.0;  // delta receipt to report completion

    bool se_ran = false, se_converged = false;
    int se_iterations = 0;
    int se_gain_formulations = 0, se_gain_factorizations = 0;
    double se_total_ms = 0.0, se_gain_formulation_ms = 0.0, se_gain_lu_ms = 0.0;
    double se_rhs_ms = 0.0, se_fb_ms = 0.0, se_update_ms = 0.0;

    bool pf_ran = false, pf_converged = false;
    int pf_p_halves = 0, pf_q_halves = 0;
    double pf_init_ms = 0.0, pf_symbolic_ms = 0.0, pf_factor_ms = 0.0, pf_solve_ms = 0.0;

    bool ca_ran = false;
    int ca_cases_run = 0, ca_cases_screened = 0, ca_violations = 0, ca_not_converged = 0;

    std::vector<std::string> errors;
};

// NTP -> SE -> PF -> (CA) over the evolving sequence. One snapshot is in
// flight at a time; committed artifacts are immutable.
class Pipeline {
  public:
    Pipeline(cime::GridFile gf, PipelineConfig cfg);

    SnapshotReport process_base();
    SnapshotReport process_delta(const model::SnapshotDelta& d);

    const model::BusBranchGraph& graph() const { return bb_; }
    const se::EstimationResult* last_estimate() const {
        return last_se_ ? &*last_se_ : nullptr;
    }
    const pf::PowerFlowResult* last_powerflow() const {
        return last_pf_ ? &*last_pf_ : nullptr;
    }
    const model::EvolvingSequence& sequence() const { return seq_; }

  private:
    void run_stages(SnapshotReport& rep);

    cime::GridFile gf_;
    PipelineConfig cfg_;
    model::EvolvingSequence seq_;
    ntp::BusIdRegistry registry_;
    model::BusBranchGraph bb_;
    std::optional<se::EstimationResult> last_se_;
    std::optional<pf::PowerFlowResult> last_pf_;
    std::optional<pf::DecoupledSystem> pf_sys_;  // cached factors, rebuilt on topology change
    bool topology_changed_ = true;
    bool base_done_ = false;
};

std::vector<SnapshotReport> run_pipeline(
    const PipelineConfig& cfg,
    const std::function<void(const SnapshotReport&)>& on_report = nullptr);

// Append-per-snapshot report files: headers are written on open, each row
// is flushed, so a crash leaves valid prefixes. timing_se.csv follows the
// SE stage breakdown (scenario column plus one column per stage), and
// timing_pf.csv the four power-flow stages.
class ReportWriter {
  public:
    explicit ReportWriter(const std::string& dir);
    ~ReportWriter();
    void append(const SnapshotReport& r);
    void flush();

    static std::string se_csv_header();
    static std::string pf_csv_header();

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

void emit_reports(const std::vector<SnapshotReport>& reports, const std::string& dir);

std::string report_to_json(const SnapshotReport& r);
SnapshotReport report_from_json(const std::string& line);
std::vector<SnapshotReport> parse_reports_jsonl(const std::string& text);

// State / flow / contingency emitters.
std::string state_csv(const model::BusBranchGraph& g, const StateVector& x);
std::string flows_csv(const model::BusBranchGraph& g, const StateVector& x);
std::string ca_report_csv(const ca::ContingencyReport& rep);
std::string ca_report_json(const ca::ContingencyReport& rep);

struct BenchStat {
    double median = 0.0;
    double p95 = 0.0;
};

struct BenchSummary {
    int repeats = 0;
    int snapshots = 0;
    BenchStat ntp_ms, se_ms, pf_ms, cycle_ms;  // per-snapshot across repeats
    double se_iterations_warm_median = 0.0;
    double se_iterations_cold_median = 0.0;
    double ca_reuse_ms = -1.0;     // medians over ca_repeats, -1 when CA disabled
    double ca_no_reuse_ms = -1.0;
    double ca_reuse_ratio = -1.0;
    std::string to_json() const;
};

// Repeats the file-driven pipeline and reports median/p95 per stage; with
// the CA stage enabled, also times a reuse-on vs reuse-off contingency
// sweep on the final snapshot.
BenchSummary bench(const PipelineConfig& cfg, int repeats, int ca_repeats = 5);

}  // namespace ems::pipeline
