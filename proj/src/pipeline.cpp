#include "ems/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ems/timing.hpp"
#include "json.hpp"

namespace ems::pipeline {

using nlohmann::json;

namespace {

std::string fmt(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr - buf);
}

}  // namespace

Pipeline::Pipeline(cime::GridFile gf, PipelineConfig cfg)
    : gf_(std::move(gf)), cfg_(std::move(cfg)),
      seq_(gf_.graph, gf_.initial_measurement_values()) {}

void Pipeline::run_stages(SnapshotReport& rep) {
    // SE: warm policy keyed on the NTP TopologyChanged flag alone.
    if (cfg_.stages.se && !gf_.measurements.empty()) {
        Stopwatch sw;
        rep.se_ran = true;
        try {
            auto meas = se::resolve_measurements(bb_, gf_.measurements,
                                                 seq_.measurement_values());
            se::EstimateOptions opts;
            opts.tol = cfg_.se_tol;
            opts.max_iter = cfg_.se_max_iter;
            opts.jobs = cfg_.jobs;
            opts.warm = cfg_.allow_warm && base_done_;
            opts.topology_changed = topology_changed_;
            opts.previous = last_se_ ? &*last_se_ : nullptr;
            auto res = se::estimate(bb_, meas, opts);
            rep.se_converged = res.converged;
            rep.se_iterations = res.iterations;
            rep.se_gain_formulations = res.gain_formulations;
            rep.se_gain_factorizations = res.gain_factorizations;
            rep.se_total_ms = res.total_ms;
            rep.se_gain_formulation_ms = res.gain_formulation_ms;
            rep.se_gain_lu_ms = res.gain_lu_ms;
            rep.se_rhs_ms = res.rhs_update_ms;
            rep.se_fb_ms = res.fb_substitution_ms;
            rep.se_update_ms = res.state_update_ms;
            last_se_ = std::move(res);
        } catch (const Error& e) {
            rep.errors.push_back(std::string("se: ") + e.what());
            last_se_.reset();
        }
        rep.se_ms = sw.ms();
    }

    if (cfg_.stages.pf) {
        Stopwatch sw;
        rep.pf_ran = true;
        try {
            if (!pf_sys_ || topology_changed_) pf_sys_ = pf::build_decoupled(bb_);
            pf::FdpfOptions opts;
            opts.tol = cfg_.pf_tol;
            opts.max_half_iterations = cfg_.pf_max_half;
            opts.jobs = cfg_.jobs;
            std::optional<StateVector> start;
            if (last_se_ && last_se_->converged &&
                last_se_->state.compatible_with(bb_.buses.size()))
                start = last_se_->state;
            else if (!topology_changed_ && last_pf_ &&
                     last_pf_->state.compatible_with(bb_.buses.size()))
                start = last_pf_->state;
            auto res = pf::fdpf_solve(*pf_sys_, bb_, start, opts);
            rep.pf_converged = res.converged;
            rep.pf_p_halves = res.p_half_iterations;
            rep.pf_q_halves = res.q_half_iterations;
            rep.pf_init_ms = res.init_ms;
            rep.pf_symbolic_ms = res.symbolic_ms;
            rep.pf_factor_ms = res.factor_ms;
            rep.pf_solve_ms = res.solve_ms;
            last_pf_ = std::move(res);
        } catch (const Error& e) {
            rep.errors.push_back(std::string("pf: ") + e.what());
            last_pf_.reset();
        }
        rep.pf_ms = sw.ms();
    }

    if (cfg_.stages.ca) {
        Stopwatch sw;
        rep.ca_ran = true;
        try {
            pf::FdpfOptions pfo;
            pfo.tol = cfg_.pf_tol;
            pfo.max_half_iterations = cfg_.pf_max_half;
            auto base = ca::prepare_base(bb_, pfo);
            auto opts = cfg_.ca;
            opts.fdpf = pfo;
            auto carep = ca::run_all(bb_, base, opts);
            rep.ca_cases_run = carep.cases_run;
            rep.ca_cases_screened = carep.cases_screened;
            rep.ca_not_converged = carep.not_converged;
            for (const auto& r : carep.results)
                rep.ca_violations += static_cast<int>(r.violations.size());
        } catch (const Error& e) {
            rep.errors.push_back(std::string("ca: ") + e.what());
        }
        rep.ca_ms = sw.ms();
    }
}

SnapshotReport Pipeline::process_base() {
    Stopwatch latency;
    SnapshotReport rep;
    rep.t = seq_.head_time();
    rep.is_base = true;
    rep.topology_changed = true;

    Stopwatch sw;
    bb_ = ntp::full_ntp(seq_.head(), registry_);
    rep.ntp_ms = sw.ms();
    topology_changed_ = true;

    run_stages(rep);
    base_done_ = true;
    rep.latency_ms = latency.ms();
    return rep;
}

SnapshotReport Pipeline::process_delta(const model::SnapshotDelta& d) {
    if (!base_done_) process_base();

    Stopwatch latency;
    SnapshotReport rep;
    rep.t = d.t;

    try {
        model::ChangeSet cs = seq_.apply_delta(d);
        Stopwatch sw;
        auto ntp_res = ntp::incremental_ntp(bb_, seq_.head(), cs, registry_);
        rep.ntp_ms = sw.ms();
        rep.topology_changed = ntp_res.topology_changed;
        rep.ntp_fell_back = ntp_res.fell_back_to_full;
        bb_ = std::move(ntp_res.graph);
        topology_changed_ = ntp_res.topology_changed;
    } catch (const Error& e) {
        // The delta was rejected: the committed snapshot is untouched and
        // the pipeline continues from it.
        rep.errors.push_back(std::string("ntp: ") + e.what());
        rep.latency_ms = latency.ms();
        return rep;
    }

    run_stages(rep);
    rep.latency_ms = latency.ms();
    return rep;
}

std::vector<SnapshotReport> run_pipeline(
    const PipelineConfig& cfg, const std::function<void(const SnapshotReport&)>& on_report) {
    cime::GridFile gf = cime::load_grid_file(cfg.grid_path);
    std::vector<model::SnapshotDelta> deltas;
    if (!cfg.delta_path.empty()) deltas = cime::load_delta_file(cfg.delta_path);

    Pipeline pipe(std::move(gf), cfg);
    std::vector<SnapshotReport> reports;

    std::unique_ptr<ReportWriter> writer;
    if (!cfg.out_dir.empty()) writer = std::make_unique<ReportWriter>(cfg.out_dir);

    auto push = [&](SnapshotReport rep) {
        if (writer) writer->append(rep);
        if (on_report) on_report(rep);
        reports.push_back(std::move(rep));
    };

    push(pipe.process_base());
    for (const auto& d : deltas) push(pipe.process_delta(d));
    return reports;
}

// --- report emission ---

struct ReportWriter::Impl {
    std::ofstream jsonl;
    std::ofstream se_csv;
    std::ofstream pf_csv;
};

std::string ReportWriter::se_csv_header() {
    return "t,Scenario,Total,Gain Formulation,Gain LU,Iterations,RHS Update,"
           "F/B Substitution,State Update";
}

std::string ReportWriter::pf_csv_header() {
    return "t,Initialization,Symbolic Analysis,Numerical Factorization,Solve";
}

ReportWriter::ReportWriter(const std::string& dir) : impl_(std::make_unique<Impl>()) {
    std::filesystem::create_directories(dir);
    auto open = [&](std::ofstream& os, const std::string& name) {
        os.open(dir + "/" + name, std::ios::trunc);
        if (!os) throw IoError("cannot open " + dir + "/" + name + " for writing");
    };
    open(impl_->jsonl, "reports.jsonl");
    open(impl_->se_csv, "timing_se.csv");
    open(impl_->pf_csv, "timing_pf.csv");
    impl_->se_csv << se_csv_header() << "\n" << std::flush;
    impl_->pf_csv << pf_csv_header() << "\n" << std::flush;
}

ReportWriter::~ReportWriter() = default;

void ReportWriter::append(const SnapshotReport& r) {
    impl_->jsonl << report_to_json(r) << "\n" << std::flush;
    if (r.se_ran) {
        const double it = std::max(1, r.se_iterations);
        impl_->se_csv << r.t << ","
                      << (r.topology_changed ? "Topology Change" : "No Topology Change") << ","
                      << fmt(r.se_total_ms) << ",";
        // Blank cells mirror a reused gain: nothing was formed or factored.
        if (r.se_gain_formulations > 0)
            impl_->se_csv << fmt(r.se_gain_formulation_ms);
        impl_->se_csv << ",";
        if (r.se_gain_factorizations > 0) impl_->se_csv << fmt(r.se_gain_lu_ms);
        impl_->se_csv << "," << r.se_iterations << "," << fmt(r.se_rhs_ms / it) << ","
                      << fmt(r.se_fb_ms / it) << "," << fmt(r.se_update_ms / it) << "\n"
                      << std::flush;
    }
    if (r.pf_ran) {
        impl_->pf_csv << r.t << "," << fmt(r.pf_init_ms) << "," << fmt(r.pf_symbolic_ms) << ","
                      << fmt(r.pf_factor_ms) << "," << fmt(r.pf_solve_ms) << "\n"
                      << std::flush;
    }
}

void ReportWriter::flush() {
    impl_->jsonl.flush();
    impl_->se_csv.flush();
    impl_->pf_csv.flush();
}

void emit_reports(const std::vector<SnapshotReport>& reports, const std::string& dir) {
    ReportWriter w(dir);
    for (const auto& r : reports) w.append(r);
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SnapshotReport, t, is_base, topology_changed, ntp_fell_back,
                                   ntp_ms, se_ms, pf_ms, ca_ms, latency_ms, se_ran, se_converged,
                                   se_iterations, se_gain_formulations, se_gain_factorizations,
                                   se_total_ms, se_gain_formulation_ms, se_gain_lu_ms, se_rhs_ms,
                                   se_fb_ms, se_update_ms, pf_ran, pf_converged, pf_p_halves,
                                   pf_q_halves, pf_init_ms, pf_symbolic_ms, pf_factor_ms,
                                   pf_solve_ms, ca_ran, ca_cases_run, ca_cases_screened,
                                   ca_violations, ca_not_converged, errors)

std::string report_to_json(const SnapshotReport& r) {
    return json(r).dump();
}

SnapshotReport report_from_json(const std::string& line) {
    return json::parse(line).get<SnapshotReport>();
}

std::vector<SnapshotReport> parse_reports_jsonl(const std::string& text) {
    std::vector<SnapshotReport> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(report_from_json(line));
    }
    return out;
}

std::string state_csv(const model::BusBranchGraph& g, const StateVector& x) {
    std::ostringstream os;
    os << "bus,type,island,energized,v,theta\n";
    for (std::size_t i = 0; i < g.buses.size(); ++i) {
        const auto& b = g.buses[i];
        os << b.id << "," << model::to_string(b.type) << "," << b.island << "," << b.energized
           << "," << fmt(x.v[i]) << "," << fmt(x.theta[i]) << "\n";
    }
    return os.str();
}

std::string flows_csv(const model::BusBranchGraph& g, const StateVector& x) {
    std::ostringstream os;
    os << "branch,from,to,p_from,q_from,p_to,q_to,mva_from,mva_to\n";
    for (std::size_t bi = 0; bi < g.branches.size(); ++bi) {
        const auto& br = g.branches[bi];
        if (!br.in_service) continue;
        int f = g.bus_index(br.from), t = g.bus_index(br.to);
        if (!g.buses[f].energized || !g.buses[t].energized) continue;
        auto fl = pf::branch_flow(br, x, f, t);
        os << br.id << "," << br.from << "," << br.to << "," << fmt(fl.p_from) << ","
           << fmt(fl.q_from) << "," << fmt(fl.p_to) << "," << fmt(fl.q_to) << ","
           << fmt(fl.mva_from) << "," << fmt(fl.mva_to) << "\n";
    }
    return os.str();
}

std::string ca_report_csv(const ca::ContingencyReport& rep) {
    std::ostringstream os;
    os << "case,kind,element,screening,converged,half_iterations,pcg_iterations,violations,"
          "wall_ms,note\n";
    std::size_t ri = 0;
    for (const auto& c : rep.cases) {
        os << c.case_id << "," << (c.kind == ca::CaseKind::BranchOutage ? "branch" : "generator")
           << "," << c.element_id << "," << to_string(c.screening) << ",";
        if (c.screening == ca::Screening::Runnable && ri < rep.results.size() &&
            rep.results[ri].case_id == c.case_id) {
            const auto& r = rep.results[ri++];
            os << (r.converged ? 1 : 0) << "," << r.half_iterations << "," << r.pcg_iterations
               << "," << r.violations.size() << "," << fmt(r.wall_ms) << "," << r.note;
        } else {
            os << ",,,,,";
        }
        os << "\n";
    }
    os << "# aggregate: enumerated=" << rep.cases_enumerated << " run=" << rep.cases_run
       << " screened=" << rep.cases_screened << " not_converged=" << rep.not_converged
       << " symbolic_invocations=" << rep.symbolic_invocations << " scheme="
       << to_string(rep.scheme) << " reuse=" << rep.reuse << " total_ms="
       << fmt(rep.total_wall_ms) << "\n";
    return os.str();
}

std::string ca_report_json(const ca::ContingencyReport& rep) {
    json j;
    j["scheme"] = to_string(rep.scheme);
    j["reuse"] = rep.reuse;
    j["cases_enumerated"] = rep.cases_enumerated;
    j["cases_run"] = rep.cases_run;
    j["cases_screened"] = rep.cases_screened;
    j["not_converged"] = rep.not_converged;
    j["symbolic_invocations"] = rep.symbolic_invocations;
    j["total_wall_ms"] = rep.total_wall_ms;
    json cases = json::array();
    std::size_t ri = 0;
    for (const auto& c : rep.cases) {
        json jc;
        jc["case"] = c.case_id;
        jc["kind"] = c.kind == ca::CaseKind::BranchOutage ? "branch" : "generator";
        jc["element"] = c.element_id;
        jc["screening"] = to_string(c.screening);
        if (c.screening == ca::Screening::Runnable && ri < rep.results.size() &&
            rep.results[ri].case_id == c.case_id) {
            const auto& r = rep.results[ri++];
            jc["converged"] = r.converged;
            jc["half_iterations"] = r.half_iterations;
            jc["pcg_iterations"] = r.pcg_iterations;
            jc["wall_ms"] = r.wall_ms;
            if (!r.note.empty()) jc["note"] = r.note;
            json viols = json::array();
            for (const auto& v : r.violations) {
                json jv;
                jv["kind"] = v.kind == ca::Violation::Kind::BranchOverload ? "branch_overload"
                             : v.kind == ca::Violation::Kind::VoltageLow  ? "voltage_low"
                                                                          : "voltage_high";
                jv["element"] = v.element_id;
                jv["value"] = v.value;
                jv["limit"] = v.limit;
                viols.push_back(jv);
            }
            jc["violations"] = viols;
        }
        cases.push_back(jc);
    }
    j["cases"] = cases;
    return j.dump(2);
}

namespace {

BenchStat stat_of(std::vector<double> v) {
    BenchStat s;
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    s.median = v[v.size() / 2];
    s.p95 = v[std::min(v.size() - 1, static_cast<std::size_t>(std::ceil(0.95 * v.size())) )];
    return s;
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

BenchSummary bench(const PipelineConfig& cfg, int repeats, int ca_repeats) {
    BenchSummary sum;
    sum.repeats = repeats;

    std::vector<double> ntp, se, pf, cycle, warm_iters, cold_iters;
    PipelineConfig run_cfg = cfg;
    run_cfg.out_dir.clear();  // benching never writes per-run files
    run_cfg.stages.ca = false;

    for (int rep = 0; rep < repeats; ++rep) {
        auto reports = run_pipeline(run_cfg);
        sum.snapshots = static_cast<int>(reports.size());
        for (const auto& r : reports) {
            ntp.push_back(r.ntp_ms);
            se.push_back(r.se_ms);
            pf.push_back(r.pf_ms);
            cycle.push_back(r.latency_ms);
            if (r.se_ran) {
                if (r.is_base || r.topology_changed)
                    cold_iters.push_back(r.se_iterations);
                else
                    warm_iters.push_back(r.se_iterations);
            }
        }
    }
    sum.ntp_ms = stat_of(ntp);
    sum.se_ms = stat_of(se);
    sum.pf_ms = stat_of(pf);
    sum.cycle_ms = stat_of(cycle);
    sum.se_iterations_warm_median = median_of(warm_iters);
    sum.se_iterations_cold_median = median_of(cold_iters);

    if (cfg.stages.ca) {
        // Reuse on/off sweep on the final snapshot of a fresh run.
        cime::GridFile gf = cime::load_grid_file(cfg.grid_path);
        Pipeline pipe(std::move(gf), run_cfg);
        pipe.process_base();
        if (!cfg.delta_path.empty())
            for (const auto& d : cime::load_delta_file(cfg.delta_path)) pipe.process_delta(d);
        pf::FdpfOptions pfo;
        pfo.tol = cfg.pf_tol;
        pfo.max_half_iterations = cfg.pf_max_half;
        auto base = ca::prepare_base(pipe.graph(), pfo);
        std::vector<double> on_ms, off_ms;
        for (int i = 0; i < ca_repeats; ++i) {
            auto opts = cfg.ca;
            opts.fdpf = pfo;
            opts.keep_states = false;
            opts.reuse = true;
            on_ms.push_back(ca::run_all(pipe.graph(), base, opts).total_wall_ms);
            opts.reuse = false;
            off_ms.push_back(ca::run_all(pipe.graph(), base, opts).total_wall_ms);
        }
        sum.ca_reuse_ms = median_of(on_ms);
        sum.ca_no_reuse_ms = median_of(off_ms);
        if (sum.ca_no_reuse_ms > 0) sum.ca_reuse_ratio = sum.ca_reuse_ms / sum.ca_no_reuse_ms;
    }
    return sum;
}

std::string BenchSummary::to_json() const {
    json j;
    j["repeats"] = repeats;
    j["snapshots"] = snapshots;
    auto put = [&](const char* k, const BenchStat& s) {
        j[k] = {{"median_ms", s.median}, {"p95_ms", s.p95}};
    };
    put("ntp", ntp_ms);
    put("se", se_ms);
    put("pf", pf_ms);
    put("cycle", cycle_ms);
    j["se_iterations_median"] = {{"warm", se_iterations_warm_median},
                                 {"cold", se_iterations_cold_median}};
    if (ca_reuse_ratio >= 0) {
        j["ca"] = {{"reuse_ms", ca_reuse_ms},
                   {"no_reuse_ms", ca_no_reuse_ms},
                   {"reuse_ratio", ca_reuse_ratio}};
    }
    return j.dump(2);
}

}  // namespace ems::pipeline
