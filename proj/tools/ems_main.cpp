#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "ems/cime_io.hpp"
#include "ems/contingency.hpp"
#include "ems/estimation.hpp"
#include "ems/grid_model.hpp"
#include "ems/ntp.hpp"
#include "ems/pipeline.hpp"
#include "ems/powerflow.hpp"
#include "json.hpp"

namespace {

using namespace ems;

std::string out_dir_default() {
    const char* env = std::getenv("EMS_OUT_DIR");
    return env ? env : "out";
}

void write_out(const std::string& dir, const std::string& name, const std::string& content) {
    std::filesystem::create_directories(dir);
    cime::write_text_file(dir + "/" + name, content);
}

model::BusBranchGraph load_and_ntp(const std::string& grid_path, ntp::BusIdRegistry& reg) {
    auto gf = cime::load_grid_file(grid_path);
    return ntp::full_ntp(gf.graph, reg);
}

std::string bus_branch_json(const model::BusBranchGraph& g) {
    nlohmann::json j;
    auto buses = nlohmann::json::array();
    for (const auto& b : g.buses) {
        buses.push_back({{"id", b.id},
                         {"type", model::to_string(b.type)},
                         {"p_inj", b.p_inj},
                         {"q_inj", b.q_inj},
                         {"b_shunt", b.b_shunt},
                         {"island", b.island},
                         {"energized", b.energized},
                         {"devices", b.devices}});
    }
    auto branches = nlohmann::json::array();
    for (const auto& br : g.branches) {
        branches.push_back({{"id", br.id},
                            {"from", br.from},
                            {"to", br.to},
                            {"r", br.r},
                            {"x", br.x},
                            {"b", br.b},
                            {"tap", br.tap},
                            {"rate", br.rate},
                            {"in_service", br.in_service}});
    }
    j["buses"] = buses;
    j["branches"] = branches;
    return j.dump(2);
}

std::string bus_branch_csv(const model::BusBranchGraph& g) {
    std::ostringstream os;
    os << "bus,type,p_inj,q_inj,b_shunt,island,energized\n";
    for (const auto& b : g.buses)
        os << b.id << "," << model::to_string(b.type) << "," << b.p_inj << "," << b.q_inj << ","
           << b.b_shunt << "," << b.island << "," << b.energized << "\n";
    return os.str();
}

// Emits a measurement section (with values) from a solved state: V at
// every bus, P/Q injection at every bus, P/Q flow at every in-service
// branch from-end. Handy for producing self-consistent SE demo inputs.
std::string measurements_from_state(const model::BusBranchGraph& g, const StateVector& x,
                                    int first_id) {
    std::ostringstream os;
    os << "<MEASUREMENT>\n";
    int id = first_id;
    auto mm = pf::compute_mismatch(g, x);
    for (std::size_t i = 0; i < g.buses.size(); ++i) {
        const auto& b = g.buses[i];
        if (!b.energized || b.devices.empty()) continue;
        int dev = b.devices.front();
        os << id++ << " v " << dev << " 0.004 " << x.v[i] << "\n";
        os << id++ << " p_inj " << dev << " 0.01 " << (b.p_inj - mm.dp[i]) << "\n";
        os << id++ << " q_inj " << dev << " 0.01 " << (b.q_inj - mm.dq[i]) << "\n";
    }
    for (std::size_t bi = 0; bi < g.branches.size(); ++bi) {
        const auto& br = g.branches[bi];
        if (!br.in_service) continue;
        int f = g.bus_index(br.from), t = g.bus_index(br.to);
        if (!g.buses[f].energized) continue;
        auto fl = pf::branch_flow(br, x, f, t);
        os << id++ << " p_flow " << br.id << " from 0.01 " << fl.p_from << "\n";
        os << id++ << " q_flow " << br.id << " from 0.01 " << fl.q_from << "\n";
    }
    return os.str();
}

int cmd_ntp(const std::string& grid, const std::string& deltas, const std::string& mode,
            const std::string& out, const std::string& format) {
    auto gf = cime::load_grid_file(grid);
    ntp::BusIdRegistry reg;
    model::BusBranchGraph bb = ntp::full_ntp(gf.graph, reg);

    if (!deltas.empty()) {
        model::EvolvingSequence seq(gf.graph, gf.initial_measurement_values());
        for (const auto& d : cime::load_delta_file(deltas)) {
            auto cs = seq.apply_delta(d);
            if (mode == "incremental") {
                auto res = ntp::incremental_ntp(bb, seq.head(), cs, reg);
                bb = std::move(res.graph);
            } else {
                bb = ntp::full_ntp(seq.head(), reg);
            }
        }
    }
    if (format == "json")
        write_out(out, "bus_branch.json", bus_branch_json(bb));
    else
        write_out(out, "bus_branch.csv", bus_branch_csv(bb));
    std::cout << "ntp: " << bb.buses.size() << " buses, " << bb.branches.size() << " branches -> "
              << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EMS analysis engine: topology processing, state estimation, "
                 "fast-decoupled power flow and N-1 contingency analysis over an "
                 "evolving snapshot stream"};
    app.require_subcommand(1);

    std::string grid, deltas, out = out_dir_default(), format = "csv";
    int jobs = 1;

    // ntp
    auto* ntp_cmd = app.add_subcommand("ntp", "Build the bus-branch model");
    std::string ntp_mode = "full";
    ntp_cmd->add_option("--grid", grid, "grid file (.gride)")->required();
    ntp_cmd->add_option("--deltas", deltas, "delta stream to apply first");
    ntp_cmd->add_option("--mode", ntp_mode, "full|incremental")
        ->check(CLI::IsMember({"full", "incremental"}));
    ntp_cmd->add_option("--out", out, "output directory");
    ntp_cmd->add_option("--format", format, "csv|json")->check(CLI::IsMember({"csv", "json"}));

    // se
    auto* se_cmd = app.add_subcommand("se", "Weighted least squares state estimation");
    bool se_cold = false;
    double se_tol = 1e-6;
    int se_max_iter = 25;
    se_cmd->add_option("--grid", grid, "grid file (.gride)")->required();
    se_cmd->add_option("--deltas", deltas, "delta stream (measurement values)");
    se_cmd->add_flag("--cold", se_cold, "force cold start on every snapshot");
    se_cmd->add_option("--tol", se_tol, "convergence tolerance on |dx|");
    se_cmd->add_option("--max-iter", se_max_iter, "iteration cap");
    se_cmd->add_option("--out", out, "output directory");
    se_cmd->add_option("--jobs", jobs, "parallel factorization width");

    // pf
    auto* pf_cmd = app.add_subcommand("pf", "Fast-decoupled power flow");
    double pf_tol = 1e-8;
    int pf_max_half = 50;
    std::string emit_meas;
    pf_cmd->add_option("--grid", grid, "grid file (.gride)")->required();
    pf_cmd->add_option("--tol", pf_tol, "mismatch tolerance (pu)");
    pf_cmd->add_option("--max-half-iter", pf_max_half, "half-iteration cap");
    pf_cmd->add_option("--out", out, "output directory");
    pf_cmd->add_option("--emit-measurements", emit_meas,
                       "also write a measurement section generated from the solved state");
    pf_cmd->add_option("--jobs", jobs, "parallel factorization width");

    // ca
    auto* ca_cmd = app.add_subcommand("ca", "N-1 contingency analysis");
    std::string scheme = "fdpf";
    bool no_reuse = false, with_gens = false;
    ca_cmd->add_option("--grid", grid, "grid file (.gride)")->required();
    ca_cmd->add_option("--scheme", scheme, "fdpf|pcg")->check(CLI::IsMember({"fdpf", "pcg"}));
    ca_cmd->add_option("--jobs", jobs, "cases solved concurrently");
    ca_cmd->add_flag("--no-reuse", no_reuse, "rebuild symbolic structure per case (debug)");
    ca_cmd->add_flag("--gens", with_gens, "include generator outage cases");
    ca_cmd->add_option("--out", out, "output directory");

    // run
    auto* run_cmd = app.add_subcommand("run", "Full pipeline over a delta stream");
    bool run_ca = false, run_cold = false;
    run_cmd->add_option("--grid", grid, "grid file (.gride)")->required();
    run_cmd->add_option("--deltas", deltas, "delta stream file");
    run_cmd->add_flag("--ca", run_ca, "run contingency analysis per snapshot");
    run_cmd->add_flag("--cold", run_cold, "disable warm starts");
    run_cmd->add_option("--out", out, "output directory");
    run_cmd->add_option("--jobs", jobs, "parallelism degree");

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "Repeat the pipeline and report timing stats");
    int repeats = 5;
    bool bench_ca = false;
    bench_cmd->add_option("--grid", grid, "grid file (.gride)")->required();
    bench_cmd->add_option("--deltas", deltas, "delta stream file");
    bench_cmd->add_option("--repeats", repeats, "number of repeats");
    bench_cmd->add_flag("--ca", bench_ca, "also time contingency reuse on/off");
    bench_cmd->add_option("--out", out, "output directory");
    bench_cmd->add_option("--jobs", jobs, "parallelism degree");

    // serve
    auto* serve_cmd = app.add_subcommand("serve", "Replay a delta stream over a socket");
    int port = 0, rate_ms = 0;
    serve_cmd->add_option("--deltas", deltas, "delta stream file")->required();
    serve_cmd->add_option("--port", port, "port (0 = ephemeral)");
    serve_cmd->add_option("--rate-ms", rate_ms, "pacing between timestamp groups");

    CLI11_PARSE(app, argc, argv);

    try {
        if (ntp_cmd->parsed()) return cmd_ntp(grid, deltas, ntp_mode, out, format);

        if (se_cmd->parsed()) {
            pipeline::PipelineConfig cfg;
            cfg.grid_path = grid;
            cfg.delta_path = deltas;
            cfg.stages = {.se = true, .pf = false, .ca = false};
            cfg.allow_warm = !se_cold;
            cfg.se_tol = se_tol;
            cfg.se_max_iter = se_max_iter;
            cfg.jobs = jobs;
            cfg.out_dir = out;

            auto gf = cime::load_grid_file(cfg.grid_path);
            auto meas_defs = gf.measurements;
            pipeline::Pipeline pipe(std::move(gf), cfg);
            pipeline::ReportWriter writer(out);
            int failures = 0;
            auto show = [&](const pipeline::SnapshotReport& r) {
                writer.append(r);
                failures += !r.errors.empty() || (r.se_ran && !r.se_converged);
                std::cout << "t=" << r.t << (r.topology_changed ? " [topo]" : "")
                          << " se_iters=" << r.se_iterations << " converged=" << r.se_converged
                          << "\n";
            };
            show(pipe.process_base());
            if (!cfg.delta_path.empty())
                for (const auto& d : cime::load_delta_file(cfg.delta_path))
                    show(pipe.process_delta(d));

            // Final estimated state plus residual statistics.
            if (const auto* est = pipe.last_estimate(); est && est->converged) {
                write_out(out, "se_state.csv", pipeline::state_csv(pipe.graph(), est->state));
                auto meas = se::resolve_measurements(pipe.graph(), meas_defs,
                                                     pipe.sequence().measurement_values());
                auto rr = se::residual_report(pipe.graph(), meas, *est);
                nlohmann::json j;
                j["converged"] = est->converged;
                j["iterations"] = est->iterations;
                j["gain_formulations"] = est->gain_formulations;
                j["gain_factorizations"] = est->gain_factorizations;
                j["sum_squared_weighted_residuals"] = rr.sum_squared_weighted;
                if (rr.largest_index >= 0) {
                    j["largest_normalized_residual"] = {
                        {"measurement", meas[rr.largest_index].id},
                        {"value", rr.normalized[rr.largest_index]}};
                }
                write_out(out, "se_result.json", j.dump(2));
            }
            return failures ? 2 : 0;
        }

        if (pf_cmd->parsed()) {
            ntp::BusIdRegistry reg;
            auto bb = load_and_ntp(grid, reg);
            auto sys = pf::build_decoupled(bb);
            pf::FdpfOptions opts;
            opts.tol = pf_tol;
            opts.max_half_iterations = pf_max_half;
            opts.jobs = jobs;
            auto res = pf::fdpf_solve(sys, bb, std::nullopt, opts);
            write_out(out, "state.csv", pipeline::state_csv(bb, res.state));
            write_out(out, "flows.csv", pipeline::flows_csv(bb, res.state));
            nlohmann::json j;
            j["converged"] = res.converged;
            j["p_half_iterations"] = res.p_half_iterations;
            j["q_half_iterations"] = res.q_half_iterations;
            j["timing"] = {{"Initialization", res.init_ms},
                           {"Symbolic Analysis", res.symbolic_ms},
                           {"Numerical Factorization", res.factor_ms},
                           {"Solve", res.solve_ms}};
            j["mismatch_history"] = res.mismatch_history;
            write_out(out, "pf_result.json", j.dump(2));
            if (!emit_meas.empty())
                cime::write_text_file(emit_meas, measurements_from_state(bb, res.state, 1));
            std::cout << "pf: converged=" << res.converged << " halves=("
                      << res.p_half_iterations << "P," << res.q_half_iterations << "Q) -> " << out
                      << "\n";
            return res.converged ? 0 : 2;
        }

        if (ca_cmd->parsed()) {
            ntp::BusIdRegistry reg;
            auto bb = load_and_ntp(grid, reg);
            auto base = ca::prepare_base(bb, {});
            ca::RunOptions opts;
            opts.scheme = scheme == "pcg" ? ca::Scheme::Pcg : ca::Scheme::Fdpf;
            opts.jobs = jobs;
            opts.reuse = !no_reuse;
            opts.include_generators = with_gens;
            opts.keep_states = false;
            auto rep = ca::run_all(bb, base, opts);
            write_out(out, "ca_cases.csv", pipeline::ca_report_csv(rep));
            write_out(out, "ca_report.json", pipeline::ca_report_json(rep));
            std::cout << "ca: " << rep.cases_run << " run, " << rep.cases_screened
                      << " screened, " << rep.not_converged << " alerts, symbolic passes "
                      << rep.symbolic_invocations << ", " << rep.total_wall_ms << " ms -> " << out
                      << "\n";
            return rep.not_converged == 0 ? 0 : 2;
        }

        if (run_cmd->parsed()) {
            pipeline::PipelineConfig cfg;
            cfg.grid_path = grid;
            cfg.delta_path = deltas;
            cfg.stages = {.se = true, .pf = true, .ca = run_ca};
            cfg.allow_warm = !run_cold;
            cfg.jobs = jobs;
            cfg.ca.jobs = jobs;
            cfg.ca.keep_states = false;
            cfg.out_dir = out;
            int failures = 0;
            auto reports = pipeline::run_pipeline(cfg, [&](const pipeline::SnapshotReport& r) {
                if (!r.errors.empty()) ++failures;
                std::cout << "t=" << r.t << (r.topology_changed ? " [topo]" : "      ")
                          << " ntp=" << r.ntp_ms << "ms se=" << r.se_ms << "ms pf=" << r.pf_ms
                          << "ms latency=" << r.latency_ms << "ms";
                for (const auto& e : r.errors) std::cout << " ERROR(" << e << ")";
                std::cout << "\n";
            });
            std::cout << reports.size() << " snapshots -> " << out << "\n";
            return failures ? 2 : 0;
        }

        if (bench_cmd->parsed()) {
            pipeline::PipelineConfig cfg;
            cfg.grid_path = grid;
            cfg.delta_path = deltas;
            cfg.stages = {.se = true, .pf = true, .ca = bench_ca};
            cfg.jobs = jobs;
            cfg.ca.jobs = jobs;
            auto sum = pipeline::bench(cfg, repeats);
            write_out(out, "bench.json", sum.to_json());
            std::cout << sum.to_json() << "\n";
            return 0;
        }

        if (serve_cmd->parsed()) {
            auto ds = cime::load_delta_file(deltas);
            cime::ReplayServer server(ds, rate_ms);
            int bound = server.start("127.0.0.1", port);
            std::cout << "serving " << ds.size() << " deltas on 127.0.0.1:" << bound << "\n";
            while (!server.finished())
                std::this_thread::sleep_for(std::chrono::milliseconds(50));
            std::cout << "stream complete (" << server.sessions_served() << " sessions)\n";
            return 0;
        }
    } catch (const ems::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        for (const auto& d : e.diagnostics) std::cerr << "  " << d.str() << "\n";
        return 1;
    } catch (const ems::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
