#include <cstdlib>
#include <filesystem>
#include <set>

#include "cases.hpp"
#include "doctest.h"
#include "ems/cime_io.hpp"
#include "ems/pipeline.hpp"
#include "oracles.hpp"

using namespace ems;
using namespace ems::pipeline;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("ems_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// A measured grid file: IEEE 14 with V/P/Q measurements generated from the
// solved state.
cime::GridFile measured_ieee14() {
    cime::GridFile gf;
    gf.graph = cases::ieee14();
    auto bb = cases::bus_branch(gf.graph);
    auto nr = oracle::newton_power_flow(bb);
    auto y = oracle::dense_admittance(bb);
    const int n = static_cast<int>(bb.buses.size());
    int id = 1;
    for (int i = 0; i < n; ++i) {
        std::complex<double> vi = std::polar(nr.state.v[i], nr.state.theta[i]);
        std::complex<double> acc{0.0, 0.0};
        for (int j = 0; j < n; ++j)
            acc += y[static_cast<std::size_t>(i) * n + j] *
                   std::polar(nr.state.v[j], nr.state.theta[j]);
        auto s = vi * std::conj(acc);
        const int busbar = bb.buses[i].id;  // busbar device id = bus id
        cime::MeasurementDef v{id++, cime::MeasKind::VoltageMag, busbar, -1, true, 0.004,
                               nr.state.v[i]};
        cime::MeasurementDef p{id++, cime::MeasKind::PInjection, busbar, -1, true, 0.01,
                               s.real()};
        cime::MeasurementDef q{id++, cime::MeasKind::QInjection, busbar, -1, true, 0.01,
                               s.imag()};
        gf.measurements.push_back(v);
        gf.measurements.push_back(p);
        gf.measurements.push_back(q);
    }
    return gf;
}

PipelineConfig file_config(const TempDir& dir, const cime::GridFile& gf,
                           const std::string& deltas_text) {
    PipelineConfig cfg;
    cfg.grid_path = dir.file("grid.gride");
    cime::write_text_file(cfg.grid_path, cime::serialize_grid(gf));
    if (!deltas_text.empty()) {
        cfg.delta_path = dir.file("stream.deltas");
        cime::write_text_file(cfg.delta_path, deltas_text);
    }
    return cfg;
}

}  // namespace

TEST_CASE("pipeline: one empty-ish delta rides the warm path") {
    TempDir dir;
    auto cfg = file_config(dir, measured_ieee14(), "100 MEAS 1 1.0601\n");
    auto reports = run_pipeline(cfg);
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].is_base);
    CHECK(reports[0].topology_changed);
    CHECK(reports[0].se_gain_formulations >= 1);
    CHECK(!reports[1].topology_changed);
    CHECK(reports[1].se_ran);
    CHECK(reports[1].se_converged);
    CHECK(reports[1].se_gain_formulations == 0);
    CHECK(reports[1].se_gain_factorizations == 0);
    CHECK(reports[1].se_iterations <= reports[0].se_iterations);
    CHECK(reports[1].pf_converged);
    for (const auto& r : reports) CHECK(r.errors.empty());
}

TEST_CASE("pipeline: every snapshot's SE state matches an independent cold run") {
    TempDir dir;
    auto gf = measured_ieee14();

    // A stream of measurement drifts (multiplicative, well within SE
    // tolerance of the underlying state).
    oracle::Rng rng(99);
    std::string stream;
    std::vector<std::map<int, double>> values_at(21);
    std::map<int, double> current;
    for (const auto& m : gf.measurements) current[m.id] = *m.value;
    values_at[0] = current;
    for (int t = 1; t <= 20; ++t) {
        for (int k = 0; k < 5; ++k) {
            const int id = 1 + rng.pick(static_cast<int>(gf.measurements.size()));
            current[id] = *gf.measurements[id - 1].value * (1.0 + rng.uniform(-5e-4, 5e-4));
            stream += std::to_string(t * 100) + " MEAS " + std::to_string(id) + " " +
                      std::to_string(current[id]) + "\n";
        }
        values_at[t] = current;
    }
    auto cfg = file_config(dir, gf, stream);
    auto reports = run_pipeline(cfg);
    REQUIRE(reports.size() == 21);

    // Oracle: cold SE per snapshot from scratch.
    auto bb = cases::bus_branch(gf.graph);
    for (int t = 0; t <= 20; ++t) {
        CHECK(reports[t].se_converged);
        if (t > 0) {
            CHECK(reports[t].se_gain_formulations == 0);
            CHECK(!reports[t].topology_changed);
        }
    }
    // Spot-check the final snapshot against a cold estimate.
    {
        auto meas = se::resolve_measurements(bb, gf.measurements, values_at[20]);
        auto cold = se::estimate(bb, meas, {});
        REQUIRE(cold.converged);

        cime::GridFile gf2 = gf;
        Pipeline pipe(gf2, cfg);
        pipe.process_base();
        for (const auto& d : cime::load_delta_file(cfg.delta_path)) pipe.process_delta(d);
        const auto* last = pipe.last_estimate();
        REQUIRE(last != nullptr);
        for (std::size_t i = 0; i < bb.buses.size(); ++i) {
            CHECK(std::abs(last->state.v[i] - cold.state.v[i]) <= 1e-6);
            CHECK(std::abs(last->state.theta[i] - cold.state.theta[i]) <= 1e-6);
        }
    }
}

TEST_CASE("pipeline: 50-delta IEEE 118 stream tracks independent cold estimates") {
    TempDir dir;
    cime::GridFile gf;
    gf.graph = cases::ieee118();
    auto bb = cases::bus_branch(gf.graph);
    auto nr = oracle::newton_power_flow(bb);
    REQUIRE(nr.converged);

    // V/P/Q measurements at every bus, values from the solved state.
    auto y = oracle::dense_admittance(bb);
    const int n = static_cast<int>(bb.buses.size());
    int id = 0;
    for (int i = 0; i < n; ++i) {
        std::complex<double> vi = std::polar(nr.state.v[i], nr.state.theta[i]);
        std::complex<double> acc{0.0, 0.0};
        for (int j = 0; j < n; ++j)
            acc += y[static_cast<std::size_t>(i) * n + j] *
                   std::polar(nr.state.v[j], nr.state.theta[j]);
        auto s = vi * std::conj(acc);
        const int busbar = bb.buses[i].id;
        gf.measurements.push_back(
            {++id, cime::MeasKind::VoltageMag, busbar, -1, true, 0.004, nr.state.v[i]});
        gf.measurements.push_back(
            {++id, cime::MeasKind::PInjection, busbar, -1, true, 0.01, s.real()});
        gf.measurements.push_back(
            {++id, cime::MeasKind::QInjection, busbar, -1, true, 0.01, s.imag()});
    }

    oracle::Rng rng(2024);
    std::string stream;
    std::map<int, double> current;
    for (const auto& m : gf.measurements) current[m.id] = *m.value;
    std::vector<std::map<int, double>> values_at;
    values_at.push_back(current);
    for (int t = 1; t <= 50; ++t) {
        for (int k = 0; k < 8; ++k) {
            const int mid = 1 + rng.pick(id);
            current[mid] = *gf.measurements[mid - 1].value * (1.0 + rng.uniform(-4e-4, 4e-4));
            char buf[64];
            std::snprintf(buf, sizeof buf, "%d MEAS %d %.17g\n", t * 100, mid, current[mid]);
            stream += buf;
        }
        values_at.push_back(current);
    }
    auto cfg = file_config(dir, gf, stream);
    cfg.stages.pf = false;

    cime::GridFile gf_run = cime::parse_grid(cime::serialize_grid(gf));
    Pipeline pipe(gf_run, cfg);
    auto first = pipe.process_base();
    REQUIRE(first.se_converged);
    int t = 0;
    for (const auto& d : cime::load_delta_file(cfg.delta_path)) {
        auto rep = pipe.process_delta(d);
        ++t;
        REQUIRE(rep.se_converged);
        CHECK(rep.se_gain_formulations == 0);  // warm throughout

        auto meas = se::resolve_measurements(bb, gf.measurements, values_at[t]);
        auto cold = se::estimate(bb, meas, {});
        REQUIRE(cold.converged);
        const auto* warm = pipe.last_estimate();
        REQUIRE(warm != nullptr);
        for (int i = 0; i < n; ++i) {
            CHECK(std::abs(warm->state.v[i] - cold.state.v[i]) <= 1e-6);
            CHECK(std::abs(warm->state.theta[i] - cold.state.theta[i]) <= 1e-6);
        }
    }
    CHECK(t == 50);
}

TEST_CASE("pipeline: topology-changing delta forces the cold path") {
    TempDir dir;
    auto gf = measured_ieee14();
    // Append a breaker between two new busbar sections inside substation 1
    // so a switch toggle changes the bus partition.
    using namespace ems::model;
    gf.graph.devices.push_back({700, 1, DeviceKind::BusbarSection});
    gf.graph.devices.push_back({701, 1, DeviceKind::CircuitBreaker});
    gf.graph.connections.push_back({701, 0, 1, 0});
    gf.graph.connections.push_back({701, 1, 700, 0});
    gf.graph.switch_status[701] = SwitchStatus::Closed;

    auto cfg = file_config(dir, gf, "50 SWITCH 701 open\n60 MEAS 1 1.06\n");
    auto reports = run_pipeline(cfg);
    REQUIRE(reports.size() == 3);
    CHECK(reports[1].topology_changed);
    CHECK(reports[1].se_gain_formulations >= 1);  // cold path
    CHECK(reports[1].se_converged);
    CHECK(!reports[2].topology_changed);
    CHECK(reports[2].se_gain_formulations == 0);  // warm again
}

TEST_CASE("pipeline: a bad delta is reported and the run continues") {
    TempDir dir;
    auto cfg = file_config(dir, measured_ieee14(),
                           "10 MEAS 1 1.0601\n20 SWITCH 424242 open\n30 MEAS 1 1.0598\n");
    auto reports = run_pipeline(cfg);
    REQUIRE(reports.size() == 4);
    CHECK(reports[1].errors.empty());
    REQUIRE(!reports[2].errors.empty());
    CHECK(reports[2].errors[0].find("ntp") != std::string::npos);
    CHECK(reports[3].errors.empty());
    CHECK(reports[3].se_converged);  // committed state survived the bad delta
}

TEST_CASE("pipeline: end-to-end determinism of non-timing content") {
    TempDir dir;
    auto cfg = file_config(dir, measured_ieee14(),
                           "10 MEAS 2 2.3241\n20 MEAS 5 0.184\n30 INJ 10003 0.94 0.19\n");
    auto a = run_pipeline(cfg);
    auto b = run_pipeline(cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].t == b[i].t);
        CHECK(a[i].topology_changed == b[i].topology_changed);
        CHECK(a[i].se_iterations == b[i].se_iterations);
        CHECK(a[i].se_gain_formulations == b[i].se_gain_formulations);
        CHECK(a[i].pf_p_halves == b[i].pf_p_halves);
        CHECK(a[i].pf_q_halves == b[i].pf_q_halves);
        CHECK(a[i].errors == b[i].errors);
    }
}

TEST_CASE("pipeline: latency covers the enabled stage times") {
    TempDir dir;
    auto cfg = file_config(dir, measured_ieee14(), "10 MEAS 1 1.0601\n");
    for (const auto& r : run_pipeline(cfg)) {
        CHECK(r.ntp_ms >= 0.0);
        CHECK(r.latency_ms >= r.ntp_ms + r.se_ms + r.pf_ms + r.ca_ms - 1e-9);
    }
}

TEST_CASE("report emission: headers, blanks, and jsonl round-trip") {
    TempDir dir;

    SUBCASE("zero snapshots still produce valid files with headers") {
        emit_reports({}, dir.file("empty"));
        auto se_csv = cime::read_text_file(dir.file("empty") + "/timing_se.csv");
        auto pf_csv = cime::read_text_file(dir.file("empty") + "/timing_pf.csv");
        CHECK(se_csv == ReportWriter::se_csv_header() + "\n");
        CHECK(pf_csv == ReportWriter::pf_csv_header() + "\n");
        CHECK(cime::read_text_file(dir.file("empty") + "/reports.jsonl").empty());
    }

    SUBCASE("stage labels appear verbatim") {
        const std::string header = ReportWriter::se_csv_header();
        for (const char* label : {"Total", "Gain Formulation", "Gain LU", "Iterations",
                                  "RHS Update", "F/B Substitution", "State Update"})
            CHECK(header.find(label) != std::string::npos);
        const std::string pf_header = ReportWriter::pf_csv_header();
        for (const char* label :
             {"Initialization", "Symbolic Analysis", "Numerical Factorization", "Solve"})
            CHECK(pf_header.find(label) != std::string::npos);
    }

    SUBCASE("jsonl round-trips through the report parser") {
        auto cfg = file_config(dir, measured_ieee14(), "10 MEAS 1 1.0601\n20 MEAS 4 1.0447\n");
        cfg.out_dir = dir.file("out");
        auto reports = run_pipeline(cfg);
        auto text = cime::read_text_file(cfg.out_dir + "/reports.jsonl");
        auto parsed = parse_reports_jsonl(text);
        REQUIRE(parsed.size() == reports.size());
        for (std::size_t i = 0; i < parsed.size(); ++i) {
            CHECK(parsed[i].t == reports[i].t);
            CHECK(parsed[i].se_iterations == reports[i].se_iterations);
            CHECK(parsed[i].latency_ms == reports[i].latency_ms);
            CHECK(report_to_json(parsed[i]) == report_to_json(reports[i]));
        }
        // A warm snapshot leaves the gain columns blank in the CSV.
        auto se_csv = cime::read_text_file(cfg.out_dir + "/timing_se.csv");
        auto second_row = se_csv.substr(se_csv.find("\n10,") + 1);
        second_row.resize(second_row.find('\n'));
        CHECK(second_row.find("No Topology Change,") != std::string::npos);
        CHECK(second_row.find(",,") != std::string::npos);
    }
}

TEST_CASE("bench: repeats=1 equals the single run shape") {
    TempDir dir;
    auto cfg = file_config(dir, measured_ieee14(), "10 MEAS 1 1.0601\n20 MEAS 4 1.0447\n");
    auto sum = bench(cfg, 1);
    CHECK(sum.repeats == 1);
    CHECK(sum.snapshots == 3);
    CHECK(sum.cycle_ms.median > 0.0);
    CHECK(sum.se_iterations_cold_median >= sum.se_iterations_warm_median);
    CHECK(sum.ca_reuse_ratio == -1.0);  // CA disabled
    auto js = sum.to_json();
    CHECK(js.find("cycle") != std::string::npos);

    // With CA enabled the reuse sweep reports a ratio.
    cfg.stages.ca = true;
    cfg.ca.keep_states = false;
    auto sum2 = bench(cfg, 1, 2);
    CHECK(sum2.ca_reuse_ms > 0.0);
    CHECK(sum2.ca_no_reuse_ms > 0.0);
    CHECK(sum2.ca_reuse_ratio > 0.0);
}

#ifdef EMS_BINARY_PATH
TEST_CASE("cli: pf and run subcommands work against the shipped data file") {
    const std::string bin = EMS_BINARY_PATH;
    const std::string data = EMS_DATA_DIR;
    TempDir dir;
    std::string cmd = bin + " pf --grid " + data + "/ieee14.gride --out " + dir.file("pf") +
                      " > /dev/null 2>&1";
    CHECK(std::system(cmd.c_str()) == 0);
    CHECK(fs::exists(dir.file("pf") + "/state.csv"));
    CHECK(fs::exists(dir.file("pf") + "/flows.csv"));

    cmd = bin + " run --grid " + data + "/ieee14.gride --deltas " + data +
          "/demo.deltas --out " + dir.file("run") + " > /dev/null 2>&1";
    CHECK(std::system(cmd.c_str()) == 0);
    CHECK(fs::exists(dir.file("run") + "/reports.jsonl"));
    CHECK(fs::exists(dir.file("run") + "/timing_se.csv"));

    cmd = bin + " pf --grid " + data + "/nonexistent.gride > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(rc) == 1);  // fatal config/parse error
}
#endif
