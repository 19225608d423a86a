#include <algorithm>
#include <map>
#include <set>

#include "cases.hpp"
#include "doctest.h"
#include "ems/cime_io.hpp"
#include "ems/ntp.hpp"
#include "ems/timing.hpp"
#include "oracles.hpp"

using namespace ems;
using namespace ems::cime;

namespace {

const char* kSmallGrid = R"(# two substations, one line
<HEADER>
version 1
mva_base 100

<SUBSTATION>
1 West
2 East

<DEVICE>
101 1 busbar
102 1 busbar
110 1 breaker
120 1 load 0.4 0.1
130 1 generator 1.2 1.02 1
140 1 line_term
201 2 busbar
220 2 load 0.7 0.25
240 2 line_term

<CONNECTION>
110 0 101 0
110 1 102 0
120 0 101 0
130 0 101 0
140 0 102 0
220 0 201 0
240 0 201 0

<SWITCH>
110 closed

<LINK>
1 140 240 0.02 0.08 0.01 1 0

<MEASUREMENT>
1 v 101 0.004 1.02
2 p_flow 1 from 0.01 0.69
)";

}  // namespace

TEST_CASE("parse_grid: small fixture parses and validates") {
    auto gf = parse_grid(kSmallGrid);
    CHECK(gf.graph.substations.size() == 2);
    CHECK(gf.graph.devices.size() == 9);
    CHECK(gf.graph.links.size() == 1);
    CHECK(gf.measurements.size() == 2);
    CHECK(gf.measurements[1].kind == MeasKind::PFlow);
    CHECK(gf.graph.mva_base == 100.0);
    auto vals = gf.initial_measurement_values();
    CHECK(vals.at(1) == 1.02);
}

TEST_CASE("parse_grid: empty substation list yields a valid empty graph") {
    auto gf = parse_grid("<HEADER>\nversion 1\nmva_base 100\n\n<SUBSTATION>\n");
    CHECK(gf.graph.substations.empty());
    CHECK(gf.graph.devices.empty());
}

TEST_CASE("parse_grid: duplicate device id names both lines") {
    std::string text = "<SUBSTATION>\n1 A\n<DEVICE>\n5 1 busbar\n5 1 busbar\n";
    try {
        parse_grid(text);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        REQUIRE(!e.diagnostics.empty());
        const auto& d = e.diagnostics.back();
        CHECK(d.line == 5);
        CHECK(d.message.find("5") != std::string::npos);
        CHECK(d.message.find("line 4") != std::string::npos);
    }
}

TEST_CASE("parse_grid: syntax errors are collected, not just the first") {
    std::string text = "<SUBSTATION>\n1 A\n<DEVICE>\nxx 1 busbar\n6 1 nosuchkind\n7 1 load 0.1\n";
    try {
        parse_grid(text);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.diagnostics.size() == 3);
        for (const auto& d : e.diagnostics) {
            CHECK(d.line > 0);
            CHECK(d.column > 0);
        }
    }
}

TEST_CASE("parse_grid: record outside any section is an error") {
    CHECK_THROWS_AS(parse_grid("1 2 3\n"), ParseError);
    CHECK_THROWS_AS(parse_grid("<NOSECTION>\n1 2\n"), ParseError);
}

TEST_CASE("parse_grid: semantic checks catch dangling references") {
    CHECK_THROWS_AS(parse_grid("<DEVICE>\n5 9 busbar\n"), ParseError);  // unknown substation
    CHECK_THROWS_AS(
        parse_grid("<SUBSTATION>\n1 A\n<DEVICE>\n5 1 busbar\n<CONNECTION>\n5 0 6 0\n"),
        ParseError);  // unknown device
    CHECK_THROWS_AS(
        parse_grid("<SUBSTATION>\n1 A\n<DEVICE>\n5 1 busbar\n<CONNECTION>\n5 1 5 0\n"),
        ParseError);  // no terminal 1 on a busbar
    CHECK_THROWS_AS(parse_grid("<SUBSTATION>\n1 A\n<DEVICE>\n5 1 breaker\n"),
                    ParseError);  // switch without status
    CHECK_THROWS_AS(parse_grid("<SUBSTATION>\n1 A\n<MEASUREMENT>\n1 v 7 0.01\n"),
                    ParseError);  // unknown device
    CHECK_THROWS_AS(
        parse_grid("<SUBSTATION>\n1 A\n<DEVICE>\n5 1 busbar\n<MEASUREMENT>\n1 v 5 -0.01\n"),
        ParseError);  // sigma <= 0
}

TEST_CASE("round-trip: serialize(parse(f)) reparses structurally identical") {
    auto check_roundtrip = [](const GridFile& gf) {
        auto text = serialize_grid(gf);
        auto back = parse_grid(text);
        CHECK(ntp::canonical_signature(cases::bus_branch(back.graph)) ==
              ntp::canonical_signature(cases::bus_branch(gf.graph)));
        CHECK(serialize_grid(back) == text);  // idempotent canonical form
        REQUIRE(back.measurements.size() == gf.measurements.size());
    };

    check_roundtrip(parse_grid(kSmallGrid));

    GridFile y;
    y.graph = cases::make_switchyard(10, 33);
    check_roundtrip(y);

    GridFile i14;
    i14.graph = cases::ieee14();
    check_roundtrip(i14);
}

TEST_CASE("parse_delta_stream: empty stream, grouping, and errors") {
    CHECK(parse_delta_stream("").empty());
    CHECK(parse_delta_stream("# only a comment\n").empty());

    auto ds = parse_delta_stream("5 SWITCH 110 open\n5 MEAS 1 1.01\n7 INJ 120 0.5 0.2\n");
    REQUIRE(ds.size() == 2);
    CHECK(ds[0].t == 5);
    CHECK(ds[0].switch_changes.size() == 1);
    CHECK(ds[0].measurement_updates.size() == 1);
    CHECK(ds[1].t == 7);
    REQUIRE(ds[1].injection_updates.size() == 1);
    CHECK(ds[1].injection_updates[0].q.has_value());

    try {
        parse_delta_stream("5 SWITCH 110 open\n3 MEAS 1 1.0\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        REQUIRE(!e.diagnostics.empty());
        CHECK(e.diagnostics[0].message.find("3") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_delta_stream("5 BOGUS 1 2\n"), ParseError);
    CHECK_THROWS_AS(parse_delta_stream("5 SWITCH 110 maybe\n"), ParseError);
    CHECK_THROWS_AS(parse_delta_stream("notanumber SWITCH 110 open\n"), ParseError);
}

TEST_CASE("parse_delta_stream: 10k-record fuzz grouping matches a two-pass oracle") {
    oracle::Rng rng(606);
    std::string text;
    std::vector<std::pair<std::int64_t, int>> expected;  // (t, record count)
    std::map<std::int64_t, int> naive;
    std::int64_t t = 0;
    for (int i = 0; i < 10000; ++i) {
        if (rng.pick(3) == 0) t += 1 + rng.pick(10);
        const int kind = rng.pick(3);
        const int id = 100 + rng.pick(50);
        if (kind == 0)
            text += std::to_string(t) + " SWITCH " + std::to_string(id) +
                    (rng.pick(2) ? " open\n" : " closed\n");
        else if (kind == 1)
            text += std::to_string(t) + " MEAS " + std::to_string(id) + " 1.01\n";
        else
            text += std::to_string(t) + " INJ " + std::to_string(id) + " 0.4\n";
        naive[t] += 1;
    }
    auto ds = parse_delta_stream(text);
    REQUIRE(ds.size() == naive.size());
    std::size_t gi = 0;
    for (const auto& [gt, count] : naive) {
        CHECK(ds[gi].t == gt);
        const int actual = static_cast<int>(ds[gi].switch_changes.size() +
                                            ds[gi].measurement_updates.size() +
                                            ds[gi].injection_updates.size());
        CHECK(actual == count);
        ++gi;
    }
    (void)expected;

    // Serialize -> reparse is stable.
    auto text2 = serialize_deltas(ds);
    auto ds2 = parse_delta_stream(text2);
    CHECK(serialize_deltas(ds2) == text2);
}

TEST_CASE("fuzzed inputs produce structured errors, never crashes") {
    oracle::Rng rng(808);
    const std::string base_grid = kSmallGrid;
    const std::string base_deltas = "5 SWITCH 110 open\n5 MEAS 1 1.01\n7 INJ 120 0.5 0.2\n";
    int parsed_ok = 0, rejected = 0;
    for (int i = 0; i < 3000; ++i) {
        std::string mutated = rng.pick(2) ? base_grid : base_deltas;
        const int flips = 1 + rng.pick(6);
        for (int f = 0; f < flips; ++f) {
            if (mutated.empty()) break;
            const int pos = rng.pick(static_cast<int>(mutated.size()));
            switch (rng.pick(3)) {
                case 0: mutated[pos] = static_cast<char>(rng.pick(256)); break;
                case 1: mutated.erase(pos, 1 + rng.pick(4)); break;
                default: mutated.insert(pos, 1, static_cast<char>(32 + rng.pick(95))); break;
            }
        }
        try {
            if (mutated.find("<") != std::string::npos) {
                parse_grid(mutated);
            } else {
                parse_delta_stream(mutated);
            }
            ++parsed_ok;
        } catch (const ParseError&) {
            ++rejected;
        } catch (const ModelError&) {
            ++rejected;
        }
    }
    CHECK(parsed_ok + rejected == 3000);
    CHECK(rejected > 0);
}

TEST_CASE("replay: loopback round-trip preserves the delta sequence") {
    auto deltas = parse_delta_stream(
        "5 SWITCH 110 open\n5 MEAS 1 1.01\n7 INJ 120 0.5 0.2\n9 MEAS 2 0.99\n");
    ReplayServer server(deltas, 0);  // rate = max, no pacing
    const int port = server.start();

    ReplayClient client("127.0.0.1", port);
    CHECK(client.consume_session());
    CHECK(client.complete());
    auto received = client.deltas();
    CHECK(serialize_deltas(received) == serialize_deltas(deltas));
    CHECK(server.sessions_served() == 1);
    server.stop();
}

TEST_CASE("replay: byte-identical lines on the wire") {
    auto deltas = parse_delta_stream("1 MEAS 1 1.0151\n2 MEAS 2 -0.25\n3 SWITCH 110 closed\n");
    ReplayServer server(deltas, 0);
    const int port = server.start();
    ReplayClient client("127.0.0.1", port);
    REQUIRE(client.consume_session());
    std::string wire;
    for (const auto& l : client.committed_lines()) wire += l + "\n";
    CHECK(wire == serialize_deltas(deltas));
    server.stop();
}

TEST_CASE("replay: disconnect mid-group never leaves a partial group") {
    // Groups with several records each so a byte budget cuts one in half.
    std::string text;
    for (int t = 1; t <= 6; ++t)
        for (int r = 0; r < 5; ++r)
            text += std::to_string(10 * t) + " MEAS " + std::to_string(r) + " 1.0\n";
    auto deltas = parse_delta_stream(text);

    ReplayServer server(deltas, 0);
    const int port = server.start();
    ReplayClient client("127.0.0.1", port);

    // Abort sessions after ever-larger byte budgets until completion.
    long budget = 37;
    int sessions = 1;
    while (!client.consume_session(budget)) {
        budget += 41;
        ++sessions;
        REQUIRE(sessions < 100);

        // Committed prefix is always whole groups with monotone t.
        std::int64_t last_t = -1;
        std::map<std::int64_t, int> counts;
        for (const auto& line : client.committed_lines()) {
            std::int64_t t = std::stoll(line.substr(0, line.find(' ')));
            CHECK(t >= last_t);
            last_t = std::max(last_t, t);
            counts[t]++;
        }
        for (const auto& [t, c] : counts) {
            (void)t;
            CHECK(c == 5);  // never a partial group
        }
    }
    CHECK(client.deltas().size() == deltas.size());
    CHECK(serialize_deltas(client.deltas()) == serialize_deltas(deltas));
    CHECK(server.sessions_served() == sessions);
    server.stop();
}

TEST_CASE("measurements: '-' sigma picks the per-kind default") {
    auto gf = parse_grid(
        "<SUBSTATION>\n1 A\n<DEVICE>\n5 1 busbar\n"
        "<MEASUREMENT>\n1 v 5 - 1.01\n2 p_inj 5 -\n");
    REQUIRE(gf.measurements.size() == 2);
    CHECK(gf.measurements[0].sigma == 0.004);
    CHECK(gf.measurements[1].sigma == 0.01);
    CHECK(gf.measurements[0].value == 1.01);
}

TEST_CASE("replay: bind failure raises a structured error") {
    ReplayServer server({}, 0);
    CHECK_THROWS_AS(server.start("256.256.1.1", 0), ems::IoError);
    ReplayServer server2({}, 0);
    CHECK_THROWS_AS(server2.start("8.8.8.8", 1), ems::IoError);  // not a local address
}

TEST_CASE("replay: pacing delays are honored loosely") {
    auto deltas = parse_delta_stream("1 MEAS 1 1\n2 MEAS 1 2\n3 MEAS 1 3\n");
    ReplayServer server(deltas, 20);
    const int port = server.start();
    ReplayClient client("127.0.0.1", port);
    Stopwatch sw;
    REQUIRE(client.consume_session());
    CHECK(sw.ms() >= 35.0);  // two inter-group gaps of ~20ms
    server.stop();
}
