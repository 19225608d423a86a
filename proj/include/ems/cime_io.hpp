#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ems/errors.hpp"
#include "ems/grid_model.hpp"

namespace ems::cime {

enum class MeasKind { VoltageMag, PInjection, QInjection, PFlow, QFlow };

const char* to_string(MeasKind k);
std::optional<MeasKind> meas_kind_from(const std::string& token);

// Declared in the grid file; values arrive with the delta stream (an
// optional inline value seeds the base snapshot).
struct MeasurementDef {
    int id = 0;
    MeasKind kind = MeasKind::VoltageMag;
    int device = -1;   // bus-located kinds: any non-switch device on the bus
    int branch = -1;   // flow kinds: link id
    bool at_from = true;
    double sigma = 0.01;
    std::optional<double> value;
};

struct GridFile {
    int version = 1;
    model::NodeBreakerGraph graph;
    std::vector<MeasurementDef> measurements;

    std::map<int, double> initial_measurement_values() const;
};

// Line-oriented grid description: `<TABLE>` section headers followed by
// whitespace-separated records (grammar in the README). Syntax errors are
// collected per section and reported together; the first semantic error
// stops the parse. All failures raise ParseError carrying diagnostics with
// line/column positions.
GridFile parse_grid(const std::string& text);

// Canonical text form; parse(serialize(parse(f))) is structurally
// identical to parse(f). Numbers print as shortest round-trippable
// decimals.
std::string serialize_grid(const GridFile& gf);

// One record per line: `t SWITCH id open|closed`, `t MEAS id value`,
// `t INJ id p [q]`. Records sharing a timestamp form one delta; t must be
// non-decreasing.
std::vector<model::SnapshotDelta> parse_delta_stream(const std::string& text);
std::string serialize_deltas(const std::vector<model::SnapshotDelta>& deltas);
std::string serialize_delta_group(const model::SnapshotDelta& d);

GridFile load_grid_file(const std::string& path);
std::vector<model::SnapshotDelta> load_delta_file(const std::string& path);

// Replays a delta stream over a loopback/TCP socket, one client session at
// a time, flushing whole timestamp groups and finishing with an END line.
// Each session opens with a `RESUME <t>` line from the client; the server
// replays every group newer than t, so a session cut mid-group re-delivers
// that group in full on reconnect and the server never has to guess how
// much of a write actually arrived.
class ReplayServer {
  public:
    ReplayServer(std::vector<model::SnapshotDelta> deltas, int pace_ms = 0);
    ~ReplayServer();

    // Binds host:port (port 0 picks an ephemeral one), spawns the serving
    // thread and returns the bound port.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    void stop();
    bool finished() const;  // a client consumed END and closed cleanly
    int sessions_served() const;

  private:
    void run();

    std::vector<std::pair<std::int64_t, std::string>> groups_;  // (t, payload)
    int pace_ms_ = 0;
    int listen_fd_ = -1;
    std::thread thread_;
    std::atomic<bool> stop_{false};
    std::atomic<bool> done_{false};
    std::atomic<int> sessions_{0};
};

// Consumes a replay stream with commit-on-group-boundary semantics: a
// timestamp group becomes visible only once the next group (or END)
// arrives, so an interrupted session never leaves a partial group behind.
// Re-sent groups are dropped by timestamp monotonicity.
class ReplayClient {
  public:
    ReplayClient(std::string host, int port);

    // Runs one session. byte_limit >= 0 aborts the connection after that
    // many received bytes (fault injection). Returns true once END was
    // seen and the final group committed.
    bool consume_session(long byte_limit = -1);

    bool complete() const { return complete_; }
    const std::vector<std::string>& committed_lines() const { return committed_; }
    std::vector<model::SnapshotDelta> deltas() const;

  private:
    void commit_pending();

    std::string host_;
    int port_ = 0;
    std::vector<std::string> committed_;
    std::vector<std::string> pending_;
    std::int64_t pending_t_ = 0;
    std::int64_t last_committed_t_ = -1;
    bool have_pending_ = false;
    bool complete_ = false;
};

// Small file-emission helpers shared by the report writers.
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace ems::cime
