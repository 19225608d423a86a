#pragma once

#include <complex>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ems/errors.hpp"

namespace ems::model {

enum class DeviceKind {
    BusbarSection,
    CircuitBreaker,
    Disconnector,
    Load,
    Generator,
    TransformerWinding,
    LineTerminal,
    Shunt,
};

const char* to_string(DeviceKind k);
std::optional<DeviceKind> device_kind_from(const std::string& token);
int terminal_count(DeviceKind k);  // 2 for switches, 1 otherwise
bool is_switch(DeviceKind k);

enum class SwitchStatus { Open, Closed };

struct Substation {
    int id = 0;
    std::string name;
};

// One physical device. The electrical attributes are meaningful only for
// the matching kinds (p/q for loads and generators, v_set/slack for
// generators, b for shunts) and stay zero elsewhere.
struct Device {
    int id = 0;
    int substation = 0;
    DeviceKind kind = DeviceKind::BusbarSection;
    double p = 0.0;      // per-unit; load = consumption, generator = output
    double q = 0.0;
    double v_set = 0.0;  // generator voltage setpoint
    bool slack = false;  // generator may anchor an island's reference
    double b = 0.0;      // shunt susceptance
};

// Zero-impedance tie between two device terminals inside one substation.
struct Connection {
    int dev_a = 0;
    int term_a = 0;
    int dev_b = 0;
    int term_b = 0;
};

// Inter-substation branch (line, or transformer when tap != 1). Endpoints
// are LineTerminal / TransformerWinding devices in distinct substations.
struct LineLink {
    int id = 0;
    int dev_from = 0;
    int dev_to = 0;
    double r = 0.0;
    double x = 0.0;
    double b = 0.0;    // total line charging
    double tap = 1.0;  // from-side ratio
    double rate = 0.0; // flow limit in pu, 0 = unlimited
    bool in_service = true;
};

struct NodeBreakerGraph {
    double mva_base = 100.0;
    std::vector<Substation> substations;
    std::vector<Device> devices;
    std::vector<Connection> connections;
    std::vector<LineLink> links;
    std::map<int, SwitchStatus> switch_status;  // per breaker/disconnector

    const Device* find_device(int id) const;
    const LineLink* find_link(int id) const;
    void validate() const;  // throws ModelError
};

enum class BusType { Slack, PV, PQ };

const char* to_string(BusType t);

// Generator attached to a bus, kept for per-unit outage studies.
struct GenUnit {
    int device = 0;
    double p = 0.0;
    double q = 0.0;
    double v_set = 0.0;
    bool slack = false;
};

struct Bus {
    int id = 0;
    BusType type = BusType::PQ;
    double v = 1.0;        // start / last-solved magnitude, per-unit
    double theta = 0.0;    // radians
    double p_inj = 0.0;    // scheduled net injection (gen - load)
    double q_inj = 0.0;
    double b_shunt = 0.0;
    double v_set = 0.0;    // setpoint when a generator is attached
    bool has_generator = false;
    bool slack_candidate = false;  // hosts a slack-designated generator
    std::vector<GenUnit> gen_units;  // sorted by device id
    std::vector<int> devices;      // member node-breaker device ids, sorted
    int island = -1;               // label = smallest bus id in the island
    bool energized = false;
    int substation = 0;            // provenance: components never span substations
    int key_device = 0;            // registry key (see ntp::BusIdRegistry)
    int key_terminal = 0;
};

struct Branch {
    int id = 0;
    int from = 0;  // bus ids
    int to = 0;
    double r = 0.0;
    double x = 0.0;
    double b = 0.0;
    double tap = 1.0;
    double rate = 0.0;
    bool in_service = true;
};

struct BusBranchGraph {
    std::vector<Bus> buses;        // sorted by id
    std::vector<Branch> branches;  // sorted by id
    std::vector<std::vector<int>> adjacency;  // bus position -> branch positions
    std::map<int, int> device_to_bus;         // non-switch device id -> bus id

    int bus_index(int bus_id) const;      // -1 if absent
    int branch_index(int branch_id) const;
    void rebuild_adjacency();
    void validate() const;
};

// Complex nodal admittance laid out on the graph: per-bus self terms plus
// one mutual pair per in-service branch (parallel branches keep separate
// entries, so Y_ij for a pair is the sum over its entries).
struct Admittance {
    struct Mutual {
        int from = 0;  // bus positions
        int to = 0;
        std::complex<double> y_ft;
        std::complex<double> y_tf;
        int branch = 0;  // branch position
    };
    std::vector<std::complex<double>> diag;  // by bus position
    std::vector<Mutual> mutual;
};

Admittance build_admittance(const BusBranchGraph& g);

// Per-branch pi-model terms: S_from = V_f conj(y_ff V_f + y_ft V_t), etc.
struct BranchAdmittance {
    std::complex<double> y_ff, y_ft, y_tf, y_tt;
};
BranchAdmittance branch_admittance(const Branch& br);

struct SnapshotDelta {
    std::int64_t t = 0;
    std::vector<std::pair<int, SwitchStatus>> switch_changes;     // device id
    std::vector<std::pair<int, double>> measurement_updates;      // measurement id
    struct Injection {
        int device = 0;
        double p = 0.0;
        std::optional<double> q;
    };
    std::vector<Injection> injection_updates;

    bool empty() const {
        return switch_changes.empty() && measurement_updates.empty() && injection_updates.empty();
    }
};

// Substations touched by switch changes in one committed delta; drives the
// incremental topology rebuild.
struct ChangeSet {
    std::vector<int> substations;     // sorted, unique
    std::vector<int> switch_devices;  // switches whose status actually changed
    bool empty() const { return substations.empty(); }
};

// The temporal sequence: base model plus ordered deltas, with the head
// model maintained incrementally. Committed snapshots are immutable;
// apply_delta is the single writer.
class EvolvingSequence {
  public:
    EvolvingSequence() = default;
    explicit EvolvingSequence(NodeBreakerGraph base,
                              std::map<int, double> initial_measurements = {});

    // Validates every referenced id before mutating anything; on error the
    // sequence is unchanged. Returns the change-set for the NTP.
    ChangeSet apply_delta(const SnapshotDelta& d);

    const NodeBreakerGraph& head() const { return head_; }
    const NodeBreakerGraph& base() const { return base_; }
    std::int64_t head_time() const { return head_t_; }
    const std::vector<SnapshotDelta>& deltas() const { return deltas_; }
    const std::map<int, double>& measurement_values() const { return measurements_; }

    // Recomputes the head from the base by replaying all deltas; used as
    // an independent cross-check of the incremental path.
    NodeBreakerGraph replay_head() const;

  private:
    NodeBreakerGraph base_;
    NodeBreakerGraph head_;
    std::vector<SnapshotDelta> deltas_;
    std::map<int, double> measurements_;
    std::int64_t head_t_ = 0;
};

}  // namespace ems::model
