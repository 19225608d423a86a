#pragma once

#include <map>
#include <string>
#include <vector>

#include "ems/grid_model.hpp"

namespace ems::ntp {

// Persistent bus numbering across snapshots. A component is keyed by its
// smallest busbar-section device id (falling back to the smallest member
// device id, then to a switch terminal for pure-switch junctions); a key
// keeps the bus id it was first assigned for as long as the sequence lives.
class BusIdRegistry {
  public:
    int id_for(int key_device, int key_terminal);
    int peek(int key_device, int key_terminal) const;  // -1 if unknown

  private:
    std::map<std::pair<int, int>, int> ids_;
    int next_id_ = 1;
};

struct IslandInfo {
    struct Island {
        int label = 0;  // smallest bus id in the island
        std::vector<int> bus_ids;
        bool energized = false;
        int slack_bus = -1;  // -1 when de-energized
    };
    std::vector<Island> islands;
};

// Labels islands over in-service branches, marks energization (an island
// is energized iff it holds a slack-designated generator) and assigns bus
// types: the island slack, PV for generator buses, PQ otherwise.
IslandInfo detect_islands(model::BusBranchGraph& g);

// Full rebuild: bus = connected component of device terminals over closed
// switches and intra-substation connections; links become branches; loads,
// generators and shunts aggregate onto their bus.
model::BusBranchGraph full_ntp(const model::NodeBreakerGraph& g, BusIdRegistry& registry);

struct NtpResult {
    model::BusBranchGraph graph;
    bool topology_changed = false;
    bool fell_back_to_full = false;  // inconsistent change-set
};

// Recomputes the bus partition only inside substations named in `changed`;
// every other bus keeps its id and attributes. Output is canonically equal
// to full_ntp(g). An inconsistent change-set falls back to a full rebuild.
NtpResult incremental_ntp(const model::BusBranchGraph& prev, const model::NodeBreakerGraph& g,
                          const model::ChangeSet& changed, BusIdRegistry& registry);

// Text signature ordering buses by their member-device id sets; two graphs
// are canonically equal iff their signatures match byte for byte. Solved
// state fields (v, theta) are excluded, bus ids are replaced by canonical
// positions.
std::string canonical_signature(const model::BusBranchGraph& g);

}  // namespace ems::ntp
