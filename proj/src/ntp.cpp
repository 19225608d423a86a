#include "ems/ntp.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace ems::ntp {

namespace {

struct Dsu {
    std::vector<int> parent;
    explicit Dsu(int n) : parent(n) {
        for (int i = 0; i < n; ++i) parent[i] = i;
    }
    int find(int v) {
        while (parent[v] != v) {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        return v;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

std::string fmt(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr - buf);
}

// Recomputes every device-derived attribute of a bus from its (sorted)
// member list, in member order so repeated builds sum identically.
void aggregate_bus_devices(model::Bus& bus, const model::NodeBreakerGraph& g) {
    bus.p_inj = bus.q_inj = bus.b_shunt = 0.0;
    bus.v_set = 0.0;
    bus.has_generator = false;
    bus.slack_candidate = false;
    bus.gen_units.clear();
    bool vset_from_slack = false;
    for (int dev_id : bus.devices) {
        const model::Device* d = g.find_device(dev_id);
        if (!d) throw ModelError("bus references unknown device " + std::to_string(dev_id));
        switch (d->kind) {
            case model::DeviceKind::Load:
                bus.p_inj -= d->p;
                bus.q_inj -= d->q;
                break;
            case model::DeviceKind::Generator:
                bus.p_inj += d->p;
                bus.q_inj += d->q;
                bus.has_generator = true;
                bus.gen_units.push_back({d->id, d->p, d->q, d->v_set, d->slack});
                if (d->slack) bus.slack_candidate = true;
                if (bus.gen_units.size() == 1 || (d->slack && !vset_from_slack)) {
                    bus.v_set = d->v_set;
                    vset_from_slack = d->slack;
                }
                break;
            case model::DeviceKind::Shunt:
                bus.b_shunt += d->b;
                break;
            default:
                break;
        }
    }
}

// Builds the buses of one substation from its terminal connectivity.
std::vector<model::Bus> substation_buses(const model::NodeBreakerGraph& g, int substation,
                                         BusIdRegistry& registry) {
    // Terminal node indexing local to this substation.
    struct TermRef {
        int device_idx;
        int terminal;
    };
    std::vector<TermRef> nodes;
    std::map<std::pair<int, int>, int> node_of;  // (device id, terminal) -> node
    for (std::size_t di = 0; di < g.devices.size(); ++di) {
        const auto& d = g.devices[di];
        if (d.substation != substation) continue;
        for (int t = 0; t < model::terminal_count(d.kind); ++t) {
            node_of[{d.id, t}] = static_cast<int>(nodes.size());
            nodes.push_back({static_cast<int>(di), t});
        }
    }

    Dsu dsu(static_cast<int>(nodes.size()));
    for (const auto& c : g.connections) {
        auto a = node_of.find({c.dev_a, c.term_a});
        if (a == node_of.end()) continue;  // connection belongs to another substation
        auto b = node_of.find({c.dev_b, c.term_b});
        dsu.unite(a->second, b->second);
    }
    for (const auto& [dev_id, status] : g.switch_status) {
        if (status != model::SwitchStatus::Closed) continue;
        auto a = node_of.find({dev_id, 0});
        if (a == node_of.end()) continue;
        dsu.unite(a->second, node_of.at({dev_id, 1}));
    }

    // Group terminals into components.
    std::map<int, std::vector<int>> comps;  // root -> node list
    for (int v = 0; v < static_cast<int>(nodes.size()); ++v) comps[dsu.find(v)].push_back(v);

    std::vector<model::Bus> buses;
    for (auto& [root, members] : comps) {
        (void)root;
        model::Bus bus;
        bus.substation = substation;

        std::set<int> member_devices;  // non-switch
        int key_busbar = -1;
        std::pair<int, int> key_any{-1, -1};
        for (int v : members) {
            const auto& d = g.devices[nodes[v].device_idx];
            if (key_any.first < 0 || std::pair{d.id, nodes[v].terminal} < key_any)
                key_any = {d.id, nodes[v].terminal};
            if (model::is_switch(d.kind)) continue;
            member_devices.insert(d.id);
            if (d.kind == model::DeviceKind::BusbarSection)
                key_busbar = key_busbar < 0 ? d.id : std::min(key_busbar, d.id);
        }
        if (key_busbar >= 0) {
            bus.key_device = key_busbar;
            bus.key_terminal = 0;
        } else if (!member_devices.empty()) {
            bus.key_device = *member_devices.begin();
            bus.key_terminal = 0;
        } else {
            bus.key_device = key_any.first;
            bus.key_terminal = key_any.second;
        }
        bus.id = registry.id_for(bus.key_device, bus.key_terminal);
        bus.devices.assign(member_devices.begin(), member_devices.end());
        aggregate_bus_devices(bus, g);
        bus.v = bus.has_generator && bus.v_set > 0 ? bus.v_set : 1.0;
        bus.theta = 0.0;
        buses.push_back(std::move(bus));
    }
    return buses;
}

void resolve_branches(const model::NodeBreakerGraph& g, model::BusBranchGraph& out) {
    out.branches.clear();
    for (const auto& l : g.links) {
        auto fit = out.device_to_bus.find(l.dev_from);
        auto tit = out.device_to_bus.find(l.dev_to);
        if (fit == out.device_to_bus.end() || tit == out.device_to_bus.end())
            throw ModelError("link " + std::to_string(l.id) + " endpoint not mapped to a bus");
        model::Branch br;
        br.id = l.id;
        br.from = fit->second;
        br.to = tit->second;
        br.r = l.r;
        br.x = l.x;
        br.b = l.b;
        br.tap = l.tap;
        br.rate = l.rate;
        br.in_service = l.in_service;
        out.branches.push_back(br);
    }
    std::sort(out.branches.begin(), out.branches.end(),
              [](const model::Branch& a, const model::Branch& b) { return a.id < b.id; });
}

void finalize(model::BusBranchGraph& out) {
    std::sort(out.buses.begin(), out.buses.end(),
              [](const model::Bus& a, const model::Bus& b) { return a.id < b.id; });
    out.device_to_bus.clear();
    for (const auto& bus : out.buses)
        for (int dev : bus.devices) out.device_to_bus[dev] = bus.id;
}

}  // namespace

int BusIdRegistry::id_for(int key_device, int key_terminal) {
    auto [it, inserted] = ids_.try_emplace({key_device, key_terminal}, next_id_);
    if (inserted) ++next_id_;
    return it->second;
}

int BusIdRegistry::peek(int key_device, int key_terminal) const {
    auto it = ids_.find({key_device, key_terminal});
    return it == ids_.end() ? -1 : it->second;
}

IslandInfo detect_islands(model::BusBranchGraph& g) {
    const int n = static_cast<int>(g.buses.size());
    Dsu dsu(n);
    for (const auto& br : g.branches) {
        if (!br.in_service) continue;
        dsu.unite(g.bus_index(br.from), g.bus_index(br.to));
    }

    std::map<int, std::vector<int>> comps;  // root -> bus positions
    for (int i = 0; i < n; ++i) comps[dsu.find(i)].push_back(i);

    IslandInfo info;
    for (auto& [root, members] : comps) {
        (void)root;
        IslandInfo::Island island;
        island.label = g.buses[members.front()].id;  // members ascend by position = by id
        for (int bi : members) {
            island.bus_ids.push_back(g.buses[bi].id);
            if (g.buses[bi].slack_candidate) island.energized = true;
        }
        // Slack: smallest slack-candidate bus id; bus types follow.
        for (int bi : members) {
            auto& bus = g.buses[bi];
            bus.island = island.label;
            bus.energized = island.energized;
            if (island.energized && island.slack_bus < 0 && bus.slack_candidate)
                island.slack_bus = bus.id;
        }
        for (int bi : members) {
            auto& bus = g.buses[bi];
            if (island.energized && bus.id == island.slack_bus)
                bus.type = model::BusType::Slack;
            else if (bus.has_generator)
                bus.type = model::BusType::PV;
            else
                bus.type = model::BusType::PQ;
        }
        info.islands.push_back(std::move(island));
    }
    return info;
}

model::BusBranchGraph full_ntp(const model::NodeBreakerGraph& g, BusIdRegistry& registry) {
    g.validate();
    model::BusBranchGraph out;

    // Keys are registered in substation-id order; a fresh registry thus
    // numbers buses deterministically by their anchor device.
    std::vector<int> sub_ids;
    for (const auto& s : g.substations) sub_ids.push_back(s.id);
    std::sort(sub_ids.begin(), sub_ids.end());
    for (int sid : sub_ids) {
        auto buses = substation_buses(g, sid, registry);
        for (auto& b : buses) out.buses.push_back(std::move(b));
    }

    finalize(out);
    resolve_branches(g, out);
    out.rebuild_adjacency();
    detect_islands(out);
    return out;
}

NtpResult incremental_ntp(const model::BusBranchGraph& prev, const model::NodeBreakerGraph& g,
                          const model::ChangeSet& changed, BusIdRegistry& registry) {
    // Consistency: every named switch must exist and live in a named
    // substation; otherwise rebuild from scratch.
    bool consistent = true;
    std::set<int> changed_subs(changed.substations.begin(), changed.substations.end());
    for (int sid : changed.substations) {
        bool found = false;
        for (const auto& s : g.substations) found |= s.id == sid;
        if (!found) consistent = false;
    }
    for (int dev_id : changed.switch_devices) {
        const model::Device* d = g.find_device(dev_id);
        if (!d || !model::is_switch(d->kind) || !changed_subs.count(d->substation))
            consistent = false;
    }

    NtpResult res;
    if (!consistent) {
        res.graph = full_ntp(g, registry);
        res.fell_back_to_full = true;
        res.topology_changed = canonical_signature(res.graph) != canonical_signature(prev);
        return res;
    }

    model::BusBranchGraph out;
    // Keep buses of untouched substations verbatim (ids, members, state).
    for (const auto& bus : prev.buses)
        if (!changed_subs.count(bus.substation)) out.buses.push_back(bus);
    // Rebuild the touched ones.
    for (int sid : changed.substations) {
        auto buses = substation_buses(g, sid, registry);
        for (auto& b : buses) out.buses.push_back(std::move(b));
    }

    finalize(out);

    // Refresh injection aggregates everywhere: device attributes may have
    // moved without any switch change.
    for (auto& bus : out.buses) aggregate_bus_devices(bus, g);

    resolve_branches(g, out);
    out.rebuild_adjacency();
    detect_islands(out);

    // Topology changed iff the bus partition or the branch set differs.
    auto partition_equal = [&] {
        if (prev.buses.size() != out.buses.size() || prev.branches.size() != out.branches.size())
            return false;
        for (std::size_t i = 0; i < out.buses.size(); ++i) {
            if (prev.buses[i].id != out.buses[i].id) return false;
            if (prev.buses[i].devices != out.buses[i].devices) return false;
        }
        for (std::size_t i = 0; i < out.branches.size(); ++i) {
            const auto& a = prev.branches[i];
            const auto& b = out.branches[i];
            if (a.id != b.id || a.from != b.from || a.to != b.to ||
                a.in_service != b.in_service)
                return false;
        }
        return true;
    };
    res.topology_changed = !partition_equal();

    // State carry-over: untouched buses kept their v/theta by copy; rebuilt
    // buses start flat (set in substation_buses).
    res.graph = std::move(out);
    return res;
}

std::string canonical_signature(const model::BusBranchGraph& g) {
    // Canonical bus order: by member-device id set, pure-switch buses by
    // their key terminal.
    std::vector<int> order(g.buses.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    auto bus_key = [&](int i) {
        const auto& b = g.buses[i];
        return std::tuple<const std::vector<int>&, int, int>(b.devices, b.key_device,
                                                             b.key_terminal);
    };
    std::sort(order.begin(), order.end(), [&](int a, int b) { return bus_key(a) < bus_key(b); });

    std::vector<int> canon_pos(g.buses.size());
    for (std::size_t p = 0; p < order.size(); ++p) canon_pos[order[p]] = static_cast<int>(p);

    // Island labels normalized to the canonical position of the smallest
    // member bus.
    std::map<int, int> island_canon;
    for (std::size_t i = 0; i < g.buses.size(); ++i) {
        int lbl = g.buses[i].island;
        auto it = island_canon.find(lbl);
        int pos = canon_pos[i];
        if (it == island_canon.end() || pos < it->second) island_canon[lbl] = pos;
    }

    std::ostringstream os;
    for (int i : order) {
        const auto& b = g.buses[i];
        os << "bus";
        for (int d : b.devices) os << " " << d;
        if (b.devices.empty()) os << " @" << b.key_device << ":" << b.key_terminal;
        os << " | sub=" << b.substation << " type=" << model::to_string(b.type)
           << " p=" << fmt(b.p_inj) << " q=" << fmt(b.q_inj) << " bsh=" << fmt(b.b_shunt)
           << " vset=" << fmt(b.v_set) << " gen=" << b.has_generator
           << " slackc=" << b.slack_candidate << " island=" << island_canon.at(b.island)
           << " energized=" << b.energized << "\n";
    }
    auto branches = g.branches;
    std::sort(branches.begin(), branches.end(),
              [](const model::Branch& a, const model::Branch& b) { return a.id < b.id; });
    for (const auto& br : branches) {
        os << "branch " << br.id << " " << canon_pos[g.bus_index(br.from)] << "->"
           << canon_pos[g.bus_index(br.to)] << " r=" << fmt(br.r) << " x=" << fmt(br.x)
           << " b=" << fmt(br.b) << " tap=" << fmt(br.tap) << " rate=" << fmt(br.rate)
           << " svc=" << br.in_service << "\n";
    }
    return os.str();
}

}  // namespace ems::ntp
