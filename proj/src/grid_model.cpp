#include "ems/grid_model.hpp"

#include <algorithm>
#include <set>

namespace ems::model {

const char* to_string(DeviceKind k) {
    switch (k) {
        case DeviceKind::BusbarSection: return "busbar";
        case DeviceKind::CircuitBreaker: return "breaker";
        case DeviceKind::Disconnector: return "disconnector";
        case DeviceKind::Load: return "load";
        case DeviceKind::Generator: return "generator";
        case DeviceKind::TransformerWinding: return "xfmr_term";
        case DeviceKind::LineTerminal: return "line_term";
        case DeviceKind::Shunt: return "shunt";
    }
    return "?";
}

std::optional<DeviceKind> device_kind_from(const std::string& token) {
    if (token == "busbar") return DeviceKind::BusbarSection;
    if (token == "breaker") return DeviceKind::CircuitBreaker;
    if (token == "disconnector") return DeviceKind::Disconnector;
    if (token == "load") return DeviceKind::Load;
    if (token == "generator") return DeviceKind::Generator;
    if (token == "xfmr_term") return DeviceKind::TransformerWinding;
    if (token == "line_term") return DeviceKind::LineTerminal;
    if (token == "shunt") return DeviceKind::Shunt;
    return std::nullopt;
}

int terminal_count(DeviceKind k) {
    return is_switch(k) ? 2 : 1;
}

bool is_switch(DeviceKind k) {
    return k == DeviceKind::CircuitBreaker || k == DeviceKind::Disconnector;
}

const char* to_string(BusType t) {
    switch (t) {
        case BusType::Slack: return "slack";
        case BusType::PV: return "pv";
        case BusType::PQ: return "pq";
    }
    return "?";
}

const Device* NodeBreakerGraph::find_device(int id) const {
    for (const auto& d : devices)
        if (d.id == id) return &d;
    return nullptr;
}

const LineLink* NodeBreakerGraph::find_link(int id) const {
    for (const auto& l : links)
        if (l.id == id) return &l;
    return nullptr;
}

void NodeBreakerGraph::validate() const {
    std::set<int> sub_ids, dev_ids, link_ids;
    for (const auto& s : substations)
        if (!sub_ids.insert(s.id).second)
            throw ModelError("duplicate substation id " + std::to_string(s.id));
    for (const auto& d : devices) {
        if (!dev_ids.insert(d.id).second)
            throw ModelError("duplicate device id " + std::to_string(d.id));
        if (!sub_ids.count(d.substation))
            throw ModelError("device " + std::to_string(d.id) + " references unknown substation " +
                             std::to_string(d.substation));
        if (is_switch(d.kind) && !switch_status.count(d.id))
            throw ModelError("switch device " + std::to_string(d.id) + " has no status");
    }
    for (const auto& [id, st] : switch_status) {
        const Device* d = find_device(id);
        if (!d || !is_switch(d->kind))
            throw ModelError("switch status for non-switch device " + std::to_string(id));
        (void)st;
    }
    for (const auto& c : connections) {
        const Device* a = find_device(c.dev_a);
        const Device* b = find_device(c.dev_b);
        if (!a || !b)
            throw ModelError("connection references unknown device " +
                             std::to_string(!a ? c.dev_a : c.dev_b));
        if (c.term_a < 0 || c.term_a >= terminal_count(a->kind) || c.term_b < 0 ||
            c.term_b >= terminal_count(b->kind))
            throw ModelError("connection references nonexistent terminal on device " +
                             std::to_string(c.term_a >= terminal_count(a->kind) ? c.dev_a
                                                                                : c.dev_b));
        if (a->substation != b->substation)
            throw ModelError("connection spans substations (devices " + std::to_string(c.dev_a) +
                             ", " + std::to_string(c.dev_b) + ")");
    }
    for (const auto& l : links) {
        if (!link_ids.insert(l.id).second)
            throw ModelError("duplicate link id " + std::to_string(l.id));
        const Device* f = find_device(l.dev_from);
        const Device* t = find_device(l.dev_to);
        if (!f || !t)
            throw ModelError("link " + std::to_string(l.id) + " references unknown device " +
                             std::to_string(!f ? l.dev_from : l.dev_to));
        if (f->substation == t->substation)
            throw ModelError("link " + std::to_string(l.id) +
                             " endpoints lie in the same substation");
        if (l.x == 0.0)
            throw ModelError("link " + std::to_string(l.id) + " has zero reactance");
    }
}

int BusBranchGraph::bus_index(int bus_id) const {
    auto it = std::lower_bound(buses.begin(), buses.end(), bus_id,
                               [](const Bus& b, int id) { return b.id < id; });
    if (it == buses.end() || it->id != bus_id) return -1;
    return static_cast<int>(it - buses.begin());
}

int BusBranchGraph::branch_index(int branch_id) const {
    auto it = std::lower_bound(branches.begin(), branches.end(), branch_id,
                               [](const Branch& b, int id) { return b.id < id; });
    if (it == branches.end() || it->id != branch_id) return -1;
    return static_cast<int>(it - branches.begin());
}

void BusBranchGraph::rebuild_adjacency() {
    adjacency.assign(buses.size(), {});
    for (std::size_t bi = 0; bi < branches.size(); ++bi) {
        int f = bus_index(branches[bi].from);
        int t = bus_index(branches[bi].to);
        if (f < 0 || t < 0)
            throw ModelError("branch " + std::to_string(branches[bi].id) +
                             " has a dangling endpoint");
        adjacency[f].push_back(static_cast<int>(bi));
        adjacency[t].push_back(static_cast<int>(bi));
    }
}

void BusBranchGraph::validate() const {
    for (std::size_t i = 1; i < buses.size(); ++i)
        if (buses[i - 1].id >= buses[i].id) throw ModelError("buses not sorted by id");
    for (std::size_t i = 1; i < branches.size(); ++i)
        if (branches[i - 1].id >= branches[i].id) throw ModelError("branches not sorted by id");
    for (const auto& br : branches) {
        if (br.x == 0.0) throw ModelError("branch " + std::to_string(br.id) + " has x = 0");
        if (br.from == br.to)
            throw ModelError("branch " + std::to_string(br.id) + " connects a bus to itself");
        if (bus_index(br.from) < 0 || bus_index(br.to) < 0)
            throw ModelError("branch " + std::to_string(br.id) + " has a dangling endpoint");
    }
    if (adjacency.size() != buses.size()) throw ModelError("adjacency out of date");
}

BranchAdmittance branch_admittance(const Branch& br) {
    const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
    const std::complex<double> ysh(0.0, br.b / 2.0);
    const double t = br.tap != 0.0 ? br.tap : 1.0;
    BranchAdmittance a;
    a.y_ff = (ys + ysh) / (t * t);
    a.y_tt = ys + ysh;
    a.y_ft = -ys / t;
    a.y_tf = -ys / t;
    return a;
}

Admittance build_admittance(const BusBranchGraph& g) {
    Admittance y;
    y.diag.assign(g.buses.size(), {0.0, 0.0});
    for (std::size_t i = 0; i < g.buses.size(); ++i)
        y.diag[i] = {0.0, g.buses[i].b_shunt};

    for (std::size_t bi = 0; bi < g.branches.size(); ++bi) {
        const Branch& br = g.branches[bi];
        if (!br.in_service) continue;
        if (br.x == 0.0)
            throw ModelError("branch " + std::to_string(br.id) + " has zero reactance");
        int f = g.bus_index(br.from);
        int t = g.bus_index(br.to);
        if (f < 0 || t < 0)
            throw ModelError("branch " + std::to_string(br.id) + " has a dangling endpoint");
        const BranchAdmittance a = branch_admittance(br);
        y.diag[f] += a.y_ff;
        y.diag[t] += a.y_tt;
        y.mutual.push_back({f, t, a.y_ft, a.y_tf, static_cast<int>(bi)});
    }
    return y;
}

EvolvingSequence::EvolvingSequence(NodeBreakerGraph base, std::map<int, double> initial_measurements)
    : base_(std::move(base)), measurements_(std::move(initial_measurements)) {
    base_.validate();
    head_ = base_;
}

ChangeSet EvolvingSequence::apply_delta(const SnapshotDelta& d) {
    if (d.t < head_t_)
        throw ModelError("delta at t=" + std::to_string(d.t) +
                         " is older than the head snapshot t=" + std::to_string(head_t_));

    // Validate every reference first so a rejected delta leaves the head
    // untouched.
    for (const auto& [dev, st] : d.switch_changes) {
        const Device* dv = head_.find_device(dev);
        (void)st;
        if (!dv || !is_switch(dv->kind))
            throw ModelError("delta references unknown switch device " + std::to_string(dev));
    }
    for (const auto& inj : d.injection_updates) {
        const Device* dv = head_.find_device(inj.device);
        if (!dv || (dv->kind != DeviceKind::Load && dv->kind != DeviceKind::Generator))
            throw ModelError("injection update targets non-injection device " +
                             std::to_string(inj.device));
    }
    // Measurement ids are validated against the registered value table when
    // one was provided at construction; an empty table accepts any id.
    if (!measurements_.empty()) {
        for (const auto& [mid, v] : d.measurement_updates) {
            (void)v;
            if (!measurements_.count(mid))
                throw ModelError("delta references unknown measurement id " + std::to_string(mid));
        }
    }

    ChangeSet cs;
    std::set<int> subs;
    for (const auto& [dev, st] : d.switch_changes) {
        auto it = head_.switch_status.find(dev);
        if (it->second != st) {
            it->second = st;
            cs.switch_devices.push_back(dev);
            subs.insert(head_.find_device(dev)->substation);
        }
    }
    for (const auto& inj : d.injection_updates) {
        for (auto& dv : head_.devices) {
            if (dv.id == inj.device) {
                dv.p = inj.p;
                if (inj.q) dv.q = *inj.q;
                break;
            }
        }
    }
    for (const auto& [mid, v] : d.measurement_updates) measurements_[mid] = v;

    cs.substations.assign(subs.begin(), subs.end());
    std::sort(cs.switch_devices.begin(), cs.switch_devices.end());
    deltas_.push_back(d);
    head_t_ = d.t;
    return cs;
}

NodeBreakerGraph EvolvingSequence::replay_head() const {
    NodeBreakerGraph g = base_;
    for (const auto& d : deltas_) {
        for (const auto& [dev, st] : d.switch_changes) g.switch_status[dev] = st;
        for (const auto& inj : d.injection_updates) {
            for (auto& dv : g.devices) {
                if (dv.id == inj.device) {
                    dv.p = inj.p;
                    if (inj.q) dv.q = *inj.q;
                    break;
                }
            }
        }
    }
    return g;
}

}  // namespace ems::model
