#pragma once

#include <vector>

namespace ems {

// Voltage state indexed by bus position in a BusBranchGraph. Slack angles
// are pinned at zero; de-energized buses carry flat placeholders.
struct StateVector {
    std::vector<double> v;
    std::vector<double> theta;

    bool compatible_with(std::size_t bus_count) const {
        return v.size() == bus_count && theta.size() == bus_count;
    }
};

}  // namespace ems
