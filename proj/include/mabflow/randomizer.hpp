#pragma once

// Per-request arm selection against the cumulative allocation.
//
// Buckets are half-open, [previous, cumulative), laid out in lexicographic
// arm order. Both conventions are part of the wire contract: every process
// holding the same allocation must route the same u to the same arm.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabflow/allocator.hpp"
#include "mabflow/error.hpp"

namespace mabflow {

struct Boundary {
    ArmId arm;
    double cumulative = 0.0;

    friend bool operator==(const Boundary&, const Boundary&) = default;
};

struct CumulativeAllocation {
    std::vector<Boundary> boundaries;
    std::uint64_t epoch = 0;

    friend bool operator==(const CumulativeAllocation&, const CumulativeAllocation&) = default;
};

inline CumulativeAllocation build_cumulative(const Allocation& alloc) {
    CumulativeAllocation out;
    out.epoch = alloc.epoch;
    out.boundaries.reserve(alloc.weights.size());
    double acc = 0.0;
    for (const auto& [arm, w] : alloc.weights) {
        acc += w;
        out.boundaries.push_back({arm, acc});
    }
    return out;
}

inline ArmId pick_arm(const CumulativeAllocation& cum, double u) {
    if (!(u >= 0.0 && u < 1.0)) throw Error(ErrorCode::parameter, "u must lie in [0, 1)");
    if (cum.boundaries.empty()) throw Error(ErrorCode::parameter, "empty cumulative allocation");

    // First boundary strictly above u.
    std::size_t lo = 0, hi = cum.boundaries.size();
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (cum.boundaries[mid].cumulative > u) hi = mid;
        else lo = mid + 1;
    }
    if (lo < cum.boundaries.size()) return cum.boundaries[lo].arm;

    // Rounding left the final boundary a hair under 1: fall back to the last
    // bucket with positive width.
    double prev_cum = 0.0;
    std::size_t last = cum.boundaries.size();
    for (std::size_t i = 0; i < cum.boundaries.size(); ++i) {
        if (cum.boundaries[i].cumulative > prev_cum) last = i;
        prev_cum = cum.boundaries[i].cumulative;
    }
    if (last == cum.boundaries.size()) throw Error(ErrorCode::parameter, "allocation has no positive weight");
    return cum.boundaries[last].arm;
}

inline void to_json(nlohmann::json& j, const CumulativeAllocation& c) {
    auto b = nlohmann::json::array();
    for (const auto& x : c.boundaries) b.push_back({{"arm", x.arm.value}, {"cumulative", x.cumulative}});
    j = nlohmann::json{{"epoch", c.epoch}, {"boundaries", b}};
}
inline void from_json(const nlohmann::json& j, CumulativeAllocation& c) {
    c.epoch = j.at("epoch").get<std::uint64_t>();
    c.boundaries.clear();
    for (const auto& x : j.at("boundaries")) {
        c.boundaries.push_back({ArmId{x.at("arm").get<std::string>()}, x.at("cumulative").get<double>()});
    }
}

} // namespace mabflow
