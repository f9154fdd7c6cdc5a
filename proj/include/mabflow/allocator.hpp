#pragma once

// Traffic allocation kernels for the daily mini-batch.
//
// Arms are always iterated in lexicographic ArmId order (std::map order).
// That order fixes the argmax tie-break and the randomizer bucket layout.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabflow/error.hpp"
#include "mabflow/posterior.hpp"
#include "mabflow/random.hpp"

namespace mabflow {

struct ArmId {
    std::string value;

    ArmId() = default;
    explicit ArmId(std::string v) : value(std::move(v)) {}
    ArmId(const char* v) : value(v) {}

    bool empty() const { return value.empty(); }
    const std::string& str() const { return value; }

    friend auto operator<=>(const ArmId&, const ArmId&) = default;
    friend bool operator==(const ArmId&, const ArmId&) = default;
};

inline void to_json(nlohmann::json& j, const ArmId& a) { j = a.value; }
inline void from_json(const nlohmann::json& j, ArmId& a) { a.value = j.get<std::string>(); }

using Weights = std::map<ArmId, double>;
using Blacklist = std::set<ArmId>;

inline constexpr double kWeightTolerance = 1e-9;
inline constexpr std::size_t kDefaultDraws = 10'000;
inline constexpr double kDefaultFloor = 0.05;

struct Allocation {
    Weights weights;
    std::uint64_t epoch = 0;

    double weight(const ArmId& arm) const {
        auto it = weights.find(arm);
        return it == weights.end() ? 0.0 : it->second;
    }
    double total() const {
        double s = 0.0;
        for (const auto& [arm, w] : weights) s += w;
        return s;
    }

    friend bool operator==(const Allocation&, const Allocation&) = default;
};

inline void to_json(nlohmann::json& j, const Allocation& a) {
    j = nlohmann::json{{"epoch", a.epoch}, {"weights", nlohmann::json::object()}};
    for (const auto& [arm, w] : a.weights) j["weights"][arm.value] = w;
}
inline void from_json(const nlohmann::json& j, Allocation& a) {
    a.epoch = j.at("epoch").get<std::uint64_t>();
    a.weights.clear();
    for (const auto& [k, v] : j.at("weights").items()) a.weights[ArmId{k}] = v.get<double>();
}

inline nlohmann::json weights_json(const Weights& w) {
    auto j = nlohmann::json::object();
    for (const auto& [arm, x] : w) j[arm.value] = x;
    return j;
}
inline Weights weights_from_json(const nlohmann::json& j) {
    Weights w;
    for (const auto& [k, v] : j.items()) w[ArmId{k}] = v.get<double>();
    return w;
}

// Equal weights across non-blacklisted arms.
inline Allocation uniform_allocation(const std::vector<ArmId>& arms, const Blacklist& blacklist = {},
                                     std::uint64_t epoch = 0) {
    Allocation out;
    out.epoch = epoch;
    std::size_t live = 0;
    for (const auto& a : arms) live += blacklist.count(a) ? 0 : 1;
    for (const auto& a : arms) {
        out.weights[a] = (blacklist.count(a) || live == 0) ? 0.0 : 1.0 / static_cast<double>(live);
    }
    return out;
}

// Checks the emitted-allocation invariants: weights in [0,1], sum 1,
// blacklisted arms at exactly 0.
inline bool is_valid_allocation(const Allocation& a, const Blacklist& blacklist = {}) {
    if (a.weights.empty()) return false;
    for (const auto& [arm, w] : a.weights) {
        if (!(w >= 0.0 && w <= 1.0)) return false;
        if (blacklist.count(arm) && w != 0.0) return false;
    }
    return std::abs(a.total() - 1.0) <= kWeightTolerance;
}

// ---------------------------------------------------------------------------
// Floor schedule

struct FloorEntry {
    std::uint64_t from_epoch = 0;
    double floor = 0.0;

    friend bool operator==(const FloorEntry&, const FloorEntry&) = default;
};

struct FloorSchedule {
    std::vector<FloorEntry> entries;

    // Floor in force at `epoch`: the last entry whose from_epoch <= epoch,
    // otherwise the campaign default.
    double floor_at(std::uint64_t epoch, double default_floor) const {
        double f = default_floor;
        for (const auto& e : entries) {
            if (e.from_epoch <= epoch) f = e.floor;
            else break;
        }
        return f;
    }

    double max_floor(double default_floor) const {
        double m = default_floor;
        for (const auto& e : entries) m = std::max(m, e.floor);
        return m;
    }

    friend bool operator==(const FloorSchedule&, const FloorSchedule&) = default;
};

inline void validate_floor(double floor, std::size_t arm_count) {
    if (!(floor >= 0.0 && floor < 1.0)) {
        throw Error(ErrorCode::configuration, "floor must lie in [0, 1)");
    }
    if (static_cast<double>(arm_count) * floor > 1.0 + kWeightTolerance) {
        throw Error(ErrorCode::infeasible, "infeasible floor: arm count * floor exceeds 1",
                    std::to_string(arm_count) + " * " + std::to_string(floor));
    }
}

inline void validate_schedule(const FloorSchedule& s, double default_floor, std::size_t arm_count) {
    validate_floor(default_floor, arm_count);
    for (std::size_t i = 0; i < s.entries.size(); ++i) {
        if (i > 0 && s.entries[i].from_epoch <= s.entries[i - 1].from_epoch) {
            throw Error(ErrorCode::configuration, "floor schedule epochs must be strictly increasing");
        }
        validate_floor(s.entries[i].floor, arm_count);
    }
}

inline void to_json(nlohmann::json& j, const FloorSchedule& s) {
    j = nlohmann::json::array();
    for (const auto& e : s.entries) j.push_back({{"from_epoch", e.from_epoch}, {"floor", e.floor}});
}
inline void from_json(const nlohmann::json& j, FloorSchedule& s) {
    s.entries.clear();
    for (const auto& e : j) {
        s.entries.push_back({e.at("from_epoch").get<std::uint64_t>(), e.at("floor").get<double>()});
    }
}

// ---------------------------------------------------------------------------
// Kernels

// Monte-Carlo estimate of P(arm is best): each round draws one sample per
// arm and credits the argmax. Ties go to the lexicographically lowest arm.
inline Allocation raw_allocation(const std::map<ArmId, BetaPosterior>& posteriors, std::size_t n_draws,
                                 Rng& rng) {
    if (posteriors.empty()) throw Error(ErrorCode::campaign, "allocation requires at least one arm");
    if (n_draws == 0) throw Error(ErrorCode::parameter, "n_draws must be positive");

    std::vector<BetaPosterior> params;
    params.reserve(posteriors.size());
    for (const auto& [arm, p] : posteriors) {
        validate(p);
        params.push_back(p);
    }

    std::vector<std::uint64_t> wins(params.size(), 0);
    if (params.size() == 1) {
        wins[0] = n_draws;
    } else {
        for (std::size_t d = 0; d < n_draws; ++d) {
            std::size_t best = 0;
            double best_value = -1.0;
            for (std::size_t i = 0; i < params.size(); ++i) {
                const double x = sample(params[i], rng);
                if (x > best_value) {
                    best_value = x;
                    best = i;
                }
            }
            ++wins[best];
        }
    }

    Allocation out;
    std::size_t i = 0;
    for (const auto& [arm, p] : posteriors) {
        out.weights[arm] = static_cast<double>(wins[i++]) / static_cast<double>(n_draws);
    }
    return out;
}

// Zeroes blacklisted arms and renormalizes the rest.
inline Allocation apply_blacklist(const Allocation& alloc, const Blacklist& blacklist) {
    if (blacklist.empty()) return alloc;

    Allocation out = alloc;
    double live_total = 0.0;
    std::size_t live = 0;
    for (auto& [arm, w] : out.weights) {
        if (blacklist.count(arm)) {
            w = 0.0;
        } else {
            live_total += w;
            ++live;
        }
    }
    if (live == 0) throw Error(ErrorCode::campaign, "every arm is blacklisted");

    for (auto& [arm, w] : out.weights) {
        if (blacklist.count(arm)) continue;
        // Live arms that all lost every draw split the traffic evenly.
        w = live_total > 0.0 ? w / live_total : 1.0 / static_cast<double>(live);
    }
    return out;
}

// Raises every live arm below `floor` to exactly `floor`, funding the deficit
// from the remaining arms in proportion to their current weight. Donors that
// would drop under the floor are pinned too and the split is recomputed until
// no donor changes.
inline Allocation apply_floor(const Allocation& alloc, double floor, const Blacklist& blacklist) {
    std::size_t active = 0;
    for (const auto& [arm, w] : alloc.weights) active += blacklist.count(arm) ? 0 : 1;
    if (floor < 0.0) throw Error(ErrorCode::configuration, "floor must be non-negative");
    if (static_cast<double>(active) * floor > 1.0 + kWeightTolerance) {
        throw Error(ErrorCode::configuration, "infeasible floor: active arms * floor exceeds 1");
    }
    if (floor == 0.0 || active == 0) return alloc;

    // Arms within this distance of the floor count as already at it, which
    // keeps the operation idempotent under rounding.
    constexpr double kSlack = 1e-12;

    std::set<ArmId> pinned;
    for (const auto& [arm, w] : alloc.weights) {
        if (!blacklist.count(arm) && w < floor - kSlack) pinned.insert(arm);
    }
    if (pinned.empty()) return alloc;

    Allocation out = alloc;
    for (;;) {
        double donor_total = 0.0;
        for (const auto& [arm, w] : alloc.weights) {
            if (!blacklist.count(arm) && !pinned.count(arm)) donor_total += w;
        }
        const double budget = 1.0 - static_cast<double>(pinned.size()) * floor;

        bool grew = false;
        for (const auto& [arm, w] : alloc.weights) {
            if (blacklist.count(arm)) {
                out.weights[arm] = 0.0;
            } else if (pinned.count(arm)) {
                out.weights[arm] = floor;
            } else {
                const double scaled = donor_total > 0.0 ? w * budget / donor_total : 0.0;
                out.weights[arm] = scaled;
                if (scaled < floor - kSlack) {
                    pinned.insert(arm);
                    grew = true;
                }
            }
        }
        if (!grew) break;
    }
    return out;
}

} // namespace mabflow

template <>
struct std::hash<mabflow::ArmId> {
    std::size_t operator()(const mabflow::ArmId& a) const noexcept { return std::hash<std::string>{}(a.value); }
};
