#pragma once

// Campaign state and the daily mini-batch transaction.
//
// All operations are pure: they take a state by const reference and return a
// new one, so a failed batch never leaves a half-updated campaign behind.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabflow/allocator.hpp"
#include "mabflow/error.hpp"
#include "mabflow/posterior.hpp"
#include "mabflow/random.hpp"

namespace mabflow {

using StatsDelta = std::map<ArmId, SufficientStats>;

inline void to_json(nlohmann::json& j, const SufficientStats& s) {
    j = nlohmann::json{{"successes", s.successes}, {"failures", s.failures}};
}
inline void from_json(const nlohmann::json& j, SufficientStats& s) {
    s.successes = j.at("successes").get<std::uint64_t>();
    s.failures = j.at("failures").get<std::uint64_t>();
}
inline void to_json(nlohmann::json& j, const BetaPosterior& p) {
    j = nlohmann::json{{"alpha", p.alpha}, {"beta", p.beta}};
}
inline void from_json(const nlohmann::json& j, BetaPosterior& p) {
    p.alpha = j.at("alpha").get<double>();
    p.beta = j.at("beta").get<double>();
}

inline nlohmann::json delta_json(const StatsDelta& d) {
    auto j = nlohmann::json::object();
    for (const auto& [arm, s] : d) j[arm.value] = s;
    return j;
}
inline StatsDelta delta_from_json(const nlohmann::json& j) {
    StatsDelta d;
    for (const auto& [k, v] : j.items()) d[ArmId{k}] = v.get<SufficientStats>();
    return d;
}

inline bool all_zero(const StatsDelta& delta) {
    for (const auto& [arm, s] : delta) {
        if (!s.empty()) return false;
    }
    return true;
}

struct CampaignConfig {
    std::size_t n_draws = kDefaultDraws;
    double default_floor = kDefaultFloor;
    FloorSchedule floor_schedule;
    std::uint64_t seed = 0;

    double floor_at(std::uint64_t epoch) const { return floor_schedule.floor_at(epoch, default_floor); }

    friend bool operator==(const CampaignConfig&, const CampaignConfig&) = default;
};

inline void to_json(nlohmann::json& j, const CampaignConfig& c) {
    j = nlohmann::json{{"n_draws", c.n_draws},
                       {"floor", c.default_floor},
                       {"floor_schedule", c.floor_schedule},
                       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, CampaignConfig& c) {
    c = CampaignConfig{};
    if (j.contains("n_draws")) c.n_draws = j.at("n_draws").get<std::size_t>();
    if (j.contains("floor")) c.default_floor = j.at("floor").get<double>();
    if (j.contains("floor_schedule")) c.floor_schedule = j.at("floor_schedule").get<FloorSchedule>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
}

struct ArmState {
    SufficientStats stats;
    BetaPosterior posterior = prior();
    std::uint64_t added_at = 0;

    friend bool operator==(const ArmState&, const ArmState&) = default;
};

// One committed batch: the intermediate vectors and everything needed to
// replay it.
struct AuditRecord {
    std::uint64_t epoch = 0;
    Weights raw;
    Weights post_blacklist;
    Weights post_floor;
    StatsDelta stats_delta;
    double floor = 0.0;
    std::uint64_t seed = 0;
    std::size_t n_draws = 0;

    friend bool operator==(const AuditRecord&, const AuditRecord&) = default;
};

inline void to_json(nlohmann::json& j, const AuditRecord& r) {
    j = nlohmann::json{{"epoch", r.epoch},
                       {"raw", weights_json(r.raw)},
                       {"post_blacklist", weights_json(r.post_blacklist)},
                       {"post_floor", weights_json(r.post_floor)},
                       {"stats_delta", delta_json(r.stats_delta)},
                       {"floor", r.floor},
                       {"seed", r.seed},
                       {"n_draws", r.n_draws}};
}
inline void from_json(const nlohmann::json& j, AuditRecord& r) {
    r.epoch = j.at("epoch").get<std::uint64_t>();
    r.raw = weights_from_json(j.at("raw"));
    r.post_blacklist = weights_from_json(j.at("post_blacklist"));
    r.post_floor = weights_from_json(j.at("post_floor"));
    r.stats_delta = delta_from_json(j.at("stats_delta"));
    r.floor = j.at("floor").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.n_draws = j.value("n_draws", std::size_t{0});
}

enum class AdminKind { add_arm, blacklist, unblacklist, floor_schedule };

inline const char* to_string(AdminKind k) {
    switch (k) {
    case AdminKind::add_arm: return "add_arm";
    case AdminKind::blacklist: return "blacklist";
    case AdminKind::unblacklist: return "unblacklist";
    case AdminKind::floor_schedule: return "floor_schedule";
    }
    return "unknown";
}

inline AdminKind admin_kind_from_string(const std::string& s) {
    if (s == "add_arm") return AdminKind::add_arm;
    if (s == "blacklist") return AdminKind::blacklist;
    if (s == "unblacklist") return AdminKind::unblacklist;
    if (s == "floor_schedule") return AdminKind::floor_schedule;
    throw Error(ErrorCode::invalid, "unknown admin action: " + s);
}

// Admin mutations requested at epoch t take effect with the batch that
// produces epoch t + 1.
struct AdminAction {
    AdminKind kind = AdminKind::add_arm;
    ArmId arm;
    FloorSchedule schedule;
    std::uint64_t requested_at = 0;
    std::uint64_t effective_epoch = 0;

    friend bool operator==(const AdminAction&, const AdminAction&) = default;
};

inline void to_json(nlohmann::json& j, const AdminAction& a) {
    j = nlohmann::json{{"kind", to_string(a.kind)},
                       {"requested_at", a.requested_at},
                       {"effective_epoch", a.effective_epoch}};
    if (a.kind == AdminKind::floor_schedule) j["schedule"] = a.schedule;
    else j["arm"] = a.arm;
}
inline void from_json(const nlohmann::json& j, AdminAction& a) {
    a.kind = admin_kind_from_string(j.at("kind").get<std::string>());
    a.requested_at = j.at("requested_at").get<std::uint64_t>();
    a.effective_epoch = j.at("effective_epoch").get<std::uint64_t>();
    if (j.contains("schedule")) a.schedule = j.at("schedule").get<FloorSchedule>();
    if (j.contains("arm")) a.arm = j.at("arm").get<ArmId>();
}

struct CampaignState {
    std::string id;
    CampaignConfig config;
    std::map<ArmId, ArmState> arms;
    std::uint64_t epoch = 0;
    Blacklist blacklist;
    Allocation allocation;
    std::vector<AuditRecord> audit;
    std::vector<AdminAction> admin_log;
    // Number of ingested events already folded into a batch.
    std::uint64_t event_cursor = 0;
    // Interactions that arrived after their serve had been attributed.
    std::uint64_t late_interactions = 0;
    // Number of journal entries reflected in this state.
    std::uint64_t journal_cursor = 0;

    std::vector<ArmId> arm_ids() const {
        std::vector<ArmId> out;
        for (const auto& [arm, s] : arms) out.push_back(arm);
        return out;
    }
    std::map<ArmId, BetaPosterior> posteriors() const {
        std::map<ArmId, BetaPosterior> out;
        for (const auto& [arm, s] : arms) out[arm] = s.posterior;
        return out;
    }
    std::size_t live_arms() const { return arms.size() - blacklist.size(); }

    friend bool operator==(const CampaignState&, const CampaignState&) = default;
};

inline void to_json(nlohmann::json& j, const CampaignState& s) {
    auto arms = nlohmann::json::object();
    for (const auto& [arm, a] : s.arms) {
        arms[arm.value] = {{"stats", a.stats}, {"posterior", a.posterior}, {"added_at", a.added_at}};
    }
    auto blacklist = nlohmann::json::array();
    for (const auto& a : s.blacklist) blacklist.push_back(a.value);
    j = nlohmann::json{{"id", s.id},
                       {"config", s.config},
                       {"arms", arms},
                       {"epoch", s.epoch},
                       {"blacklist", blacklist},
                       {"allocation", s.allocation},
                       {"audit", s.audit},
                       {"admin_log", s.admin_log},
                       {"event_cursor", s.event_cursor},
                       {"late_interactions", s.late_interactions},
                       {"journal_cursor", s.journal_cursor}};
}
inline void from_json(const nlohmann::json& j, CampaignState& s) {
    s = CampaignState{};
    s.id = j.at("id").get<std::string>();
    s.config = j.at("config").get<CampaignConfig>();
    for (const auto& [k, v] : j.at("arms").items()) {
        ArmState a;
        a.stats = v.at("stats").get<SufficientStats>();
        a.posterior = v.at("posterior").get<BetaPosterior>();
        a.added_at = v.at("added_at").get<std::uint64_t>();
        s.arms[ArmId{k}] = a;
    }
    s.epoch = j.at("epoch").get<std::uint64_t>();
    for (const auto& a : j.at("blacklist")) s.blacklist.insert(ArmId{a.get<std::string>()});
    s.allocation = j.at("allocation").get<Allocation>();
    s.audit = j.at("audit").get<std::vector<AuditRecord>>();
    s.admin_log = j.at("admin_log").get<std::vector<AdminAction>>();
    s.event_cursor = j.at("event_cursor").get<std::uint64_t>();
    s.late_interactions = j.value("late_interactions", std::uint64_t{0});
    s.journal_cursor = j.value("journal_cursor", std::uint64_t{0});
}

inline void validate_arm_id(const ArmId& arm) {
    if (arm.empty()) throw Error(ErrorCode::invalid, "arm id must be non-empty");
    for (char c : arm.value) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                        c == '_' || c == '.';
        if (!ok) throw Error(ErrorCode::invalid, "arm id contains an invalid character", arm.value);
    }
}

// New campaign at epoch 0 with every arm at Beta(1,1) and equal traffic
// (floor applied, which is a no-op for uniform weights when feasible).
inline CampaignState create_campaign(std::string id, const std::vector<ArmId>& arms, CampaignConfig config) {
    if (arms.empty()) throw Error(ErrorCode::invalid, "campaign requires at least one arm");
    if (config.n_draws == 0) throw Error(ErrorCode::invalid, "n_draws must be positive");
    CampaignState s;
    s.id = std::move(id);
    for (const auto& a : arms) {
        validate_arm_id(a);
        if (s.arms.count(a)) throw Error(ErrorCode::invalid, "duplicate arm id", a.value);
        s.arms[a] = ArmState{};
    }
    validate_schedule(config.floor_schedule, config.default_floor, s.arms.size());
    s.config = std::move(config);
    s.allocation = uniform_allocation(s.arm_ids());
    return s;
}

// Arm joins with the uniform prior and competes from the next batch.
inline CampaignState add_arm(const CampaignState& state, const ArmId& arm) {
    validate_arm_id(arm);
    if (state.arms.count(arm)) throw Error(ErrorCode::conflict, "arm already exists", arm.value);
    validate_schedule(state.config.floor_schedule, state.config.default_floor, state.arms.size() + 1);
    CampaignState s = state;
    s.arms[arm] = ArmState{SufficientStats{}, prior(), state.epoch + 1};
    s.admin_log.push_back({AdminKind::add_arm, arm, {}, state.epoch, state.epoch + 1});
    return s;
}

inline CampaignState blacklist_arm(const CampaignState& state, const ArmId& arm) {
    if (!state.arms.count(arm)) throw Error(ErrorCode::not_found, "unknown arm", arm.value);
    if (state.blacklist.count(arm)) return state;
    if (state.live_arms() <= 1) throw Error(ErrorCode::infeasible, "cannot blacklist the last live arm", arm.value);
    CampaignState s = state;
    s.blacklist.insert(arm);
    s.admin_log.push_back({AdminKind::blacklist, arm, {}, state.epoch, state.epoch + 1});
    return s;
}

inline CampaignState unblacklist_arm(const CampaignState& state, const ArmId& arm) {
    if (!state.arms.count(arm)) throw Error(ErrorCode::not_found, "unknown arm", arm.value);
    if (!state.blacklist.count(arm)) return state;
    CampaignState s = state;
    s.blacklist.erase(arm);
    s.admin_log.push_back({AdminKind::unblacklist, arm, {}, state.epoch, state.epoch + 1});
    return s;
}

inline CampaignState set_floor_schedule(const CampaignState& state, const FloorSchedule& schedule) {
    validate_schedule(schedule, state.config.default_floor, state.arms.size());
    CampaignState s = state;
    s.config.floor_schedule = schedule;
    s.admin_log.push_back({AdminKind::floor_schedule, {}, schedule, state.epoch, state.epoch + 1});
    return s;
}

inline std::uint64_t batch_seed(const CampaignState& state) {
    return derive_seed(state.config.seed, state.epoch + 1, 0xba7c4);
}

struct BatchOutcome {
    CampaignState state;
    Allocation allocation;
    // True when the batch saw no data and republished the previous allocation.
    bool unchanged = false;
};

// The daily mini-batch. An all-zero delta (no traffic anywhere, typically an
// upstream outage) republishes the previous allocation and leaves the
// posteriors and epoch untouched.
inline BatchOutcome run_batch(const CampaignState& state, const StatsDelta& delta, std::size_t n_draws,
                              std::uint64_t seed) {
    for (const auto& [arm, s] : delta) {
        if (!state.arms.count(arm)) throw Error(ErrorCode::campaign, "stats delta names an unknown arm", arm.value);
    }
    if (all_zero(delta)) return {state, state.allocation, true};

    CampaignState next = state;
    for (const auto& [arm, s] : delta) {
        ArmState& a = next.arms.at(arm);
        a.stats += s;
        a.posterior = update(a.stats);
    }

    const std::uint64_t epoch = state.epoch + 1;
    const double floor = state.config.floor_at(epoch);

    Rng rng(seed);
    Allocation raw = raw_allocation(next.posteriors(), n_draws, rng);
    Allocation live = apply_blacklist(raw, next.blacklist);
    Allocation floored = apply_floor(live, floor, next.blacklist);
    floored.epoch = epoch;

    AuditRecord rec;
    rec.epoch = epoch;
    rec.raw = raw.weights;
    rec.post_blacklist = live.weights;
    rec.post_floor = floored.weights;
    for (const auto& [arm, a] : next.arms) {
        auto it = delta.find(arm);
        rec.stats_delta[arm] = it == delta.end() ? SufficientStats{} : it->second;
    }
    rec.floor = floor;
    rec.seed = seed;
    rec.n_draws = n_draws;

    next.epoch = epoch;
    next.allocation = floored;
    next.audit.push_back(std::move(rec));
    return {std::move(next), floored, false};
}

// Uses the campaign's own draw count and derived seed.
inline BatchOutcome run_batch(const CampaignState& state, const StatsDelta& delta) {
    return run_batch(state, delta, state.config.n_draws, batch_seed(state));
}

} // namespace mabflow
