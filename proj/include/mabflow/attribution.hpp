#pragma once

// Reward attribution: join served recommendations with front-end interaction
// events inside a look-ahead window, drop bot traffic, and reduce the joined
// rows to one Bernoulli trial per (visitor, arm, day).

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabflow/allocator.hpp"
#include "mabflow/campaign.hpp"
#include "mabflow/error.hpp"

namespace mabflow {

using Millis = std::int64_t;

inline constexpr Millis kMinuteMs = 60'000;
inline constexpr Millis kHourMs = 60 * kMinuteMs;
inline constexpr Millis kDayMs = 24 * kHourMs;

// UTC calendar day of a millisecond timestamp.
inline std::int64_t epoch_of(Millis ts) {
    return ts >= 0 ? ts / kDayMs : -((-ts + kDayMs - 1) / kDayMs);
}

struct ServedEvent {
    std::string visitor_id;
    ArmId arm;
    Millis timestamp = 0;
    std::string request_id;

    friend bool operator==(const ServedEvent&, const ServedEvent&) = default;
};

enum class InteractionKind { view, click, purchase };

inline const char* to_string(InteractionKind k) {
    switch (k) {
    case InteractionKind::view: return "view";
    case InteractionKind::click: return "click";
    case InteractionKind::purchase: return "purchase";
    }
    return "view";
}

struct InteractionEvent {
    std::string visitor_id;
    InteractionKind kind = InteractionKind::view;
    Millis timestamp = 0;
    std::optional<std::string> request_id;

    friend bool operator==(const InteractionEvent&, const InteractionEvent&) = default;
};

using Event = std::variant<ServedEvent, InteractionEvent>;

struct RudsRecord {
    std::string visitor_id;
    ArmId arm;
    Millis served_at = 0;
    std::string request_id;
    bool clicked = false;
    bool purchased = false;
    std::int64_t epoch = 0;

    friend bool operator==(const RudsRecord&, const RudsRecord&) = default;
};

// ---------------------------------------------------------------------------
// Line-delimited JSON codec
//
//   {"type":"served","visitor_id":"v1","arm":"arm-2","timestamp":1700000000000,"request_id":"r-17"}
//   {"type":"click","visitor_id":"v1","timestamp":1700000060000,"request_id":"r-17"}
//
// "type" is one of served, view, click, purchase. request_id is optional on
// interactions.

inline nlohmann::json event_to_json(const Event& e) {
    if (const auto* s = std::get_if<ServedEvent>(&e)) {
        return {{"type", "served"},
                {"visitor_id", s->visitor_id},
                {"arm", s->arm.value},
                {"timestamp", s->timestamp},
                {"request_id", s->request_id}};
    }
    const auto& i = std::get<InteractionEvent>(e);
    nlohmann::json j = {{"type", to_string(i.kind)}, {"visitor_id", i.visitor_id}, {"timestamp", i.timestamp}};
    if (i.request_id) j["request_id"] = *i.request_id;
    return j;
}

namespace detail {

inline std::string required_string(const nlohmann::json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw Error(ErrorCode::invalid, std::string("missing field: ") + key);
    if (!it->is_string()) throw Error(ErrorCode::invalid, std::string("field must be a string: ") + key);
    auto v = it->get<std::string>();
    if (v.empty()) throw Error(ErrorCode::invalid, std::string("field must be non-empty: ") + key);
    return v;
}

inline Millis required_timestamp(const nlohmann::json& j) {
    auto it = j.find("timestamp");
    if (it == j.end()) throw Error(ErrorCode::invalid, "missing field: timestamp");
    if (!it->is_number_integer()) throw Error(ErrorCode::invalid, "timestamp must be an integer millisecond count");
    return it->get<Millis>();
}

} // namespace detail

inline Event event_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::invalid, "event must be a JSON object");
    const std::string type = detail::required_string(j, "type");
    if (type == "served") {
        ServedEvent s;
        s.visitor_id = detail::required_string(j, "visitor_id");
        s.arm = ArmId{detail::required_string(j, "arm")};
        s.timestamp = detail::required_timestamp(j);
        s.request_id = detail::required_string(j, "request_id");
        return s;
    }
    InteractionEvent i;
    if (type == "view") i.kind = InteractionKind::view;
    else if (type == "click") i.kind = InteractionKind::click;
    else if (type == "purchase") i.kind = InteractionKind::purchase;
    else throw Error(ErrorCode::invalid, "unknown event type: " + type);
    i.visitor_id = detail::required_string(j, "visitor_id");
    i.timestamp = detail::required_timestamp(j);
    if (j.contains("request_id") && !j.at("request_id").is_null()) {
        i.request_id = detail::required_string(j, "request_id");
    }
    return i;
}

inline Event parse_event(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::invalid, "malformed JSON", e.what());
    }
    return event_from_json(j);
}

struct Rejection {
    std::size_t index = 0;
    std::string reason;
};

struct ParsedEvents {
    std::vector<ServedEvent> served;
    std::vector<InteractionEvent> interactions;
    std::vector<Rejection> rejected;
};

inline void append(ParsedEvents& out, Event e) {
    if (auto* s = std::get_if<ServedEvent>(&e)) out.served.push_back(std::move(*s));
    else out.interactions.push_back(std::move(std::get<InteractionEvent>(e)));
}

// Parses every line; bad lines are collected, never fatal.
inline ParsedEvents parse_event_lines(const std::vector<std::string>& lines) {
    ParsedEvents out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            append(out, parse_event(lines[i]));
        } catch (const Error& e) {
            out.rejected.push_back({i, e.what()});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Join

struct JoinConfig {
    Millis click_window_ms = 30 * kMinuteMs;
    Millis purchase_window_ms = 7 * kDayMs;
};

struct JoinResult {
    std::vector<RudsRecord> records;
    std::vector<Rejection> rejected;
    // Clicks and purchases that matched no serve in this slice (typically
    // late arrivals for an already-attributed serve).
    std::uint64_t unmatched_interactions = 0;
};

// One record per valid served event. A serve is clicked when the same visitor
// clicks inside [served_at, served_at + window]; an interaction that carries a
// request_id only counts for that request. Purchases use their own window.
// Output is sorted by (served_at, request_id), so it does not depend on input
// order.
inline JoinResult join_ruds(const std::vector<ServedEvent>& served, const std::vector<InteractionEvent>& interactions,
                            const JoinConfig& config = {}) {
    if (config.click_window_ms <= 0 || config.purchase_window_ms <= 0) {
        throw Error(ErrorCode::parameter, "look-ahead windows must be positive");
    }
    JoinResult out;

    // Reject malformed or duplicate serves. Duplicates are resolved
    // independently of arrival order: the lowest (timestamp, arm, visitor)
    // copy is kept.
    std::vector<const ServedEvent*> valid;
    valid.reserve(served.size());
    for (std::size_t i = 0; i < served.size(); ++i) {
        const auto& s = served[i];
        if (s.visitor_id.empty()) out.rejected.push_back({i, "served event without visitor_id"});
        else if (s.request_id.empty()) out.rejected.push_back({i, "served event without request_id"});
        else if (s.arm.empty()) out.rejected.push_back({i, "served event without arm"});
        else valid.push_back(&s);
    }
    auto serve_less = [](const ServedEvent* a, const ServedEvent* b) {
        return std::tie(a->request_id, a->timestamp, a->arm, a->visitor_id) <
               std::tie(b->request_id, b->timestamp, b->arm, b->visitor_id);
    };
    std::sort(valid.begin(), valid.end(), serve_less);
    std::vector<const ServedEvent*> unique;
    unique.reserve(valid.size());
    for (const auto* s : valid) {
        if (!unique.empty() && unique.back()->request_id == s->request_id) {
            out.rejected.push_back({static_cast<std::size_t>(s - served.data()), "duplicate request_id: " + s->request_id});
            continue;
        }
        unique.push_back(s);
    }

    // Interactions bucketed by visitor, then sorted by time.
    struct Hit {
        Millis ts;
        const std::optional<std::string>* request_id;
        std::size_t index;
    };
    std::unordered_map<std::string, std::vector<Hit>> clicks, purchases;
    std::vector<char> matched(interactions.size(), 0);
    for (std::size_t i = 0; i < interactions.size(); ++i) {
        const auto& e = interactions[i];
        if (e.visitor_id.empty()) {
            out.rejected.push_back({i, "interaction without visitor_id"});
            continue;
        }
        if (e.kind == InteractionKind::click) clicks[e.visitor_id].push_back({e.timestamp, &e.request_id, i});
        else if (e.kind == InteractionKind::purchase) purchases[e.visitor_id].push_back({e.timestamp, &e.request_id, i});
    }
    auto by_time = [](const Hit& a, const Hit& b) { return a.ts < b.ts; };
    for (auto& [v, hits] : clicks) std::sort(hits.begin(), hits.end(), by_time);
    for (auto& [v, hits] : purchases) std::sort(hits.begin(), hits.end(), by_time);

    auto find_hit = [&](const std::unordered_map<std::string, std::vector<Hit>>& index, const ServedEvent& s,
                        Millis window) {
        auto it = index.find(s.visitor_id);
        if (it == index.end()) return false;
        const auto& hits = it->second;
        auto lo = std::lower_bound(hits.begin(), hits.end(), Hit{s.timestamp, nullptr, 0}, by_time);
        bool found = false;
        for (auto h = lo; h != hits.end() && h->ts <= s.timestamp + window; ++h) {
            if (h->request_id->has_value() && **h->request_id != s.request_id) continue;
            matched[h->index] = 1;
            found = true;
        }
        return found;
    };

    out.records.reserve(unique.size());
    for (const auto* s : unique) {
        RudsRecord r;
        r.visitor_id = s->visitor_id;
        r.arm = s->arm;
        r.served_at = s->timestamp;
        r.request_id = s->request_id;
        r.clicked = find_hit(clicks, *s, config.click_window_ms);
        r.purchased = find_hit(purchases, *s, config.purchase_window_ms);
        r.epoch = epoch_of(s->timestamp);
        out.records.push_back(std::move(r));
    }
    std::sort(out.records.begin(), out.records.end(), [](const RudsRecord& a, const RudsRecord& b) {
        return std::tie(a.served_at, a.request_id) < std::tie(b.served_at, b.request_id);
    });

    for (std::size_t i = 0; i < interactions.size(); ++i) {
        const auto& e = interactions[i];
        if (e.kind != InteractionKind::view && !e.visitor_id.empty() && !matched[i]) ++out.unmatched_interactions;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bot filtering

using BotPredicate = std::function<bool(const std::string& visitor_id)>;

inline BotPredicate bot_list(std::set<std::string> ids) {
    return [ids = std::move(ids)](const std::string& v) { return ids.count(v) > 0; };
}

inline BotPredicate no_bots() {
    return [](const std::string&) { return false; };
}

struct FilterResult {
    std::vector<RudsRecord> records;
    std::uint64_t dropped = 0;
};

inline FilterResult filter_bots(const std::vector<RudsRecord>& records, const BotPredicate& is_bot) {
    FilterResult out;
    out.records.reserve(records.size());
    for (const auto& r : records) {
        if (is_bot(r.visitor_id)) ++out.dropped;
        else out.records.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation

namespace detail {

template <typename Flag>
StatsDelta aggregate(const std::vector<RudsRecord>& records, std::int64_t epoch, Flag flag) {
    // (arm, visitor) -> any success
    std::map<ArmId, std::unordered_map<std::string, bool>> trials;
    for (const auto& r : records) {
        if (r.epoch != epoch) continue;
        bool& hit = trials[r.arm][r.visitor_id];
        hit = hit || flag(r);
    }
    StatsDelta out;
    for (const auto& [arm, visitors] : trials) {
        SufficientStats s;
        for (const auto& [v, hit] : visitors) {
            if (hit) ++s.successes;
            else ++s.failures;
        }
        out[arm] = s;
    }
    return out;
}

} // namespace detail

// Visitor-based click statistics for one day: one trial per distinct
// (visitor, arm); success if any of those serves was clicked. Records from
// other days are ignored.
inline StatsDelta aggregate_stats(const std::vector<RudsRecord>& records, std::int64_t epoch) {
    return detail::aggregate(records, epoch, [](const RudsRecord& r) { return r.clicked; });
}

// Same trial definition, success = purchase. Reported only; never drives
// allocation.
inline StatsDelta aggregate_conversions(const std::vector<RudsRecord>& records, std::int64_t epoch) {
    return detail::aggregate(records, epoch, [](const RudsRecord& r) { return r.purchased; });
}

// Sum of the per-day aggregates over every day present in `records`.
inline StatsDelta aggregate_all_days(const std::vector<RudsRecord>& records) {
    std::set<std::int64_t> days;
    for (const auto& r : records) days.insert(r.epoch);
    StatsDelta total;
    for (auto d : days) {
        for (const auto& [arm, s] : aggregate_stats(records, d)) total[arm] += s;
    }
    return total;
}

} // namespace mabflow
