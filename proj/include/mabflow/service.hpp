#pragma once

// Campaign service: ingestion, per-request assignment, batch execution and
// administration over durable storage. CampaignService is the in-process API;
// HttpServer (http.hpp) exposes it as JSON over HTTP.
//
// Locking, per campaign:
//   writer     serializes batches and admin mutations (batches use try_lock
//              and report a conflict instead of queueing behind each other)
//   ingest     serializes appends to the raw event log; a batch holds it
//              while freezing its slice
//   state_mu   guards `state`; readers copy under a shared lock
//   published  immutable cumulative allocation read by assign

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabflow/attribution.hpp"
#include "mabflow/campaign.hpp"
#include "mabflow/error.hpp"
#include "mabflow/persistence.hpp"
#include "mabflow/posterior.hpp"
#include "mabflow/random.hpp"
#include "mabflow/randomizer.hpp"

namespace mabflow::service {

namespace fs = std::filesystem;

struct ServiceConfig {
    std::string host = "0.0.0.0";
    int port = 8080;
    std::string data_dir = "data";
    // Daily batch time as "HH:MM" UTC; empty disables the scheduler.
    std::string batch_schedule = "02:00";
    std::size_t n_draws = kDefaultDraws;
    double floor = kDefaultFloor;
    std::string api_token;
    std::uint64_t seed = 0;
    JoinConfig join;
    std::set<std::string> bot_visitors;
    std::vector<std::string> bot_prefixes;
    // Directory of static console assets served under /console; empty = none.
    std::string static_dir;
};

inline ServiceConfig service_config_from_json(const nlohmann::json& j) {
    ServiceConfig c;
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.batch_schedule = j.value("batch_schedule", c.batch_schedule);
    c.n_draws = j.value("n_draws", c.n_draws);
    c.floor = j.value("floor", c.floor);
    c.api_token = j.value("api_token", c.api_token);
    c.seed = j.value("seed", c.seed);
    c.join.click_window_ms = j.value("click_window_ms", c.join.click_window_ms);
    c.join.purchase_window_ms = j.value("purchase_window_ms", c.join.purchase_window_ms);
    if (j.contains("bot_visitors")) c.bot_visitors = j.at("bot_visitors").get<std::set<std::string>>();
    if (j.contains("bot_prefixes")) c.bot_prefixes = j.at("bot_prefixes").get<std::vector<std::string>>();
    c.static_dir = j.value("static_dir", c.static_dir);
    return c;
}

// MABFLOW_PORT and MABFLOW_DATA_DIR override the file values.
inline void apply_env_overrides(ServiceConfig& c) {
    if (const char* p = std::getenv("MABFLOW_PORT"); p && *p) {
        try {
            c.port = std::stoi(p);
        } catch (const std::exception&) {
            throw Error(ErrorCode::configuration, "MABFLOW_PORT is not a number", p);
        }
    }
    if (const char* d = std::getenv("MABFLOW_DATA_DIR"); d && *d) c.data_dir = d;
}

inline ServiceConfig load_service_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::not_found, "cannot open config file", path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::invalid, "config file is not valid JSON", e.what());
    }
    return service_config_from_json(j);
}

struct IngestReport {
    std::size_t accepted = 0;
    std::vector<Rejection> rejected;
};

// What assign and GET /allocation read: immutable between batches.
struct PublishedAllocation {
    Allocation allocation;
    CumulativeAllocation cumulative;
};

struct BatchReport {
    Allocation allocation;
    bool unchanged = false;
    std::uint64_t events_consumed = 0;
    std::uint64_t late_interactions = 0;
    std::uint64_t bots_dropped = 0;
};

class CampaignService {
public:
    explicit CampaignService(ServiceConfig config, std::function<std::int64_t()> clock = persistence::now_ms)
        : config_(std::move(config)), clock_(std::move(clock)) {
        fs::create_directories(config_.data_dir);
        load_existing();
    }

    const ServiceConfig& config() const { return config_; }

    // Body: {"id"?: str, "arms": [str], "floor"?: real, "floor_schedule"?: [...],
    //        "n_draws"?: int, "seed"?: int}
    std::string create(const nlohmann::json& body) {
        std::vector<ArmId> arms;
        CampaignConfig cc;
        std::string id;
        try {
            if (!body.is_object() || !body.contains("arms") || !body.at("arms").is_array()) {
                throw Error(ErrorCode::invalid, "campaign config needs an \"arms\" array");
            }
            for (const auto& a : body.at("arms")) arms.emplace_back(a.get<std::string>());
            cc.n_draws = body.value("n_draws", config_.n_draws);
            cc.default_floor = body.value("floor", config_.floor);
            if (body.contains("floor_schedule")) cc.floor_schedule = body.at("floor_schedule").get<FloorSchedule>();
            id = body.value("id", std::string{});
            cc.seed = body.value("seed", std::uint64_t{0});
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::invalid, "malformed campaign config", e.what());
        }

        std::unique_lock lock(campaigns_mu_);
        if (id.empty()) {
            do {
                id = "c" + std::to_string(++id_counter_);
            } while (campaigns_.count(id) || fs::exists(fs::path(config_.data_dir) / id));
        }
        validate_arm_id(ArmId{id});
        if (campaigns_.count(id)) throw Error(ErrorCode::conflict, "campaign already exists", id);
        if (!body.contains("seed")) cc.seed = derive_seed(config_.seed, std::hash<std::string>{}(id));

        auto h = std::make_shared<Handle>(persistence::CampaignStore(config_.data_dir, id));
        h->state = h->store.create(arms, cc);
        h->publish();
        campaigns_[id] = h;
        return id;
    }

    std::vector<std::string> list() const {
        std::shared_lock lock(campaigns_mu_);
        std::vector<std::string> out;
        for (const auto& [id, h] : campaigns_) out.push_back(id);
        return out;
    }

    CampaignState state(const std::string& id) const {
        auto h = find(id);
        std::shared_lock lock(h->state_mu);
        return h->state;
    }

    // Validates and appends events; served events must name a campaign arm.
    IngestReport ingest(const std::string& id, const std::vector<nlohmann::json>& items) {
        std::vector<Item> wrapped(items.begin(), items.end());
        return ingest_items(id, wrapped);
    }

    // Line-delimited JSON; each bad line is rejected on its own.
    IngestReport ingest_lines(const std::string& id, const std::string& ndjson) {
        std::vector<Item> items;
        std::size_t start = 0;
        while (start < ndjson.size()) {
            auto nl = ndjson.find('\n', start);
            if (nl == std::string::npos) nl = ndjson.size();
            const std::string line = ndjson.substr(start, nl - start);
            start = nl + 1;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                items.emplace_back(nlohmann::json::parse(line));
            } catch (const nlohmann::json::parse_error&) {
                items.emplace_back(std::string("malformed JSON"));
            }
        }
        return ingest_items(id, items);
    }

    std::shared_ptr<const PublishedAllocation> allocation(const std::string& id) const {
        return find(id)->published();
    }

    ArmId assign(const std::string& id, const std::string& visitor_id) {
        if (visitor_id.empty()) throw Error(ErrorCode::invalid, "visitor_id must be non-empty");
        auto h = find(id);
        auto snap = h->published();
        const std::uint64_t n = h->assign_counter.fetch_add(1, std::memory_order_relaxed);
        const std::uint64_t seed = h->assign_seed.load(std::memory_order_relaxed);
        const double u = bits_to_unit(splitmix64(derive_seed(seed, snap->cumulative.epoch, n)));
        return pick_arm(snap->cumulative, u);
    }

    // Runs the mini-batch over every event ingested since the previous one.
    BatchReport batch(const std::string& id) {
        auto h = find(id);
        std::unique_lock writer(h->writer, std::try_to_lock);
        if (!writer.owns_lock()) throw Error(ErrorCode::conflict, "a batch or admin change is already running", id);

        const CampaignState before = state(id);
        std::vector<Event> events;
        {
            std::lock_guard lock(h->ingest);
            events = h->store.events();
        }

        std::vector<ServedEvent> served;
        std::vector<InteractionEvent> interactions;
        for (std::size_t i = before.event_cursor; i < events.size(); ++i) {
            if (auto* s = std::get_if<ServedEvent>(&events[i])) served.push_back(*s);
            else interactions.push_back(std::get<InteractionEvent>(events[i]));
        }
        JoinResult joined = join_ruds(served, interactions, config_.join);
        FilterResult kept = filter_bots(joined.records, bot_predicate());
        const StatsDelta delta = aggregate_all_days(kept.records);

        BatchReport report;
        report.bots_dropped = kept.dropped;
        BatchOutcome outcome = run_batch(before, delta);
        report.unchanged = outcome.unchanged;
        report.allocation = outcome.allocation;
        if (outcome.unchanged) return report;

        outcome.state.event_cursor = events.size();
        outcome.state.late_interactions = before.late_interactions + joined.unmatched_interactions;
        report.events_consumed = events.size() - before.event_cursor;
        report.late_interactions = joined.unmatched_interactions;

        CampaignState committed = h->store.commit_batch(before, outcome.state);
        {
            std::unique_lock lock(h->state_mu);
            h->state = std::move(committed);
        }
        h->publish();
        return report;
    }

    std::map<std::string, BatchReport> batch_all() {
        std::map<std::string, BatchReport> out;
        for (const auto& id : list()) {
            try {
                out[id] = batch(id);
            } catch (const Error&) {
                // A busy or failing campaign must not block the others.
            }
        }
        return out;
    }

    void add_arm(const std::string& id, const ArmId& arm) {
        mutate(id, [&](const CampaignState& s) { return mabflow::add_arm(s, arm); });
    }
    void blacklist(const std::string& id, const ArmId& arm) {
        mutate(id, [&](const CampaignState& s) { return blacklist_arm(s, arm); });
    }
    void unblacklist(const std::string& id, const ArmId& arm) {
        mutate(id, [&](const CampaignState& s) { return unblacklist_arm(s, arm); });
    }
    void set_floor_schedule(const std::string& id, const FloorSchedule& schedule) {
        mutate(id, [&](const CampaignState& s) { return mabflow::set_floor_schedule(s, schedule); });
    }

    nlohmann::json history(const std::string& id) const {
        const CampaignState s = state(id);
        auto arms = nlohmann::json::object();
        for (const auto& [arm, a] : s.arms) {
            const auto [lo, hi] = credible_interval(a.posterior);
            arms[arm.value] = {{"alpha", a.posterior.alpha},
                               {"beta", a.posterior.beta},
                               {"mean", a.posterior.mean()},
                               {"ci95", {lo, hi}},
                               {"successes", a.stats.successes},
                               {"failures", a.stats.failures},
                               {"blacklisted", s.blacklist.count(arm) > 0},
                               {"added_at", a.added_at}};
        }
        auto epochs = nlohmann::json::array();
        for (const auto& r : s.audit) epochs.push_back(r);
        auto blacklist = nlohmann::json::array();
        for (const auto& b : s.blacklist) blacklist.push_back(b.value);
        return {{"campaign_id", s.id},
                {"epoch", s.epoch},
                {"allocation", s.allocation},
                {"arms", arms},
                {"blacklist", blacklist},
                {"floor_schedule", s.config.floor_schedule},
                {"floor", s.config.default_floor},
                {"next_floor", s.config.floor_at(s.epoch + 1)},
                {"epochs", epochs},
                {"admin", s.admin_log},
                {"late_interactions", s.late_interactions}};
    }

    // Holds the campaign's writer lock; while held, batches report conflict.
    std::unique_lock<std::mutex> acquire_writer(const std::string& id) {
        return std::unique_lock<std::mutex>(find(id)->writer);
    }

private:
    // A parsed JSON value, or the reason its line could not be parsed.
    using Item = std::variant<nlohmann::json, std::string>;

    IngestReport ingest_items(const std::string& id, const std::vector<Item>& items) {
        auto h = find(id);
        const auto arms = state(id).arms;
        IngestReport report;
        std::vector<Event> accepted;
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (const auto* reason = std::get_if<std::string>(&items[i])) {
                report.rejected.push_back({i, *reason});
                continue;
            }
            try {
                Event e = event_from_json(std::get<nlohmann::json>(items[i]));
                if (const auto* s = std::get_if<ServedEvent>(&e); s && !arms.count(s->arm)) {
                    throw Error(ErrorCode::invalid, "served event names an unknown arm: " + s->arm.value);
                }
                accepted.push_back(std::move(e));
            } catch (const Error& e) {
                report.rejected.push_back({i, e.what()});
            }
        }
        std::lock_guard lock(h->ingest);
        h->store.append_events(accepted, clock_());
        report.accepted = accepted.size();
        return report;
    }

    struct Handle {
        explicit Handle(persistence::CampaignStore s) : store(std::move(s)) {}

        persistence::CampaignStore store;
        std::mutex writer;
        std::mutex ingest;
        mutable std::shared_mutex state_mu;
        CampaignState state;
        mutable std::mutex published_mu;
        std::shared_ptr<const PublishedAllocation> published_;
        std::atomic<std::uint64_t> assign_counter{0};
        std::atomic<std::uint64_t> assign_seed{0};

        void publish() {
            std::shared_lock lock(state_mu);
            auto next = std::make_shared<const PublishedAllocation>(
                PublishedAllocation{state.allocation, build_cumulative(state.allocation)});
            assign_seed.store(derive_seed(state.config.seed, 0xa55, 0), std::memory_order_relaxed);
            std::lock_guard p(published_mu);
            published_ = std::move(next);
        }
        std::shared_ptr<const PublishedAllocation> published() const {
            std::lock_guard p(published_mu);
            return published_;
        }
    };

    std::shared_ptr<Handle> find(const std::string& id) const {
        std::shared_lock lock(campaigns_mu_);
        auto it = campaigns_.find(id);
        if (it == campaigns_.end()) throw Error(ErrorCode::not_found, "unknown campaign", id);
        return it->second;
    }

    template <typename F>
    void mutate(const std::string& id, F&& f) {
        auto h = find(id);
        std::lock_guard writer(h->writer);
        const CampaignState before = state(id);
        CampaignState after = f(before);
        after = h->store.record_admin(before, after);
        std::unique_lock lock(h->state_mu);
        h->state = std::move(after);
    }

    BotPredicate bot_predicate() const {
        return [this](const std::string& v) {
            if (config_.bot_visitors.count(v)) return true;
            for (const auto& p : config_.bot_prefixes) {
                if (v.rfind(p, 0) == 0) return true;
            }
            return false;
        };
    }

    void load_existing() {
        for (const auto& entry : fs::directory_iterator(config_.data_dir)) {
            if (!entry.is_directory() || !fs::exists(entry.path() / "journal.jsonl")) continue;
            const std::string id = entry.path().filename().string();
            auto h = std::make_shared<Handle>(persistence::CampaignStore(config_.data_dir, id));
            h->state = h->store.recover();
            h->publish();
            campaigns_[id] = h;
        }
    }

    ServiceConfig config_;
    std::function<std::int64_t()> clock_;
    mutable std::shared_mutex campaigns_mu_;
    std::map<std::string, std::shared_ptr<Handle>> campaigns_;
    std::uint64_t id_counter_ = 0;
};

} // namespace mabflow::service
