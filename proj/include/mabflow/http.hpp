#pragma once

// JSON-over-HTTP facade for CampaignService, plus the daily batch timer.
//
//   POST   /campaigns                              create (201 {"id"})
//   GET    /campaigns                              list ids
//   POST   /campaigns/{id}/events                  ingest (JSON array, {"events": [...]}, or NDJSON)
//   GET    /campaigns/{id}/allocation              published allocation + cumulative buckets
//   POST   /campaigns/{id}/assign                  {"visitor_id"} -> {"arm", "epoch"}
//   POST   /campaigns/{id}/batch                   run the mini-batch now
//   POST   /campaigns/{id}/arms                    {"arm"} add mid-campaign (201)
//   POST   /campaigns/{id}/arms/{arm}/blacklist    blacklist from the next batch
//   DELETE /campaigns/{id}/arms/{arm}/blacklist    lift the blacklist from the next batch
//   PUT    /campaigns/{id}/floor-schedule          [{"from_epoch", "floor"}, ...]
//   GET    /campaigns/{id}/history                 monitoring feed
//   GET    /health
//
// Errors: {"error": {"code", "message", "detail"}} with code one of
// not_found (404), conflict (409), invalid (400), infeasible (422),
// internal (500).

#include <chrono>
#include <condition_variable>
#include <ctime>
#include <mutex>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "httplib.h"

#include "mabflow/error.hpp"
#include "mabflow/service.hpp"

namespace mabflow::service {

struct ApiError {
    std::string code;
    int status = 500;
};

inline ApiError api_error(ErrorCode c) {
    switch (c) {
    case ErrorCode::not_found: return {"not_found", 404};
    case ErrorCode::conflict: return {"conflict", 409};
    case ErrorCode::infeasible: return {"infeasible", 422};
    case ErrorCode::invalid:
    case ErrorCode::parameter:
    case ErrorCode::configuration:
    case ErrorCode::campaign: return {"invalid", 400};
    case ErrorCode::gap:
    case ErrorCode::storage:
    case ErrorCode::internal: return {"internal", 500};
    }
    return {"internal", 500};
}

inline nlohmann::json allocation_json(const PublishedAllocation& p) {
    auto j = nlohmann::json(p.allocation);
    j["boundaries"] = nlohmann::json(p.cumulative).at("boundaries");
    return j;
}

inline nlohmann::json batch_json(const BatchReport& r) {
    return {{"epoch", r.allocation.epoch},
            {"allocation", r.allocation},
            {"unchanged", r.unchanged},
            {"events_consumed", r.events_consumed},
            {"late_interactions", r.late_interactions},
            {"bots_dropped", r.bots_dropped}};
}

// Parses "HH:MM" (UTC). Returns minutes after midnight.
inline int parse_daily_time(const std::string& spec) {
    if (spec.size() != 5 || spec[2] != ':') throw Error(ErrorCode::configuration, "batch_schedule must be HH:MM", spec);
    int h = 0, m = 0;
    try {
        h = std::stoi(spec.substr(0, 2));
        m = std::stoi(spec.substr(3, 2));
    } catch (const std::exception&) {
        throw Error(ErrorCode::configuration, "batch_schedule must be HH:MM", spec);
    }
    if (h < 0 || h > 23 || m < 0 || m > 59) throw Error(ErrorCode::configuration, "batch_schedule out of range", spec);
    return h * 60 + m;
}

// Milliseconds from `now_ms` until the next occurrence of minute-of-day `at`.
inline std::int64_t millis_until(std::int64_t now_ms, int at_minute) {
    const std::int64_t day = 24LL * 60 * 60 * 1000;
    const std::int64_t into_day = ((now_ms % day) + day) % day;
    std::int64_t target = static_cast<std::int64_t>(at_minute) * 60 * 1000;
    if (target <= into_day) target += day;
    return target - into_day;
}

class DailyScheduler {
public:
    DailyScheduler(CampaignService& service, int at_minute) : service_(service), at_(at_minute) {
        thread_ = std::thread([this] { run(); });
    }
    ~DailyScheduler() {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        thread_.join();
    }
    DailyScheduler(const DailyScheduler&) = delete;
    DailyScheduler& operator=(const DailyScheduler&) = delete;

private:
    void run() {
        std::unique_lock lock(mu_);
        while (!stop_) {
            const auto wait = std::chrono::milliseconds(millis_until(persistence::now_ms(), at_));
            if (cv_.wait_for(lock, wait, [this] { return stop_; })) break;
            lock.unlock();
            service_.batch_all();
            lock.lock();
        }
    }

    CampaignService& service_;
    int at_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stop_ = false;
    std::thread thread_;
};

class HttpServer {
public:
    explicit HttpServer(CampaignService& service) : service_(service) { routes(); }

    // Binds (port 0 = ephemeral) and returns the bound port.
    int bind(const std::string& host, int port) {
        if (port == 0) return server_.bind_to_any_port(host);
        if (!server_.bind_to_port(host, port)) throw Error(ErrorCode::internal, "cannot bind port", std::to_string(port));
        return port;
    }
    void listen() { server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    bool running() const { return server_.is_running(); }
    void wait_until_ready() const { server_.wait_until_ready(); }

private:
    using Req = httplib::Request;
    using Res = httplib::Response;

    static void send(Res& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(Res& res, const Error& e) {
        const auto api = api_error(e.code());
        send(res, api.status, {{"error", {{"code", api.code}, {"message", e.what()}, {"detail", e.detail()}}}});
    }

    static nlohmann::json body_json(const Req& req) {
        if (req.body.empty()) return nlohmann::json::object();
        try {
            return nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorCode::invalid, "request body is not valid JSON", e.what());
        }
    }

    template <typename F>
    auto guarded(F f) {
        return [this, f](const Req& req, Res& res) {
            if (!authorized(req)) {
                send(res, 401, {{"error", {{"code", "invalid"}, {"message", "missing or wrong API token"}, {"detail", ""}}}});
                return;
            }
            try {
                f(req, res);
            } catch (const Error& e) {
                send_error(res, e);
            } catch (const nlohmann::json::exception& e) {
                send_error(res, Error(ErrorCode::invalid, "malformed request", e.what()));
            } catch (const std::exception& e) {
                send_error(res, Error(ErrorCode::internal, e.what()));
            }
        };
    }

    bool authorized(const Req& req) const {
        const auto& token = service_.config().api_token;
        return token.empty() || req.get_header_value("Authorization") == "Bearer " + token;
    }

    void routes() {
        server_.set_post_routing_handler([](const Req&, Res& res) {
            res.set_header("Access-Control-Allow-Origin", "*");
            res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
            res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, DELETE, OPTIONS");
        });
        server_.Options(R"(.*)", [](const Req&, Res& res) { res.status = 204; });
        if (!service_.config().static_dir.empty()) server_.set_mount_point("/console", service_.config().static_dir);

        server_.Get("/health", [](const Req&, Res& res) { send(res, 200, {{"status", "ok"}}); });

        server_.Post("/campaigns", guarded([this](const Req& req, Res& res) {
            const auto id = service_.create(body_json(req));
            send(res, 201, {{"id", id}});
        }));
        server_.Get("/campaigns", guarded([this](const Req&, Res& res) { send(res, 200, {{"campaigns", service_.list()}}); }));

        server_.Post(R"(/campaigns/([^/]+)/events)", guarded([this](const Req& req, Res& res) {
            const std::string id = req.matches[1];
            IngestReport report;
            nlohmann::json parsed;
            bool is_json = true;
            try {
                parsed = nlohmann::json::parse(req.body);
            } catch (const nlohmann::json::parse_error&) {
                is_json = false;
            }
            if (is_json && parsed.is_array()) report = service_.ingest(id, parsed.get<std::vector<nlohmann::json>>());
            else if (is_json && parsed.is_object() && parsed.contains("events"))
                report = service_.ingest(id, parsed.at("events").get<std::vector<nlohmann::json>>());
            else report = service_.ingest_lines(id, req.body);
            auto rejected = nlohmann::json::array();
            for (const auto& r : report.rejected) rejected.push_back({{"index", r.index}, {"reason", r.reason}});
            send(res, 200, {{"accepted", report.accepted}, {"rejected", rejected}});
        }));

        server_.Get(R"(/campaigns/([^/]+)/allocation)", guarded([this](const Req& req, Res& res) {
            send(res, 200, allocation_json(*service_.allocation(req.matches[1])));
        }));

        server_.Post(R"(/campaigns/([^/]+)/assign)", guarded([this](const Req& req, Res& res) {
            const auto body = body_json(req);
            const std::string id = req.matches[1];
            const auto arm = service_.assign(id, body.value("visitor_id", std::string{}));
            send(res, 200, {{"arm", arm.value}, {"epoch", service_.allocation(id)->allocation.epoch}});
        }));

        server_.Post(R"(/campaigns/([^/]+)/batch)", guarded([this](const Req& req, Res& res) {
            send(res, 200, batch_json(service_.batch(req.matches[1])));
        }));

        server_.Post(R"(/campaigns/([^/]+)/arms)", guarded([this](const Req& req, Res& res) {
            const auto body = body_json(req);
            if (!body.contains("arm") || !body.at("arm").is_string()) throw Error(ErrorCode::invalid, "body needs an \"arm\" string");
            const std::string id = req.matches[1];
            service_.add_arm(id, ArmId{body.at("arm").get<std::string>()});
            send(res, 201, {{"arm", body.at("arm")}, {"effective_epoch", service_.state(id).epoch + 1}});
        }));

        server_.Post(R"(/campaigns/([^/]+)/arms/([^/]+)/blacklist)", guarded([this](const Req& req, Res& res) {
            const std::string id = req.matches[1];
            service_.blacklist(id, ArmId{std::string(req.matches[2])});
            send(res, 200, {{"blacklisted", std::string(req.matches[2])}, {"effective_epoch", service_.state(id).epoch + 1}});
        }));
        server_.Delete(R"(/campaigns/([^/]+)/arms/([^/]+)/blacklist)", guarded([this](const Req& req, Res& res) {
            const std::string id = req.matches[1];
            service_.unblacklist(id, ArmId{std::string(req.matches[2])});
            send(res, 200, {{"unblacklisted", std::string(req.matches[2])}, {"effective_epoch", service_.state(id).epoch + 1}});
        }));

        server_.Put(R"(/campaigns/([^/]+)/floor-schedule)", guarded([this](const Req& req, Res& res) {
            auto body = body_json(req);
            if (body.is_object() && body.contains("entries")) body = body.at("entries");
            if (!body.is_array()) throw Error(ErrorCode::invalid, "floor schedule must be an array of entries");
            const std::string id = req.matches[1];
            service_.set_floor_schedule(id, body.get<FloorSchedule>());
            send(res, 200, {{"floor_schedule", body}, {"effective_epoch", service_.state(id).epoch + 1}});
        }));

        server_.Get(R"(/campaigns/([^/]+)/history)", guarded([this](const Req& req, Res& res) {
            send(res, 200, service_.history(req.matches[1]));
        }));
    }

    CampaignService& service_;
    httplib::Server server_;
};

} // namespace mabflow::service
