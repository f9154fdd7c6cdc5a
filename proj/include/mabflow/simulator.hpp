#pragma once

// Synthetic marketplace that drives whole campaigns end to end: visitors are
// routed through the randomizer, emit served/click events, pass through
// attribution and bot filtering, and feed the nightly batch.
//
// Every epoch draws from its own derived random streams (humans, bots), so
// adding bot traffic never perturbs the human stream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabflow/allocator.hpp"
#include "mabflow/attribution.hpp"
#include "mabflow/campaign.hpp"
#include "mabflow/error.hpp"
#include "mabflow/random.hpp"
#include "mabflow/randomizer.hpp"

namespace mabflow::sim {

enum class BotMode { click_free, click_spam };

struct DriftPoint {
    std::uint64_t from_epoch = 0;
    double ctr = 0.0;
};

struct EnvironmentSpec {
    std::map<ArmId, double> arms;               // base click-through rate per arm
    std::vector<double> seasonality;            // per-epoch multiplier, cycled; empty = 1.0
    std::map<ArmId, std::vector<DriftPoint>> drift;
    std::size_t visitors_per_epoch = 10'000;
    double bot_fraction = 0.0;                  // share of total traffic that is bots
    BotMode bot_mode = BotMode::click_free;
    std::vector<double> click_delay{1.0};       // P(click lands d epochs after the serve)
    std::size_t repeat_views = 1;               // serves per human visitor per epoch
    std::uint64_t seed = 0;

    double base_ctr(const ArmId& arm, std::uint64_t epoch) const {
        double ctr = arms.at(arm);
        if (auto it = drift.find(arm); it != drift.end()) {
            for (const auto& p : it->second) {
                if (p.from_epoch <= epoch) ctr = p.ctr;
            }
        }
        return ctr;
    }

    double multiplier(std::uint64_t epoch) const {
        return seasonality.empty() ? 1.0 : seasonality[epoch % seasonality.size()];
    }

    double effective_ctr(const ArmId& arm, std::uint64_t epoch) const {
        return std::clamp(base_ctr(arm, epoch) * multiplier(epoch), 0.0, 1.0);
    }
};

inline void validate(const EnvironmentSpec& env) {
    if (env.arms.empty()) throw Error(ErrorCode::configuration, "environment needs at least one arm");
    for (const auto& [arm, ctr] : env.arms) {
        if (!(ctr > 0.0 && ctr < 1.0)) throw Error(ErrorCode::configuration, "base ctr must lie in (0,1)", arm.value);
    }
    for (const auto& [arm, points] : env.drift) {
        if (!env.arms.count(arm)) throw Error(ErrorCode::configuration, "drift names an unknown arm", arm.value);
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (!(points[i].ctr >= 0.0 && points[i].ctr <= 1.0)) {
                throw Error(ErrorCode::configuration, "drift ctr must lie in [0,1]", arm.value);
            }
            if (i > 0 && points[i].from_epoch <= points[i - 1].from_epoch) {
                throw Error(ErrorCode::configuration, "drift epochs must be strictly increasing", arm.value);
            }
        }
    }
    for (double m : env.seasonality) {
        if (!(m >= 0.0) || !std::isfinite(m)) throw Error(ErrorCode::configuration, "seasonality multipliers must be >= 0");
    }
    if (env.visitors_per_epoch == 0) throw Error(ErrorCode::configuration, "visitors_per_epoch must be positive");
    if (!(env.bot_fraction >= 0.0 && env.bot_fraction < 1.0)) {
        throw Error(ErrorCode::configuration, "bot_fraction must lie in [0,1)");
    }
    if (env.click_delay.empty()) throw Error(ErrorCode::configuration, "click_delay must be non-empty");
    double total = 0.0;
    for (double p : env.click_delay) {
        if (!(p >= 0.0)) throw Error(ErrorCode::configuration, "click_delay probabilities must be >= 0");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::configuration, "click_delay must sum to 1");
    if (env.repeat_views == 0) throw Error(ErrorCode::configuration, "repeat_views must be positive");
}

struct SimConfig {
    CampaignConfig campaign;
    std::vector<ArmId> initial_arms;                        // empty = every environment arm
    std::map<std::uint64_t, std::vector<ArmId>> add_arms;   // applied before the batch closing that epoch
    std::map<std::uint64_t, std::vector<ArmId>> blacklist;  // same timing
    bool filter_bots = true;
    JoinConfig join;
};

struct EpochTrace {
    std::uint64_t epoch = 0;
    Weights allocation;                      // in force while this epoch's traffic was routed
    StatsDelta stats;                        // attributed visitor-level stats for this epoch
    std::map<ArmId, double> ctr;             // effective ctr of each campaign arm
    double regret = 0.0;                     // this epoch's expected regret
    double regret_cum = 0.0;
    std::uint64_t bots_dropped = 0;
    std::uint64_t late_clicks = 0;
    bool batch_unchanged = false;
};

struct CampaignTrace {
    std::uint64_t seed = 0;
    std::size_t visitors_per_epoch = 0;
    std::vector<EpochTrace> epochs;
    Allocation final_allocation;
    CampaignState final_state;
};

inline bool is_sim_bot(const std::string& visitor) { return visitor.rfind("bot-", 0) == 0; }

namespace detail {

inline std::size_t sample_delay(const std::vector<double>& dist, Rng& rng) {
    if (dist.size() == 1) return 0;
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t d = 0; d < dist.size(); ++d) {
        acc += dist[d];
        if (u < acc) return d;
    }
    return dist.size() - 1;
}

inline double epoch_regret(const Weights& alloc, const std::map<ArmId, double>& ctr, std::size_t visitors) {
    double best = 0.0, achieved = 0.0;
    for (const auto& [arm, c] : ctr) best = std::max(best, c);
    for (const auto& [arm, w] : alloc) {
        auto it = ctr.find(arm);
        if (it != ctr.end()) achieved += w * it->second;
    }
    return static_cast<double>(visitors) * (best - achieved);
}

} // namespace detail

inline CampaignTrace simulate_campaign(const EnvironmentSpec& env, const SimConfig& config, std::size_t n_epochs) {
    validate(env);
    if (n_epochs == 0) throw Error(ErrorCode::configuration, "n_epochs must be positive");

    std::vector<ArmId> initial = config.initial_arms;
    if (initial.empty()) {
        for (const auto& [arm, ctr] : env.arms) {
            bool added_later = false;
            for (const auto& [e, arms] : config.add_arms) {
                added_later = added_later || std::find(arms.begin(), arms.end(), arm) != arms.end();
            }
            if (!added_later) initial.push_back(arm);
        }
    }
    for (const auto& a : initial) {
        if (!env.arms.count(a)) throw Error(ErrorCode::configuration, "campaign arm missing from environment", a.value);
    }
    for (const auto& [e, arms] : config.add_arms) {
        for (const auto& a : arms) {
            if (!env.arms.count(a)) throw Error(ErrorCode::configuration, "added arm missing from environment", a.value);
        }
    }

    CampaignConfig cc = config.campaign;
    cc.seed = derive_seed(env.seed, 0, 0xca);
    CampaignState state = create_campaign("sim", initial, cc);

    const std::size_t bots_per_epoch =
        env.bot_fraction > 0.0
            ? static_cast<std::size_t>(std::llround(static_cast<double>(env.visitors_per_epoch) * env.bot_fraction /
                                                    (1.0 - env.bot_fraction)))
            : 0;
    const Millis spread = kDayMs - 2 * kHourMs;

    CampaignTrace trace;
    trace.seed = env.seed;
    trace.visitors_per_epoch = env.visitors_per_epoch;
    std::map<std::uint64_t, std::vector<InteractionEvent>> delayed;
    double regret_cum = 0.0;

    for (std::uint64_t e = 0; e < n_epochs; ++e) {
        const CumulativeAllocation cum = build_cumulative(state.allocation);
        const Millis day_start = static_cast<Millis>(e) * kDayMs;

        std::map<ArmId, double> ctr;
        for (const auto& [arm, a] : state.arms) ctr[arm] = env.effective_ctr(arm, e);

        std::vector<ServedEvent> served;
        served.reserve(env.visitors_per_epoch * env.repeat_views + bots_per_epoch);
        std::vector<InteractionEvent> interactions;
        if (auto it = delayed.find(e); it != delayed.end()) {
            interactions = std::move(it->second);
            delayed.erase(it);
        }

        const std::string tag = std::to_string(e) + "-";
        Rng humans(derive_seed(env.seed, e, 1));
        for (std::size_t v = 0; v < env.visitors_per_epoch; ++v) {
            const std::string visitor = "u" + tag + std::to_string(v);
            const Millis base_ts = day_start + static_cast<Millis>(v) * spread / static_cast<Millis>(env.visitors_per_epoch);
            for (std::size_t r = 0; r < env.repeat_views; ++r) {
                ServedEvent s{visitor, pick_arm(cum, humans.uniform()), base_ts + static_cast<Millis>(r) * kMinuteMs,
                              "q" + tag + std::to_string(v) + "-" + std::to_string(r)};
                if (humans.bernoulli(ctr.at(s.arm))) {
                    const std::size_t delay = detail::sample_delay(env.click_delay, humans);
                    InteractionEvent click{visitor, InteractionKind::click,
                                           s.timestamp + 1000 + static_cast<Millis>(humans.below(10 * kMinuteMs)),
                                           s.request_id};
                    if (delay == 0) interactions.push_back(std::move(click));
                    else delayed[e + delay].push_back(std::move(click));
                }
                served.push_back(std::move(s));
            }
        }

        Rng bots(derive_seed(env.seed, e, 2));
        for (std::size_t b = 0; b < bots_per_epoch; ++b) {
            ServedEvent s{"bot-" + tag + std::to_string(b), pick_arm(cum, bots.uniform()),
                          day_start + static_cast<Millis>(bots.below(static_cast<std::uint64_t>(spread))),
                          "b" + tag + std::to_string(b)};
            if (env.bot_mode == BotMode::click_spam) {
                interactions.push_back({s.visitor_id, InteractionKind::click, s.timestamp + 500, s.request_id});
            }
            served.push_back(std::move(s));
        }

        JoinResult joined = join_ruds(served, interactions, config.join);
        FilterResult kept = config.filter_bots ? filter_bots(joined.records, is_sim_bot)
                                               : FilterResult{std::move(joined.records), 0};
        StatsDelta delta = aggregate_stats(kept.records, static_cast<std::int64_t>(e));

        EpochTrace rec;
        rec.epoch = e;
        rec.allocation = state.allocation.weights;
        rec.ctr = ctr;
        rec.regret = detail::epoch_regret(rec.allocation, ctr, env.visitors_per_epoch);
        regret_cum += rec.regret;
        rec.regret_cum = regret_cum;
        rec.bots_dropped = kept.dropped;
        rec.late_clicks = joined.unmatched_interactions;
        for (const auto& [arm, a] : state.arms) {
            auto it = delta.find(arm);
            rec.stats[arm] = it == delta.end() ? SufficientStats{} : it->second;
        }

        if (auto it = config.add_arms.find(e); it != config.add_arms.end()) {
            for (const auto& a : it->second) state = add_arm(state, a);
        }
        if (auto it = config.blacklist.find(e); it != config.blacklist.end()) {
            for (const auto& a : it->second) state = blacklist_arm(state, a);
        }

        BatchOutcome outcome = run_batch(state, delta);
        rec.batch_unchanged = outcome.unchanged;
        state = std::move(outcome.state);
        trace.epochs.push_back(std::move(rec));
    }

    trace.final_allocation = state.allocation;
    trace.final_state = std::move(state);
    return trace;
}

// Cumulative expected regret: sum over epochs of
// visitors * (best effective ctr - allocation-weighted ctr).
inline double regret(const CampaignTrace& trace) {
    if (trace.epochs.empty()) throw Error(ErrorCode::parameter, "regret of an empty trace");
    double total = 0.0;
    for (const auto& e : trace.epochs) total += detail::epoch_regret(e.allocation, e.ctr, trace.visitors_per_epoch);
    return total;
}

// ---------------------------------------------------------------------------
// Export

inline std::string trace_csv(const CampaignTrace& trace) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,arm,weight,S,F,true_ctr,regret_cum\n";
    for (const auto& e : trace.epochs) {
        for (const auto& [arm, c] : e.ctr) {
            auto w = e.allocation.find(arm);
            const auto& s = e.stats.at(arm);
            out << e.epoch << ',' << arm.value << ',' << (w == e.allocation.end() ? 0.0 : w->second) << ','
                << s.successes << ',' << s.failures << ',' << c << ',' << e.regret_cum << '\n';
        }
    }
    return out.str();
}

inline nlohmann::json trace_json(const CampaignTrace& trace) {
    auto epochs = nlohmann::json::array();
    for (const auto& e : trace.epochs) {
        auto ctr = nlohmann::json::object();
        for (const auto& [arm, c] : e.ctr) ctr[arm.value] = c;
        epochs.push_back({{"epoch", e.epoch},
                          {"allocation", weights_json(e.allocation)},
                          {"stats", delta_json(e.stats)},
                          {"ctr", ctr},
                          {"regret", e.regret},
                          {"regret_cum", e.regret_cum},
                          {"bots_dropped", e.bots_dropped},
                          {"late_clicks", e.late_clicks},
                          {"batch_unchanged", e.batch_unchanged}});
    }
    return {{"seed", trace.seed},
            {"visitors_per_epoch", trace.visitors_per_epoch},
            {"epochs", epochs},
            {"final_allocation", trace.final_allocation}};
}

inline CampaignTrace trace_from_json(const nlohmann::json& j) {
    CampaignTrace t;
    t.seed = j.at("seed").get<std::uint64_t>();
    t.visitors_per_epoch = j.at("visitors_per_epoch").get<std::size_t>();
    for (const auto& e : j.at("epochs")) {
        EpochTrace r;
        r.epoch = e.at("epoch").get<std::uint64_t>();
        r.allocation = weights_from_json(e.at("allocation"));
        r.stats = delta_from_json(e.at("stats"));
        for (const auto& [k, v] : e.at("ctr").items()) r.ctr[ArmId{k}] = v.get<double>();
        r.regret = e.at("regret").get<double>();
        r.regret_cum = e.at("regret_cum").get<double>();
        r.bots_dropped = e.value("bots_dropped", std::uint64_t{0});
        r.late_clicks = e.value("late_clicks", std::uint64_t{0});
        r.batch_unchanged = e.value("batch_unchanged", false);
        t.epochs.push_back(std::move(r));
    }
    t.final_allocation = j.at("final_allocation").get<Allocation>();
    return t;
}

// Allocation timeseries as an SVG line chart, one polyline per arm.
inline std::string render_svg(const CampaignTrace& trace, const std::string& title = "Allocation by epoch") {
    constexpr double W = 800, H = 420, left = 60, right = 140, top = 40, bottom = 50;
    const double pw = W - left - right, ph = H - top - bottom;
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

    std::vector<std::pair<std::uint64_t, Weights>> points;
    for (const auto& e : trace.epochs) points.emplace_back(e.epoch, e.allocation);
    if (!trace.epochs.empty()) points.emplace_back(trace.epochs.back().epoch + 1, trace.final_allocation.weights);
    std::map<ArmId, int> arms;
    for (const auto& [epoch, w] : points) {
        for (const auto& [arm, x] : w) arms.emplace(arm, 0);
    }
    const double max_epoch = points.empty() ? 1.0 : std::max<double>(1.0, static_cast<double>(points.back().first));
    auto px = [&](double epoch) { return left + pw * epoch / max_epoch; };
    auto py = [&](double w) { return top + ph * (1.0 - w); };

    std::ostringstream s;
    s.precision(6);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
        const double w = i / 4.0;
        s << "<line x1=\"" << left << "\" y1=\"" << py(w) << "\" x2=\"" << left + pw << "\" y2=\"" << py(w)
          << "\" stroke=\"#ddd\"/>\n";
        s << "<text x=\"" << left - 8 << "\" y=\"" << py(w) + 4
          << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << w << "</text>\n";
    }
    s << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << left + pw << "\" y2=\"" << py(0)
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n";

    int idx = 0;
    for (auto& [arm, color_idx] : arms) {
        color_idx = idx++;
        const char* color = palette[color_idx % 10];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (const auto& [epoch, w] : points) {
            auto it = w.find(arm);
            if (it == w.end()) continue;
            s << px(static_cast<double>(epoch)) << ',' << py(it->second) << ' ';
        }
        s << "\"/>\n";
        const double ly = top + 18.0 * color_idx;
        s << "<rect x=\"" << W - right + 16 << "\" y=\"" << ly << "\" width=\"12\" height=\"12\" fill=\"" << color
          << "\"/>\n";
        s << "<text x=\"" << W - right + 34 << "\" y=\"" << ly + 10 << "\" font-family=\"sans-serif\" font-size=\"12\">"
          << arm.value << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

// ---------------------------------------------------------------------------
// Spec files
//
// {
//   "arms": {"arm-1": 0.10, "arm-2": 0.12},
//   "seasonality": [1.0, 1.0, 0.9],
//   "drift": {"arm-1": [{"from_epoch": 10, "ctr": 0.14}]},
//   "visitors_per_epoch": 10000,
//   "bot_fraction": 0.0, "bot_mode": "click_free",
//   "click_delay": [1.0], "repeat_views": 1, "seed": 1,
//   "campaign": {"floor": 0.05, "floor_schedule": [...], "n_draws": 10000,
//                "initial_arms": [...], "add_arms": {"3": ["arm-3"]},
//                "blacklist": {"5": ["arm-1"]}, "filter_bots": true}
// }

inline EnvironmentSpec environment_from_json(const nlohmann::json& j) {
    EnvironmentSpec env;
    for (const auto& [k, v] : j.at("arms").items()) env.arms[ArmId{k}] = v.get<double>();
    if (j.contains("seasonality")) env.seasonality = j.at("seasonality").get<std::vector<double>>();
    if (j.contains("drift")) {
        for (const auto& [k, pts] : j.at("drift").items()) {
            for (const auto& p : pts) {
                env.drift[ArmId{k}].push_back({p.at("from_epoch").get<std::uint64_t>(), p.at("ctr").get<double>()});
            }
        }
    }
    env.visitors_per_epoch = j.value("visitors_per_epoch", env.visitors_per_epoch);
    env.bot_fraction = j.value("bot_fraction", 0.0);
    const std::string mode = j.value("bot_mode", std::string("click_free"));
    if (mode == "click_free") env.bot_mode = BotMode::click_free;
    else if (mode == "click_spam") env.bot_mode = BotMode::click_spam;
    else throw Error(ErrorCode::configuration, "bot_mode must be click_free or click_spam");
    if (j.contains("click_delay")) env.click_delay = j.at("click_delay").get<std::vector<double>>();
    env.repeat_views = j.value("repeat_views", env.repeat_views);
    env.seed = j.value("seed", std::uint64_t{0});
    return env;
}

inline SimConfig sim_config_from_json(const nlohmann::json& j) {
    SimConfig c;
    if (!j.contains("campaign")) return c;
    const auto& cj = j.at("campaign");
    c.campaign = cj.get<CampaignConfig>();
    if (cj.contains("initial_arms")) {
        for (const auto& a : cj.at("initial_arms")) c.initial_arms.emplace_back(a.get<std::string>());
    }
    auto keyed = [](const nlohmann::json& m) {
        std::map<std::uint64_t, std::vector<ArmId>> out;
        for (const auto& [k, v] : m.items()) {
            for (const auto& a : v) out[std::stoull(k)].emplace_back(a.get<std::string>());
        }
        return out;
    };
    if (cj.contains("add_arms")) c.add_arms = keyed(cj.at("add_arms"));
    if (cj.contains("blacklist")) c.blacklist = keyed(cj.at("blacklist"));
    c.filter_bots = cj.value("filter_bots", true);
    return c;
}

} // namespace mabflow::sim
