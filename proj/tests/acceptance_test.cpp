// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. Tolerances are fixed here and nowhere else.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mabflow/mabflow.hpp"
#include "metrics_oracle.hpp"
#include "test_support.hpp"

namespace {

using namespace mabflow;
namespace fs = std::filesystem;

// P(Beta(121,881) > Beta(81,921)) from 10,000,000 independent draws, computed
// before the implementation existed.
constexpr double kTenMillionDrawOracle = 0.9985675;

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " FAILED(" << what << ")";
        }
    }
};

int failures = 0;

void criterion(const std::string& name, double time_limit_s, const std::function<void(Outcome&)>& body) {
    Outcome out;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(out);
    } catch (const std::exception& e) {
        out.pass = false;
        out.detail << " exception: " << e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (time_limit_s > 0 && secs >= time_limit_s) {
        out.pass = false;
        out.detail << " FAILED(runtime " << secs << " s >= " << time_limit_s << " s)";
    }
    if (!out.pass) ++failures;
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.2f s", secs);
    std::cout << (out.pass ? "[PASS] " : "[FAIL] ") << name << ":" << out.detail.str() << " (" << timing;
    if (time_limit_s > 0) std::cout << ", limit " << time_limit_s << " s";
    std::cout << ")" << std::endl;
}

std::string fmt(double x, int precision = 6) {
    std::ostringstream s;
    s.precision(precision);
    s << x;
    return s.str();
}

// ---------------------------------------------------------------------------

void posterior_correctness(Outcome& o) {
    o.require(update({3, 2}) == BetaPosterior{4.0, 3.0}, "update(3,2) == Beta(4,3)");
    o.detail << " update(3,2)=Beta(" << update({3, 2}).alpha << "," << update({3, 2}).beta << ");";
    const std::size_t n = 100'000;
    const double crit = testing::ks_critical(0.001, n);
    for (const auto& [a, b] : std::vector<std::pair<double, double>>{{1, 1}, {2, 5}, {50, 50}}) {
        Rng rng(derive_seed(2024, static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(b)));
        std::vector<double> xs(n);
        for (auto& x : xs) x = sample({a, b}, rng);
        const double d = testing::ks_statistic(xs, testing::NumericBetaCdf(a, b));
        o.detail << " KS Beta(" << a << "," << b << ") D=" << fmt(d, 4) << " < " << fmt(crit, 4) << ";";
        o.require(d < crit, "KS at 0.001");
    }
}

void allocation_oracle(Outcome& o) {
    Rng r1(11);
    const double w1 = raw_allocation({{"a", {2, 1}}, {"b", {1, 2}}}, 100'000, r1).weight("a");
    o.detail << " w(Beta(2,1) vs Beta(1,2))=" << fmt(w1) << " vs 5/6;";
    o.require(std::abs(w1 - 5.0 / 6.0) <= 0.01, "5/6 +- 0.01");

    CampaignConfig cc;
    cc.n_draws = 100'000;
    cc.default_floor = 0.0;
    cc.seed = 12;
    const auto out = run_batch(create_campaign("oracle", {"a", "b"}, cc), {{"a", {120, 880}}, {"b", {80, 920}}});
    const double w2 = out.allocation.weight("a");
    o.detail << " w(Beta(121,881) vs Beta(81,921))=" << fmt(w2) << " vs " << kTenMillionDrawOracle << ";";
    o.require(std::abs(w2 - kTenMillionDrawOracle) <= 0.01, "10M-draw oracle +- 0.01");
}

void robustness_invariants(Outcome& o) {
    const auto floored = apply_floor(Allocation{{{"a", 0.95}, {"b", 0.03}, {"c", 0.02}}, 0}, 0.05, {});
    const bool floor_ok = std::abs(floored.weight("a") - 0.90) < 1e-12 && std::abs(floored.weight("b") - 0.05) < 1e-12 &&
                          std::abs(floored.weight("c") - 0.05) < 1e-12;
    o.detail << " floor (0.95,0.03,0.02)->(" << fmt(floored.weight("a")) << "," << fmt(floored.weight("b")) << ","
             << fmt(floored.weight("c")) << ");";
    o.require(floor_ok, "floor example");

    const auto bl = apply_blacklist(Allocation{{{"a", 0.5}, {"b", 0.3}, {"c", 0.2}}, 0}, {"c"});
    const bool bl_ok = bl.weight("c") == 0.0 && std::abs(bl.weight("a") - 0.625) < 1e-12 &&
                       std::abs(bl.weight("b") - 0.375) < 1e-12;
    o.detail << " blacklist c -> (" << fmt(bl.weight("a")) << "," << fmt(bl.weight("b")) << "," << bl.weight("c") << ");";
    o.require(bl_ok, "blacklist zeroing + renormalization");

    CampaignConfig cc;
    cc.n_draws = 10'000;
    cc.seed = 3;
    auto s = create_campaign("inv", {"a", "b", "c"}, cc);
    s = run_batch(s, {{"a", {30, 70}}, {"b", {20, 80}}, {"c", {10, 90}}}).state;
    const auto zero = run_batch(s, {{"a", {0, 0}}, {"b", {0, 0}}, {"c", {0, 0}}});
    bool identical = zero.unchanged && zero.state == s && zero.allocation.epoch == s.allocation.epoch &&
                     zero.allocation.weights.size() == s.allocation.weights.size();
    for (const auto& [arm, w] : s.allocation.weights) {
        const double z = zero.allocation.weight(arm);
        identical = identical && std::memcmp(&z, &w, sizeof w) == 0;
    }
    o.detail << " zero-event batch bit-identical=" << (identical ? "yes" : "no") << ";";
    o.require(identical, "zero-event batch");

    const auto added = add_arm(s, "new");
    const bool prior_ok = added.arms.at("new").posterior == prior() && added.arms.at("new").stats == SufficientStats{};
    o.detail << " new arm Beta(" << added.arms.at("new").posterior.alpha << "," << added.arms.at("new").posterior.beta
             << ");";
    o.require(prior_ok, "mid-campaign arm starts at Beta(1,1)");
}

sim::EnvironmentSpec two_arm_env(double a, double b, std::uint64_t seed) {
    sim::EnvironmentSpec env;
    env.arms = {{"arm-a", a}, {"arm-b", b}};
    env.visitors_per_epoch = 10'000;
    env.seed = seed;
    return env;
}

void convergence(Outcome& o) {
    sim::SimConfig config;
    config.campaign.default_floor = 0.0;
    std::size_t hits = 0;
    double min_w = 1.0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        const auto trace = sim::simulate_campaign(two_arm_env(0.10, 0.12, seed), config, 14);
        const double w = trace.final_allocation.weight("arm-b");
        min_w = std::min(min_w, w);
        hits += w >= 0.90 ? 1 : 0;
    }
    o.detail << " best arm >= 0.90 after 14 epochs in " << hits << "/50 seeds (need >= 45), min " << fmt(min_w, 4)
             << ";";
    o.require(hits >= 45, ">= 90% of seeds");
}

void recovery(Outcome& o) {
    // arm-a leads until epoch 10, then drifts below arm-b.
    sim::SimConfig config;
    config.campaign.default_floor = 0.05;
    std::size_t hits = 0, ever = 0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        auto env = two_arm_env(0.12, 0.10, seed);
        env.drift["arm-a"] = {{10, 0.08}};
        env.drift["arm-b"] = {{10, 0.14}};
        const auto trace = sim::simulate_campaign(env, config, 26);
        hits += trace.epochs[25].allocation.at("arm-b") > 0.5 ? 1 : 0;
        bool crossed = false;
        for (std::size_t e = 10; e <= 25; ++e) crossed = crossed || trace.epochs[e].allocation.at("arm-b") > 0.5;
        ever += crossed ? 1 : 0;
    }
    o.detail << " drifted-up arm above 0.5 at epoch 25 in " << hits << "/50 seeds (need >= 35); crossed by epoch 25 in "
             << ever << "/50;";
    o.require(hits >= 35, ">= 70% of seeds");
}

void randomizer_fidelity(Outcome& o) {
    const Allocation alloc{{{"a", 0.15}, {"b", 0.35}, {"blocked", 0.0}, {"c", 0.05}, {"d", 0.45}}, 0};
    const auto cum = build_cumulative(alloc);
    std::map<ArmId, double> counts;
    Rng rng(777);
    const std::size_t n = 100'000;
    for (std::size_t i = 0; i < n; ++i) counts[pick_arm(cum, rng.uniform())] += 1.0;
    std::vector<double> observed, expected;
    for (const auto& [arm, w] : alloc.weights) {
        if (w == 0.0) continue;
        observed.push_back(counts[arm]);
        expected.push_back(w * static_cast<double>(n));
    }
    const double chi2 = testing::chi_square(observed, expected);
    const double crit = testing::chi_square_critical(0.001, static_cast<int>(observed.size()) - 1);
    o.detail << " chi2=" << fmt(chi2, 4) << " < " << fmt(crit, 5) << " (dof " << observed.size() - 1
             << "); blacklisted count=" << counts["blocked"] << ";";
    o.require(chi2 < crit, "chi-square at 0.001");
    o.require(counts["blocked"] == 0.0, "blacklisted count exactly 0");
}

void metrics_oracle(Outcome& o) {
    Rng rng(4242);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto inst = testing::oracle::random_instance(rng);
        const auto ref = testing::oracle::evaluate(inst);
        worst = std::max({worst, std::abs(metrics::mrr(inst.lists, inst.truth) - ref.rr),
                          std::abs(metrics::ndcg_at_k(inst.lists, inst.truth, inst.k) - ref.ndcg),
                          std::abs(metrics::map_at_k(inst.lists, inst.truth, inst.k) - ref.ap)});
    }
    o.detail << " max |diff| vs brute force over 1000 instances=" << worst << ";";
    o.require(worst <= 1e-12, "oracle equivalence to 1e-12");

    std::size_t swaps = 0, violations = 0;
    while (swaps < 10'000) {
        const auto inst = testing::oracle::random_instance(rng);
        const auto& l = inst.lists[rng.below(inst.lists.size())];
        std::vector<std::size_t> rel;
        for (std::size_t p = 1; p < l.items.size(); ++p) {
            if (inst.truth.relevant(l.user_id, l.items[p])) rel.push_back(p);
        }
        if (rel.empty()) continue;
        const std::size_t from = rel[rng.below(rel.size())];
        metrics::RankedList moved = l;
        std::swap(moved.items[from], moved.items[rng.below(from)]);
        ++swaps;
        if (metrics::reciprocal_rank(moved, inst.truth) < metrics::reciprocal_rank(l, inst.truth) ||
            metrics::ndcg(moved, inst.truth, inst.k) < metrics::ndcg(l, inst.truth, inst.k) - 1e-15 ||
            metrics::average_precision(moved, inst.truth, inst.k) <
                metrics::average_precision(l, inst.truth, inst.k) - 1e-15) {
            ++violations;
        }
    }
    o.detail << " swap-monotonicity violations=" << violations << "/" << swaps << ";";
    o.require(violations == 0, "swap monotonicity");
}

void attribution(Outcome& o) {
    Rng rng(99);
    const std::vector<std::string> arms{"a", "b", "c", "d"};
    std::size_t mismatches = 0, cells = 0, order_failures = 0;
    for (int fixture = 0; fixture < 20; ++fixture) {
        std::vector<ServedEvent> served;
        std::vector<InteractionEvent> interactions;
        std::set<std::string> bots;
        const std::size_t visitors = 50 + rng.below(200);
        for (std::size_t v = 0; v < visitors; ++v) {
            if (rng.bernoulli(0.15)) bots.insert("v" + std::to_string(v));
        }
        for (std::size_t i = 0; i < 2000; ++i) {
            const std::string v = "v" + std::to_string(rng.below(visitors));
            const Millis t = static_cast<Millis>(rng.below(4 * kDayMs));
            const std::string req = "r" + std::to_string(i);
            served.push_back({v, ArmId{arms[rng.below(arms.size())]}, t, req});
            if (rng.bernoulli(0.25)) {
                interactions.push_back({v, InteractionKind::click, t + static_cast<Millis>(rng.below(40 * kMinuteMs)),
                                        rng.bernoulli(0.5) ? std::optional<std::string>(req) : std::nullopt});
            }
            if (rng.bernoulli(0.03)) interactions.push_back({v, InteractionKind::purchase, t + 1000, std::nullopt});
        }
        const auto joined = join_ruds(served, interactions);
        const auto kept = filter_bots(joined.records, bot_list(bots)).records;
        std::map<std::pair<std::int64_t, ArmId>, std::set<std::string>> truth;
        for (const auto& s : served) {
            if (!bots.count(s.visitor_id)) truth[{epoch_of(s.timestamp), s.arm}].insert(s.visitor_id);
        }
        for (std::int64_t day = 0; day < 4; ++day) {
            const auto stats = aggregate_stats(kept, day);
            for (const auto& arm : arms) {
                auto it = truth.find({day, ArmId{arm}});
                const std::uint64_t expected = it == truth.end() ? 0 : it->second.size();
                auto st = stats.find(ArmId{arm});
                ++cells;
                mismatches += (st == stats.end() ? 0 : st->second.trials()) == expected ? 0 : 1;
            }
        }
        if (fixture == 0) {
            for (int shuffle = 0; shuffle < 100; ++shuffle) {
                auto s = served;
                auto x = interactions;
                for (std::size_t i = s.size(); i > 1; --i) std::swap(s[i - 1], s[rng.below(i)]);
                for (std::size_t i = x.size(); i > 1; --i) std::swap(x[i - 1], x[rng.below(i)]);
                const auto r = join_ruds(s, x);
                if (!(r.records == joined.records) || r.unmatched_interactions != joined.unmatched_interactions) {
                    ++order_failures;
                }
            }
        }
    }
    o.detail << " S+F != distinct non-bot visitors in " << mismatches << "/" << cells
             << " arm-epoch cells; permutation mismatches " << order_failures << "/100;";
    o.require(mismatches == 0, "S+F equals distinct visitors");
    o.require(order_failures == 0, "permutation invariance");
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void dump(const fs::path& p, const std::string& body) { std::ofstream(p, std::ios::binary) << body; }

void crash_safety(Outcome& o) {
    const fs::path dir = testing::temp_dir("acceptance");
    struct Cleanup {
        fs::path d;
        ~Cleanup() { fs::remove_all(d); }
    } cleanup{dir};

    // Live 10-epoch simulated run, mirrored into a store batch by batch.
    auto env = two_arm_env(0.10, 0.12, 31);
    env.arms[ArmId{"arm-c"}] = 0.11;
    sim::SimConfig config;
    config.campaign.n_draws = 2000;
    const auto trace = sim::simulate_campaign(env, config, 10);

    CampaignConfig cc = config.campaign;
    cc.seed = derive_seed(env.seed, 0, 0xca);
    persistence::CampaignStore store(dir, "sim");
    CampaignState live = store.create({"arm-a", "arm-b", "arm-c"}, cc);
    for (const auto& e : trace.epochs) {
        auto out = run_batch(live, e.stats);
        if (!out.unchanged) live = store.commit_batch(live, out.state);
    }
    const auto replayed = persistence::replay(persistence::read_journal(store.journal_path()));
    bool posteriors_equal = live.epoch == 10 && replayed.epoch == 10;
    for (const auto& [arm, a] : trace.final_state.arms) {
        posteriors_equal = posteriors_equal && replayed.arms.at(arm).posterior == a.posterior &&
                           live.arms.at(arm).posterior == a.posterior;
    }
    const bool replay_ok = posteriors_equal && replayed == live && replayed.allocation == trace.final_allocation;
    o.detail << " replay of 10-epoch simulated run equals live=" << (replay_ok ? "yes" : "no") << ";";
    o.require(replay_ok, "replay equals live");

    // One more batch, then damage the files the way a crash would.
    const CampaignState pre = live;
    const std::string journal_pre = slurp(store.journal_path());
    const CampaignState post = store.commit_batch(pre, run_batch(pre, trace.epochs.back().stats).state);
    const std::string journal_post = slurp(store.journal_path());
    const fs::path snap = store.dir() / persistence::snapshot_name("sim", post.epoch);
    const std::string snap_full = slurp(snap);

    std::size_t trials = 0, hybrids = 0;
    auto check = [&](const std::string& journal, const std::string& snapshot_bytes, bool snapshot_present) {
        dump(store.journal_path(), journal);
        if (snapshot_present) dump(snap, snapshot_bytes);
        else fs::remove(snap);
        ++trials;
        try {
            const auto got = store.recover();
            if (!(got == pre || got == post)) ++hybrids;
        } catch (const std::exception&) {
            ++hybrids;
        }
    };
    for (std::size_t cut = 0; cut <= snap_full.size(); ++cut) {
        check(journal_post, snap_full.substr(0, cut), true);
        check(journal_pre, snap_full.substr(0, cut), true);
    }
    for (std::size_t cut = journal_pre.size(); cut <= journal_post.size(); ++cut) {
        check(journal_post.substr(0, cut), "", false);
    }
    o.detail << " snapshot truncated at every byte offset (" << snap_full.size() + 1
             << " offsets) and journal torn at every offset of the last append: " << trials - hybrids << "/" << trials
             << " recoveries landed on the pre- or post-batch state;";
    o.require(hybrids == 0, "no hybrid or failed recovery");
}

} // namespace

int main() {
    std::cout << "mabflow acceptance suite" << std::endl;
    criterion("Posterior correctness", 10, posterior_correctness);
    criterion("Allocation oracle", 30, allocation_oracle);
    criterion("Robustness invariants", 0, robustness_invariants);
    criterion("Convergence", 120, convergence);
    criterion("Recovery", 0, recovery);
    criterion("Randomizer fidelity", 0, randomizer_fidelity);
    criterion("Metrics oracle", 0, metrics_oracle);
    criterion("Attribution", 0, attribution);
    criterion("Crash safety", 0, crash_safety);
    std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : std::to_string(failures) + " CRITERIA FAILED") << std::endl;
    return failures == 0 ? 0 : 1;
}
