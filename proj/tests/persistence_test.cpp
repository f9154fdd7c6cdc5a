#include "mabflow/persistence.hpp"

#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"

namespace mabflow::persistence {
namespace {

class PersistenceTest : public ::testing::Test {
protected:
    fs::path dir = mabflow::testing::temp_dir("persist");
    void TearDown() override { fs::remove_all(dir); }

    static CampaignConfig config() {
        CampaignConfig c;
        c.n_draws = 1000;
        c.default_floor = 0.05;
        c.seed = 99;
        return c;
    }

    static StatsDelta delta_for(const CampaignState& s, Rng& rng) {
        StatsDelta d;
        for (const auto& arm : s.arm_ids()) d[arm] = {rng.below(40), rng.below(400)};
        return d;
    }

    // Drives a store through `epochs` batches the way the service does.
    static CampaignState run(CampaignStore& store, CampaignState s, std::size_t epochs, Rng& rng) {
        for (std::size_t e = 0; e < epochs; ++e) {
            auto out = run_batch(s, delta_for(s, rng));
            out.state.event_cursor = s.event_cursor + 17;
            out.state.late_interactions = s.late_interactions + e;
            s = store.commit_batch(s, out.state);
        }
        return s;
    }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    static void dump(const fs::path& p, const std::string& body) { std::ofstream(p, std::ios::binary) << body; }
};

TEST_F(PersistenceTest, SnapshotRoundTrip) {
    Rng rng(1);
    auto s = create_campaign("c1", {"a", "b", "c"}, config());
    s = run_batch(s, delta_for(s, rng)).state;
    s = blacklist_arm(s, "c");
    s = set_floor_schedule(s, {{{4, 0.1}}});
    s = run_batch(s, delta_for(s, rng)).state;
    const auto path = snapshot(dir, s);
    EXPECT_EQ(path.filename(), "campaign-c1-epoch-2.json");
    EXPECT_EQ(load_snapshot(path), s);
    EXPECT_EQ(nlohmann::json::parse(slurp(path)).at("version"), 1);
    EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
}

TEST_F(PersistenceTest, MissingSnapshotIsNotFound) {
    try {
        load_snapshot(dir / "campaign-x-epoch-0.json");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::not_found);
    }
    EXPECT_THROW(CampaignStore(dir, "ghost").recover(), Error);
}

TEST_F(PersistenceTest, CorruptSnapshotIsAStorageError) {
    auto s = create_campaign("c1", {"a", "b"}, config());
    auto j = nlohmann::json::parse(encode_snapshot(s));
    j["state"]["arms"]["a"]["posterior"]["alpha"] = 7.0;
    try {
        decode_snapshot(j.dump());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::storage);
    }
    j = nlohmann::json::parse(encode_snapshot(s));
    j["version"] = 2;
    EXPECT_THROW(decode_snapshot(j.dump()), Error);
}

TEST_F(PersistenceTest, SnapshotsListNewestFirst) {
    CampaignStore store(dir, "c1");
    Rng rng(2);
    run(store, store.create({"a", "b"}, config()), 3, rng);
    dump(store.dir() / "campaign-c1-epoch-x.json", "{}");
    dump(store.dir() / "campaign-c10-epoch-9.json", "{}");
    const auto snaps = list_snapshots(store.dir(), "c1");
    ASSERT_EQ(snaps.size(), 4u);
    EXPECT_EQ(snaps.front().first, 3u);
    EXPECT_EQ(snaps.back().first, 0u);
}

TEST_F(PersistenceTest, ReplayOfTenEpochsEqualsLiveState) {
    CampaignStore store(dir, "c1");
    Rng rng(3);
    const auto live = run(store, store.create({"a", "b", "c", "d"}, config()), 10, rng);
    const auto log = read_journal(store.journal_path());
    ASSERT_EQ(log.size(), 11u);
    const auto replayed = replay(log);
    EXPECT_EQ(replayed, live);
    for (const auto& [arm, a] : live.arms) EXPECT_EQ(replayed.arms.at(arm).posterior, a.posterior);
    EXPECT_EQ(store.recover(), live);
}

TEST_F(PersistenceTest, ReplayFromMidSnapshotEqualsFullReplay) {
    CampaignStore store(dir, "c1");
    Rng rng(4);
    const auto live = run(store, store.create({"a", "b", "c"}, config()), 10, rng);
    const auto log = read_journal(store.journal_path());
    const auto base = load_snapshot(store.dir() / snapshot_name("c1", 5));
    EXPECT_EQ(base.epoch, 5u);
    EXPECT_EQ(replay(log, base), replay(log));
    EXPECT_EQ(replay(log, base), live);
}

TEST_F(PersistenceTest, MissingEpochIsAGapError) {
    CampaignStore store(dir, "c1");
    Rng rng(5);
    run(store, store.create({"a", "b"}, config()), 10, rng);
    auto log = read_journal(store.journal_path());
    log.erase(std::remove_if(log.begin(), log.end(),
                             [](const JournalEntry& e) { return e.type == EntryType::batch && e.record.epoch == 7; }),
              log.end());
    try {
        replay(log);
        FAIL() << "expected a gap error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::gap);
        EXPECT_NE(std::string(e.what()).find("epoch 7"), std::string::npos) << e.what();
        EXPECT_EQ(e.detail(), "7-7");
    }
}

TEST_F(PersistenceTest, TamperedBatchFailsVerification) {
    CampaignStore store(dir, "c1");
    Rng rng(6);
    run(store, store.create({"a", "b"}, config()), 3, rng);
    auto log = read_journal(store.journal_path());
    log[2].record.post_floor.begin()->second += 1e-6;
    try {
        replay(log);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::storage);
    }
}

TEST_F(PersistenceTest, AdminActionsAreJournaledAndRecovered) {
    CampaignStore store(dir, "c1");
    Rng rng(7);
    auto s = store.create({"a", "b"}, config());
    s = run(store, s, 2, rng);
    s = store.record_admin(s, add_arm(s, "n"));
    s = store.record_admin(s, blacklist_arm(s, "a"));
    s = run(store, s, 1, rng);
    s = store.record_admin(s, set_floor_schedule(s, {{{5, 0.2}}}));
    s = store.record_admin(s, unblacklist_arm(s, "a"));
    EXPECT_EQ(s.journal_cursor, 8u);
    // The last two actions live only in the journal, after snapshot@3.
    const auto back = store.recover();
    EXPECT_EQ(back, s);
    EXPECT_TRUE(back.blacklist.empty());
    EXPECT_EQ(back.config.floor_schedule.entries.size(), 1u);
}

TEST_F(PersistenceTest, TornJournalTailIsIgnored) {
    CampaignStore store(dir, "c1");
    Rng rng(8);
    const auto pre = run(store, store.create({"a", "b"}, config()), 4, rng);
    const std::string before = slurp(store.journal_path());
    const auto post = run(store, pre, 1, rng);
    const std::string full = slurp(store.journal_path());
    fs::remove(store.dir() / snapshot_name("c1", 5));

    for (std::size_t cut = before.size(); cut <= full.size(); ++cut) {
        dump(store.journal_path(), full.substr(0, cut));
        const auto got = store.recover();
        // A line missing only its newline is still torn: it was never acknowledged.
        EXPECT_EQ(got, cut == full.size() ? post : pre) << "cut at " << cut;
    }
}

TEST_F(PersistenceTest, CorruptionBeforeTheTailIsFatal) {
    CampaignStore store(dir, "c1");
    Rng rng(9);
    run(store, store.create({"a", "b"}, config()), 3, rng);
    std::string j = slurp(store.journal_path());
    j[j.find("\"batch\"") + 2] = '#';
    dump(store.journal_path(), j);
    try {
        read_journal(store.journal_path());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::storage);
    }
}

TEST_F(PersistenceTest, TruncatedSnapshotAtEveryOffsetRecovers) {
    CampaignStore store(dir, "c1");
    Rng rng(10);
    const auto pre = run(store, store.create({"a", "b", "c"}, config()), 4, rng);
    const auto post = run(store, pre, 1, rng);
    const fs::path snap = store.dir() / snapshot_name("c1", 5);
    const std::string full = slurp(snap);
    const std::string journal = slurp(store.journal_path());
    const std::string journal_pre = journal.substr(0, journal.rfind('\n', journal.size() - 2) + 1);

    for (std::size_t cut = 0; cut < full.size(); ++cut) {
        dump(snap, full.substr(0, cut));
        // Journal committed: the batch survives via replay.
        dump(store.journal_path(), journal);
        ASSERT_EQ(store.recover(), post) << "cut at " << cut;
        // Crash before the journal append: back to the pre-batch state.
        dump(store.journal_path(), journal_pre);
        ASSERT_EQ(store.recover(), pre) << "cut at " << cut;
    }
    // A complete snapshot that is ahead of a torn journal is not trusted.
    dump(snap, full);
    dump(store.journal_path(), journal_pre);
    EXPECT_EQ(store.recover(), pre);
}

TEST_F(PersistenceTest, CreateTwiceIsAConflict) {
    CampaignStore store(dir, "c1");
    store.create({"a"}, config());
    try {
        store.create({"a"}, config());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::conflict);
    }
}

TEST_F(PersistenceTest, EventSegmentsRotateToGzip) {
    CampaignStore store(dir, "c1");
    const std::int64_t day1 = 1'700'000'000'000, day2 = day1 + kDayMs;
    std::vector<Event> first{ServedEvent{"v1", "a", day1, "r1"}, InteractionEvent{"v1", InteractionKind::click, day1 + 5, "r1"}};
    std::vector<Event> second{ServedEvent{"v2", "b", day2, "r2"}};
    store.append_events(first, day1);
    store.append_events(second, day2);
    auto segs = list_event_segments(store.dir());
    ASSERT_EQ(segs.size(), 2u);
    EXPECT_EQ(segs[0].filename(), "events-2023-11-14.jsonl");

    EXPECT_EQ(rotate_event_segments(store.dir(), utc_date(day2)), 1u);
    segs = list_event_segments(store.dir());
    EXPECT_EQ(segs[0].filename(), "events-2023-11-14.jsonl.gz");
    EXPECT_EQ(segs[1].filename(), "events-2023-11-15.jsonl");

    auto all = first;
    all.insert(all.end(), second.begin(), second.end());
    EXPECT_EQ(store.events(), all);
}

TEST_F(PersistenceTest, AtomicWriteReplacesContent) {
    const auto p = dir / "x.txt";
    atomic_write(p, "one\n");
    atomic_write(p, "two\nthree");
    bool complete = true;
    EXPECT_EQ(read_lines(p, &complete), (std::vector<std::string>{"two", "three"}));
    EXPECT_FALSE(complete);
}

} // namespace
} // namespace mabflow::persistence
