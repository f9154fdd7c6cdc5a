#pragma once

// Durable campaign storage.
//
// Layout under <data_dir>/<campaign_id>/:
//   journal.jsonl                    append-only campaign journal (source of truth)
//   campaign-<id>-epoch-<t>.json     versioned state snapshot after batch t
//   events-<YYYY-MM-DD>.jsonl[.gz]   ingested raw events, one segment per UTC day
//
// A batch commits by appending its journal entry (fsync'd). The snapshot is
// written afterwards with write-temp/fsync/rename and is only an
// optimization: recovery takes the newest readable snapshot and replays the
// journal entries it has not seen. A torn trailing journal line is a batch
// that never committed and is ignored.

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabflow/attribution.hpp"
#include "mabflow/campaign.hpp"
#include "mabflow/error.hpp"

namespace mabflow::persistence {

namespace fs = std::filesystem;

inline constexpr int kSnapshotVersion = 1;

// ---------------------------------------------------------------------------
// File primitives

namespace detail {

inline void write_all(int fd, const std::string& data, const fs::path& path) {
    const char* p = data.data();
    std::size_t left = data.size();
    while (left > 0) {
        const ssize_t n = ::write(fd, p, left);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(ErrorCode::storage, "write failed", path.string() + ": " + std::strerror(errno));
        }
        p += n;
        left -= static_cast<std::size_t>(n);
    }
}

inline void fsync_dir(const fs::path& dir) {
    const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd < 0) return;
    ::fsync(fd);
    ::close(fd);
}

} // namespace detail

// Replaces `path` with `content` atomically: readers see the old file or the
// new one, never a prefix.
inline void atomic_write(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) throw Error(ErrorCode::storage, "cannot create file", tmp.string() + ": " + std::strerror(errno));
    try {
        detail::write_all(fd, content, tmp);
        if (::fsync(fd) != 0) throw Error(ErrorCode::storage, "fsync failed", tmp.string());
    } catch (...) {
        ::close(fd);
        fs::remove(tmp);
        throw;
    }
    ::close(fd);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error(ErrorCode::storage, "rename failed", ec.message());
    detail::fsync_dir(path.parent_path());
}

inline void append_line(const fs::path& path, const std::string& line) {
    fs::create_directories(path.parent_path());
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw Error(ErrorCode::storage, "cannot open for append", path.string() + ": " + std::strerror(errno));
    try {
        detail::write_all(fd, line + "\n", path);
        if (::fsync(fd) != 0) throw Error(ErrorCode::storage, "fsync failed", path.string());
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::close(fd);
}

// Reads a plain or gzip-compressed text file as lines. `complete` reports
// whether the final line was newline-terminated.
inline std::vector<std::string> read_lines(const fs::path& path, bool* complete = nullptr) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw Error(ErrorCode::not_found, "cannot open file", path.string());
    std::string data;
    char buf[1 << 15];
    for (;;) {
        const int n = gzread(f, buf, sizeof buf);
        if (n < 0) {
            gzclose(f);
            throw Error(ErrorCode::storage, "read failed", path.string());
        }
        if (n == 0) break;
        data.append(buf, static_cast<std::size_t>(n));
    }
    gzclose(f);

    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < data.size()) {
        const auto nl = data.find('\n', start);
        if (nl == std::string::npos) {
            lines.push_back(data.substr(start));
            break;
        }
        lines.push_back(data.substr(start, nl - start));
        start = nl + 1;
    }
    if (complete) *complete = data.empty() || data.back() == '\n';
    return lines;
}

inline void gzip_file(const fs::path& src, const fs::path& dst) {
    std::ifstream in(src, std::ios::binary);
    if (!in) throw Error(ErrorCode::not_found, "cannot open file", src.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string data = ss.str();
    const fs::path tmp = dst.string() + ".tmp";
    gzFile out = gzopen(tmp.c_str(), "wb");
    if (!out) throw Error(ErrorCode::storage, "cannot create file", tmp.string());
    if (!data.empty() && gzwrite(out, data.data(), static_cast<unsigned>(data.size())) == 0) {
        gzclose(out);
        throw Error(ErrorCode::storage, "gzip write failed", tmp.string());
    }
    gzclose(out);
    fs::rename(tmp, dst);
}

// ---------------------------------------------------------------------------
// Snapshots

inline std::string snapshot_name(const std::string& campaign_id, std::uint64_t epoch) {
    return "campaign-" + campaign_id + "-epoch-" + std::to_string(epoch) + ".json";
}

// Structural invariants every stored state must satisfy.
inline void check_consistent(const CampaignState& s) {
    for (const auto& [arm, a] : s.arms) {
        if (!(a.posterior == update(a.stats))) throw Error(ErrorCode::storage, "posterior does not match counts", arm.value);
    }
    if (s.audit.size() != s.epoch) throw Error(ErrorCode::storage, "audit length does not match epoch");
    for (const auto& b : s.blacklist) {
        if (!s.arms.count(b)) throw Error(ErrorCode::storage, "blacklist names an unknown arm", b.value);
    }
}

inline std::string encode_snapshot(const CampaignState& s) {
    return nlohmann::json{{"version", kSnapshotVersion}, {"state", s}}.dump() + "\n";
}

inline CampaignState decode_snapshot(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::storage, "corrupt snapshot", e.what());
    }
    try {
        if (j.at("version").get<int>() != kSnapshotVersion) {
            throw Error(ErrorCode::storage, "unsupported snapshot version");
        }
        auto s = j.at("state").get<CampaignState>();
        check_consistent(s);
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::storage, "corrupt snapshot", e.what());
    }
}

inline fs::path snapshot(const fs::path& dir, const CampaignState& s) {
    const fs::path path = dir / snapshot_name(s.id, s.epoch);
    atomic_write(path, encode_snapshot(s));
    return path;
}

inline CampaignState load_snapshot(const fs::path& path) {
    if (!fs::exists(path)) throw Error(ErrorCode::not_found, "no such campaign snapshot", path.string());
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return decode_snapshot(ss.str());
}

// Snapshot files for `campaign_id` in `dir`, newest epoch first.
inline std::vector<std::pair<std::uint64_t, fs::path>> list_snapshots(const fs::path& dir,
                                                                    const std::string& campaign_id) {
    std::vector<std::pair<std::uint64_t, fs::path>> out;
    if (!fs::exists(dir)) return out;
    const std::string prefix = "campaign-" + campaign_id + "-epoch-";
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind(prefix, 0) != 0 || name.size() <= prefix.size() + 5) continue;
        if (name.compare(name.size() - 5, 5, ".json") != 0) continue;
        const std::string digits = name.substr(prefix.size(), name.size() - prefix.size() - 5);
        if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) continue;
        out.emplace_back(std::stoull(digits), entry.path());
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    return out;
}

// ---------------------------------------------------------------------------
// Journal

enum class EntryType { create, admin, batch };

struct JournalEntry {
    EntryType type = EntryType::create;
    std::uint64_t seq = 0;
    // create
    std::string campaign_id;
    std::vector<ArmId> arms;
    CampaignConfig config;
    // admin
    AdminAction action;
    // batch
    AuditRecord record;
    std::uint64_t event_cursor = 0;
    std::uint64_t late_interactions = 0;
};

inline nlohmann::json to_json(const JournalEntry& e) {
    switch (e.type) {
    case EntryType::create: {
        auto arms = nlohmann::json::array();
        for (const auto& a : e.arms) arms.push_back(a.value);
        return {{"type", "create"}, {"seq", e.seq}, {"id", e.campaign_id}, {"arms", arms}, {"config", e.config}};
    }
    case EntryType::admin:
        return {{"type", "admin"}, {"seq", e.seq}, {"action", e.action}};
    case EntryType::batch:
        return {{"type", "batch"},
                {"seq", e.seq},
                {"record", e.record},
                {"event_cursor", e.event_cursor},
                {"late_interactions", e.late_interactions}};
    }
    return {};
}

inline JournalEntry journal_entry_from_json(const nlohmann::json& j) {
    JournalEntry e;
    const auto type = j.at("type").get<std::string>();
    e.seq = j.at("seq").get<std::uint64_t>();
    if (type == "create") {
        e.type = EntryType::create;
        e.campaign_id = j.at("id").get<std::string>();
        for (const auto& a : j.at("arms")) e.arms.emplace_back(a.get<std::string>());
        e.config = j.at("config").get<CampaignConfig>();
    } else if (type == "admin") {
        e.type = EntryType::admin;
        e.action = j.at("action").get<AdminAction>();
    } else if (type == "batch") {
        e.type = EntryType::batch;
        e.record = j.at("record").get<AuditRecord>();
        e.event_cursor = j.at("event_cursor").get<std::uint64_t>();
        e.late_interactions = j.at("late_interactions").get<std::uint64_t>();
    } else {
        throw Error(ErrorCode::storage, "unknown journal entry type: " + type);
    }
    return e;
}

// Reads the journal. An unterminated or unparsable final line is a torn
// append and is dropped; damage anywhere else is a storage error.
inline std::vector<JournalEntry> read_journal(const fs::path& path) {
    if (!fs::exists(path)) return {};
    bool complete = true;
    auto lines = read_lines(path, &complete);
    std::vector<JournalEntry> out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const bool last = i + 1 == lines.size();
        if (last && !complete) break;
        if (lines[i].empty()) continue;
        try {
            out.push_back(journal_entry_from_json(nlohmann::json::parse(lines[i])));
        } catch (const std::exception& e) {
            if (last) break;
            throw Error(ErrorCode::storage, "corrupt journal line " + std::to_string(i + 1), e.what());
        }
    }
    return out;
}

inline CampaignState apply_admin(const CampaignState& s, const AdminAction& a) {
    switch (a.kind) {
    case AdminKind::add_arm: return add_arm(s, a.arm);
    case AdminKind::blacklist: return blacklist_arm(s, a.arm);
    case AdminKind::unblacklist: return unblacklist_arm(s, a.arm);
    case AdminKind::floor_schedule: return set_floor_schedule(s, a.schedule);
    }
    return s;
}

// Rebuilds a campaign from its journal, starting either from scratch or from
// `base` (a snapshot; its epoch is the replay's from_epoch). Each batch is
// re-executed with its recorded seed and must reproduce the recorded
// allocation exactly.
inline CampaignState replay(const std::vector<JournalEntry>& log, const std::optional<CampaignState>& base = {}) {
    std::optional<CampaignState> state = base;
    std::uint64_t next_seq = base ? base->journal_cursor : 0;

    for (const auto& e : log) {
        if (e.seq < next_seq) continue;
        if (e.type == EntryType::batch && state && e.record.epoch != state->epoch + 1) {
            if (e.record.epoch > state->epoch + 1) {
                const auto first = state->epoch + 1, last = e.record.epoch - 1;
                throw Error(ErrorCode::gap,
                            first == last ? "journal is missing epoch " + std::to_string(first)
                                          : "journal is missing epochs " + std::to_string(first) + ".." +
                                                std::to_string(last),
                            std::to_string(first) + "-" + std::to_string(last));
            }
            throw Error(ErrorCode::storage, "journal epoch goes backwards");
        }
        if (e.seq != next_seq) {
            throw Error(ErrorCode::gap, "journal is missing entries " + std::to_string(next_seq) + ".." +
                                            std::to_string(e.seq - 1));
        }

        switch (e.type) {
        case EntryType::create:
            if (state) throw Error(ErrorCode::storage, "duplicate create entry in journal");
            state = create_campaign(e.campaign_id, e.arms, e.config);
            break;
        case EntryType::admin:
            if (!state) throw Error(ErrorCode::gap, "journal does not start with a create entry");
            state = apply_admin(*state, e.action);
            break;
        case EntryType::batch: {
            if (!state) throw Error(ErrorCode::gap, "journal does not start with a create entry");
            auto outcome = run_batch(*state, e.record.stats_delta, e.record.n_draws, e.record.seed);
            if (outcome.unchanged || !(outcome.state.audit.back() == e.record)) {
                throw Error(ErrorCode::storage, "replayed batch disagrees with the journal",
                            "epoch " + std::to_string(e.record.epoch));
            }
            state = std::move(outcome.state);
            state->event_cursor = e.event_cursor;
            state->late_interactions = e.late_interactions;
            break;
        }
        }
        ++next_seq;
        state->journal_cursor = next_seq;
    }
    if (!state) throw Error(ErrorCode::not_found, "campaign has no journal and no snapshot");
    return *state;
}

// ---------------------------------------------------------------------------
// Raw event segments

inline std::string utc_date(std::int64_t ms) {
    const std::time_t secs = static_cast<std::time_t>(ms / 1000);
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[16];
    std::strftime(buf, sizeof buf, "%Y-%m-%d", &tm);
    return buf;
}

inline std::int64_t now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

inline std::vector<fs::path> list_event_segments(const fs::path& dir) {
    std::vector<fs::path> out;
    if (!fs::exists(dir)) return out;
    static const std::regex pattern(R"(events-\d{4}-\d{2}-\d{2}\.jsonl(\.gz)?)");
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (std::regex_match(entry.path().filename().string(), pattern)) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Gzips every plain segment older than `keep_date` (YYYY-MM-DD).
inline std::size_t rotate_event_segments(const fs::path& dir, const std::string& keep_date) {
    std::size_t n = 0;
    for (const auto& p : list_event_segments(dir)) {
        const std::string name = p.filename().string();
        if (p.extension() != ".jsonl") continue;
        if (name.substr(7, 10) >= keep_date) continue;
        gzip_file(p, p.string() + ".gz");
        fs::remove(p);
        ++n;
    }
    return n;
}

// All stored events in ingestion order.
inline std::vector<Event> read_events(const fs::path& dir) {
    std::vector<Event> out;
    for (const auto& seg : list_event_segments(dir)) {
        bool complete = true;
        auto lines = read_lines(seg, &complete);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (i + 1 == lines.size() && !complete) break;
            if (lines[i].empty()) continue;
            out.push_back(parse_event(lines[i]));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Store

class CampaignStore {
public:
    CampaignStore(fs::path data_dir, std::string campaign_id)
        : dir_(std::move(data_dir) / campaign_id), id_(std::move(campaign_id)) {}

    const fs::path& dir() const { return dir_; }
    fs::path journal_path() const { return dir_ / "journal.jsonl"; }
    bool exists() const { return fs::exists(journal_path()); }

    CampaignState create(const std::vector<ArmId>& arms, const CampaignConfig& config) {
        if (exists()) throw Error(ErrorCode::conflict, "campaign already exists", id_);
        CampaignState s = create_campaign(id_, arms, config);
        JournalEntry e;
        e.type = EntryType::create;
        e.seq = 0;
        e.campaign_id = id_;
        e.arms = arms;
        e.config = config;
        append(e);
        s.journal_cursor = 1;
        snapshot(dir_, s);
        return s;
    }

    CampaignState record_admin(const CampaignState& before, const CampaignState& after) {
        if (after.admin_log.size() == before.admin_log.size()) return after;
        JournalEntry e;
        e.type = EntryType::admin;
        e.seq = before.journal_cursor;
        e.action = after.admin_log.back();
        append(e);
        CampaignState s = after;
        s.journal_cursor = before.journal_cursor + 1;
        return s;
    }

    // Journal first (the commit point), then the snapshot.
    CampaignState commit_batch(const CampaignState& before, const CampaignState& after) {
        JournalEntry e;
        e.type = EntryType::batch;
        e.seq = before.journal_cursor;
        e.record = after.audit.back();
        e.event_cursor = after.event_cursor;
        e.late_interactions = after.late_interactions;
        append(e);
        CampaignState s = after;
        s.journal_cursor = before.journal_cursor + 1;
        try {
            snapshot(dir_, s);
        } catch (const Error&) {
            // The journal already holds the batch; recovery replays it.
        }
        return s;
    }

    CampaignState recover() const {
        if (!fs::exists(dir_)) throw Error(ErrorCode::not_found, "unknown campaign", id_);
        const auto log = read_journal(journal_path());
        for (const auto& [epoch, path] : list_snapshots(dir_, id_)) {
            try {
                auto base = load_snapshot(path);
                if (base.journal_cursor > log.size()) continue;
                return replay(log, base);
            } catch (const Error& e) {
                if (e.code() == ErrorCode::gap) throw;
            }
        }
        return replay(log);
    }

    void append_events(const std::vector<Event>& events, std::int64_t ingest_ms) {
        if (events.empty()) return;
        std::string block;
        for (const auto& e : events) block += event_to_json(e).dump() + "\n";
        block.pop_back();
        append_line(dir_ / ("events-" + utc_date(ingest_ms) + ".jsonl"), block);
    }

    std::vector<Event> events() const { return read_events(dir_); }

private:
    void append(const JournalEntry& e) { append_line(journal_path(), to_json(e).dump()); }

    fs::path dir_;
    std::string id_;
};

} // namespace mabflow::persistence
