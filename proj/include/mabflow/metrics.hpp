#pragma once

// Offline ranking metrics over binary interaction matrices.
//
// Conventions (also stamped into every report):
//   * users with no relevant item score 0 and stay in the mean;
//   * IDCG@k is truncated at min(k, R), R = the user's relevant-item count;
//   * AP@k is normalized by min(k, R);
//   * MRR is not truncated.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "mabflow/error.hpp"

namespace mabflow::metrics {

enum class InteractionKind { click, purchase };

inline const char* to_string(InteractionKind k) { return k == InteractionKind::click ? "click" : "purchase"; }

inline InteractionKind kind_from_string(const std::string& s) {
    if (s == "click") return InteractionKind::click;
    if (s == "purchase") return InteractionKind::purchase;
    throw Error(ErrorCode::invalid, "interaction kind must be click or purchase: " + s);
}

class InteractionMatrix {
public:
    explicit InteractionMatrix(InteractionKind kind = InteractionKind::click) : kind_(kind) {}

    void set(const std::string& user, const std::string& item, int relevance) {
        if (relevance != 0 && relevance != 1) throw Error(ErrorCode::invalid, "relevance must be 0 or 1");
        auto& row = rows_[user];
        if (relevance) row.insert(item);
        else row.erase(item);
    }

    bool relevant(const std::string& user, const std::string& item) const {
        auto it = rows_.find(user);
        return it != rows_.end() && it->second.count(item) > 0;
    }

    std::size_t relevant_count(const std::string& user) const {
        auto it = rows_.find(user);
        return it == rows_.end() ? 0 : it->second.size();
    }

    // A user is known once any row (relevant or explicit 0) mentions them.
    bool knows(const std::string& user) const { return rows_.count(user) > 0; }

    InteractionKind kind() const { return kind_; }

private:
    InteractionKind kind_;
    std::unordered_map<std::string, std::unordered_set<std::string>> rows_;
};

struct RankedList {
    std::string user_id;
    std::vector<std::string> items;
};

namespace detail {

inline void validate(const std::vector<RankedList>& lists) {
    if (lists.empty()) throw Error(ErrorCode::parameter, "at least one ranked list is required");
    for (const auto& l : lists) {
        if (l.items.empty()) throw Error(ErrorCode::parameter, "ranked list is empty", l.user_id);
        std::unordered_set<std::string> seen;
        for (const auto& i : l.items) {
            if (!seen.insert(i).second) throw Error(ErrorCode::invalid, "duplicate item in ranked list", l.user_id);
        }
    }
}

inline void validate_k(std::size_t k) {
    if (k == 0) throw Error(ErrorCode::parameter, "k must be positive");
}

} // namespace detail

inline double reciprocal_rank(const RankedList& list, const InteractionMatrix& truth) {
    for (std::size_t r = 0; r < list.items.size(); ++r) {
        if (truth.relevant(list.user_id, list.items[r])) return 1.0 / static_cast<double>(r + 1);
    }
    return 0.0;
}

inline double ndcg(const RankedList& list, const InteractionMatrix& truth, std::size_t k) {
    const std::size_t relevant = truth.relevant_count(list.user_id);
    if (relevant == 0) return 0.0;
    double dcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, list.items.size()); ++r) {
        if (truth.relevant(list.user_id, list.items[r])) dcg += 1.0 / std::log2(static_cast<double>(r + 2));
    }
    double idcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, relevant); ++r) idcg += 1.0 / std::log2(static_cast<double>(r + 2));
    return dcg / idcg;
}

inline double average_precision(const RankedList& list, const InteractionMatrix& truth, std::size_t k) {
    const std::size_t relevant = truth.relevant_count(list.user_id);
    if (relevant == 0) return 0.0;
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < std::min(k, list.items.size()); ++r) {
        if (truth.relevant(list.user_id, list.items[r])) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
    }
    return sum / static_cast<double>(std::min(k, relevant));
}

inline double mrr(const std::vector<RankedList>& lists, const InteractionMatrix& truth) {
    detail::validate(lists);
    double s = 0.0;
    for (const auto& l : lists) s += reciprocal_rank(l, truth);
    return s / static_cast<double>(lists.size());
}

inline double ndcg_at_k(const std::vector<RankedList>& lists, const InteractionMatrix& truth, std::size_t k) {
    detail::validate(lists);
    detail::validate_k(k);
    double s = 0.0;
    for (const auto& l : lists) s += ndcg(l, truth, k);
    return s / static_cast<double>(lists.size());
}

inline double map_at_k(const std::vector<RankedList>& lists, const InteractionMatrix& truth, std::size_t k) {
    detail::validate(lists);
    detail::validate_k(k);
    double s = 0.0;
    for (const auto& l : lists) s += average_precision(l, truth, k);
    return s / static_cast<double>(lists.size());
}

struct Report {
    std::string model;
    InteractionKind kind = InteractionKind::click;
    std::size_t k = 10;
    double mrr = 0.0;
    double ndcg = 0.0;
    double map = 0.0;
    std::size_t n_users = 0;
};

inline Report evaluate(const std::string& model, const std::vector<RankedList>& lists, const InteractionMatrix& truth,
                       std::size_t k) {
    Report r;
    r.model = model;
    r.kind = truth.kind();
    r.k = k;
    r.mrr = mrr(lists, truth);
    r.ndcg = ndcg_at_k(lists, truth, k);
    r.map = map_at_k(lists, truth, k);
    r.n_users = lists.size();
    return r;
}

inline nlohmann::json to_json(const Report& r) {
    const std::string ks = std::to_string(r.k);
    return {{"model", r.model},
            {"kind", to_string(r.kind)},
            {"k", r.k},
            {"mrr", r.mrr},
            {"ndcg@" + ks, r.ndcg},
            {"map@" + ks, r.map},
            {"n_users", r.n_users},
            {"conventions",
             {{"users_without_relevant", "scored 0 and included in the mean"},
              {"idcg_truncation", "min(k, relevant)"},
              {"map_normalization", "min(k, relevant)"},
              {"mrr_truncation", "none"}}}};
}

// ---------------------------------------------------------------------------
// File formats
//
// Truth, JSONL:  {"user_id": "u1", "item_id": "i9", "relevance": 1}   (relevance defaults to 1)
// Truth, CSV:    user_id,item_id[,relevance]   with a header row
// Recs,  JSONL:  {"user_id": "u1", "items": ["i9", "i3", ...]}
// Recs,  CSV:    user_id,item_id,rank          with a header row; rank starts at 1
//
// The format is picked from the file extension (.csv, otherwise JSONL).

namespace detail {

inline bool is_csv(const std::string& path) {
    return path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    return out;
}

inline std::ifstream open(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::not_found, "cannot open file", path);
    return in;
}

inline std::string where(const std::string& path, std::size_t line_no) {
    return path + ":" + std::to_string(line_no);
}

} // namespace detail

inline InteractionMatrix load_truth(const std::string& path, InteractionKind kind) {
    auto in = detail::open(path);
    InteractionMatrix m(kind);
    std::string line;
    std::size_t n = 0;
    const bool csv = detail::is_csv(path);
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (csv) {
            if (n == 1) continue;
            auto cells = detail::split_csv(line);
            if (cells.size() < 2 || cells[0].empty() || cells[1].empty()) {
                throw Error(ErrorCode::invalid, "truth row needs user_id,item_id", detail::where(path, n));
            }
            int rel = 1;
            if (cells.size() >= 3) {
                if (cells[2] == "0") rel = 0;
                else if (cells[2] != "1") throw Error(ErrorCode::invalid, "relevance must be 0 or 1", detail::where(path, n));
            }
            m.set(cells[0], cells[1], rel);
        } else {
            try {
                auto j = nlohmann::json::parse(line);
                m.set(j.at("user_id").get<std::string>(), j.at("item_id").get<std::string>(), j.value("relevance", 1));
            } catch (const nlohmann::json::exception& e) {
                throw Error(ErrorCode::invalid, std::string("bad truth row: ") + e.what(), detail::where(path, n));
            }
        }
    }
    return m;
}

inline std::vector<RankedList> load_ranked_lists(const std::string& path) {
    auto in = detail::open(path);
    std::vector<RankedList> lists;
    std::string line;
    std::size_t n = 0;
    if (detail::is_csv(path)) {
        std::map<std::string, std::map<long, std::string>> by_user;
        std::vector<std::string> order;
        while (std::getline(in, line)) {
            ++n;
            if (n == 1 || line.find_first_not_of(" \t\r") == std::string::npos) continue;
            auto cells = detail::split_csv(line);
            if (cells.size() != 3) throw Error(ErrorCode::invalid, "recs row needs user_id,item_id,rank", detail::where(path, n));
            long rank = 0;
            try {
                rank = std::stol(cells[2]);
            } catch (const std::exception&) {
                throw Error(ErrorCode::invalid, "rank must be an integer", detail::where(path, n));
            }
            if (rank < 1) throw Error(ErrorCode::invalid, "rank must be >= 1", detail::where(path, n));
            if (!by_user.count(cells[0])) order.push_back(cells[0]);
            if (!by_user[cells[0]].emplace(rank, cells[1]).second) {
                throw Error(ErrorCode::invalid, "duplicate rank for user", detail::where(path, n));
            }
        }
        for (const auto& u : order) {
            RankedList l{u, {}};
            for (const auto& [rank, item] : by_user[u]) l.items.push_back(item);
            lists.push_back(std::move(l));
        }
        return lists;
    }
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            lists.push_back({j.at("user_id").get<std::string>(), j.at("items").get<std::vector<std::string>>()});
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::invalid, std::string("bad recs row: ") + e.what(), detail::where(path, n));
        }
    }
    return lists;
}

// Every ranked list must belong to a user the truth matrix knows, and each
// user may appear only once.
inline void check_user_alignment(const std::vector<RankedList>& lists, const InteractionMatrix& truth) {
    std::unordered_set<std::string> seen;
    for (const auto& l : lists) {
        if (!seen.insert(l.user_id).second) throw Error(ErrorCode::invalid, "user has more than one ranked list", l.user_id);
        if (!truth.knows(l.user_id)) throw Error(ErrorCode::invalid, "user id absent from the truth matrix", l.user_id);
    }
}

} // namespace mabflow::metrics
