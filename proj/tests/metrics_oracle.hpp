#pragma once

// Exhaustive reference evaluator for the ranking metrics. Shares nothing with
// mabflow/metrics.hpp beyond the input types.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mabflow/metrics.hpp"
#include "mabflow/random.hpp"

namespace mabflow::testing::oracle {

using metrics::InteractionMatrix;
using metrics::RankedList;

// IDCG is the best DCG@k over every permutation of the user's item universe;
// AP and RR are counted position by position.

struct Instance {
    std::vector<RankedList> lists;
    InteractionMatrix truth;
    std::map<std::string, std::vector<std::string>> universe;
    std::size_t k = 1;
};

inline Instance random_instance(Rng& rng) {
    Instance inst;
    inst.k = 1 + rng.below(7);
    const std::size_t users = 1 + rng.below(4);
    for (std::size_t u = 0; u < users; ++u) {
        const std::string user = "u" + std::to_string(u);
        const std::size_t n = 1 + rng.below(6);
        std::vector<std::string> items;
        for (std::size_t i = 0; i < n; ++i) items.push_back("i" + std::to_string(i));
        inst.truth.set(user, "i0", 0);
        for (const auto& i : items) {
            if (rng.bernoulli(0.4)) inst.truth.set(user, i, 1);
        }
        inst.universe[user] = items;
        std::vector<std::string> shuffled = items;
        for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
        shuffled.resize(1 + rng.below(n));
        inst.lists.push_back({user, shuffled});
    }
    return inst;
}

inline double dcg(const std::vector<std::string>& order, const std::set<std::string>& rel, std::size_t k) {
    double s = 0.0;
    for (std::size_t r = 0; r < order.size() && r < k; ++r) {
        if (rel.count(order[r])) s += 1.0 / std::log2(r + 2.0);
    }
    return s;
}

struct Scores {
    double rr = 0, ndcg = 0, ap = 0;
};

inline Scores brute_force(const RankedList& l, const std::vector<std::string>& universe, const InteractionMatrix& t,
                   std::size_t k) {
    std::set<std::string> rel;
    for (const auto& i : universe) {
        if (t.relevant(l.user_id, i)) rel.insert(i);
    }
    Scores s;
    if (rel.empty()) return s;
    for (std::size_t r = 0; r < l.items.size(); ++r) {
        if (rel.count(l.items[r])) {
            s.rr = 1.0 / (r + 1.0);
            break;
        }
    }
    std::vector<std::string> perm = universe;
    std::sort(perm.begin(), perm.end());
    double ideal = 0.0;
    do {
        ideal = std::max(ideal, dcg(perm, rel, k));
    } while (std::next_permutation(perm.begin(), perm.end()));
    s.ndcg = dcg(l.items, rel, k) / ideal;

    double ap = 0.0;
    for (std::size_t i = 1; i <= std::min(k, l.items.size()); ++i) {
        if (!rel.count(l.items[i - 1])) continue;
        std::size_t hits = 0;
        for (std::size_t j = 0; j < i; ++j) hits += rel.count(l.items[j]);
        ap += static_cast<double>(hits) / static_cast<double>(i);
    }
    s.ap = ap / static_cast<double>(std::min(k, rel.size()));
    return s;
}

// Mean scores over an instance.
inline Scores evaluate(const Instance& inst) {
    Scores mean;
    const double n = static_cast<double>(inst.lists.size());
    for (const auto& l : inst.lists) {
        const auto s = brute_force(l, inst.universe.at(l.user_id), inst.truth, inst.k);
        mean.rr += s.rr / n;
        mean.ndcg += s.ndcg / n;
        mean.ap += s.ap / n;
    }
    return mean;
}

} // namespace mabflow::testing::oracle
