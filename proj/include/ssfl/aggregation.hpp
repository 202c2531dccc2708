#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ssfl/errors.hpp"
#include "ssfl/model.hpp"
#include "ssfl/rng.hpp"

namespace ssfl {

/// The round's participants and their (optional) split into groups.
/// Groups partition the participant list with sizes differing by at most 1.
struct AggregationPlan {
    std::vector<int> participants;
    std::vector<std::vector<int>> groups;
};

struct AggregateResult {
    ParameterState global_avg;
    std::vector<ParameterState> group_avgs; // empty for fedavg
};

/// Uniform draw of C of the K users, without replacement, in draw order.
inline std::vector<int> sample_participants(int total_users, int count, RngStream& rng) {
    if (count < 1 || count > total_users)
        throw InvalidInputError("sample_participants: need 1 <= C <= K, got C=" + std::to_string(count) +
                                " K=" + std::to_string(total_users));
    return rng.sample_without_replacement(total_users, count);
}

/// Shuffle then split into S contiguous blocks; the first C mod S blocks
/// take the extra member. With S=1 the shuffle is skipped so the single
/// group keeps the participant order.
inline AggregationPlan make_groups(const std::vector<int>& participants, int group_count, RngStream& rng) {
    const int c = static_cast<int>(participants.size());
    if (group_count < 1 || group_count > c)
        throw InvalidInputError("make_groups: need 1 <= S <= C, got S=" + std::to_string(group_count) +
                                " C=" + std::to_string(c));
    AggregationPlan plan;
    plan.participants = participants;
    std::vector<int> order = participants;
    if (group_count > 1) rng.shuffle(order);
    const int base = c / group_count;
    const int extra = c % group_count;
    std::size_t cursor = 0;
    for (int g = 0; g < group_count; ++g) {
        const int size = base + (g < extra ? 1 : 0);
        plan.groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor) + size);
        cursor += static_cast<std::size_t>(size);
    }
    return plan;
}

namespace detail {

// (server + sum of members) / (|members| + 1), summed in ascending member
// order so the result is independent of how the caller ordered the group.
inline ParameterState average_with_server(const ParameterState& server,
                                          const std::vector<const ParameterState*>& members) {
    ParameterState out = server;
    for (const ParameterState* m : members) {
        if (!server.same_layout(*m)) throw InvalidInputError("aggregation: parameter layouts differ");
        for (std::size_t i = 0; i < out.weights.size(); ++i) out.weights[i] += m->weights[i];
        for (std::size_t i = 0; i < out.momentum.size(); ++i) out.momentum[i] += m->momentum[i];
        for (std::size_t i = 0; i < out.norm_stats.size(); ++i) out.norm_stats[i] += m->norm_stats[i];
    }
    const double inv = 1.0 / (static_cast<double>(members.size()) + 1.0);
    for (auto& v : out.weights) v *= inv;
    for (auto& v : out.momentum) v *= inv;
    for (auto& v : out.norm_stats) v *= inv;
    return out;
}

} // namespace detail

/// FedAvg: w_avg = (w_s + sum_k w_k) / (C + 1), applied uniformly to
/// weights, momentum and norm statistics. An empty round returns the server
/// state unchanged.
inline AggregateResult fedavg(const ParameterState& server, const std::vector<ParameterState>& users) {
    AggregateResult result;
    if (users.empty()) {
        result.global_avg = server;
        return result;
    }
    std::vector<const ParameterState*> members;
    members.reserve(users.size());
    for (const auto& u : users) members.push_back(&u);
    result.global_avg = detail::average_with_server(server, members);
    return result;
}

/// Grouping-based averaging: each group averages with the server weights,
/// then the group averages are averaged. The plan's groups index into
/// `users` via participant ids.
inline AggregateResult grouping_average(const ParameterState& server, const std::vector<ParameterState>& users,
                                        const AggregationPlan& plan) {
    if (users.size() != plan.participants.size())
        throw InvalidInputError("grouping_average: state count does not match the plan");
    std::size_t covered = 0;
    for (const auto& g : plan.groups) covered += g.size();
    if (covered != plan.participants.size())
        throw InvalidInputError("grouping_average: groups do not cover the participants");

    AggregateResult result;
    std::vector<std::size_t> group_order(plan.groups.size());
    for (std::size_t g = 0; g < plan.groups.size(); ++g) group_order[g] = g;

    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
        // Resolve ids to state slots, then sum in ascending-id order.
        std::vector<std::pair<int, const ParameterState*>> members;
        for (int id : plan.groups[g]) {
            const auto it = std::find(plan.participants.begin(), plan.participants.end(), id);
            if (it == plan.participants.end())
                throw InvalidInputError("grouping_average: group member " + std::to_string(id) +
                                        " is not a participant");
            members.emplace_back(id, &users[static_cast<std::size_t>(it - plan.participants.begin())]);
        }
        std::sort(members.begin(), members.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<const ParameterState*> ptrs;
        ptrs.reserve(members.size());
        for (const auto& [id, p] : members) ptrs.push_back(p);
        result.group_avgs.push_back(detail::average_with_server(server, ptrs));
    }

    // Global average of the group averages, in canonical (smallest member
    // id) order, so group order in the plan does not matter.
    std::sort(group_order.begin(), group_order.end(), [&](std::size_t a, std::size_t b) {
        const int ma = *std::min_element(plan.groups[a].begin(), plan.groups[a].end());
        const int mb = *std::min_element(plan.groups[b].begin(), plan.groups[b].end());
        return ma < mb;
    });
    ParameterState global = result.group_avgs[group_order[0]];
    for (std::size_t i = 1; i < group_order.size(); ++i) {
        const auto& g = result.group_avgs[group_order[i]];
        for (std::size_t j = 0; j < global.weights.size(); ++j) global.weights[j] += g.weights[j];
        for (std::size_t j = 0; j < global.momentum.size(); ++j) global.momentum[j] += g.momentum[j];
        for (std::size_t j = 0; j < global.norm_stats.size(); ++j) global.norm_stats[j] += g.norm_stats[j];
    }
    const double inv = 1.0 / static_cast<double>(plan.groups.size());
    for (auto& v : global.weights) v *= inv;
    for (auto& v : global.momentum) v *= inv;
    for (auto& v : global.norm_stats) v *= inv;
    result.global_avg = std::move(global);
    return result;
}

} // namespace ssfl
