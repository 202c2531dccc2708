#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "ssfl/aggregation.hpp"

using namespace ssfl;

namespace {

const ModelSpec kSpec{Arch::mlp, Norm::batch_norm, 0, {4}, 2};

ParameterState constant_state(double value) {
    auto s = init_model(kSpec, 1);
    std::fill(s.weights.begin(), s.weights.end(), value);
    std::fill(s.momentum.begin(), s.momentum.end(), value);
    std::fill(s.norm_stats.begin(), s.norm_stats.end(), value);
    return s;
}

ParameterState random_state(RngStream& rng) {
    auto s = init_model(kSpec, 1);
    for (auto& v : s.weights) v = rng.normal();
    for (auto& v : s.momentum) v = rng.normal();
    for (auto& v : s.norm_stats) v = rng.normal();
    return s;
}

double max_component_gap(const ParameterState& a, const ParameterState& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.weights.size(); ++i) worst = std::max(worst, std::abs(a.weights[i] - b.weights[i]));
    for (std::size_t i = 0; i < a.momentum.size(); ++i)
        worst = std::max(worst, std::abs(a.momentum[i] - b.momentum[i]));
    for (std::size_t i = 0; i < a.norm_stats.size(); ++i)
        worst = std::max(worst, std::abs(a.norm_stats[i] - b.norm_stats[i]));
    return worst;
}

} // namespace

TEST_CASE("sample_participants draws uniformly without replacement") {
    RngStream rng{1};
    const auto all = sample_participants(6, 6, rng);
    std::set<int> unique(all.begin(), all.end());
    REQUIRE(unique.size() == 6);
    REQUIRE(*unique.begin() == 0);
    REQUIRE(*unique.rbegin() == 5);

    const auto one = sample_participants(9, 1, rng);
    REQUIRE(one.size() == 1);
    REQUIRE(one[0] >= 0);
    REQUIRE(one[0] < 9);

    RngStream a{5};
    RngStream b{5};
    REQUIRE(sample_participants(10, 4, a) == sample_participants(10, 4, b));

    REQUIRE_THROWS_AS(sample_participants(3, 4, rng), InvalidInputError);
    REQUIRE_THROWS_AS(sample_participants(3, 0, rng), InvalidInputError);
}

TEST_CASE("fedavg of constant states is that constant") {
    const auto s = constant_state(1.5);
    const auto result = fedavg(s, {s, s, s});
    REQUIRE(max_component_gap(result.global_avg, s) == 0.0);
    REQUIRE(result.group_avgs.empty());
}

TEST_CASE("fedavg scalar toy: server 0, users 1 and 2 average to 1") {
    const auto result = fedavg(constant_state(0.0), {constant_state(1.0), constant_state(2.0)});
    for (double v : result.global_avg.weights) REQUIRE(v == 1.0);
    for (double v : result.global_avg.momentum) REQUIRE(v == 1.0);
}

TEST_CASE("fedavg of an empty round returns the server state unchanged") {
    RngStream rng{2};
    const auto server = random_state(rng);
    const auto result = fedavg(server, {});
    REQUIRE(result.global_avg.weights == server.weights);
    REQUIRE(result.global_avg.momentum == server.momentum);
    REQUIRE(result.global_avg.norm_stats == server.norm_stats);
}

TEST_CASE("fedavg rejects layout mismatches") {
    const ModelSpec other{Arch::mlp, Norm::batch_norm, 0, {5}, 2};
    REQUIRE_THROWS_AS(fedavg(constant_state(0.0), {init_model(other, 1)}), InvalidInputError);
}

TEST_CASE("grouping scalar toy reproduces the two-equation hand trace") {
    const std::vector<ParameterState> users{constant_state(3.0), constant_state(3.0), constant_state(6.0),
                                            constant_state(6.0)};
    AggregationPlan plan;
    plan.participants = {0, 1, 2, 3};
    plan.groups = {{0, 1}, {2, 3}};
    const auto result = grouping_average(constant_state(0.0), users, plan);
    REQUIRE(result.group_avgs.size() == 2);
    for (double v : result.group_avgs[0].weights) REQUIRE(v == 2.0);
    for (double v : result.group_avgs[1].weights) REQUIRE(v == 4.0);
    for (double v : result.global_avg.weights) REQUIRE(v == 3.0);

    const auto flat = fedavg(constant_state(0.0), users);
    for (double v : flat.global_avg.weights) REQUIRE(v == 3.6);
}

TEST_CASE("grouping of constant states returns the constant everywhere") {
    const auto s = constant_state(-2.25);
    AggregationPlan plan;
    plan.participants = {0, 1, 2};
    plan.groups = {{1, 0}, {2}};
    const auto result = grouping_average(s, {s, s, s}, plan);
    for (const auto& g : result.group_avgs) REQUIRE(max_component_gap(g, s) == 0.0);
    REQUIRE(max_component_gap(result.global_avg, s) == 0.0);
}

TEST_CASE("grouping with a single group matches fedavg bit for bit") {
    RngStream rng{3};
    for (int trial = 0; trial < 10; ++trial) {
        const auto server = random_state(rng);
        std::vector<ParameterState> users;
        for (int k = 0; k < 5; ++k) users.push_back(random_state(rng));

        AggregationPlan plan;
        plan.participants = {0, 1, 2, 3, 4};
        plan.groups = {plan.participants};
        const auto grouped = grouping_average(server, users, plan);
        const auto flat = fedavg(server, users);
        REQUIRE(grouped.group_avgs.size() == 1);
        REQUIRE(grouped.global_avg.weights == flat.global_avg.weights);
        REQUIRE(grouped.global_avg.momentum == flat.global_avg.momentum);
        REQUIRE(grouped.global_avg.norm_stats == flat.global_avg.norm_stats);
    }
}

TEST_CASE("grouping global average is the mean of the group averages") {
    RngStream rng{4};
    const auto server = random_state(rng);
    std::vector<ParameterState> users;
    for (int k = 0; k < 5; ++k) users.push_back(random_state(rng));
    AggregationPlan plan;
    plan.participants = {0, 1, 2, 3, 4};
    plan.groups = {{0, 3}, {1, 4}, {2}};
    const auto result = grouping_average(server, users, plan);
    auto mean = result.group_avgs[0];
    for (std::size_t g = 1; g < result.group_avgs.size(); ++g)
        for (std::size_t i = 0; i < mean.weights.size(); ++i) mean.weights[i] += result.group_avgs[g].weights[i];
    for (auto& v : mean.weights) v /= 3.0;
    double worst = 0.0;
    for (std::size_t i = 0; i < mean.weights.size(); ++i)
        worst = std::max(worst, std::abs(mean.weights[i] - result.global_avg.weights[i]));
    REQUIRE(worst < 1e-12);
}

TEST_CASE("both averagers commute with constant shifts") {
    RngStream rng{5};
    const double shift = 0.8125; // power-of-two friendly
    const auto server = random_state(rng);
    std::vector<ParameterState> users;
    for (int k = 0; k < 4; ++k) users.push_back(random_state(rng));

    auto shifted_server = server;
    for (auto& v : shifted_server.weights) v += shift;
    std::vector<ParameterState> shifted_users = users;
    for (auto& u : shifted_users)
        for (auto& v : u.weights) v += shift;

    const auto base = fedavg(server, users);
    const auto moved = fedavg(shifted_server, shifted_users);
    for (std::size_t i = 0; i < base.global_avg.weights.size(); ++i)
        REQUIRE_THAT(moved.global_avg.weights[i],
                     Catch::Matchers::WithinAbs(base.global_avg.weights[i] + shift, 1e-12));

    AggregationPlan plan;
    plan.participants = {0, 1, 2, 3};
    plan.groups = {{0, 2}, {1, 3}};
    const auto gbase = grouping_average(server, users, plan);
    const auto gmoved = grouping_average(shifted_server, shifted_users, plan);
    for (std::size_t i = 0; i < gbase.global_avg.weights.size(); ++i)
        REQUIRE_THAT(gmoved.global_avg.weights[i],
                     Catch::Matchers::WithinAbs(gbase.global_avg.weights[i] + shift, 1e-12));
}

TEST_CASE("grouping is permutation-invariant within groups and across group order") {
    RngStream rng{6};
    const auto server = random_state(rng);
    std::vector<ParameterState> users;
    for (int k = 0; k < 6; ++k) users.push_back(random_state(rng));

    AggregationPlan plan;
    plan.participants = {0, 1, 2, 3, 4, 5};
    plan.groups = {{0, 1, 2}, {3, 4, 5}};
    const auto a = grouping_average(server, users, plan);

    AggregationPlan shuffled = plan;
    shuffled.groups = {{5, 3, 4}, {2, 0, 1}};
    const auto b = grouping_average(server, users, shuffled);
    REQUIRE(a.global_avg.weights == b.global_avg.weights);
    REQUIRE(a.group_avgs[0].weights == b.group_avgs[1].weights);
    REQUIRE(a.group_avgs[1].weights == b.group_avgs[0].weights);
}

TEST_CASE("make_groups splits near-equally and deterministically") {
    RngStream rng{7};
    const auto even = make_groups({0, 1, 2, 3}, 2, rng);
    REQUIRE(even.groups.size() == 2);
    REQUIRE(even.groups[0].size() == 2);
    REQUIRE(even.groups[1].size() == 2);

    const auto odd = make_groups({4, 5, 6, 7, 8}, 2, rng);
    REQUIRE(odd.groups[0].size() == 3);
    REQUIRE(odd.groups[1].size() == 2);

    RngStream a{8};
    RngStream b{8};
    REQUIRE(make_groups({0, 1, 2, 3, 4}, 2, a).groups == make_groups({0, 1, 2, 3, 4}, 2, b).groups);

    RngStream c{9};
    REQUIRE_THROWS_AS(make_groups({0, 1}, 3, c), InvalidInputError);

    // S=1 keeps the participant order so the trivial grouping is stable.
    RngStream d{10};
    const auto single = make_groups({9, 2, 5}, 1, d);
    REQUIRE(single.groups == std::vector<std::vector<int>>{{9, 2, 5}});
}

TEST_CASE("groups re-randomize across rounds covering every pairing") {
    RngStream rng{11};
    std::set<std::string> seen;
    for (int round = 0; round < 60; ++round) {
        const auto plan = make_groups({0, 1, 2, 3}, 2, rng);
        auto key_group = plan.groups[0];
        std::sort(key_group.begin(), key_group.end());
        if (key_group[0] != 0) {
            key_group = plan.groups[1];
            std::sort(key_group.begin(), key_group.end());
        }
        seen.insert(std::to_string(key_group[0]) + std::to_string(key_group[1]));
    }
    REQUIRE(seen == std::set<std::string>{"01", "02", "03"});
}

TEST_CASE("grouping validates the plan against the states") {
    const auto s = constant_state(1.0);
    AggregationPlan plan;
    plan.participants = {0, 1};
    plan.groups = {{0}, {1}};
    REQUIRE_THROWS_AS(grouping_average(s, {s, s, s}, plan), InvalidInputError);

    AggregationPlan short_plan;
    short_plan.participants = {0, 1};
    short_plan.groups = {{0}};
    REQUIRE_THROWS_AS(grouping_average(s, {s, s}, short_plan), InvalidInputError);
}
