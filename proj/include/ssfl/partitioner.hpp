#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ssfl/errors.hpp"
#include "ssfl/rng.hpp"

namespace ssfl {

/// Empirical class distribution of one party's data.
struct ClassDistribution {
    std::vector<double> probabilities;

    ClassDistribution() = default;
    explicit ClassDistribution(std::vector<double> probs) : probabilities(std::move(probs)) { validate(); }

    void validate() const {
        if (probabilities.size() < 2) throw InvalidInputError("ClassDistribution: need at least 2 classes");
        double sum = 0.0;
        for (double p : probabilities) {
            if (p < 0.0) throw InvalidInputError("ClassDistribution: negative entry");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw InvalidInputError("ClassDistribution: entries do not sum to 1");
    }

    std::size_t size() const { return probabilities.size(); }
    double operator[](std::size_t i) const { return probabilities[i]; }
};

/// Plan for splitting one dataset between the server and K users at a
/// target non-iid level. `remaining` is the per-class count left after the
/// server allocation; `users_per_class` is m_j.
struct AssignmentPlan {
    int class_count = 0;
    std::vector<long long> remaining;   // n_j
    std::vector<int> users_per_class;   // m_j, sum = K
    double target_r = 0.0;
    long long server_samples = 0;       // Ns

    int user_count() const {
        int k = 0;
        for (int m : users_per_class) k += m;
        return k;
    }

    // Main class of user u under round-robin placement: u mod d restricted
    // to classes with m_j > 0, in planning order.
    std::vector<int> main_classes() const {
        std::vector<int> mains;
        std::vector<int> left = users_per_class;
        int assigned = 0;
        const int total = user_count();
        while (assigned < total) {
            for (int j = 0; j < class_count && assigned < total; ++j) {
                if (left[static_cast<std::size_t>(j)] > 0) {
                    --left[static_cast<std::size_t>(j)];
                    mains.push_back(j);
                    ++assigned;
                }
            }
        }
        return mains;
    }
};

/// One realized server/user split: disjoint sample-id lists plus the exact
/// per-user class histograms.
struct Assignment {
    std::vector<int> server_indices;
    std::vector<std::vector<int>> user_indices;
    std::vector<ClassDistribution> user_histograms;
    std::vector<int> main_class;
    std::vector<std::vector<long long>> user_class_counts;
};

/// Mean pairwise total-variation distance between user class distributions.
/// Definition: R = mean over unordered pairs of ||P_k - P_m||_1 / 2.
inline double compute_noniid_r(const std::vector<ClassDistribution>& histograms) {
    const std::size_t k = histograms.size();
    if (k < 2) throw InvalidInputError("compute_noniid_r: need at least 2 users");
    const std::size_t d = histograms[0].size();
    for (const auto& h : histograms) {
        if (h.size() != d) throw InvalidInputError("compute_noniid_r: histogram length mismatch");
    }
    double total = 0.0;
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a + 1; b < k; ++b) {
            double l1 = 0.0;
            for (std::size_t j = 0; j < d; ++j) l1 += std::abs(histograms[a][j] - histograms[b][j]);
            total += 0.5 * l1;
        }
    }
    return total / (static_cast<double>(k) * static_cast<double>(k - 1) / 2.0);
}

/// Expected class distribution of a user with the given main class when the
/// residual global distribution is q: R + q_j(1-R) at the main class and
/// q_i(1-R) elsewhere.
inline ClassDistribution expected_user_distribution(const ClassDistribution& q, double r, int main_class) {
    if (r < 0.0 || r > 1.0) throw InvalidInputError("expected_user_distribution: R must be in [0,1]");
    if (main_class < 0 || static_cast<std::size_t>(main_class) >= q.size())
        throw InvalidInputError("expected_user_distribution: main_class out of range");
    std::vector<double> p(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) p[i] = q[i] * (1.0 - r);
    p[static_cast<std::size_t>(main_class)] += r;
    return ClassDistribution(std::move(p));
}

/// Largest-remainder rounding of non-negative fractional count rows to
/// integer rows with exact row totals. Ties break toward the lower class
/// index. When `stock` is given, rows are processed in order and no column
/// may exceed the running per-class stock.
inline std::vector<std::vector<long long>> integerize_counts(const std::vector<std::vector<double>>& fractional,
                                                             const std::vector<long long>& row_totals,
                                                             std::vector<long long> stock = {}) {
    if (fractional.size() != row_totals.size())
        throw InvalidInputError("integerize_counts: row count mismatch");
    std::vector<std::vector<long long>> out(fractional.size());
    for (std::size_t r = 0; r < fractional.size(); ++r) {
        const auto& row = fractional[r];
        double frac_sum = 0.0;
        for (double v : row) {
            if (v < 0.0) throw InvalidInputError("integerize_counts: negative cell");
            frac_sum += v;
        }
        if (std::abs(frac_sum - static_cast<double>(row_totals[r])) > 1e-6)
            throw InvalidInputError("integerize_counts: row does not sum to its total");

        std::vector<long long> cells(row.size(), 0);
        long long assigned = 0;
        for (std::size_t i = 0; i < row.size(); ++i) {
            long long base = static_cast<long long>(std::floor(row[i]));
            if (!stock.empty()) base = std::min(base, stock[i]);
            cells[i] = base;
            assigned += base;
        }
        // Hand out the remainder one unit at a time to the cell whose
        // integer count lags its fraction the most.
        while (assigned < row_totals[r]) {
            std::size_t best = row.size();
            double best_gap = -1e300;
            for (std::size_t i = 0; i < row.size(); ++i) {
                if (!stock.empty() && cells[i] >= stock[i]) continue;
                const double gap = row[i] - static_cast<double>(cells[i]);
                if (gap > best_gap + 1e-15) {
                    best_gap = gap;
                    best = i;
                }
            }
            if (best == row.size())
                throw CapacityError("integerize_counts: per-class stock exhausted at row " + std::to_string(r));
            ++cells[best];
            ++assigned;
        }
        if (!stock.empty()) {
            for (std::size_t i = 0; i < row.size(); ++i) stock[i] -= cells[i];
        }
        out[r] = std::move(cells);
    }
    return out;
}

/// Round-robin plan: the server takes Ns samples spread uniformly over
/// classes (first Ns mod d classes get one extra), users are dealt over
/// classes so that m_j is floor(K/d) or ceil(K/d).
inline AssignmentPlan make_plan(const std::vector<long long>& class_counts, int user_count, double target_r,
                                long long server_samples) {
    const int d = static_cast<int>(class_counts.size());
    if (d < 2) throw InvalidInputError("make_plan: need at least 2 classes");
    if (user_count < 1) throw InvalidInputError("make_plan: need at least 1 user");
    if (target_r < 0.0 || target_r > 1.0) throw InvalidInputError("make_plan: R must be in [0,1]");
    if (server_samples < 0) throw InvalidInputError("make_plan: negative server sample count");

    AssignmentPlan plan;
    plan.class_count = d;
    plan.target_r = target_r;
    plan.server_samples = server_samples;
    plan.remaining.resize(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        const long long take = server_samples / d + (j < server_samples % d ? 1 : 0);
        if (class_counts[static_cast<std::size_t>(j)] < take)
            throw CapacityError("make_plan: class " + std::to_string(j) + " has " +
                                std::to_string(class_counts[static_cast<std::size_t>(j)]) +
                                " samples, server needs " + std::to_string(take));
        plan.remaining[static_cast<std::size_t>(j)] = class_counts[static_cast<std::size_t>(j)] - take;
    }
    plan.users_per_class.assign(static_cast<std::size_t>(d), 0);
    for (int u = 0; u < user_count; ++u) ++plan.users_per_class[static_cast<std::size_t>(u % d)];
    return plan;
}

namespace detail {

inline std::vector<std::vector<int>> ids_by_class(const std::vector<int>& labels, int class_count) {
    std::vector<std::vector<int>> pools(static_cast<std::size_t>(class_count));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || y >= class_count) throw InvalidInputError("labels contain class id out of range");
        pools[static_cast<std::size_t>(y)].push_back(static_cast<int>(i));
    }
    return pools;
}

} // namespace detail

/// Realizes an AssignmentPlan on concrete sample labels. Which ids land in
/// which cell depends on the seed; the per-user class counts do not.
inline Assignment synthesize_assignment(const std::vector<int>& labels, const AssignmentPlan& plan,
                                        std::uint64_t seed) {
    const int d = plan.class_count;
    const int k = plan.user_count();
    if (k < 1) throw InvalidInputError("synthesize_assignment: plan has no users");
    auto pools = detail::ids_by_class(labels, d);

    RngStream rng{stream_tag::kPartition, seed};
    for (auto& pool : pools) rng.shuffle(pool);

    Assignment out;
    std::vector<std::size_t> cursor(static_cast<std::size_t>(d), 0);

    // Server slice: uniform over classes up to integer rounding.
    for (int j = 0; j < d; ++j) {
        const long long take = plan.server_samples / d + (j < plan.server_samples % d ? 1 : 0);
        auto& pool = pools[static_cast<std::size_t>(j)];
        if (static_cast<long long>(pool.size()) < take + plan.remaining[static_cast<std::size_t>(j)])
            throw CapacityError("synthesize_assignment: class " + std::to_string(j) + " has " +
                                std::to_string(pool.size()) + " samples, plan needs " +
                                std::to_string(take + plan.remaining[static_cast<std::size_t>(j)]));
        for (long long i = 0; i < take; ++i) out.server_indices.push_back(pool[cursor[static_cast<std::size_t>(j)]++]);
    }

    // Residual distribution q over the leftover stock.
    double total_remaining = 0.0;
    for (long long n : plan.remaining) total_remaining += static_cast<double>(n);
    if (total_remaining <= 0.0) throw CapacityError("synthesize_assignment: no samples left for users");
    std::vector<double> q(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j)
        q[static_cast<std::size_t>(j)] = static_cast<double>(plan.remaining[static_cast<std::size_t>(j)]) / total_remaining;

    // Fractional per-user class counts, Eq-style: the main class gets
    // n_j R / m_j extra on top of the shared (1-R) n_i q_j / m_j portion.
    const auto mains = plan.main_classes();
    const double r = plan.target_r;
    std::vector<std::vector<double>> fractional(static_cast<std::size_t>(k));
    std::vector<long long> row_totals(static_cast<std::size_t>(k));
    std::vector<int> per_class_seen(static_cast<std::size_t>(d), 0);
    for (int u = 0; u < k; ++u) {
        const int j = mains[static_cast<std::size_t>(u)];
        const int mj = plan.users_per_class[static_cast<std::size_t>(j)];
        const double nj = static_cast<double>(plan.remaining[static_cast<std::size_t>(j)]);
        auto& row = fractional[static_cast<std::size_t>(u)];
        row.resize(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) {
            const double ni = static_cast<double>(plan.remaining[static_cast<std::size_t>(i)]);
            row[static_cast<std::size_t>(i)] = (1.0 - r) * ni * q[static_cast<std::size_t>(j)] / mj;
        }
        row[static_cast<std::size_t>(j)] += r * nj / mj;

        // Near-equal integer split of n_j across the m_j users of class j.
        const long long base = plan.remaining[static_cast<std::size_t>(j)] / mj;
        const long long extra = plan.remaining[static_cast<std::size_t>(j)] % mj;
        const int rank = per_class_seen[static_cast<std::size_t>(j)]++;
        row_totals[static_cast<std::size_t>(u)] = base + (rank < extra ? 1 : 0);

        // Rescale the row so it sums to the integer total exactly enough
        // for largest-remainder rounding.
        double row_sum = 0.0;
        for (double v : row) row_sum += v;
        if (row_sum > 0.0) {
            const double scale = static_cast<double>(row_totals[static_cast<std::size_t>(u)]) / row_sum;
            for (double& v : row) v *= scale;
        }
    }

    auto counts = integerize_counts(fractional, row_totals, plan.remaining);

    out.user_indices.resize(static_cast<std::size_t>(k));
    out.user_histograms.reserve(static_cast<std::size_t>(k));
    out.user_class_counts = counts;
    out.main_class = mains;
    for (int u = 0; u < k; ++u) {
        auto& ids = out.user_indices[static_cast<std::size_t>(u)];
        long long total = 0;
        for (int j = 0; j < d; ++j) {
            const long long c = counts[static_cast<std::size_t>(u)][static_cast<std::size_t>(j)];
            auto& pool = pools[static_cast<std::size_t>(j)];
            for (long long i = 0; i < c; ++i) ids.push_back(pool[cursor[static_cast<std::size_t>(j)]++]);
            total += c;
        }
        std::vector<double> hist(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j)
            hist[static_cast<std::size_t>(j)] =
                static_cast<double>(counts[static_cast<std::size_t>(u)][static_cast<std::size_t>(j)]) /
                static_cast<double>(total);
        out.user_histograms.emplace_back(std::move(hist));
    }
    return out;
}

} // namespace ssfl
