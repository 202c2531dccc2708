#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ssfl/errors.hpp"
#include "ssfl/losses.hpp"
#include "ssfl/model.hpp"

namespace ssfl {

enum class NormOrder { l1, l2 };
enum class GradientKind { full_data_gradient, cumulative_delta };

/// One of the 16 ways of measuring gradient diversity: +-square, L1/L2,
/// +-server, and which per-user vector stands in for the gradient.
struct DiversityVariant {
    bool squared = true;
    NormOrder norm_order = NormOrder::l2;
    bool include_server = false;
    GradientKind gradient_kind = GradientKind::full_data_gradient;

    std::string name() const {
        std::string s = "div_";
        s += squared ? "sq_" : "nosq_";
        s += norm_order == NormOrder::l2 ? "l2_" : "l1_";
        s += include_server ? "userserver_" : "users_";
        s += gradient_kind == GradientKind::full_data_gradient ? "fullgrad" : "delta";
        return s;
    }
};

/// Per-user update vectors for one round, plus optionally the server's.
struct GradientSet {
    std::vector<std::vector<double>> user_vectors;
    std::optional<std::vector<double>> server_vector;
    long long round = 0;
    GradientKind kind = GradientKind::full_data_gradient;

    void validate() const {
        if (user_vectors.empty()) throw InvalidInputError("GradientSet: no user vectors");
        const std::size_t len = user_vectors.front().size();
        for (const auto& v : user_vectors)
            if (v.size() != len) throw InvalidInputError("GradientSet: vector lengths differ");
        if (server_vector && server_vector->size() != len)
            throw InvalidInputError("GradientSet: server vector length differs");
    }
};

inline constexpr double kDivergenceDenominator = 1e-30;
inline double divergence_sentinel() { return std::numeric_limits<double>::infinity(); }

/// sum_k ||g_k||^p / ||sum_k g_k||^p with the norm and power set by the
/// variant. Near-zero denominators yield the divergence sentinel (+inf);
/// an all-zero set is a 0/0 and throws.
inline double diversity(const GradientSet& set, const DiversityVariant& variant) {
    set.validate();
    if (variant.include_server && !set.server_vector)
        throw InvalidInputError("diversity: variant includes the server but the set has no server vector");

    std::vector<const std::vector<double>*> vectors;
    for (const auto& v : set.user_vectors) vectors.push_back(&v);
    if (variant.include_server) vectors.push_back(&*set.server_vector);

    const std::size_t len = vectors.front()->size();
    std::vector<double> total(len, 0.0);
    double numerator = 0.0;
    for (const auto* g : vectors) {
        double norm = 0.0;
        if (variant.norm_order == NormOrder::l2) {
            for (std::size_t i = 0; i < len; ++i) norm += (*g)[i] * (*g)[i];
            norm = std::sqrt(norm);
        } else {
            for (std::size_t i = 0; i < len; ++i) norm += std::abs((*g)[i]);
        }
        numerator += variant.squared ? norm * norm : norm;
        for (std::size_t i = 0; i < len; ++i) total[i] += (*g)[i];
    }

    double denom_norm = 0.0;
    if (variant.norm_order == NormOrder::l2) {
        for (double v : total) denom_norm += v * v;
        denom_norm = std::sqrt(denom_norm);
    } else {
        for (double v : total) denom_norm += std::abs(v);
    }
    const double denominator = variant.squared ? denom_norm * denom_norm : denom_norm;

    if (denominator < kDivergenceDenominator) {
        if (numerator < kDivergenceDenominator)
            throw UndefinedValueError("diversity: 0/0 on an all-zero gradient set");
        return divergence_sentinel();
    }
    return numerator / denominator;
}

/// Weight change over one local-training period: end-of-round weights minus
/// the weights the party started the round from (its received broadcast).
inline std::vector<double> cumulative_delta(const ParameterState& before, const ParameterState& after) {
    if (!before.same_layout(after) || before.weights.size() != after.weights.size())
        throw InvalidInputError("cumulative_delta: parameter layouts differ");
    std::vector<double> delta(after.weights.size());
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = after.weights[i] - before.weights[i];
    return delta;
}

/// Exact mean gradient of the party's objective over all its samples at the
/// given weights. Stochastic augmentation is disabled and the confidence
/// gate is applied to the raw logits, so the result is a pure function of
/// (weights, data). Eval-mode forward keeps it batch-size independent.
inline std::vector<double> full_data_gradient(const ParameterState& state, const Tensor& samples,
                                              const std::vector<int>& labels, Objective objective, double tau,
                                              int batch_size = 256) {
    const int total = samples.batch();
    if (total < 1) throw InvalidInputError("full_data_gradient: empty dataset");
    if (objective == Objective::supervised_oracle && static_cast<int>(labels.size()) != total)
        throw InvalidInputError("full_data_gradient: supervised objective needs one label per sample");

    ParameterState scratch = state; // eval mode never mutates, but keep a copy for safety
    std::vector<double> grad(state.weights.size(), 0.0);
    const std::size_t sample_sz = samples.sample_size();

    for (int start = 0; start < total; start += batch_size) {
        const int nb = std::min(batch_size, total - start);
        std::vector<int> shape = samples.shape;
        shape[0] = nb;
        Tensor batch(shape);
        std::copy(samples.data.begin() + static_cast<std::ptrdiff_t>(start * sample_sz),
                  samples.data.begin() + static_cast<std::ptrdiff_t>((start + nb) * sample_sz), batch.data.begin());

        auto cache = forward(scratch, batch, Mode::eval);
        const int d = cache.logits.shape[1];
        Tensor dlogits(cache.logits.shape);
        for (int i = 0; i < nb; ++i) {
            const auto p = detail::softmax_row(cache.logits.sample(i), d);
            int target = -1;
            if (objective == Objective::supervised_oracle) {
                target = labels[static_cast<std::size_t>(start + i)];
                if (target < 0 || target >= d) throw InvalidInputError("full_data_gradient: label out of range");
            } else {
                const int pseudo = detail::argmax_row(p);
                if (p[static_cast<std::size_t>(pseudo)] >= tau) target = pseudo;
            }
            if (target < 0) continue;
            double* g = dlogits.sample(i);
            for (int j = 0; j < d; ++j) g[j] = p[static_cast<std::size_t>(j)] / total;
            g[target] -= 1.0 / total;
        }
        const auto part = backward(scratch, cache, dlogits);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += part[i];
    }
    return grad;
}

/// Mean cross-entropy gradient over the server's labeled data; the server
/// side of the include-server variants.
inline std::vector<double> server_full_gradient(const ParameterState& state, const Tensor& samples,
                                                const std::vector<int>& labels, int batch_size = 256) {
    return full_data_gradient(state, samples, labels, Objective::supervised_oracle, 0.0, batch_size);
}

struct DiversityEntry {
    std::string name;
    double value = 0.0;
    enum class Status { ok, divergent, undefined } status = Status::ok;
};

/// All 16 variants evaluated on one round's gradient sets. Sentinels are
/// recorded per entry; the report itself always has 16 rows.
inline std::vector<DiversityEntry> diversity_report(const GradientSet& fullgrad_set, const GradientSet& delta_set) {
    std::vector<DiversityEntry> report;
    for (GradientKind kind : {GradientKind::full_data_gradient, GradientKind::cumulative_delta}) {
        const GradientSet& set = kind == GradientKind::full_data_gradient ? fullgrad_set : delta_set;
        for (bool include_server : {false, true}) {
            for (NormOrder order : {NormOrder::l2, NormOrder::l1}) {
                for (bool squared : {true, false}) {
                    DiversityVariant variant{squared, order, include_server, kind};
                    DiversityEntry entry;
                    entry.name = variant.name();
                    try {
                        entry.value = diversity(set, variant);
                        if (std::isinf(entry.value)) entry.status = DiversityEntry::Status::divergent;
                    } catch (const UndefinedValueError&) {
                        entry.status = DiversityEntry::Status::undefined;
                    }
                    report.push_back(std::move(entry));
                }
            }
        }
    }
    return report;
}

} // namespace ssfl
