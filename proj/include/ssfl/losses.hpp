#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ssfl/errors.hpp"
#include "ssfl/tensor.hpp"

namespace ssfl {

/// The user-side training objectives.
enum class Objective { crl, self_training, supervised_oracle };

inline Objective objective_from_string(const std::string& s) {
    if (s == "crl") return Objective::crl;
    if (s == "self_training") return Objective::self_training;
    if (s == "supervised_oracle") return Objective::supervised_oracle;
    throw InvalidInputError("unknown objective: " + s);
}

inline std::string to_string(Objective o) {
    switch (o) {
    case Objective::crl: return "crl";
    case Objective::self_training: return "self_training";
    case Objective::supervised_oracle: return "supervised_oracle";
    }
    return "?";
}

/// Value plus gradient at the logits of the view being trained.
/// `active_count` is the number of samples that passed the confidence gate
/// (always the batch size for supervised objectives).
struct LossOutput {
    double value = 0.0;
    Tensor logit_gradients;
    int active_count = 0;
};

namespace detail {

inline std::vector<double> softmax_row(const double* logits, int d) {
    double mx = logits[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, logits[j]);
    std::vector<double> p(static_cast<std::size_t>(d));
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
        p[static_cast<std::size_t>(j)] = std::exp(logits[j] - mx);
        z += p[static_cast<std::size_t>(j)];
    }
    for (auto& v : p) v /= z;
    return p;
}

inline int argmax_row(const std::vector<double>& p) {
    int best = 0;
    for (int j = 1; j < static_cast<int>(p.size()); ++j)
        if (p[static_cast<std::size_t>(j)] > p[static_cast<std::size_t>(best)]) best = j;
    return best; // ties keep the lower index
}

} // namespace detail

/// Mean cross-entropy of weak-view logits against ground-truth labels.
inline LossOutput cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2) throw InvalidInputError("cross_entropy_loss: logits must be (N,d)");
    const int n = logits.shape[0], d = logits.shape[1];
    if (static_cast<int>(labels.size()) != n) throw InvalidInputError("cross_entropy_loss: label count mismatch");

    LossOutput out;
    out.logit_gradients = Tensor(logits.shape);
    out.active_count = n;
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= d)
            throw InvalidInputError("cross_entropy_loss: label " + std::to_string(y) + " outside [0," +
                                    std::to_string(d) + ")");
        const auto p = detail::softmax_row(logits.sample(i), d);
        out.value -= std::log(std::max(p[static_cast<std::size_t>(y)], 1e-300));
        double* g = out.logit_gradients.sample(i);
        for (int j = 0; j < d; ++j) g[j] = p[static_cast<std::size_t>(j)] / n;
        g[y] -= 1.0 / n;
    }
    out.value /= n;
    return out;
}

inline LossOutput server_supervised_loss(const Tensor& weak_logits, const std::vector<int>& labels) {
    return cross_entropy_loss(weak_logits, labels);
}

/// Same contract as the server loss; the labels are the oracle ground truth
/// held for the supervised-user baseline.
inline LossOutput supervised_user_loss(const Tensor& weak_logits, const std::vector<int>& oracle_labels) {
    return cross_entropy_loss(weak_logits, oracle_labels);
}

/// Consistency regularization: confident weak-view predictions pseudo-label
/// the strong view. The gated sum is divided by the full batch size and the
/// pseudo-labels are detached, so the gradient lives entirely on the strong
/// logits (the weak-view gradient is identically zero).
inline LossOutput crl_user_loss(const Tensor& weak_logits, const Tensor& strong_logits, double tau) {
    if (tau <= 0.0 || tau >= 1.0) throw InvalidInputError("crl_user_loss: tau must be in (0,1)");
    if (!same_shape(weak_logits.shape, strong_logits.shape) || weak_logits.shape.size() != 2)
        throw InvalidInputError("crl_user_loss: weak/strong logit shapes must match");
    const int n = weak_logits.shape[0], d = weak_logits.shape[1];

    LossOutput out;
    out.logit_gradients = Tensor(strong_logits.shape);
    for (int i = 0; i < n; ++i) {
        const auto weak_p = detail::softmax_row(weak_logits.sample(i), d);
        const int pseudo = detail::argmax_row(weak_p);
        if (weak_p[static_cast<std::size_t>(pseudo)] < tau) continue;
        ++out.active_count;
        const auto strong_p = detail::softmax_row(strong_logits.sample(i), d);
        out.value -= std::log(std::max(strong_p[static_cast<std::size_t>(pseudo)], 1e-300));
        double* g = out.logit_gradients.sample(i);
        for (int j = 0; j < d; ++j) g[j] = strong_p[static_cast<std::size_t>(j)] / n;
        g[pseudo] -= 1.0 / n;
    }
    out.value /= n;
    return out;
}

/// Pseudo-labeling on a single weak view: the view supervises itself
/// through detached confident predictions.
inline LossOutput self_training_loss(const Tensor& weak_logits, double tau) {
    if (tau <= 0.0 || tau >= 1.0) throw InvalidInputError("self_training_loss: tau must be in (0,1)");
    if (weak_logits.shape.size() != 2) throw InvalidInputError("self_training_loss: logits must be (N,d)");
    const int n = weak_logits.shape[0], d = weak_logits.shape[1];

    LossOutput out;
    out.logit_gradients = Tensor(weak_logits.shape);
    for (int i = 0; i < n; ++i) {
        const auto p = detail::softmax_row(weak_logits.sample(i), d);
        const int pseudo = detail::argmax_row(p);
        if (p[static_cast<std::size_t>(pseudo)] < tau) continue;
        ++out.active_count;
        out.value -= std::log(std::max(p[static_cast<std::size_t>(pseudo)], 1e-300));
        double* g = out.logit_gradients.sample(i);
        for (int j = 0; j < d; ++j) g[j] = p[static_cast<std::size_t>(j)] / n;
        g[pseudo] -= 1.0 / n;
    }
    out.value /= n;
    return out;
}

} // namespace ssfl
