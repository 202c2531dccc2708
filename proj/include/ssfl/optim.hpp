#pragma once

#include <cmath>
#include <string>

#include "ssfl/errors.hpp"
#include "ssfl/model.hpp"

namespace ssfl {

/// Cosine decay schedule: lr(t) = base * max(cos(pi * c * (t - warm) / (total - warm)), floor)
/// after `warmup_epochs`, with a linear 0 -> base ramp during warmup.
struct LrSchedule {
    double base_lr = 0.1;          // gamma
    double period_coeff = 1.0;     // c
    int epochs = 1;                // E
    long long samples_per_epoch = 0; // M
    int batch_size = 1;            // B
    int warmup_epochs = 0;         // e
    double floor = 1e-4;           // epsilon

    void validate() const {
        if (base_lr <= 0.0) throw InvalidInputError("LrSchedule: base_lr must be positive");
        if (floor <= 0.0 || floor >= 1.0) throw InvalidInputError("LrSchedule: floor must be in (0,1)");
        if (epochs < 1) throw InvalidInputError("LrSchedule: epochs must be >= 1");
        if (batch_size < 1 || samples_per_epoch < batch_size)
            throw InvalidInputError("LrSchedule: need samples_per_epoch >= batch_size >= 1");
        if (warmup_epochs < 0 || warmup_epochs >= epochs)
            throw InvalidInputError("LrSchedule: warmup_epochs must be in [0, epochs)");
        if (period_coeff <= 0.0) throw InvalidInputError("LrSchedule: period_coeff must be positive");
    }

    double steps_per_epoch() const { return static_cast<double>(samples_per_epoch) / batch_size; }
    double total_steps() const { return static_cast<double>(epochs) * steps_per_epoch(); }
    double warmup_steps() const { return static_cast<double>(warmup_epochs) * steps_per_epoch(); }
};

inline double cosine_lr(long long t, const LrSchedule& s) {
    s.validate();
    const double total = s.total_steps();
    const double warm = s.warmup_steps();
    if (t < 0 || static_cast<double>(t) >= total)
        throw InvalidInputError("cosine_lr: step " + std::to_string(t) + " outside [0, " +
                                std::to_string(total) + ")");
    if (static_cast<double>(t) < warm) return s.base_lr * (static_cast<double>(t) + 1.0) / warm;
    const double x = std::numbers::pi * s.period_coeff * (static_cast<double>(t) - warm) / (total - warm);
    return s.base_lr * std::max(std::cos(x), s.floor);
}

struct OptimizerConfig {
    LrSchedule schedule;
    double momentum_coeff = 0.9;
    double weight_decay = 1e-4;

    void validate() const {
        schedule.validate();
        if (momentum_coeff < 0.0 || momentum_coeff >= 1.0)
            throw InvalidInputError("OptimizerConfig: momentum_coeff must be in [0,1)");
        if (weight_decay < 0.0) throw InvalidInputError("OptimizerConfig: weight_decay must be >= 0");
    }
};

/// Classic SGD with momentum and coupled weight decay:
///   m <- mu * m + (g + wd * w);  w <- w - lr * m
inline void sgd_step(ParameterState& state, const std::vector<double>& gradient, double lr,
                     const OptimizerConfig& cfg) {
    if (gradient.size() != state.weights.size())
        throw InvalidInputError("sgd_step: gradient length " + std::to_string(gradient.size()) +
                                " != weight length " + std::to_string(state.weights.size()));
    const double mu = cfg.momentum_coeff;
    const double wd = cfg.weight_decay;
    for (std::size_t i = 0; i < state.weights.size(); ++i) {
        state.momentum[i] = mu * state.momentum[i] + gradient[i] + wd * state.weights[i];
        state.weights[i] -= lr * state.momentum[i];
    }
}

} // namespace ssfl
