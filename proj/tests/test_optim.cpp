#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ssfl/model.hpp"
#include "ssfl/optim.hpp"

using namespace ssfl;

namespace {

// Table A.1, Cifar-10 row.
LrSchedule cifar_schedule() {
    LrSchedule s;
    s.base_lr = 0.146;
    s.period_coeff = 2.3;
    s.epochs = 300;
    s.samples_per_epoch = 65536;
    s.batch_size = 64;
    s.warmup_epochs = 5;
    s.floor = 1e-4;
    return s;
}

} // namespace

TEST_CASE("cosine lr equals the base rate at the end of warmup") {
    const auto s = cifar_schedule();
    REQUIRE(s.warmup_steps() == 5120.0);
    REQUIRE(cosine_lr(5120, s) == 0.146);
    // Linear ramp just before the boundary.
    REQUIRE_THAT(cosine_lr(5119, s), Catch::Matchers::WithinAbs(0.146, 1e-12));
    REQUIRE_THAT(cosine_lr(0, s), Catch::Matchers::WithinAbs(0.146 / 5120.0, 1e-15));
}

TEST_CASE("cosine lr hits the floor at the c=1 midpoint") {
    auto s = cifar_schedule();
    s.period_coeff = 1.0;
    const long long warm = 5120;
    const long long total = 300 * 1024;
    const long long mid = warm + (total - warm) / 2;
    REQUIRE(cosine_lr(mid, s) == 0.146 * 1e-4);
}

TEST_CASE("cosine lr clamps every negative-cosine step to the floor exactly") {
    const auto s = cifar_schedule();
    const double warm = s.warmup_steps();
    const double span = s.total_steps() - warm;
    for (long long t : {20000LL, 60000LL, 100000LL}) {
        const double x = std::numbers::pi * s.period_coeff * (static_cast<double>(t) - warm) / span;
        if (std::cos(x) < s.floor) REQUIRE(cosine_lr(t, s) == 0.146 * 1e-4);
    }
}

TEST_CASE("cosine lr is non-increasing post warmup for the EMNIST row") {
    LrSchedule s;
    s.base_lr = 0.03;
    s.period_coeff = 0.4375;
    s.epochs = 100;
    s.samples_per_epoch = 65536;
    s.batch_size = 64;
    s.warmup_epochs = 0;
    s.floor = 1e-4;
    double prev = cosine_lr(0, s);
    REQUIRE(prev == 0.03);
    const long long total = 100 * 1024;
    for (long long t = 1; t < total; t += 97) {
        const double cur = cosine_lr(t, s);
        REQUIRE(cur <= prev + 1e-15);
        REQUIRE(cur >= 0.03 * 1e-4);
        prev = cur;
    }
}

TEST_CASE("cosine lr rejects steps beyond the budget") {
    const auto s = cifar_schedule();
    REQUIRE_THROWS_AS(cosine_lr(300 * 1024, s), InvalidInputError);
    REQUIRE_THROWS_AS(cosine_lr(-1, s), InvalidInputError);
}

TEST_CASE("sgd without momentum or decay is plain gradient descent") {
    ModelSpec spec{Arch::mlp, Norm::none, 0, {4}, 2};
    auto s = init_model(spec, 1);
    const auto before = s.weights;
    std::vector<double> grad(s.weights.size(), 0.0);
    grad[3] = 2.0;

    OptimizerConfig cfg;
    cfg.schedule = cifar_schedule();
    cfg.momentum_coeff = 0.0;
    cfg.weight_decay = 0.0;
    sgd_step(s, grad, 0.1, cfg);
    for (std::size_t i = 0; i < s.weights.size(); ++i) {
        if (i == 3) REQUIRE(s.weights[i] == before[i] - 0.1 * 2.0);
        else REQUIRE(s.weights[i] == before[i]);
    }
}

TEST_CASE("momentum inertia moves weights with a zero gradient") {
    ModelSpec spec{Arch::mlp, Norm::none, 0, {4}, 2};
    auto s = init_model(spec, 1);
    s.momentum.assign(s.momentum.size(), 0.5);
    const auto before = s.weights;

    OptimizerConfig cfg;
    cfg.schedule = cifar_schedule();
    cfg.momentum_coeff = 0.9;
    cfg.weight_decay = 0.0;
    const std::vector<double> zero(s.weights.size(), 0.0);
    sgd_step(s, zero, 0.2, cfg);
    for (std::size_t i = 0; i < s.weights.size(); ++i)
        REQUIRE_THAT(s.weights[i], Catch::Matchers::WithinAbs(before[i] - 0.2 * 0.9 * 0.5, 1e-15));
}

TEST_CASE("default optimizer hyperparameters match the reference row") {
    const OptimizerConfig cfg;
    REQUIRE(cfg.momentum_coeff == 0.9);
    REQUIRE(cfg.weight_decay == 1e-4);
}

TEST_CASE("sgd rejects mismatched gradient lengths") {
    ModelSpec spec{Arch::mlp, Norm::none, 0, {4}, 2};
    auto s = init_model(spec, 1);
    OptimizerConfig cfg;
    cfg.schedule = cifar_schedule();
    REQUIRE_THROWS_AS(sgd_step(s, std::vector<double>(3, 0.0), 0.1, cfg), InvalidInputError);
}

TEST_CASE("sgd steps are bit-reproducible") {
    ModelSpec spec{Arch::mlp, Norm::none, 0, {4}, 2};
    auto a = init_model(spec, 1);
    auto b = init_model(spec, 1);
    std::vector<double> grad(a.weights.size());
    RngStream rng{9};
    for (auto& g : grad) g = rng.normal();
    OptimizerConfig cfg;
    cfg.schedule = cifar_schedule();
    sgd_step(a, grad, 0.05, cfg);
    sgd_step(b, grad, 0.05, cfg);
    REQUIRE(a.weights == b.weights);
    REQUIRE(a.momentum == b.momentum);
}
