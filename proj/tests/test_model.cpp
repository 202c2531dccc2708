#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "ssfl/model.hpp"
#include "ssfl/optim.hpp"

using namespace ssfl;

namespace {

Tensor random_batch(const ModelSpec& spec, int n, RngStream& rng, double scale = 1.0) {
    std::vector<int> shape = {n};
    shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
    Tensor t(shape);
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

// Scalar probe loss: weighted sum of logits, so dL/dlogits is a fixed tensor.
double probe_loss(const Tensor& logits, const Tensor& weights) {
    double acc = 0.0;
    for (std::size_t i = 0; i < logits.data.size(); ++i) acc += logits.data[i] * weights.data[i];
    return acc;
}

double fd_gradient(const ParameterState& state, const Tensor& batch, const Tensor& probe, Mode mode,
                   std::size_t coord, double h) {
    ParameterState plus = state;
    plus.weights[coord] += h;
    ParameterState minus = state;
    minus.weights[coord] -= h;
    const double lp = probe_loss(forward(plus, batch, mode).logits, probe);
    const double lm = probe_loss(forward(minus, batch, mode).logits, probe);
    return (lp - lm) / (2.0 * h);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

} // namespace

TEST_CASE("init_model is deterministic and seed-sensitive") {
    ModelSpec spec{Arch::mlp, Norm::group_norm, 0, {10}, 4};
    const auto a = init_model(spec, 1);
    const auto b = init_model(spec, 1);
    REQUIRE(a.weights == b.weights);
    REQUIRE(a.momentum == std::vector<double>(a.weights.size(), 0.0));

    const auto c = init_model(spec, 2);
    REQUIRE(a.weights != c.weights);
    REQUIRE(a.plan->weight_slices.size() == c.plan->weight_slices.size());
    for (std::size_t i = 0; i < a.plan->weight_slices.size(); ++i) {
        REQUIRE(a.plan->weight_slices[i].name == c.plan->weight_slices[i].name);
        REQUIRE(a.plan->weight_slices[i].offset == c.plan->weight_slices[i].offset);
    }
}

TEST_CASE("group count must divide channels") {
    ModelSpec bad{Arch::mlp, Norm::group_norm, 7, {10}, 4};
    REQUIRE_THROWS_AS(init_model(bad, 1), InvalidInputError);
}

TEST_CASE("batch norm running stats start at mean zero variance one") {
    ModelSpec spec{Arch::mlp, Norm::batch_norm, 0, {6}, 3};
    const auto s = init_model(spec, 1);
    for (const auto& slice : s.plan->stat_slices) {
        for (std::size_t i = 0; i < slice.count; ++i) {
            const double v = s.norm_stats[slice.offset + i];
            if (slice.name.find("mean") != std::string::npos) REQUIRE(v == 0.0);
            else REQUIRE(v == 1.0);
        }
    }
}

TEST_CASE("identity mlp passes its input through") {
    // All dense layers set to identity with non-negative input makes the
    // relu chain transparent.
    ModelSpec spec{Arch::mlp, Norm::none, 0, {kMlpHidden}, kMlpHidden};
    auto s = init_model(spec, 1);
    for (const char* name : {"dense0.weight", "dense1.weight", "head.weight"}) {
        auto w = layer_span(s, name);
        std::fill(w.begin(), w.end(), 0.0);
        for (int i = 0; i < kMlpHidden; ++i) w[static_cast<std::size_t>(i * kMlpHidden + i)] = 1.0;
    }
    for (const char* name : {"dense0.bias", "dense1.bias", "head.bias"}) {
        auto b = layer_span(s, name);
        std::fill(b.begin(), b.end(), 0.0);
    }
    RngStream rng{3};
    Tensor batch({2, kMlpHidden});
    for (auto& v : batch.data) v = rng.uniform_double();
    const auto out = forward(s, batch, Mode::eval);
    for (std::size_t i = 0; i < batch.data.size(); ++i)
        REQUIRE_THAT(out.logits.data[i], Catch::Matchers::WithinAbs(batch.data[i], 1e-12));
}

TEST_CASE("group norm maps constant input to zero pre-affine") {
    ModelSpec spec{Arch::mlp, Norm::group_norm, 0, {8}, 3};
    auto s = init_model(spec, 1);
    Tensor batch({2, 8});
    std::fill(batch.data.begin(), batch.data.end(), 0.37);
    auto dense_w = layer_span(s, "dense0.weight");
    std::fill(dense_w.begin(), dense_w.end(), 0.0); // dense output constant = bias
    const auto cache = forward(s, batch, Mode::train);
    std::size_t norm_index = 0;
    for (std::size_t li = 0; li < s.plan->layers.size(); ++li)
        if (s.plan->layers[li].kind == detail::LayerKind::group_norm) norm_index = li;
    for (double v : cache.layers[norm_index].xhat) REQUIRE(v == 0.0);
}

TEST_CASE("group norm output is normalized per group pre-affine") {
    ModelSpec spec{Arch::mlp, Norm::group_norm, 4, {16}, 3};
    auto s = init_model(spec, 1);
    RngStream rng{11};
    // Large input scale keeps every group's variance well above the eps
    // floor, which is what "non-degenerate" means here.
    Tensor batch = random_batch(spec, 5, rng, 50.0);
    const auto cache = forward(s, batch, Mode::train);
    int checked = 0;
    for (std::size_t li = 0; li < s.plan->layers.size(); ++li) {
        const auto& l = s.plan->layers[li];
        if (l.kind != detail::LayerKind::group_norm) continue;
        const auto& xh = cache.layers[li].xhat;
        const auto& raw_var = cache.layers[li].var;
        const int gs = l.out_c / l.groups;
        for (int n = 0; n < batch.batch(); ++n) {
            for (int g = 0; g < l.groups; ++g) {
                // Groups whose raw variance sits near the eps floor are the
                // degenerate case the invariant excludes.
                if (raw_var[static_cast<std::size_t>(n * l.groups + g)] < 1.0) continue;
                double mean = 0.0, var = 0.0;
                for (int c = g * gs; c < (g + 1) * gs; ++c)
                    mean += xh[static_cast<std::size_t>(n * l.out_c + c)];
                mean /= gs;
                for (int c = g * gs; c < (g + 1) * gs; ++c) {
                    const double d = xh[static_cast<std::size_t>(n * l.out_c + c)] - mean;
                    var += d * d;
                }
                var /= gs;
                REQUIRE(std::abs(mean) < 1e-6);
                REQUIRE(std::abs(var - 1.0) < 1e-5);
                ++checked;
            }
        }
    }
    REQUIRE(checked >= 20);
}

TEST_CASE("eval forward is pure") {
    ModelSpec spec{Arch::mlp, Norm::batch_norm, 0, {6}, 3};
    auto s = init_model(spec, 1);
    RngStream rng{5};
    Tensor batch = random_batch(spec, 4, rng);
    const auto stats_before = s.norm_stats;
    const auto a = forward(s, batch, Mode::eval);
    const auto b = forward(s, batch, Mode::eval);
    REQUIRE(a.logits.data == b.logits.data);
    REQUIRE(s.norm_stats == stats_before);

    forward(s, batch, Mode::train);
    REQUIRE(s.norm_stats != stats_before);
}

TEST_CASE("forward rejects shape mismatches") {
    ModelSpec spec{Arch::mlp, Norm::none, 0, {6}, 3};
    auto s = init_model(spec, 1);
    REQUIRE_THROWS_AS(forward(s, Tensor({2, 5}), Mode::eval), InvalidInputError);
}

TEST_CASE("backward of zero upstream gradient is zero") {
    ModelSpec spec{Arch::mlp, Norm::group_norm, 0, {6}, 3};
    auto s = init_model(spec, 1);
    RngStream rng{6};
    Tensor batch = random_batch(spec, 4, rng);
    const auto cache = forward(s, batch, Mode::train);
    const auto grad = backward(s, cache, Tensor(cache.logits.shape));
    REQUIRE(std::all_of(grad.begin(), grad.end(), [](double g) { return g == 0.0; }));
}

TEST_CASE("backward rejects a stale cache") {
    ModelSpec spec{Arch::mlp, Norm::none, 0, {6}, 3};
    auto s = init_model(spec, 1);
    RngStream rng{7};
    Tensor batch = random_batch(spec, 2, rng);
    const auto cache = forward(s, batch, Mode::train);
    s.weights[0] += 0.5;
    Tensor dlogits(cache.logits.shape);
    dlogits.data[0] = 1.0;
    REQUIRE_THROWS_AS(backward(s, cache, dlogits), ContractViolationError);
}

TEST_CASE("mlp analytic gradients match central finite differences everywhere") {
    for (Norm norm : {Norm::none, Norm::group_norm, Norm::batch_norm}) {
        ModelSpec spec{Arch::mlp, norm, 0, {5}, 3};
        auto s = init_model(spec, 1);
        RngStream rng{17};
        Tensor batch = random_batch(spec, 4, rng);
        Tensor probe({4, 3});
        for (auto& v : probe.data) v = rng.normal();

        const Mode mode = Mode::train;
        const auto cache = forward(s, batch, mode);
        const auto grad = backward(s, cache, probe);

        double worst = 0.0;
        for (std::size_t i = 0; i < s.weights.size(); ++i) {
            const double fd = fd_gradient(s, batch, probe, mode, i, 1e-5);
            worst = std::max(worst, rel_err(grad[i], fd));
        }
        INFO("norm variant " << static_cast<int>(norm) << " worst relative error " << worst);
        REQUIRE(worst < 1e-4);
    }
}

TEST_CASE("batch norm eval-mode gradients also match finite differences") {
    ModelSpec spec{Arch::mlp, Norm::batch_norm, 0, {5}, 3};
    auto s = init_model(spec, 1);
    RngStream rng{19};
    // Move running stats off their init values first.
    forward(s, random_batch(spec, 8, rng), Mode::train);

    Tensor batch = random_batch(spec, 4, rng);
    Tensor probe({4, 3});
    for (auto& v : probe.data) v = rng.normal();
    const auto cache = forward(s, batch, Mode::eval);
    const auto grad = backward(s, cache, probe);
    double worst = 0.0;
    for (std::size_t i = 0; i < s.weights.size(); ++i)
        worst = std::max(worst, rel_err(grad[i], fd_gradient(s, batch, probe, Mode::eval, i, 1e-5)));
    REQUIRE(worst < 1e-4);
}

TEST_CASE("tiny_cnn analytic gradients match finite differences") {
    for (Norm norm : {Norm::none, Norm::group_norm, Norm::batch_norm}) {
        ModelSpec spec{Arch::tiny_cnn, norm, 0, {1, 6, 6}, 3};
        auto s = init_model(spec, 1);
        RngStream rng{23};
        Tensor batch = random_batch(spec, 2, rng);
        Tensor probe({2, 3});
        for (auto& v : probe.data) v = rng.normal();

        const auto cache = forward(s, batch, Mode::train);
        const auto grad = backward(s, cache, probe);
        double worst = 0.0;
        for (std::size_t i = 0; i < s.weights.size(); ++i)
            worst = std::max(worst, rel_err(grad[i], fd_gradient(s, batch, probe, Mode::train, i, 1e-5)));
        INFO("norm variant " << static_cast<int>(norm) << " worst relative error " << worst);
        REQUIRE(worst < 1e-4);
    }
}

TEST_CASE("layer views alias the flat vector") {
    ModelSpec spec{Arch::mlp, Norm::none, 0, {6}, 3};
    auto s = init_model(spec, 1);
    std::size_t total = 0;
    for (const auto& slice : s.plan->weight_slices) total += slice.count;
    REQUIRE(total == s.weights.size());

    const auto before = s.weights;
    auto view = layer_span(s, "dense1.bias");
    view[0] += 2.5;
    int changed = 0;
    for (std::size_t i = 0; i < s.weights.size(); ++i) changed += s.weights[i] != before[i];
    REQUIRE(changed == 1);

    REQUIRE_THROWS_AS(layer_span(s, "nope.weight"), InvalidInputError);
}
