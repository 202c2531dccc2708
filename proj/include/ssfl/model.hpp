#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssfl/errors.hpp"
#include "ssfl/rng.hpp"
#include "ssfl/tensor.hpp"

namespace ssfl {

enum class Arch { mlp, tiny_cnn };
enum class Norm { none, batch_norm, group_norm };
enum class Mode { train, eval };

inline constexpr double kNormEps = 1e-5;
inline constexpr double kRunningStatMomentum = 0.1;
inline constexpr int kMlpHidden = 64;
inline constexpr int kCnnChannels[2] = {16, 32};

struct ModelSpec {
    Arch arch = Arch::mlp;
    Norm norm = Norm::none;
    int group_count = 0; // 0 resolves to min(8, channels) per norm layer
    std::vector<int> input_shape;
    int class_count = 0;

    bool operator==(const ModelSpec&) const = default;
};

// A named slice of one of the flat parameter vectors.
struct LayerSlice {
    std::string name;
    std::size_t offset = 0;
    std::size_t count = 0;
    std::vector<int> shape;
};

namespace detail {

enum class LayerKind { dense, conv3x3, relu, maxpool2, batch_norm, group_norm, flatten };

struct BuiltLayer {
    LayerKind kind;
    int in_c = 0, out_c = 0;
    int in_h = 1, in_w = 1;
    int out_h = 1, out_w = 1;
    int groups = 0;
    std::size_t w_off = 0, w_cnt = 0;
    std::size_t b_off = 0, b_cnt = 0;
    std::size_t gamma_off = 0, beta_off = 0; // norm affine, in weights
    std::size_t rm_off = 0, rv_off = 0;      // running stats, in norm_stats
};

} // namespace detail

// Resolved architecture: layer sequence plus the flat-vector layout.
struct ModelPlan {
    ModelSpec spec;
    std::vector<detail::BuiltLayer> layers;
    std::vector<LayerSlice> weight_slices;
    std::vector<LayerSlice> stat_slices;
    std::size_t weight_count = 0;
    std::size_t stat_count = 0;
};

namespace detail {

inline int resolve_groups(const ModelSpec& spec, int channels) {
    const int g = spec.group_count > 0 ? spec.group_count : std::min(8, channels);
    if (g < 1 || channels % g != 0)
        throw InvalidInputError("group_norm: group count " + std::to_string(g) + " does not divide " +
                                std::to_string(channels) + " channels");
    return g;
}

struct PlanBuilder {
    ModelPlan plan;

    std::size_t add_weight(const std::string& name, std::vector<int> shape) {
        const std::size_t count = Tensor::element_count(shape);
        plan.weight_slices.push_back({name, plan.weight_count, count, std::move(shape)});
        const std::size_t off = plan.weight_count;
        plan.weight_count += count;
        return off;
    }

    std::size_t add_stat(const std::string& name, int count) {
        plan.stat_slices.push_back({name, plan.stat_count, static_cast<std::size_t>(count), {count}});
        const std::size_t off = plan.stat_count;
        plan.stat_count += static_cast<std::size_t>(count);
        return off;
    }

    void add_norm(int index, int channels, int h, int w) {
        if (plan.spec.norm == Norm::none) return;
        BuiltLayer l{};
        l.in_c = l.out_c = channels;
        l.in_h = l.out_h = h;
        l.in_w = l.out_w = w;
        const std::string base = "norm" + std::to_string(index);
        l.gamma_off = add_weight(base + ".gamma", {channels});
        l.beta_off = add_weight(base + ".beta", {channels});
        if (plan.spec.norm == Norm::batch_norm) {
            l.kind = LayerKind::batch_norm;
            l.rm_off = add_stat(base + ".running_mean", channels);
            l.rv_off = add_stat(base + ".running_var", channels);
        } else {
            l.kind = LayerKind::group_norm;
            l.groups = resolve_groups(plan.spec, channels);
        }
        plan.layers.push_back(l);
    }

    void add_relu(int channels, int h, int w) {
        BuiltLayer l{};
        l.kind = LayerKind::relu;
        l.in_c = l.out_c = channels;
        l.in_h = l.out_h = h;
        l.in_w = l.out_w = w;
        plan.layers.push_back(l);
    }
};

} // namespace detail

inline ModelPlan build_model_plan(const ModelSpec& spec) {
    if (spec.class_count < 2) throw InvalidInputError("ModelSpec: class_count must be >= 2");
    detail::PlanBuilder b;
    b.plan.spec = spec;
    using detail::BuiltLayer;
    using detail::LayerKind;

    if (spec.arch == Arch::mlp) {
        if (spec.input_shape.size() != 1 || spec.input_shape[0] < 1)
            throw InvalidInputError("ModelSpec: mlp expects a 1-d input shape");
        int features = spec.input_shape[0];
        const int widths[2] = {kMlpHidden, kMlpHidden};
        for (int i = 0; i < 2; ++i) {
            BuiltLayer l{};
            l.kind = LayerKind::dense;
            l.in_c = features;
            l.out_c = widths[i];
            const std::string base = "dense" + std::to_string(i);
            l.w_off = b.add_weight(base + ".weight", {widths[i], features});
            l.w_cnt = static_cast<std::size_t>(widths[i]) * static_cast<std::size_t>(features);
            l.b_off = b.add_weight(base + ".bias", {widths[i]});
            l.b_cnt = static_cast<std::size_t>(widths[i]);
            b.plan.layers.push_back(l);
            b.add_norm(i, widths[i], 1, 1);
            b.add_relu(widths[i], 1, 1);
            features = widths[i];
        }
        BuiltLayer head{};
        head.kind = LayerKind::dense;
        head.in_c = features;
        head.out_c = spec.class_count;
        head.w_off = b.add_weight("head.weight", {spec.class_count, features});
        head.w_cnt = static_cast<std::size_t>(spec.class_count) * static_cast<std::size_t>(features);
        head.b_off = b.add_weight("head.bias", {spec.class_count});
        head.b_cnt = static_cast<std::size_t>(spec.class_count);
        b.plan.layers.push_back(head);
    } else {
        if (spec.input_shape.size() != 3)
            throw InvalidInputError("ModelSpec: tiny_cnn expects a (C,H,W) input shape");
        int c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
        if (c < 1 || h < 4 || w < 4)
            throw InvalidInputError("ModelSpec: tiny_cnn needs at least 4x4 spatial input");
        for (int i = 0; i < 2; ++i) {
            const int out_c = kCnnChannels[i];
            BuiltLayer conv{};
            conv.kind = LayerKind::conv3x3;
            conv.in_c = c;
            conv.out_c = out_c;
            conv.in_h = conv.out_h = h;
            conv.in_w = conv.out_w = w;
            const std::string base = "conv" + std::to_string(i);
            conv.w_off = b.add_weight(base + ".weight", {out_c, c, 3, 3});
            conv.w_cnt = static_cast<std::size_t>(out_c) * static_cast<std::size_t>(c) * 9;
            conv.b_off = b.add_weight(base + ".bias", {out_c});
            conv.b_cnt = static_cast<std::size_t>(out_c);
            b.plan.layers.push_back(conv);
            b.add_norm(i, out_c, h, w);
            b.add_relu(out_c, h, w);

            BuiltLayer pool{};
            pool.kind = LayerKind::maxpool2;
            pool.in_c = pool.out_c = out_c;
            pool.in_h = h;
            pool.in_w = w;
            pool.out_h = h / 2;
            pool.out_w = w / 2;
            b.plan.layers.push_back(pool);
            c = out_c;
            h /= 2;
            w /= 2;
        }
        BuiltLayer flat{};
        flat.kind = detail::LayerKind::flatten;
        flat.in_c = c;
        flat.in_h = h;
        flat.in_w = w;
        flat.out_c = c * h * w;
        b.plan.layers.push_back(flat);

        BuiltLayer head{};
        head.kind = LayerKind::dense;
        head.in_c = c * h * w;
        head.out_c = spec.class_count;
        head.w_off = b.add_weight("head.weight", {spec.class_count, head.in_c});
        head.w_cnt = static_cast<std::size_t>(spec.class_count) * static_cast<std::size_t>(head.in_c);
        head.b_off = b.add_weight("head.bias", {spec.class_count});
        head.b_cnt = static_cast<std::size_t>(spec.class_count);
        b.plan.layers.push_back(head);
    }
    return b.plan;
}

/// Everything one party holds: flat weights, the matching optimizer
/// momentum, and (for batch norm) running statistics. Value type; copies
/// are independent.
struct ParameterState {
    std::vector<double> weights;
    std::vector<double> momentum;
    std::vector<double> norm_stats;
    std::shared_ptr<const ModelPlan> plan;

    const ModelSpec& spec() const { return plan->spec; }
    bool same_layout(const ParameterState& other) const {
        return plan && other.plan && plan->spec == other.plan->spec;
    }
};

inline std::uint64_t weights_checksum(const ParameterState& state) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const std::vector<double>& v) {
        for (double x : v) {
            std::uint64_t bits;
            std::memcpy(&bits, &x, sizeof(bits));
            h ^= bits;
            h *= 0x100000001b3ULL;
        }
    };
    mix(state.weights);
    mix(state.norm_stats);
    return h;
}

/// Deterministic init: uniform +-1/sqrt(fan_in) for dense/conv weights,
/// zero biases, unit norm scale, running stats at mean 0 / variance 1.
inline ParameterState init_model(const ModelSpec& spec, std::uint64_t seed) {
    ParameterState state;
    state.plan = std::make_shared<const ModelPlan>(build_model_plan(spec));
    state.weights.assign(state.plan->weight_count, 0.0);
    state.momentum.assign(state.plan->weight_count, 0.0);
    state.norm_stats.assign(state.plan->stat_count, 0.0);

    RngStream rng{stream_tag::kInit, seed};
    for (const auto& layer : state.plan->layers) {
        using detail::LayerKind;
        if (layer.kind == LayerKind::dense || layer.kind == LayerKind::conv3x3) {
            const int fan_in = layer.kind == LayerKind::dense ? layer.in_c : layer.in_c * 9;
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (std::size_t i = 0; i < layer.w_cnt; ++i)
                state.weights[layer.w_off + i] = (2.0 * rng.uniform_double() - 1.0) * bound;
        } else if (layer.kind == LayerKind::batch_norm || layer.kind == LayerKind::group_norm) {
            for (int c = 0; c < layer.out_c; ++c) state.weights[layer.gamma_off + static_cast<std::size_t>(c)] = 1.0;
            if (layer.kind == LayerKind::batch_norm) {
                for (int c = 0; c < layer.out_c; ++c) state.norm_stats[layer.rv_off + static_cast<std::size_t>(c)] = 1.0;
            }
        }
    }
    return state;
}

/// Mutable view of one named slice of the flat weight vector. Mutating the
/// view mutates exactly that slice.
inline std::span<double> layer_span(ParameterState& state, std::string_view name) {
    for (const auto& s : state.plan->weight_slices) {
        if (s.name == name) return {state.weights.data() + s.offset, s.count};
    }
    throw InvalidInputError("layer_span: no slice named " + std::string(name));
}

inline std::span<const double> layer_span(const ParameterState& state, std::string_view name) {
    for (const auto& s : state.plan->weight_slices) {
        if (s.name == name) return {state.weights.data() + s.offset, s.count};
    }
    throw InvalidInputError("layer_span: no slice named " + std::string(name));
}

// Per-layer forward intermediates retained for the backward pass.
struct LayerCache {
    Tensor input;
    std::vector<double> mean, var;   // norm statistics used
    std::vector<double> xhat;        // normalized pre-affine values
    std::vector<int> argmax;         // maxpool winners
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Tensor logits;
    Mode mode = Mode::train;
    std::uint64_t checksum = 0;
};

namespace detail {

inline void dense_forward(const BuiltLayer& l, const std::vector<double>& w, const Tensor& x, Tensor& y) {
    const int n = x.batch();
    const int in = l.in_c, out = l.out_c;
    for (int s = 0; s < n; ++s) {
        const double* xs = x.sample(s);
        double* ys = y.sample(s);
        for (int o = 0; o < out; ++o) {
            double acc = w[l.b_off + static_cast<std::size_t>(o)];
            const double* row = w.data() + l.w_off + static_cast<std::size_t>(o) * static_cast<std::size_t>(in);
            for (int i = 0; i < in; ++i) acc += row[i] * xs[i];
            ys[o] = acc;
        }
    }
}

inline void dense_backward(const BuiltLayer& l, const std::vector<double>& w, const Tensor& x, const Tensor& dy,
                           std::vector<double>& grad, Tensor& dx) {
    const int n = x.batch();
    const int in = l.in_c, out = l.out_c;
    for (int s = 0; s < n; ++s) {
        const double* xs = x.sample(s);
        const double* dys = dy.sample(s);
        double* dxs = dx.sample(s);
        for (int o = 0; o < out; ++o) {
            const double g = dys[o];
            if (g == 0.0) continue;
            grad[l.b_off + static_cast<std::size_t>(o)] += g;
            double* grow = grad.data() + l.w_off + static_cast<std::size_t>(o) * static_cast<std::size_t>(in);
            const double* wrow = w.data() + l.w_off + static_cast<std::size_t>(o) * static_cast<std::size_t>(in);
            for (int i = 0; i < in; ++i) {
                grow[i] += g * xs[i];
                dxs[i] += g * wrow[i];
            }
        }
    }
}

inline void conv_forward(const BuiltLayer& l, const std::vector<double>& w, const Tensor& x, Tensor& y) {
    const int n = x.batch();
    const int h = l.in_h, wd = l.in_w;
    for (int s = 0; s < n; ++s) {
        const double* xs = x.sample(s);
        double* ys = y.sample(s);
        for (int oc = 0; oc < l.out_c; ++oc) {
            const double bias = w[l.b_off + static_cast<std::size_t>(oc)];
            double* yplane = ys + static_cast<std::size_t>(oc) * static_cast<std::size_t>(h * wd);
            for (int i = 0; i < h * wd; ++i) yplane[i] = bias;
            for (int ic = 0; ic < l.in_c; ++ic) {
                const double* xplane = xs + static_cast<std::size_t>(ic) * static_cast<std::size_t>(h * wd);
                const double* kern = w.data() + l.w_off +
                                     (static_cast<std::size_t>(oc) * static_cast<std::size_t>(l.in_c) +
                                      static_cast<std::size_t>(ic)) * 9;
                for (int r = 0; r < h; ++r) {
                    for (int c = 0; c < wd; ++c) {
                        double acc = 0.0;
                        for (int dr = -1; dr <= 1; ++dr) {
                            const int rr = r + dr;
                            if (rr < 0 || rr >= h) continue;
                            for (int dc = -1; dc <= 1; ++dc) {
                                const int cc = c + dc;
                                if (cc < 0 || cc >= wd) continue;
                                acc += kern[(dr + 1) * 3 + (dc + 1)] * xplane[rr * wd + cc];
                            }
                        }
                        yplane[r * wd + c] += acc;
                    }
                }
            }
        }
    }
}

inline void conv_backward(const BuiltLayer& l, const std::vector<double>& w, const Tensor& x, const Tensor& dy,
                          std::vector<double>& grad, Tensor& dx) {
    const int n = x.batch();
    const int h = l.in_h, wd = l.in_w;
    for (int s = 0; s < n; ++s) {
        const double* xs = x.sample(s);
        const double* dys = dy.sample(s);
        double* dxs = dx.sample(s);
        for (int oc = 0; oc < l.out_c; ++oc) {
            const double* dyplane = dys + static_cast<std::size_t>(oc) * static_cast<std::size_t>(h * wd);
            double& dbias = grad[l.b_off + static_cast<std::size_t>(oc)];
            for (int i = 0; i < h * wd; ++i) dbias += dyplane[i];
            for (int ic = 0; ic < l.in_c; ++ic) {
                const double* xplane = xs + static_cast<std::size_t>(ic) * static_cast<std::size_t>(h * wd);
                double* dxplane = dxs + static_cast<std::size_t>(ic) * static_cast<std::size_t>(h * wd);
                const std::size_t koff = l.w_off + (static_cast<std::size_t>(oc) * static_cast<std::size_t>(l.in_c) +
                                                    static_cast<std::size_t>(ic)) * 9;
                const double* kern = w.data() + koff;
                double* gkern = grad.data() + koff;
                for (int r = 0; r < h; ++r) {
                    for (int c = 0; c < wd; ++c) {
                        const double g = dyplane[r * wd + c];
                        if (g == 0.0) continue;
                        for (int dr = -1; dr <= 1; ++dr) {
                            const int rr = r + dr;
                            if (rr < 0 || rr >= h) continue;
                            for (int dc = -1; dc <= 1; ++dc) {
                                const int cc = c + dc;
                                if (cc < 0 || cc >= wd) continue;
                                gkern[(dr + 1) * 3 + (dc + 1)] += g * xplane[rr * wd + cc];
                                dxplane[rr * wd + cc] += g * kern[(dr + 1) * 3 + (dc + 1)];
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void maxpool_forward(const BuiltLayer& l, const Tensor& x, Tensor& y, std::vector<int>& argmax) {
    const int n = x.batch();
    argmax.assign(y.size(), -1);
    for (int s = 0; s < n; ++s) {
        const double* xs = x.sample(s);
        double* ys = y.sample(s);
        std::size_t out_idx = static_cast<std::size_t>(s) * y.sample_size();
        for (int c = 0; c < l.in_c; ++c) {
            const double* xplane = xs + static_cast<std::size_t>(c) * static_cast<std::size_t>(l.in_h * l.in_w);
            double* yplane = ys + static_cast<std::size_t>(c) * static_cast<std::size_t>(l.out_h * l.out_w);
            for (int r = 0; r < l.out_h; ++r) {
                for (int q = 0; q < l.out_w; ++q) {
                    int best = (2 * r) * l.in_w + 2 * q;
                    double best_v = xplane[best];
                    const int cand[3] = {(2 * r) * l.in_w + 2 * q + 1, (2 * r + 1) * l.in_w + 2 * q,
                                         (2 * r + 1) * l.in_w + 2 * q + 1};
                    for (int idx : cand) {
                        if (xplane[idx] > best_v) {
                            best_v = xplane[idx];
                            best = idx;
                        }
                    }
                    yplane[r * l.out_w + q] = best_v;
                    argmax[out_idx + static_cast<std::size_t>(c * l.out_h * l.out_w + r * l.out_w + q)] =
                        c * l.in_h * l.in_w + best;
                }
            }
        }
    }
}

inline void norm_stats_over(const Tensor& x, int channels, int spatial, bool per_batch, int groups,
                            std::vector<double>& mean, std::vector<double>& var) {
    const int n = x.batch();
    if (per_batch) {
        // One statistic per channel over batch and spatial dims.
        mean.assign(static_cast<std::size_t>(channels), 0.0);
        var.assign(static_cast<std::size_t>(channels), 0.0);
        const double m = static_cast<double>(n) * spatial;
        for (int s = 0; s < n; ++s) {
            const double* xs = x.sample(s);
            for (int c = 0; c < channels; ++c) {
                const double* plane = xs + static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial);
                for (int i = 0; i < spatial; ++i) mean[static_cast<std::size_t>(c)] += plane[i];
            }
        }
        for (auto& v : mean) v /= m;
        for (int s = 0; s < n; ++s) {
            const double* xs = x.sample(s);
            for (int c = 0; c < channels; ++c) {
                const double* plane = xs + static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial);
                for (int i = 0; i < spatial; ++i) {
                    const double d = plane[i] - mean[static_cast<std::size_t>(c)];
                    var[static_cast<std::size_t>(c)] += d * d;
                }
            }
        }
        for (auto& v : var) v /= m;
    } else {
        // One statistic per (sample, group) block.
        const int gs = channels / groups;
        const double m = static_cast<double>(gs) * spatial;
        mean.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(groups), 0.0);
        var.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(groups), 0.0);
        for (int s = 0; s < n; ++s) {
            const double* xs = x.sample(s);
            for (int g = 0; g < groups; ++g) {
                double acc = 0.0;
                for (int c = g * gs; c < (g + 1) * gs; ++c) {
                    const double* plane = xs + static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial);
                    for (int i = 0; i < spatial; ++i) acc += plane[i];
                }
                const std::size_t idx = static_cast<std::size_t>(s) * static_cast<std::size_t>(groups) +
                                        static_cast<std::size_t>(g);
                mean[idx] = acc / m;
                double vacc = 0.0;
                for (int c = g * gs; c < (g + 1) * gs; ++c) {
                    const double* plane = xs + static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial);
                    for (int i = 0; i < spatial; ++i) {
                        const double d = plane[i] - mean[idx];
                        vacc += d * d;
                    }
                }
                var[idx] = vacc / m;
            }
        }
    }
}

} // namespace detail

/// Runs the network on a batch. In train mode batch norm uses batch
/// statistics and advances the running stats held in `state`; eval mode is
/// pure. Returns logits plus the cache `backward` consumes.
inline ForwardCache forward(ParameterState& state, const Tensor& batch, Mode mode) {
    const ModelPlan& plan = *state.plan;
    std::vector<int> expect = {batch.batch()};
    expect.insert(expect.end(), plan.spec.input_shape.begin(), plan.spec.input_shape.end());
    if (!same_shape(batch.shape, expect))
        throw InvalidInputError("forward: batch shape " + shape_string(batch.shape) + " does not match model input " +
                                shape_string(expect));
    if (batch.batch() < 1) throw InvalidInputError("forward: empty batch");

    ForwardCache cache;
    cache.mode = mode;
    cache.layers.resize(plan.layers.size());
    const int n = batch.batch();

    Tensor cur = batch;
    using detail::LayerKind;
    for (std::size_t li = 0; li < plan.layers.size(); ++li) {
        const auto& l = plan.layers[li];
        LayerCache& lc = cache.layers[li];
        switch (l.kind) {
        case LayerKind::dense: {
            lc.input = cur;
            Tensor y({n, l.out_c});
            detail::dense_forward(l, state.weights, cur, y);
            cur = std::move(y);
            break;
        }
        case LayerKind::conv3x3: {
            lc.input = cur;
            Tensor y({n, l.out_c, l.out_h, l.out_w});
            detail::conv_forward(l, state.weights, cur, y);
            cur = std::move(y);
            break;
        }
        case LayerKind::relu: {
            lc.input = cur;
            for (auto& v : cur.data) v = v > 0.0 ? v : 0.0;
            break;
        }
        case LayerKind::maxpool2: {
            lc.input = cur;
            Tensor y({n, l.out_c, l.out_h, l.out_w});
            detail::maxpool_forward(l, cur, y, lc.argmax);
            cur = std::move(y);
            break;
        }
        case LayerKind::flatten: {
            cur.shape = {n, l.out_c};
            break;
        }
        case LayerKind::batch_norm: {
            lc.input = cur;
            const int spatial = l.in_h * l.in_w;
            if (mode == Mode::train) {
                detail::norm_stats_over(cur, l.out_c, spatial, true, 0, lc.mean, lc.var);
                for (int c = 0; c < l.out_c; ++c) {
                    double& rm = state.norm_stats[l.rm_off + static_cast<std::size_t>(c)];
                    double& rv = state.norm_stats[l.rv_off + static_cast<std::size_t>(c)];
                    rm = (1.0 - kRunningStatMomentum) * rm + kRunningStatMomentum * lc.mean[static_cast<std::size_t>(c)];
                    rv = (1.0 - kRunningStatMomentum) * rv + kRunningStatMomentum * lc.var[static_cast<std::size_t>(c)];
                }
            } else {
                lc.mean.assign(state.norm_stats.begin() + static_cast<std::ptrdiff_t>(l.rm_off),
                               state.norm_stats.begin() + static_cast<std::ptrdiff_t>(l.rm_off + static_cast<std::size_t>(l.out_c)));
                lc.var.assign(state.norm_stats.begin() + static_cast<std::ptrdiff_t>(l.rv_off),
                              state.norm_stats.begin() + static_cast<std::ptrdiff_t>(l.rv_off + static_cast<std::size_t>(l.out_c)));
            }
            lc.xhat.resize(cur.size());
            for (int s = 0; s < n; ++s) {
                double* xs = cur.sample(s);
                double* xh = lc.xhat.data() + static_cast<std::size_t>(s) * cur.sample_size();
                for (int c = 0; c < l.out_c; ++c) {
                    const double mu = lc.mean[static_cast<std::size_t>(c)];
                    const double inv = 1.0 / std::sqrt(lc.var[static_cast<std::size_t>(c)] + kNormEps);
                    const double gamma = state.weights[l.gamma_off + static_cast<std::size_t>(c)];
                    const double beta = state.weights[l.beta_off + static_cast<std::size_t>(c)];
                    for (int i = 0; i < spatial; ++i) {
                        const std::size_t idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial) +
                                                static_cast<std::size_t>(i);
                        const double h = (xs[idx] - mu) * inv;
                        xh[idx] = h;
                        xs[idx] = gamma * h + beta;
                    }
                }
            }
            break;
        }
        case LayerKind::group_norm: {
            lc.input = cur;
            const int spatial = l.in_h * l.in_w;
            const int gs = l.out_c / l.groups;
            detail::norm_stats_over(cur, l.out_c, spatial, false, l.groups, lc.mean, lc.var);
            lc.xhat.resize(cur.size());
            for (int s = 0; s < n; ++s) {
                double* xs = cur.sample(s);
                double* xh = lc.xhat.data() + static_cast<std::size_t>(s) * cur.sample_size();
                for (int g = 0; g < l.groups; ++g) {
                    const std::size_t sidx = static_cast<std::size_t>(s) * static_cast<std::size_t>(l.groups) +
                                             static_cast<std::size_t>(g);
                    const double mu = lc.mean[sidx];
                    const double inv = 1.0 / std::sqrt(lc.var[sidx] + kNormEps);
                    for (int c = g * gs; c < (g + 1) * gs; ++c) {
                        const double gamma = state.weights[l.gamma_off + static_cast<std::size_t>(c)];
                        const double beta = state.weights[l.beta_off + static_cast<std::size_t>(c)];
                        for (int i = 0; i < spatial; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial) +
                                                    static_cast<std::size_t>(i);
                            const double h = (xs[idx] - mu) * inv;
                            xh[idx] = h;
                            xs[idx] = gamma * h + beta;
                        }
                    }
                }
            }
            break;
        }
        }
    }
    cache.logits = std::move(cur);
    cache.checksum = weights_checksum(state);
    return cache;
}

/// Backpropagates a loss gradient at the logits to a gradient over the flat
/// weight vector. The cache must come from a forward on the same state.
inline std::vector<double> backward(const ParameterState& state, const ForwardCache& cache,
                                    const Tensor& loss_gradient_at_logits) {
    const ModelPlan& plan = *state.plan;
    if (cache.checksum != weights_checksum(state))
        throw ContractViolationError("backward: cache is stale (weights changed since forward)");
    if (!same_shape(loss_gradient_at_logits.shape, cache.logits.shape))
        throw InvalidInputError("backward: gradient shape mismatch");

    std::vector<double> grad(plan.weight_count, 0.0);
    Tensor dy = loss_gradient_at_logits;
    const int n = dy.batch();
    using detail::LayerKind;

    for (std::size_t li = plan.layers.size(); li-- > 0;) {
        const auto& l = plan.layers[li];
        const LayerCache& lc = cache.layers[li];
        switch (l.kind) {
        case LayerKind::dense: {
            Tensor dx(lc.input.shape);
            detail::dense_backward(l, state.weights, lc.input, dy, grad, dx);
            dy = std::move(dx);
            break;
        }
        case LayerKind::conv3x3: {
            Tensor dx(lc.input.shape);
            detail::conv_backward(l, state.weights, lc.input, dy, grad, dx);
            dy = std::move(dx);
            break;
        }
        case LayerKind::relu: {
            for (std::size_t i = 0; i < dy.data.size(); ++i)
                if (lc.input.data[i] <= 0.0) dy.data[i] = 0.0;
            break;
        }
        case LayerKind::maxpool2: {
            Tensor dx(lc.input.shape);
            for (int s = 0; s < n; ++s) {
                const double* dys = dy.sample(s);
                double* dxs = dx.sample(s);
                const std::size_t base = static_cast<std::size_t>(s) * dy.sample_size();
                for (std::size_t i = 0; i < dy.sample_size(); ++i) dxs[lc.argmax[base + i]] += dys[i];
            }
            dy = std::move(dx);
            break;
        }
        case LayerKind::flatten: {
            dy.shape = {n, l.in_c, l.in_h, l.in_w};
            break;
        }
        case LayerKind::batch_norm: {
            const int spatial = l.in_h * l.in_w;
            Tensor dx(lc.input.shape);
            if (cache.mode == Mode::train) {
                const double m = static_cast<double>(n) * spatial;
                for (int c = 0; c < l.out_c; ++c) {
                    const double inv = 1.0 / std::sqrt(lc.var[static_cast<std::size_t>(c)] + kNormEps);
                    const double gamma = state.weights[l.gamma_off + static_cast<std::size_t>(c)];
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0, sum_dy = 0.0;
                    for (int s = 0; s < n; ++s) {
                        const double* dys = dy.sample(s);
                        const double* xh = lc.xhat.data() + static_cast<std::size_t>(s) * dy.sample_size();
                        for (int i = 0; i < spatial; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial) +
                                                    static_cast<std::size_t>(i);
                            sum_dy += dys[idx];
                            sum_dxhat += dys[idx] * gamma;
                            sum_dxhat_xhat += dys[idx] * gamma * xh[idx];
                        }
                    }
                    grad[l.beta_off + static_cast<std::size_t>(c)] += sum_dy;
                    double dgamma = 0.0;
                    for (int s = 0; s < n; ++s) {
                        const double* dys = dy.sample(s);
                        const double* xh = lc.xhat.data() + static_cast<std::size_t>(s) * dy.sample_size();
                        double* dxs = dx.sample(s);
                        for (int i = 0; i < spatial; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial) +
                                                    static_cast<std::size_t>(i);
                            dgamma += dys[idx] * xh[idx];
                            const double dxhat = dys[idx] * gamma;
                            dxs[idx] = inv * (dxhat - sum_dxhat / m - xh[idx] * sum_dxhat_xhat / m);
                        }
                    }
                    grad[l.gamma_off + static_cast<std::size_t>(c)] += dgamma;
                }
            } else {
                for (int c = 0; c < l.out_c; ++c) {
                    const double inv = 1.0 / std::sqrt(lc.var[static_cast<std::size_t>(c)] + kNormEps);
                    const double gamma = state.weights[l.gamma_off + static_cast<std::size_t>(c)];
                    for (int s = 0; s < n; ++s) {
                        const double* dys = dy.sample(s);
                        const double* xh = lc.xhat.data() + static_cast<std::size_t>(s) * dy.sample_size();
                        double* dxs = dx.sample(s);
                        for (int i = 0; i < spatial; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial) +
                                                    static_cast<std::size_t>(i);
                            grad[l.gamma_off + static_cast<std::size_t>(c)] += dys[idx] * xh[idx];
                            grad[l.beta_off + static_cast<std::size_t>(c)] += dys[idx];
                            dxs[idx] = dys[idx] * gamma * inv;
                        }
                    }
                }
            }
            dy = std::move(dx);
            break;
        }
        case LayerKind::group_norm: {
            const int spatial = l.in_h * l.in_w;
            const int gs = l.out_c / l.groups;
            const double m = static_cast<double>(gs) * spatial;
            Tensor dx(lc.input.shape);
            for (int s = 0; s < n; ++s) {
                const double* dys = dy.sample(s);
                const double* xh = lc.xhat.data() + static_cast<std::size_t>(s) * dy.sample_size();
                double* dxs = dx.sample(s);
                for (int g = 0; g < l.groups; ++g) {
                    const std::size_t sidx = static_cast<std::size_t>(s) * static_cast<std::size_t>(l.groups) +
                                             static_cast<std::size_t>(g);
                    const double inv = 1.0 / std::sqrt(lc.var[sidx] + kNormEps);
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = g * gs; c < (g + 1) * gs; ++c) {
                        const double gamma = state.weights[l.gamma_off + static_cast<std::size_t>(c)];
                        for (int i = 0; i < spatial; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial) +
                                                    static_cast<std::size_t>(i);
                            sum_dxhat += dys[idx] * gamma;
                            sum_dxhat_xhat += dys[idx] * gamma * xh[idx];
                        }
                    }
                    for (int c = g * gs; c < (g + 1) * gs; ++c) {
                        const double gamma = state.weights[l.gamma_off + static_cast<std::size_t>(c)];
                        for (int i = 0; i < spatial; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(c) * static_cast<std::size_t>(spatial) +
                                                    static_cast<std::size_t>(i);
                            grad[l.gamma_off + static_cast<std::size_t>(c)] += dys[idx] * xh[idx];
                            grad[l.beta_off + static_cast<std::size_t>(c)] += dys[idx];
                            const double dxhat = dys[idx] * gamma;
                            dxs[idx] = inv * (dxhat - sum_dxhat / m - xh[idx] * sum_dxhat_xhat / m);
                        }
                    }
                }
            }
            dy = std::move(dx);
            break;
        }
        }
    }
    return grad;
}

} // namespace ssfl
