#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ssfl/errors.hpp"
#include "ssfl/rng.hpp"
#include "ssfl/tensor.hpp"

namespace ssfl {

// Image ops work on (N,C,H,W) tensors in [0,1]; vector ops on (N,D).
enum class AugmentOp { identity, shift, crop_resize, rotate, invert, noise, cutout, coord_dropout, affine_scale };

inline AugmentOp augment_op_from_string(const std::string& s) {
    if (s == "identity") return AugmentOp::identity;
    if (s == "shift") return AugmentOp::shift;
    if (s == "crop_resize") return AugmentOp::crop_resize;
    if (s == "rotate") return AugmentOp::rotate;
    if (s == "invert") return AugmentOp::invert;
    if (s == "noise") return AugmentOp::noise;
    if (s == "cutout") return AugmentOp::cutout;
    if (s == "coord_dropout") return AugmentOp::coord_dropout;
    if (s == "affine_scale") return AugmentOp::affine_scale;
    throw InvalidInputError("unknown augment op: " + s);
}

inline std::string to_string(AugmentOp op) {
    switch (op) {
    case AugmentOp::identity: return "identity";
    case AugmentOp::shift: return "shift";
    case AugmentOp::crop_resize: return "crop_resize";
    case AugmentOp::rotate: return "rotate";
    case AugmentOp::invert: return "invert";
    case AugmentOp::noise: return "noise";
    case AugmentOp::cutout: return "cutout";
    case AugmentOp::coord_dropout: return "coord_dropout";
    case AugmentOp::affine_scale: return "affine_scale";
    }
    return "?";
}

struct AugmentConfig {
    int weak_max_shift = 2;
    bool weak_hflip = true;
    double weak_vector_sigma = 0.05;
    int strong_ops_per_sample = 2;
    std::vector<AugmentOp> image_pool = {AugmentOp::shift,  AugmentOp::crop_resize, AugmentOp::rotate,
                                         AugmentOp::invert, AugmentOp::noise,       AugmentOp::cutout};
    std::vector<AugmentOp> vector_pool = {AugmentOp::noise, AugmentOp::coord_dropout, AugmentOp::affine_scale};

    void validate() const {
        if (strong_ops_per_sample < 1) throw InvalidInputError("AugmentConfig: ops_per_sample must be >= 1");
        if (image_pool.empty() || vector_pool.empty()) throw InvalidInputError("AugmentConfig: empty op pool");
        if (weak_max_shift < 0) throw InvalidInputError("AugmentConfig: negative shift");
    }
};

namespace detail {

inline void clamp01(double* plane, int count) {
    for (int i = 0; i < count; ++i) plane[i] = std::clamp(plane[i], 0.0, 1.0);
}

inline void shift_image(const double* src, double* dst, int channels, int h, int w, int dr, int dc) {
    for (int c = 0; c < channels; ++c) {
        const double* sp = src + static_cast<std::size_t>(c) * static_cast<std::size_t>(h * w);
        double* dp = dst + static_cast<std::size_t>(c) * static_cast<std::size_t>(h * w);
        for (int r = 0; r < h; ++r) {
            for (int q = 0; q < w; ++q) {
                const int sr = r - dr, sc = q - dc;
                dp[r * w + q] = (sr >= 0 && sr < h && sc >= 0 && sc < w) ? sp[sr * w + sc] : 0.0;
            }
        }
    }
}

inline void hflip_image(double* img, int channels, int h, int w) {
    for (int c = 0; c < channels; ++c) {
        double* plane = img + static_cast<std::size_t>(c) * static_cast<std::size_t>(h * w);
        for (int r = 0; r < h; ++r)
            for (int q = 0; q < w / 2; ++q) std::swap(plane[r * w + q], plane[r * w + (w - 1 - q)]);
    }
}

inline double bilinear(const double* plane, int h, int w, double r, double c) {
    if (r <= -1.0 || r >= static_cast<double>(h) || c <= -1.0 || c >= static_cast<double>(w)) return 0.0;
    const int r0 = static_cast<int>(std::floor(r)), c0 = static_cast<int>(std::floor(c));
    const double fr = r - r0, fc = c - c0;
    auto at = [&](int rr, int cc) {
        return (rr >= 0 && rr < h && cc >= 0 && cc < w) ? plane[rr * w + cc] : 0.0;
    };
    return at(r0, c0) * (1 - fr) * (1 - fc) + at(r0, c0 + 1) * (1 - fr) * fc + at(r0 + 1, c0) * fr * (1 - fc) +
           at(r0 + 1, c0 + 1) * fr * fc;
}

inline void apply_image_op(AugmentOp op, double* img, int channels, int h, int w, RngStream& rng) {
    const int hw = h * w;
    switch (op) {
    case AugmentOp::identity:
        break;
    case AugmentOp::shift: {
        const int max_r = std::max(1, static_cast<int>(std::lround(0.3 * h)));
        const int max_c = std::max(1, static_cast<int>(std::lround(0.3 * w)));
        const int dr = rng.uniform_int(-max_r, max_r);
        const int dc = rng.uniform_int(-max_c, max_c);
        std::vector<double> tmp(static_cast<std::size_t>(channels) * static_cast<std::size_t>(hw));
        shift_image(img, tmp.data(), channels, h, w, dr, dc);
        std::copy(tmp.begin(), tmp.end(), img);
        break;
    }
    case AugmentOp::crop_resize: {
        const double scale = 0.6 + 0.35 * rng.uniform_double();
        const int ch = std::max(1, static_cast<int>(std::lround(scale * h)));
        const int cw = std::max(1, static_cast<int>(std::lround(scale * w)));
        const int r0 = rng.uniform_int(0, h - ch);
        const int c0 = rng.uniform_int(0, w - cw);
        std::vector<double> tmp(static_cast<std::size_t>(channels) * static_cast<std::size_t>(hw));
        for (int c = 0; c < channels; ++c) {
            const double* sp = img + static_cast<std::size_t>(c) * static_cast<std::size_t>(hw);
            double* dp = tmp.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(hw);
            for (int r = 0; r < h; ++r) {
                for (int q = 0; q < w; ++q) {
                    const double sr = r0 + (r + 0.5) * ch / h - 0.5;
                    const double sc = c0 + (q + 0.5) * cw / w - 0.5;
                    dp[r * w + q] = bilinear(sp, h, w, sr, sc);
                }
            }
        }
        std::copy(tmp.begin(), tmp.end(), img);
        break;
    }
    case AugmentOp::rotate: {
        const double theta = (rng.uniform_double() * 2.0 - 1.0) * (30.0 * std::numbers::pi / 180.0);
        const double cr = (h - 1) / 2.0, cc = (w - 1) / 2.0;
        const double cs = std::cos(theta), sn = std::sin(theta);
        std::vector<double> tmp(static_cast<std::size_t>(channels) * static_cast<std::size_t>(hw));
        for (int c = 0; c < channels; ++c) {
            const double* sp = img + static_cast<std::size_t>(c) * static_cast<std::size_t>(hw);
            double* dp = tmp.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(hw);
            for (int r = 0; r < h; ++r) {
                for (int q = 0; q < w; ++q) {
                    const double sr = cr + cs * (r - cr) + sn * (q - cc);
                    const double sc = cc - sn * (r - cr) + cs * (q - cc);
                    dp[r * w + q] = bilinear(sp, h, w, sr, sc);
                }
            }
        }
        std::copy(tmp.begin(), tmp.end(), img);
        break;
    }
    case AugmentOp::invert:
        for (int i = 0; i < channels * hw; ++i) img[i] = 1.0 - img[i];
        break;
    case AugmentOp::noise: {
        const double sigma = 0.05 + 0.15 * rng.uniform_double();
        for (int i = 0; i < channels * hw; ++i) img[i] += sigma * rng.normal();
        break;
    }
    case AugmentOp::cutout: {
        const double frac = 0.2 + 0.2 * rng.uniform_double();
        const int side = std::max(1, static_cast<int>(std::lround(frac * std::min(h, w))));
        const int r0 = rng.uniform_int(0, h - side);
        const int c0 = rng.uniform_int(0, w - side);
        for (int c = 0; c < channels; ++c) {
            double* plane = img + static_cast<std::size_t>(c) * static_cast<std::size_t>(hw);
            for (int r = r0; r < r0 + side; ++r)
                for (int q = c0; q < c0 + side; ++q) plane[r * w + q] = 0.0;
        }
        break;
    }
    default:
        throw InvalidInputError("apply_image_op: " + to_string(op) + " is not an image op");
    }
    clamp01(img, channels * hw);
}

inline void apply_vector_op(AugmentOp op, double* x, int dim, RngStream& rng) {
    switch (op) {
    case AugmentOp::identity:
        break;
    case AugmentOp::noise:
        for (int i = 0; i < dim; ++i) x[i] += 0.2 * rng.normal();
        break;
    case AugmentOp::coord_dropout:
        for (int i = 0; i < dim; ++i)
            if (rng.bernoulli(0.2)) x[i] = 0.0;
        break;
    case AugmentOp::affine_scale: {
        const double a = 0.7 + 0.6 * rng.uniform_double();
        for (int i = 0; i < dim; ++i) x[i] *= a;
        break;
    }
    default:
        throw InvalidInputError("apply_vector_op: " + to_string(op) + " is not a vector op");
    }
}

inline std::vector<AugmentOp> draw_distinct_ops(const std::vector<AugmentOp>& pool, int count, RngStream& rng) {
    const int take = std::min<int>(count, static_cast<int>(pool.size()));
    auto idx = rng.sample_without_replacement(static_cast<int>(pool.size()), take);
    std::vector<AugmentOp> ops;
    ops.reserve(idx.size());
    for (int i : idx) ops.push_back(pool[static_cast<std::size_t>(i)]);
    return ops;
}

} // namespace detail

/// Light perturbation: flip-and-shift for images, small additive noise for
/// vector data. Never touches model state; all randomness comes from `rng`.
inline Tensor weak_augment(const Tensor& x, const AugmentConfig& cfg, RngStream& rng) {
    cfg.validate();
    Tensor out = x;
    if (x.shape.size() == 4) {
        const int channels = x.shape[1], h = x.shape[2], w = x.shape[3];
        std::vector<double> tmp(out.sample_size());
        for (int n = 0; n < x.batch(); ++n) {
            double* img = out.sample(n);
            const int dr = cfg.weak_max_shift > 0 ? rng.uniform_int(-cfg.weak_max_shift, cfg.weak_max_shift) : 0;
            const int dc = cfg.weak_max_shift > 0 ? rng.uniform_int(-cfg.weak_max_shift, cfg.weak_max_shift) : 0;
            if (dr != 0 || dc != 0) {
                detail::shift_image(img, tmp.data(), channels, h, w, dr, dc);
                std::copy(tmp.begin(), tmp.end(), img);
            }
            if (cfg.weak_hflip && rng.bernoulli(0.5)) detail::hflip_image(img, channels, h, w);
        }
    } else if (x.shape.size() == 2) {
        if (cfg.weak_vector_sigma > 0.0)
            for (auto& v : out.data) v += cfg.weak_vector_sigma * rng.normal();
    } else {
        throw InvalidInputError("weak_augment: expected a (N,D) or (N,C,H,W) tensor");
    }
    return out;
}

/// Heavy perturbation: a few distinct ops drawn from the pool, applied in
/// draw order with random magnitudes.
inline Tensor strong_augment(const Tensor& x, const AugmentConfig& cfg, RngStream& rng) {
    cfg.validate();
    Tensor out = x;
    if (x.shape.size() == 4) {
        const int channels = x.shape[1], h = x.shape[2], w = x.shape[3];
        for (int n = 0; n < x.batch(); ++n) {
            const auto ops = detail::draw_distinct_ops(cfg.image_pool, cfg.strong_ops_per_sample, rng);
            for (AugmentOp op : ops) detail::apply_image_op(op, out.sample(n), channels, h, w, rng);
        }
    } else if (x.shape.size() == 2) {
        const int dim = x.shape[1];
        for (int n = 0; n < x.batch(); ++n) {
            const auto ops = detail::draw_distinct_ops(cfg.vector_pool, cfg.strong_ops_per_sample, rng);
            for (AugmentOp op : ops) detail::apply_vector_op(op, out.sample(n), dim, rng);
        }
    } else {
        throw InvalidInputError("strong_augment: expected a (N,D) or (N,C,H,W) tensor");
    }
    return out;
}

} // namespace ssfl
