#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "ssfl/errors.hpp"

namespace ssfl {

// Dense row-major value tensor. Shape {N, ...} with the batch axis first.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(element_count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != element_count(shape)) throw InvalidInputError("Tensor: data/shape mismatch");
    }

    static std::size_t element_count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int v : s) {
            if (v < 0) throw InvalidInputError("Tensor: negative dimension");
            n *= static_cast<std::size_t>(v);
        }
        return n;
    }

    int batch() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t size() const { return data.size(); }
    std::size_t sample_size() const { return batch() == 0 ? 0 : data.size() / static_cast<std::size_t>(batch()); }

    double* sample(int n) { return data.data() + static_cast<std::size_t>(n) * sample_size(); }
    const double* sample(int n) const { return data.data() + static_cast<std::size_t>(n) * sample_size(); }
};

inline bool same_shape(const std::vector<int>& a, const std::vector<int>& b) { return a == b; }

inline std::string shape_string(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

} // namespace ssfl
