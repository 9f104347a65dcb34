#pragma once

#include "spt/common.hpp"

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace spt {

inline int64_t shape_numel(const std::vector<int64_t> & shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int64_t> & shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// Dense row-major f32 tensor. 1-D and 2-D cover everything the toy
// transformer and the mask optimizer need.
struct tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;
    bool requires_grad = false;

    tensor() = default;
    tensor(std::vector<int64_t> s, std::vector<float> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        require(shape_numel(shape) == int64_t(data.size()), errc::shape_mismatch,
                "tensor data length " + std::to_string(data.size()) +
                " does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return int64_t(data.size()); }
    int64_t ndim() const { return int64_t(shape.size()); }

    // 2-D accessors; 1-D tensors behave as a single row
    int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int64_t cols() const { return shape.empty() ? 0 : shape.back(); }

    float & at(int64_t r, int64_t c) { return data[size_t(r * cols() + c)]; }
    float at(int64_t r, int64_t c) const { return data[size_t(r * cols() + c)]; }

    static tensor zeros(std::vector<int64_t> shape, bool rg = false) {
        const int64_t n = shape_numel(shape);
        return tensor(std::move(shape), std::vector<float>(size_t(n), 0.0f), rg);
    }

    static tensor full(std::vector<int64_t> shape, float v, bool rg = false) {
        const int64_t n = shape_numel(shape);
        return tensor(std::move(shape), std::vector<float>(size_t(n), v), rg);
    }

    static tensor scalar(float v, bool rg = false) {
        return tensor({1}, {v}, rg);
    }

    static tensor randn(rng & r, std::vector<int64_t> shape, float stddev, bool rg = false) {
        const int64_t n = shape_numel(shape);
        std::vector<float> d(size_t(n));
        for (auto & x : d) x = r.normal(0.0f, stddev);
        return tensor(std::move(shape), std::move(d), rg);
    }

    bool all_finite() const {
        for (float v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool same_shape(const tensor & o) const { return shape == o.shape; }
};

inline float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    require(a.size() == b.size(), errc::shape_mismatch, "max_abs_diff: length mismatch");
    float m = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::fabs(a[i] - b[i]));
    }
    return m;
}

} // namespace spt
