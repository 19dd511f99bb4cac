#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "mialab/util.hpp"

namespace mialab {

// Dense row-major tensor. Invariant: numel(shape) == data.size().
// Float storage is the training default; the double instantiation is the
// 64-bit verification mode used by gradient checks and attack math.
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            throw ValidationError("tensor shape/data mismatch");
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw ValidationError("negative tensor dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) {
        int64_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
    }

    static Tensor full(std::vector<int64_t> s, T v) {
        int64_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), v));
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    int64_t rows() const { return shape.size() == 2 ? shape[0] : (shape.size() == 1 ? shape[0] : -1); }
    int64_t cols() const { return shape.size() == 2 ? shape[1] : -1; }

    T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    const T& at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
    std::vector<To> out(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) out[i] = static_cast<To>(t.data[i]);
    return Tensor<To>(t.shape, std::move(out));
}

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

}  // namespace mialab
