#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mialab/tensor.hpp"
#include "mialab/util.hpp"

namespace mialab {

// Reverse-mode autodiff on a dynamically built tape of tensor ops.
//
// Every op computes its forward value eagerly and registers an exact analytic
// adjoint. backward() walks the tape once in reverse creation order (a valid
// reverse topological order, since parents always precede children) and
// accumulates gradients additively across fan-out.
//
// Reductions, softmax statistics and normalization statistics accumulate in
// double regardless of T. matmul accumulates in T; instantiate with
// T = double for full 64-bit verification mode.
//
// Broadcasting is limited to the leading dimension (row_add / row_mul);
// everything else requires explicit shapes.
template <typename T>
class Graph {
public:
    using NodeId = int32_t;

    explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}

    NodeId constant(Tensor<T> v) { return push(std::move(v), false, nullptr, "constant"); }
    NodeId param(Tensor<T> v) { return push(std::move(v), true, nullptr, "param"); }

    // ---- elementwise, same shape ----

    NodeId add(NodeId a, NodeId b) {
        const Tensor<T>&x = val(a), &y = val(b);
        require(x.same_shape(y), "add: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
        Tensor<T> out = x;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += y.data[i];
        return push(std::move(out), needs(a) || needs(b), [a, b](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            if (g.needs(a)) {
                auto& ga = g.grad_buf(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
            }
            if (g.needs(b)) {
                auto& gb = g.grad_buf(b);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i];
            }
        }, "add");
    }

    NodeId sub(NodeId a, NodeId b) {
        const Tensor<T>&x = val(a), &y = val(b);
        require(x.same_shape(y), "sub: shape mismatch");
        Tensor<T> out = x;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= y.data[i];
        return push(std::move(out), needs(a) || needs(b), [a, b](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            if (g.needs(a)) {
                auto& ga = g.grad_buf(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
            }
            if (g.needs(b)) {
                auto& gb = g.grad_buf(b);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] -= go.data[i];
            }
        }, "sub");
    }

    NodeId mul(NodeId a, NodeId b) {
        const Tensor<T>&x = val(a), &y = val(b);
        require(x.same_shape(y), "mul: shape mismatch");
        Tensor<T> out = x;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= y.data[i];
        return push(std::move(out), needs(a) || needs(b), [a, b](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& x2 = g.val(a);
            const auto& y2 = g.val(b);
            if (g.needs(a)) {
                auto& ga = g.grad_buf(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * y2.data[i];
            }
            if (g.needs(b)) {
                auto& gb = g.grad_buf(b);
                for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i] * x2.data[i];
            }
        }, "mul");
    }

    NodeId scale(NodeId a, double c) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(v * c);
        return push(std::move(out), needs(a), [a, c](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            auto& ga = g.grad_buf(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += static_cast<T>(go.data[i] * c);
        }, "scale");
    }

    NodeId add_scalar(NodeId a, double c) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(v + c);
        return push(std::move(out), needs(a), [a](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            auto& ga = g.grad_buf(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
        }, "add_scalar");
    }

    NodeId log(NodeId a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(std::log(static_cast<double>(v)));
        return push(std::move(out), needs(a), [a](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& x = g.val(a);
            auto& ga = g.grad_buf(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] / x.data[i];
        }, "log");
    }

    NodeId exp(NodeId a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(std::exp(static_cast<double>(v)));
        return push(std::move(out), needs(a), [a](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& y = g.val(self);
            auto& ga = g.grad_buf(a);
            for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * y.data[i];
        }, "exp");
    }

    NodeId gelu(NodeId a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) {
            double x = static_cast<double>(v);
            v = static_cast<T>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
        }
        return push(std::move(out), needs(a), [a](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& xs = g.val(a);
            auto& ga = g.grad_buf(a);
            for (size_t i = 0; i < go.data.size(); ++i) {
                double x = static_cast<double>(xs.data[i]);
                double d = 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
                ga.data[i] += static_cast<T>(static_cast<double>(go.data[i]) * d);
            }
        }, "gelu");
    }

    // Extension point for custom elementwise maps; the caller supplies f and
    // df/dx. Also used by the gradient-check harness to verify that a wrong
    // derivative is detected.
    NodeId unary_map(NodeId a, std::function<double(double)> f, std::function<double(double)> df) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = static_cast<T>(f(static_cast<double>(v)));
        return push(std::move(out), needs(a), [a, df = std::move(df)](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& xs = g.val(a);
            auto& ga = g.grad_buf(a);
            for (size_t i = 0; i < go.data.size(); ++i)
                ga.data[i] += static_cast<T>(static_cast<double>(go.data[i]) * df(static_cast<double>(xs.data[i])));
        }, "unary_map");
    }

    // ---- linear algebra (2D) ----

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.ndim() == 2 && B.ndim() == 2, "matmul: operands must be 2D");
        require(A.shape[1] == B.shape[0],
                "matmul: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
        const int64_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor<T> out = Tensor<T>::zeros({m, n});
        for (int64_t i = 0; i < m; ++i) {
            T* crow = &out.data[static_cast<size_t>(i * n)];
            const T* arow = &A.data[static_cast<size_t>(i * k)];
            for (int64_t kk = 0; kk < k; ++kk) {
                const T av = arow[kk];
                const T* brow = &B.data[static_cast<size_t>(kk * n)];
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return push(std::move(out), needs(a) || needs(b), [a, b, m, k, n](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& A2 = g.val(a);
            const auto& B2 = g.val(b);
            if (g.needs(a)) {  // dA += dC * B^T
                auto& ga = g.grad_buf(a);
                for (int64_t i = 0; i < m; ++i) {
                    const T* grow = &go.data[static_cast<size_t>(i * n)];
                    T* garow = &ga.data[static_cast<size_t>(i * k)];
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const T* brow = &B2.data[static_cast<size_t>(kk * n)];
                        T acc = 0;
                        for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        garow[kk] += acc;
                    }
                }
            }
            if (g.needs(b)) {  // dB += A^T * dC
                auto& gb = g.grad_buf(b);
                for (int64_t i = 0; i < m; ++i) {
                    const T* arow = &A2.data[static_cast<size_t>(i * k)];
                    const T* grow = &go.data[static_cast<size_t>(i * n)];
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const T av = arow[kk];
                        T* gbrow = &gb.data[static_cast<size_t>(kk * n)];
                        for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        }, "matmul");
    }

    NodeId transpose(NodeId a) {
        const Tensor<T>& A = val(a);
        require(A.ndim() == 2, "transpose: 2D only");
        const int64_t m = A.shape[0], n = A.shape[1];
        Tensor<T> out = Tensor<T>::zeros({n, m});
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
        return push(std::move(out), needs(a), [a, m, n](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            auto& ga = g.grad_buf(a);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) ga.at(i, j) += go.at(j, i);
        }, "transpose");
    }

    // ---- shape ----

    NodeId slice_cols(NodeId a, int64_t c0, int64_t w) {
        const Tensor<T>& A = val(a);
        require(A.ndim() == 2 && c0 >= 0 && w > 0 && c0 + w <= A.shape[1], "slice_cols: out of range");
        const int64_t m = A.shape[0];
        Tensor<T> out = Tensor<T>::zeros({m, w});
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j) out.at(i, j) = A.at(i, c0 + j);
        return push(std::move(out), needs(a), [a, c0, w, m](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            auto& ga = g.grad_buf(a);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < w; ++j) ga.at(i, c0 + j) += go.at(i, j);
        }, "slice_cols");
    }

    NodeId slice_rows(NodeId a, int64_t r0, int64_t n) {
        const Tensor<T>& A = val(a);
        require(A.ndim() == 2 && r0 >= 0 && n > 0 && r0 + n <= A.shape[0], "slice_rows: out of range");
        const int64_t w = A.shape[1];
        Tensor<T> out = Tensor<T>::zeros({n, w});
        std::copy(A.data.begin() + static_cast<long>(r0 * w), A.data.begin() + static_cast<long>((r0 + n) * w),
                  out.data.begin());
        return push(std::move(out), needs(a), [a, r0, n, w](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            auto& ga = g.grad_buf(a);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < w; ++j) ga.at(r0 + i, j) += go.at(i, j);
        }, "slice_rows");
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        require(!parts.empty(), "concat_cols: empty");
        const int64_t m = val(parts[0]).shape[0];
        int64_t total = 0;
        bool any_needs = false;
        for (NodeId p : parts) {
            const Tensor<T>& t = val(p);
            require(t.ndim() == 2 && t.shape[0] == m, "concat_cols: row mismatch");
            total += t.shape[1];
            any_needs = any_needs || needs(p);
        }
        Tensor<T> out = Tensor<T>::zeros({m, total});
        int64_t off = 0;
        for (NodeId p : parts) {
            const Tensor<T>& t = val(p);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < t.shape[1]; ++j) out.at(i, off + j) = t.at(i, j);
            off += t.shape[1];
        }
        return push(std::move(out), any_needs, [parts, m](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            int64_t off2 = 0;
            for (NodeId p : parts) {
                const int64_t w = g.val(p).shape[1];
                if (g.needs(p)) {
                    auto& gp = g.grad_buf(p);
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < w; ++j) gp.at(i, j) += go.at(i, off2 + j);
                }
                off2 += w;
            }
        }, "concat_cols");
    }

    // ---- leading-dim broadcasts ----

    NodeId row_add(NodeId a, NodeId b) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.ndim() == 2 && B.ndim() == 1 && B.shape[0] == A.shape[1], "row_add: want [N,W] + [W]");
        const int64_t m = A.shape[0], w = A.shape[1];
        Tensor<T> out = A;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j) out.at(i, j) += B.data[static_cast<size_t>(j)];
        return push(std::move(out), needs(a) || needs(b), [a, b, m, w](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            if (g.needs(a)) {
                auto& ga = g.grad_buf(a);
                for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
            }
            if (g.needs(b)) {
                auto& gb = g.grad_buf(b);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < w; ++j) gb.data[static_cast<size_t>(j)] += go.at(i, j);
            }
        }, "row_add");
    }

    NodeId row_mul(NodeId a, NodeId b) {
        const Tensor<T>&A = val(a), &B = val(b);
        require(A.ndim() == 2 && B.ndim() == 1 && B.shape[0] == A.shape[1], "row_mul: want [N,W] * [W]");
        const int64_t m = A.shape[0], w = A.shape[1];
        Tensor<T> out = A;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < w; ++j) out.at(i, j) *= B.data[static_cast<size_t>(j)];
        return push(std::move(out), needs(a) || needs(b), [a, b, m, w](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& A2 = g.val(a);
            const auto& B2 = g.val(b);
            if (g.needs(a)) {
                auto& ga = g.grad_buf(a);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < w; ++j) ga.at(i, j) += go.at(i, j) * B2.data[static_cast<size_t>(j)];
            }
            if (g.needs(b)) {
                auto& gb = g.grad_buf(b);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < w; ++j) gb.data[static_cast<size_t>(j)] += go.at(i, j) * A2.at(i, j);
            }
        }, "row_mul");
    }

    // ---- indexing / masking ----

    NodeId gather_rows(NodeId table, std::vector<int> idx) {
        const Tensor<T>& Tb = val(table);
        require(Tb.ndim() == 2, "gather_rows: table must be 2D");
        for (int r : idx) require(r >= 0 && r < Tb.shape[0], "gather_rows: index out of range");
        const int64_t n = static_cast<int64_t>(idx.size()), w = Tb.shape[1];
        Tensor<T> out = Tensor<T>::zeros({n, w});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < w; ++j) out.at(i, j) = Tb.at(idx[static_cast<size_t>(i)], j);
        return push(std::move(out), needs(table), [table, idx = std::move(idx), w](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            auto& gt = g.grad_buf(table);
            for (size_t i = 0; i < idx.size(); ++i)
                for (int64_t j = 0; j < w; ++j) gt.at(idx[i], j) += go.at(static_cast<int64_t>(i), j);
        }, "gather_rows");
    }

    NodeId take_per_row(NodeId a, std::vector<int> idx) {
        const Tensor<T>& A = val(a);
        require(A.ndim() == 2 && static_cast<int64_t>(idx.size()) == A.shape[0], "take_per_row: one index per row");
        for (int c : idx) require(c >= 0 && c < A.shape[1], "take_per_row: index out of range");
        const int64_t n = A.shape[0];
        Tensor<T> out = Tensor<T>::zeros({n});
        for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = A.at(i, idx[static_cast<size_t>(i)]);
        return push(std::move(out), needs(a), [a, idx = std::move(idx)](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            auto& ga = g.grad_buf(a);
            for (size_t i = 0; i < idx.size(); ++i)
                ga.at(static_cast<int64_t>(i), idx[i]) += go.data[i];
        }, "take_per_row");
    }

    // mask entries set to fill carry no gradient
    NodeId mask_fill(NodeId a, std::vector<uint8_t> mask, T fill) {
        const Tensor<T>& A = val(a);
        require(mask.size() == A.data.size(), "mask_fill: mask size mismatch");
        Tensor<T> out = A;
        for (size_t i = 0; i < out.data.size(); ++i)
            if (mask[i]) out.data[i] = fill;
        return push(std::move(out), needs(a), [a, mask = std::move(mask)](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            auto& ga = g.grad_buf(a);
            for (size_t i = 0; i < go.data.size(); ++i)
                if (!mask[i]) ga.data[i] += go.data[i];
        }, "mask_fill");
    }

    // ---- reductions / normalization ----

    NodeId sum(NodeId a) {
        const Tensor<T>& A = val(a);
        double acc = 0.0;
        for (T v : A.data) acc += static_cast<double>(v);
        return push(Tensor<T>::scalar(static_cast<T>(acc)), needs(a), [a](Graph& g, NodeId self) {
            const T go = g.gradref(self).data[0];
            auto& ga = g.grad_buf(a);
            for (auto& v : ga.data) v += go;
        }, "sum");
    }

    NodeId mean(NodeId a) {
        const Tensor<T>& A = val(a);
        require(A.numel() > 0, "mean: empty tensor");
        double acc = 0.0;
        for (T v : A.data) acc += static_cast<double>(v);
        const double inv_n = 1.0 / static_cast<double>(A.numel());
        return push(Tensor<T>::scalar(static_cast<T>(acc * inv_n)), needs(a), [a, inv_n](Graph& g, NodeId self) {
            const double go = static_cast<double>(g.gradref(self).data[0]) * inv_n;
            auto& ga = g.grad_buf(a);
            for (auto& v : ga.data) v += static_cast<T>(go);
        }, "mean");
    }

    NodeId softmax(NodeId a, int axis) {
        Tensor<T> out = softmax_forward(val(a), axis, /*log_form=*/false);
        return push(std::move(out), needs(a), [a, axis](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& y = g.val(self);
            auto& ga = g.grad_buf(a);
            iterate_lanes(y.shape, axis, [&](int64_t base, int64_t stride, int64_t len) {
                double dot = 0.0;
                for (int64_t t = 0; t < len; ++t) {
                    size_t ix = static_cast<size_t>(base + t * stride);
                    dot += static_cast<double>(go.data[ix]) * static_cast<double>(y.data[ix]);
                }
                for (int64_t t = 0; t < len; ++t) {
                    size_t ix = static_cast<size_t>(base + t * stride);
                    ga.data[ix] += static_cast<T>(static_cast<double>(y.data[ix]) *
                                                  (static_cast<double>(go.data[ix]) - dot));
                }
            });
        }, "softmax");
    }

    NodeId log_softmax(NodeId a, int axis) {
        Tensor<T> out = softmax_forward(val(a), axis, /*log_form=*/true);
        return push(std::move(out), needs(a), [a, axis](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& y = g.val(self);  // log-probs
            auto& ga = g.grad_buf(a);
            iterate_lanes(y.shape, axis, [&](int64_t base, int64_t stride, int64_t len) {
                double gsum = 0.0;
                for (int64_t t = 0; t < len; ++t)
                    gsum += static_cast<double>(go.data[static_cast<size_t>(base + t * stride)]);
                for (int64_t t = 0; t < len; ++t) {
                    size_t ix = static_cast<size_t>(base + t * stride);
                    double p = std::exp(static_cast<double>(y.data[ix]));
                    ga.data[ix] += static_cast<T>(static_cast<double>(go.data[ix]) - p * gsum);
                }
            });
        }, "log_softmax");
    }

    // (x - mu) / sqrt(var + eps) per row; no affine (compose with row_mul/row_add)
    NodeId layernorm_rows(NodeId a, double eps) {
        const Tensor<T>& A = val(a);
        require(A.ndim() == 2 && A.shape[1] > 0, "layernorm_rows: want [N,W]");
        const int64_t m = A.shape[0], w = A.shape[1];
        Tensor<T> out = Tensor<T>::zeros({m, w});
        std::vector<double> inv_s(static_cast<size_t>(m));
        for (int64_t i = 0; i < m; ++i) {
            double mu = 0.0;
            for (int64_t j = 0; j < w; ++j) mu += static_cast<double>(A.at(i, j));
            mu /= static_cast<double>(w);
            double var = 0.0;
            for (int64_t j = 0; j < w; ++j) {
                double d = static_cast<double>(A.at(i, j)) - mu;
                var += d * d;
            }
            var /= static_cast<double>(w);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_s[static_cast<size_t>(i)] = is;
            for (int64_t j = 0; j < w; ++j)
                out.at(i, j) = static_cast<T>((static_cast<double>(A.at(i, j)) - mu) * is);
        }
        return push(std::move(out), needs(a),
                    [a, m, w, inv_s = std::move(inv_s)](Graph& g, NodeId self) {
            const auto& go = g.gradref(self);
            const auto& y = g.val(self);
            auto& ga = g.grad_buf(a);
            for (int64_t i = 0; i < m; ++i) {
                double gmean = 0.0, gymean = 0.0;
                for (int64_t j = 0; j < w; ++j) {
                    gmean += static_cast<double>(go.at(i, j));
                    gymean += static_cast<double>(go.at(i, j)) * static_cast<double>(y.at(i, j));
                }
                gmean /= static_cast<double>(w);
                gymean /= static_cast<double>(w);
                const double is = inv_s[static_cast<size_t>(i)];
                for (int64_t j = 0; j < w; ++j) {
                    double d = static_cast<double>(go.at(i, j)) - gmean -
                               static_cast<double>(y.at(i, j)) * gymean;
                    ga.at(i, j) += static_cast<T>(is * d);
                }
            }
        }, "layernorm_rows");
    }

    // ---- tape control ----

    void backward(NodeId root) {
        require(root >= 0 && root < size(), "backward: bad root");
        require(val(root).numel() == 1, "backward: root must be scalar");
        grad_buf(root).data[0] = T(1);
        for (NodeId i = root; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.requires_grad || !n.back || n.grad.data.empty()) continue;
            n.back(*this, i);
        }
    }

    const Tensor<T>& value(NodeId id) const { return val(id); }

    // zero tensor if the node never received gradient
    const Tensor<T>& grad(NodeId id) {
        return grad_buf(id);
    }

    NodeId size() const { return static_cast<NodeId>(nodes_.size()); }
    void clear() { nodes_.clear(); }

    bool needs(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // lazily allocated
        bool requires_grad = false;
        std::function<void(Graph&, NodeId)> back;
        const char* op = "";
    };

    static constexpr double kInvSqrt2 = 0.7071067811865476;
    static constexpr double kInvSqrt2Pi = 0.3989422804014327;

    static void require(bool cond, const std::string& msg) {
        if (!cond) throw ValidationError(msg);
    }

    const Tensor<T>& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor<T>& gradref(NodeId id) const { return nodes_[static_cast<size_t>(id)].grad; }

    Tensor<T>& grad_buf(NodeId id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

    NodeId push(Tensor<T> v, bool requires_grad, std::function<void(Graph&, NodeId)> back, const char* op) {
        if (check_finite_ && !v.all_finite())
            throw RuntimeFailure(std::string("non-finite output from op: ") + op);
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        n.back = requires_grad ? std::move(back) : nullptr;
        n.op = op;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    // shared max-shifted softmax / log-softmax forward over the chosen axis
    static Tensor<T> softmax_forward(const Tensor<T>& A, int axis, bool log_form) {
        require(A.ndim() == 2 && (axis == 0 || axis == 1), "softmax: 2D tensor, axis 0 or 1");
        Tensor<T> out = Tensor<T>::zeros(A.shape);
        iterate_lanes(A.shape, axis, [&](int64_t base, int64_t stride, int64_t len) {
            double mx = -1e308;
            for (int64_t t = 0; t < len; ++t)
                mx = std::max(mx, static_cast<double>(A.data[static_cast<size_t>(base + t * stride)]));
            double z = 0.0;
            for (int64_t t = 0; t < len; ++t)
                z += std::exp(static_cast<double>(A.data[static_cast<size_t>(base + t * stride)]) - mx);
            if (log_form) {
                const double lse = mx + std::log(z);
                for (int64_t t = 0; t < len; ++t) {
                    size_t ix = static_cast<size_t>(base + t * stride);
                    out.data[ix] = static_cast<T>(static_cast<double>(A.data[ix]) - lse);
                }
            } else {
                const double inv_z = 1.0 / z;
                for (int64_t t = 0; t < len; ++t) {
                    size_t ix = static_cast<size_t>(base + t * stride);
                    out.data[ix] = static_cast<T>(std::exp(static_cast<double>(A.data[ix]) - mx) * inv_z);
                }
            }
        });
        return out;
    }

    // visit each 1D lane along `axis` of a 2D tensor as (base, stride, len)
    template <typename F>
    static void iterate_lanes(const std::vector<int64_t>& shape, int axis, F&& f) {
        const int64_t rows = shape[0], cols = shape[1];
        if (axis == 1) {
            for (int64_t i = 0; i < rows; ++i) f(i * cols, 1, cols);
        } else {
            for (int64_t j = 0; j < cols; ++j) f(j, cols, rows);
        }
    }

    std::vector<Node> nodes_;
    bool check_finite_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

// ---- finite-difference verification harness ----

struct GradCheckResult {
    double max_rel_error = 0.0;
    int64_t checked = 0;
};

// build(graph, param_ids) constructs a scalar loss from the given parameter
// leaves. The harness compares analytic gradients against central finite
// differences, all in 64-bit mode. Error metric per scalar:
// |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult grad_check(
    const std::function<GraphD::NodeId(GraphD&, const std::vector<GraphD::NodeId>&)>& build,
    std::vector<TensorD> params, double step) {
    if (step <= 0) throw ValidationError("grad_check: step must be > 0");

    auto eval = [&](bool with_grad, std::vector<TensorD>* grads) -> double {
        GraphD g;
        std::vector<GraphD::NodeId> ids;
        ids.reserve(params.size());
        for (auto& p : params) ids.push_back(g.param(p));
        GraphD::NodeId loss = build(g, ids);
        if (g.value(loss).numel() != 1) throw ValidationError("grad_check: loss must be scalar");
        double v = g.value(loss).data[0];
        if (!std::isfinite(v)) throw RuntimeFailure("grad_check: non-finite loss during probing");
        if (with_grad) {
            g.backward(loss);
            grads->clear();
            for (auto id : ids) grads->push_back(g.grad(id));
        }
        return v;
    };

    std::vector<TensorD> analytic;
    eval(true, &analytic);

    GradCheckResult res;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (size_t i = 0; i < params[pi].data.size(); ++i) {
            const double orig = params[pi].data[i];
            params[pi].data[i] = orig + step;
            const double up = eval(false, nullptr);
            params[pi].data[i] = orig - step;
            const double down = eval(false, nullptr);
            params[pi].data[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double err = std::abs(analytic[pi].data[i] - numeric) / std::max(1.0, std::abs(numeric));
            res.max_rel_error = std::max(res.max_rel_error, err);
            res.checked += 1;
        }
    }
    return res;
}

}  // namespace mialab
