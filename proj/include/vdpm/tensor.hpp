#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vdpm/errors.hpp"

namespace vdpm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (const int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename S> class Tape;

/// Lightweight handle into a tape; copying shares the node.
template <typename S>
struct Tensor {
    Tape<S>* tape = nullptr;
    int id = -1;

    bool defined() const { return tape != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    const std::vector<S>& value() const;
    bool requires_grad() const;
    S item() const;
};

/// Records a computation graph in creation order (which is topological) and
/// replays it in reverse for gradients. One backward pass per tape; a tape is
/// confined to a single thread.
template <typename S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Eval mode: values are computed but no backward closures are recorded.
    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    // ---- node creation ----

    Tensor<S> input(const Shape& shape, std::vector<S> data, bool requires_grad) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("tensor input: " + std::to_string(data.size()) +
                             " values for shape " + shape_str(shape));
        return make(shape, std::move(data), requires_grad && grad_enabled_, nullptr);
    }

    Tensor<S> constant(const Shape& shape, std::vector<S> data) {
        return input(shape, std::move(data), false);
    }

    Tensor<S> scalar(S v) { return constant({1}, {v}); }

    Tensor<S> zeros(const Shape& shape, bool requires_grad = false) {
        return input(shape, std::vector<S>(shape_numel(shape), S(0)), requires_grad);
    }

    // ---- elementwise binary with trailing-block broadcast ----

    Tensor<S> add(Tensor<S> a, Tensor<S> b) { return binary(a, b, BinaryOp::kAdd); }
    Tensor<S> sub(Tensor<S> a, Tensor<S> b) { return binary(a, b, BinaryOp::kSub); }
    Tensor<S> mul(Tensor<S> a, Tensor<S> b) { return binary(a, b, BinaryOp::kMul); }

    Tensor<S> add_scalar(Tensor<S> a, S c) {
        const Node& na = node(a.id);
        std::vector<S> out(na.value.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] + c;
        return make(na.shape, std::move(out), na.requires_grad, [this, ai = a.id](int oid) {
            accumulate(ai, node(oid).grad);
        });
    }

    Tensor<S> mul_scalar(Tensor<S> a, S c) {
        const Node& na = node(a.id);
        std::vector<S> out(na.value.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * c;
        return make(na.shape, std::move(out), na.requires_grad, [this, ai = a.id, c](int oid) {
            if (!wants_grad(ai)) return;
            std::vector<S>& ga = grad_buffer(ai);
            const std::vector<S>& g = node(oid).grad;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }

    // ---- matmul ----

    /// a: [batch..., n, m]; b: [batch..., m, k] or [m, k] (shared over batch).
    Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
        const Node& na = node(a.id);
        const Node& nb = node(b.id);
        const size_t ra = na.shape.size(), rb = nb.shape.size();
        if (ra < 2 || rb < 2)
            throw ShapeError("matmul: ranks must be >= 2, got " + shape_str(na.shape) + " @ " +
                             shape_str(nb.shape));
        const bool shared_b = (rb == 2 && ra > 2);
        if (!shared_b && ra != rb)
            throw ShapeError("matmul: rank mismatch " + shape_str(na.shape) + " @ " +
                             shape_str(nb.shape));
        const int64_t n = na.shape[ra - 2], m = na.shape[ra - 1];
        const int64_t m2 = nb.shape[rb - 2], k = nb.shape[rb - 1];
        if (m != m2)
            throw ShapeError("matmul: inner extents differ, " + shape_str(na.shape) + " @ " +
                             shape_str(nb.shape));
        int64_t batch = 1;
        Shape out_shape;
        for (size_t i = 0; i + 2 < ra; ++i) {
            if (!shared_b && nb.shape[i] != na.shape[i])
                throw ShapeError("matmul: batch extents differ, " + shape_str(na.shape) +
                                 " @ " + shape_str(nb.shape));
            batch *= na.shape[i];
            out_shape.push_back(na.shape[i]);
        }
        out_shape.push_back(n);
        out_shape.push_back(k);

        std::vector<S> out(batch * n * k, S(0));
        for (int64_t bi = 0; bi < batch; ++bi) {
            const S* A = na.value.data() + bi * n * m;
            const S* B = nb.value.data() + (shared_b ? 0 : bi * m * k);
            S* C = out.data() + bi * n * k;
            kernel_nn(A, B, C, n, m, k);
        }
        return make(out_shape, std::move(out), na.requires_grad || nb.requires_grad,
                    [this, ai = a.id, bi_ = b.id, n, m, k, batch, shared_b](int oid) {
            const Node& no = node(oid);
            const Node& A = node(ai);
            const Node& B = node(bi_);
            if (wants_grad(ai)) {
                std::vector<S>& ga = grad_buffer(ai);
                for (int64_t bb = 0; bb < batch; ++bb)
                    kernel_nt(no.grad.data() + bb * n * k,
                              B.value.data() + (shared_b ? 0 : bb * m * k),
                              ga.data() + bb * n * m, n, k, m);
            }
            if (wants_grad(bi_)) {
                std::vector<S>& gb = grad_buffer(bi_);
                for (int64_t bb = 0; bb < batch; ++bb)
                    kernel_tn(A.value.data() + bb * n * m, no.grad.data() + bb * n * k,
                              gb.data() + (shared_b ? 0 : bb * m * k), n, m, k);
            }
        });
    }

    // ---- shape ops ----

    Tensor<S> reshape(Tensor<S> a, const Shape& shape) {
        const Node& na = node(a.id);
        if (shape_numel(shape) != static_cast<int64_t>(na.value.size()))
            throw ShapeError("reshape: " + shape_str(na.shape) + " to " + shape_str(shape) +
                             " changes the element count");
        std::vector<S> out = na.value;
        return make(shape, std::move(out), na.requires_grad, [this, ai = a.id](int oid) {
            accumulate(ai, node(oid).grad);
        });
    }

    Tensor<S> transpose(Tensor<S> a, int ax0, int ax1) {
        const Node& na = node(a.id);
        const int rank = static_cast<int>(na.shape.size());
        if (ax0 < 0 || ax1 < 0 || ax0 >= rank || ax1 >= rank)
            throw ShapeError("transpose: axes (" + std::to_string(ax0) + "," +
                             std::to_string(ax1) + ") out of range for " + shape_str(na.shape));
        if (ax0 == ax1) return a;
        Shape out_shape = na.shape;
        std::swap(out_shape[ax0], out_shape[ax1]);
        std::vector<S> out(na.value.size());
        permute_two(na.value.data(), out.data(), na.shape, ax0, ax1, false);
        return make(out_shape, std::move(out), na.requires_grad,
                    [this, ai = a.id, ax0, ax1](int oid) {
            if (!wants_grad(ai)) return;
            // Scatter-add the output gradient back through the permutation.
            permute_two(node(oid).grad.data(), grad_buffer(ai).data(), node(ai).shape, ax0,
                        ax1, true);
        });
    }

    Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
        if (parts.empty()) throw ShapeError("concat: no inputs");
        const Node& first = node(parts[0].id);
        const int rank = static_cast<int>(first.shape.size());
        if (axis < 0 || axis >= rank)
            throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(first.shape));
        Shape out_shape = first.shape;
        bool rg = false;
        int64_t axis_total = 0;
        for (const Tensor<S>& t : parts) {
            const Node& nt = node(t.id);
            if (static_cast<int>(nt.shape.size()) != rank)
                throw ShapeError("concat: rank mismatch " + shape_str(first.shape) + " vs " +
                                 shape_str(nt.shape));
            for (int i = 0; i < rank; ++i)
                if (i != axis && nt.shape[i] != first.shape[i])
                    throw ShapeError("concat: extents differ off-axis, " +
                                     shape_str(first.shape) + " vs " + shape_str(nt.shape));
            axis_total += nt.shape[axis];
            rg = rg || nt.requires_grad;
        }
        out_shape[axis] = axis_total;

        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= first.shape[i];
        for (int i = axis + 1; i < rank; ++i) inner *= first.shape[i];

        std::vector<S> out(shape_numel(out_shape));
        std::vector<int64_t> offsets; // per part, in axis units
        int64_t off = 0;
        for (const Tensor<S>& t : parts) {
            const Node& nt = node(t.id);
            const int64_t len = nt.shape[axis];
            for (int64_t o = 0; o < outer; ++o) {
                const S* src = nt.value.data() + o * len * inner;
                S* dst = out.data() + (o * axis_total + off) * inner;
                std::copy(src, src + len * inner, dst);
            }
            offsets.push_back(off);
            off += len;
        }
        std::vector<int> ids;
        for (const Tensor<S>& t : parts) ids.push_back(t.id);
        return make(out_shape, std::move(out), rg,
                    [this, ids, offsets, outer, inner, axis_total, axis](int oid) {
            const std::vector<S>& g = node(oid).grad;
            for (size_t p = 0; p < ids.size(); ++p) {
                if (!wants_grad(ids[p])) continue;
                const int64_t len = node(ids[p]).shape[axis];
                std::vector<S>& gp = grad_buffer(ids[p]);
                for (int64_t o = 0; o < outer; ++o) {
                    const S* src = g.data() + (o * axis_total + offsets[p]) * inner;
                    S* dst = gp.data() + o * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
            }
        });
    }

    Tensor<S> slice(Tensor<S> a, int axis, int64_t start, int64_t len) {
        const Node& na = node(a.id);
        const int rank = static_cast<int>(na.shape.size());
        if (axis < 0 || axis >= rank)
            throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(na.shape));
        if (start < 0 || len < 1 || start + len > na.shape[axis])
            throw ShapeError("slice: [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") outside extent " +
                             std::to_string(na.shape[axis]));
        Shape out_shape = na.shape;
        out_shape[axis] = len;
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= na.shape[i];
        for (int i = axis + 1; i < rank; ++i) inner *= na.shape[i];
        const int64_t full = na.shape[axis];

        std::vector<S> out(shape_numel(out_shape));
        for (int64_t o = 0; o < outer; ++o) {
            const S* src = na.value.data() + (o * full + start) * inner;
            std::copy(src, src + len * inner, out.data() + o * len * inner);
        }
        return make(out_shape, std::move(out), na.requires_grad,
                    [this, ai = a.id, outer, inner, full, start, len](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            std::vector<S>& ga = grad_buffer(ai);
            for (int64_t o = 0; o < outer; ++o) {
                const S* src = g.data() + o * len * inner;
                S* dst = ga.data() + (o * full + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }

    // ---- reductions ----

    Tensor<S> sum(Tensor<S> a, int axis, bool keepdim = false) {
        return reduce(a, axis, keepdim, false);
    }
    Tensor<S> mean(Tensor<S> a, int axis, bool keepdim = false) {
        return reduce(a, axis, keepdim, true);
    }

    Tensor<S> sum_all(Tensor<S> a) {
        const Node& na = node(a.id);
        S acc = S(0);
        for (const S v : na.value) acc += v;
        return make({1}, {acc}, na.requires_grad, [this, ai = a.id](int oid) {
            if (!wants_grad(ai)) return;
            const S g = node(oid).grad[0];
            for (S& v : grad_buffer(ai)) v += g;
        });
    }

    Tensor<S> mean_all(Tensor<S> a) {
        const int64_t n = node(a.id).value.size();
        return mul_scalar(sum_all(a), S(1) / static_cast<S>(n));
    }

    // ---- elementwise unary ----

    Tensor<S> gelu(Tensor<S> a) {
        const Node& na = node(a.id);
        std::vector<S> out(na.value.size());
        for (size_t i = 0; i < out.size(); ++i) {
            const S x = na.value[i];
            out[i] = S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
        }
        return make(na.shape, std::move(out), na.requires_grad, [this, ai = a.id](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& x = node(ai).value;
            std::vector<S>& ga = grad_buffer(ai);
            const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
            for (size_t i = 0; i < g.size(); ++i) {
                const S cdf = S(0.5) * (S(1) + std::erf(x[i] * S(M_SQRT1_2)));
                const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x[i] * x[i]);
                ga[i] += g[i] * (cdf + x[i] * pdf);
            }
        });
    }

    Tensor<S> exp(Tensor<S> a) {
        const Node& na = node(a.id);
        std::vector<S> out(na.value.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(na.value[i]);
        return make(na.shape, std::move(out), na.requires_grad, [this, ai = a.id](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& y = node(oid).value;
            std::vector<S>& ga = grad_buffer(ai);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        });
    }

    Tensor<S> log(Tensor<S> a) {
        const Node& na = node(a.id);
        std::vector<S> out(na.value.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(na.value[i]);
        return make(na.shape, std::move(out), na.requires_grad, [this, ai = a.id](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& x = node(ai).value;
            std::vector<S>& ga = grad_buffer(ai);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
        });
    }

    Tensor<S> sqrt(Tensor<S> a) {
        const Node& na = node(a.id);
        std::vector<S> out(na.value.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(na.value[i]);
        return make(na.shape, std::move(out), na.requires_grad, [this, ai = a.id](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& y = node(oid).value;
            std::vector<S>& ga = grad_buffer(ai);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (S(2) * y[i]);
        });
    }

    Tensor<S> softplus(Tensor<S> a) {
        const Node& na = node(a.id);
        std::vector<S> out(na.value.size());
        for (size_t i = 0; i < out.size(); ++i) {
            const S x = na.value[i];
            out[i] = x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        }
        return make(na.shape, std::move(out), na.requires_grad, [this, ai = a.id](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& x = node(ai).value;
            std::vector<S>& ga = grad_buffer(ai);
            for (size_t i = 0; i < g.size(); ++i) {
                const S s = S(1) / (S(1) + std::exp(-x[i]));
                ga[i] += g[i] * s;
            }
        });
    }

    /// Elementwise Huber: x^2/2 inside delta, delta*(|x| - delta/2) outside.
    Tensor<S> huber(Tensor<S> a, S delta) {
        const Node& na = node(a.id);
        std::vector<S> out(na.value.size());
        for (size_t i = 0; i < out.size(); ++i) {
            const S x = na.value[i];
            const S ax = std::abs(x);
            out[i] = ax <= delta ? S(0.5) * x * x : delta * (ax - S(0.5) * delta);
        }
        return make(na.shape, std::move(out), na.requires_grad,
                    [this, ai = a.id, delta](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& x = node(ai).value;
            std::vector<S>& ga = grad_buffer(ai);
            for (size_t i = 0; i < g.size(); ++i) {
                const S d = std::abs(x[i]) <= delta ? x[i] : (x[i] > S(0) ? delta : -delta);
                ga[i] += g[i] * d;
            }
        });
    }

    // ---- normalization and structured ops ----

    Tensor<S> softmax(Tensor<S> a, int axis) {
        const Node& na = node(a.id);
        const int rank = static_cast<int>(na.shape.size());
        if (axis < 0 || axis >= rank)
            throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(na.shape));
        const int64_t len = na.shape[axis];
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= na.shape[i];
        for (int i = axis + 1; i < rank; ++i) inner *= na.shape[i];

        std::vector<S> out(na.value.size());
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                S mx = na.value[base];
                for (int64_t l = 1; l < len; ++l)
                    mx = std::max(mx, na.value[base + l * inner]);
                S denom = S(0);
                for (int64_t l = 0; l < len; ++l) {
                    const S e = std::exp(na.value[base + l * inner] - mx);
                    out[base + l * inner] = e;
                    denom += e;
                }
                for (int64_t l = 0; l < len; ++l) out[base + l * inner] /= denom;
            }
        }
        return make(na.shape, std::move(out), na.requires_grad,
                    [this, ai = a.id, outer, inner, len](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& y = node(oid).value;
            std::vector<S>& ga = grad_buffer(ai);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * len * inner + in;
                    S dot = S(0);
                    for (int64_t l = 0; l < len; ++l)
                        dot += g[base + l * inner] * y[base + l * inner];
                    for (int64_t l = 0; l < len; ++l) {
                        const int64_t idx = base + l * inner;
                        ga[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }

    /// Zero-mean unit-variance over the last axis, no learned affine terms.
    Tensor<S> layernorm_noaffine(Tensor<S> a, S eps) {
        const Node& na = node(a.id);
        if (na.shape.empty() || na.shape.back() < 2)
            throw ShapeError("layernorm: last extent must be >= 2, got " +
                             shape_str(na.shape));
        const int64_t d = na.shape.back();
        const int64_t rows = static_cast<int64_t>(na.value.size()) / d;
        std::vector<S> out(na.value.size());
        std::vector<S> inv_std(rows);
        for (int64_t r = 0; r < rows; ++r) {
            const S* x = na.value.data() + r * d;
            S mu = S(0);
            for (int64_t i = 0; i < d; ++i) mu += x[i];
            mu /= static_cast<S>(d);
            S var = S(0);
            for (int64_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
            var /= static_cast<S>(d);
            const S is = S(1) / std::sqrt(var + eps);
            inv_std[r] = is;
            S* y = out.data() + r * d;
            for (int64_t i = 0; i < d; ++i) y[i] = (x[i] - mu) * is;
        }
        return make(na.shape, std::move(out), na.requires_grad,
                    [this, ai = a.id, d, rows, inv_std = std::move(inv_std)](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& y = node(oid).value;
            std::vector<S>& ga = grad_buffer(ai);
            for (int64_t r = 0; r < rows; ++r) {
                const S* gr = g.data() + r * d;
                const S* yr = y.data() + r * d;
                S* gar = ga.data() + r * d;
                S mean_g = S(0), mean_gy = S(0);
                for (int64_t i = 0; i < d; ++i) {
                    mean_g += gr[i];
                    mean_gy += gr[i] * yr[i];
                }
                mean_g /= static_cast<S>(d);
                mean_gy /= static_cast<S>(d);
                for (int64_t i = 0; i < d; ++i)
                    gar[i] += inv_std[r] * (gr[i] - mean_g - yr[i] * mean_gy);
            }
        });
    }

    /// Euclidean norm over the last axis; output drops that axis.
    Tensor<S> l2norm_last(Tensor<S> a) {
        const Node& na = node(a.id);
        if (na.shape.empty())
            throw ShapeError("l2norm: needs rank >= 1, got " + shape_str(na.shape));
        const int64_t d = na.shape.back();
        const int64_t rows = static_cast<int64_t>(na.value.size()) / d;
        Shape out_shape(na.shape.begin(), na.shape.end() - 1);
        if (out_shape.empty()) out_shape = {1};
        std::vector<S> out(rows);
        for (int64_t r = 0; r < rows; ++r) {
            S acc = S(0);
            const S* x = na.value.data() + r * d;
            for (int64_t i = 0; i < d; ++i) acc += x[i] * x[i];
            out[r] = std::sqrt(acc);
        }
        return make(out_shape, std::move(out), na.requires_grad,
                    [this, ai = a.id, d, rows](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& y = node(oid).value;
            const std::vector<S>& x = node(ai).value;
            std::vector<S>& ga = grad_buffer(ai);
            for (int64_t r = 0; r < rows; ++r) {
                // Subgradient 0 at the (measure-zero) kink via the floor.
                const S denom = std::max(y[r], S(1e-12));
                const S gr = g[r] / denom;
                for (int64_t i = 0; i < d; ++i) ga[r * d + i] += gr * x[r * d + i];
            }
        });
    }

    /// Multiplies each length-d row of a by the matching entry of s
    /// (s has a's shape minus the last axis).
    Tensor<S> scale_rows(Tensor<S> a, Tensor<S> s) {
        const Node& na = node(a.id);
        const Node& ns = node(s.id);
        if (na.shape.empty())
            throw ShapeError("scale_rows: needs rank >= 1, got " + shape_str(na.shape));
        const int64_t d = na.shape.back();
        const int64_t rows = static_cast<int64_t>(na.value.size()) / d;
        if (static_cast<int64_t>(ns.value.size()) != rows)
            throw ShapeError("scale_rows: scale shape " + shape_str(ns.shape) +
                             " does not match rows of " + shape_str(na.shape));
        std::vector<S> out(na.value.size());
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < d; ++i) out[r * d + i] = na.value[r * d + i] * ns.value[r];
        return make(na.shape, std::move(out), na.requires_grad || ns.requires_grad,
                    [this, ai = a.id, si = s.id, d, rows](int oid) {
            const std::vector<S>& g = node(oid).grad;
            if (wants_grad(ai)) {
                std::vector<S>& ga = grad_buffer(ai);
                const std::vector<S>& sv = node(si).value;
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i) ga[r * d + i] += g[r * d + i] * sv[r];
            }
            if (wants_grad(si)) {
                std::vector<S>& gs = grad_buffer(si);
                const std::vector<S>& av = node(ai).value;
                for (int64_t r = 0; r < rows; ++r) {
                    S acc = S(0);
                    for (int64_t i = 0; i < d; ++i) acc += g[r * d + i] * av[r * d + i];
                    gs[r] += acc;
                }
            }
        });
    }

    /// Per-frame patch tokens to an image: [gh*gw, ps*ps*C] -> [C, gh*ps, gw*ps].
    /// Token vectors are laid out channel-major: index = (c*ps + py)*ps + px.
    Tensor<S> unfold_patches(Tensor<S> a, int gh, int gw, int ps, int channels) {
        const Node& na = node(a.id);
        if (na.shape.size() != 2 || na.shape[0] != static_cast<int64_t>(gh) * gw ||
            na.shape[1] != static_cast<int64_t>(ps) * ps * channels)
            throw ShapeError("unfold_patches: expected [" + std::to_string(gh * gw) + "," +
                             std::to_string(ps * ps * channels) + "], got " +
                             shape_str(na.shape));
        const int h = gh * ps, w = gw * ps;
        std::vector<S> out(static_cast<size_t>(channels) * h * w);
        forall_patch_indices(gh, gw, ps, channels, [&](int64_t src, int64_t dst) {
            out[dst] = na.value[src];
        });
        return make({channels, h, w}, std::move(out), na.requires_grad,
                    [this, ai = a.id, gh, gw, ps, channels](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            std::vector<S>& ga = grad_buffer(ai);
            forall_patch_indices(gh, gw, ps, channels, [&](int64_t src, int64_t dst) {
                ga[src] += g[dst];
            });
        });
    }

    /// Scaled dot-product attention over heads. q, k, v: [T, D]; optional
    /// additive mask [Tq, Tk]. Returns [T, D].
    Tensor<S> attention(Tensor<S> q, Tensor<S> k, Tensor<S> v, int heads,
                        Tensor<S> mask = Tensor<S>{}) {
        const Shape& qs = q.shape();
        const Shape& ks = k.shape();
        const Shape& vs = v.shape();
        if (qs.size() != 2 || ks.size() != 2 || vs.size() != 2 || qs[1] != ks[1] ||
            ks != vs || qs[1] % heads != 0)
            throw ShapeError("attention: bad shapes q" + shape_str(qs) + " k" + shape_str(ks) +
                             " v" + shape_str(vs) + " with " + std::to_string(heads) +
                             " heads");
        const int64_t tq = qs[0], tk = ks[0], dim = qs[1], dh = dim / heads;
        // [T, D] -> [heads, T, dh]
        auto split = [&](Tensor<S> t, int64_t rows) {
            return transpose(reshape(t, {rows, heads, dh}), 0, 1);
        };
        Tensor<S> qh = split(q, tq);
        Tensor<S> kh = split(k, tk);
        Tensor<S> vh = split(v, tk);
        Tensor<S> scores = mul_scalar(matmul(qh, transpose(kh, 1, 2)),
                                      S(1) / std::sqrt(static_cast<S>(dh)));
        if (mask.defined()) scores = add(scores, mask);
        Tensor<S> probs = softmax(scores, 2);
        Tensor<S> ctx = matmul(probs, vh); // [heads, tq, dh]
        return reshape(transpose(ctx, 0, 1), {tq, dim});
    }

    // ---- backward ----

    void backward(Tensor<S> loss) {
        check_open();
        const Node& nl = node(loss.id);
        if (nl.value.size() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                shape_str(nl.shape));
        if (!nl.requires_grad)
            throw ContractError("backward: loss does not depend on any gradient leaf");
        consumed_ = true;
        grad_buffer(loss.id)[0] = S(1);
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backprop) n.backprop(id);
        }
    }

    /// Gradient of a leaf after backward; empty if no gradient reached it.
    const std::vector<S>& grad(Tensor<S> t) const { return nodes_[t.id].grad; }

    bool consumed() const { return consumed_; }

    // ---- node access (for Tensor handle methods) ----

    struct Node {
        Shape shape;
        std::vector<S> value;
        std::vector<S> grad;
        bool requires_grad = false;
        std::function<void(int)> backprop;
    };

    const Node& node(int id) const { return nodes_[id]; }
    Node& node(int id) { return nodes_[id]; }
    size_t size() const { return nodes_.size(); }

private:
    enum class BinaryOp { kAdd, kSub, kMul };

    void check_open() const {
        if (consumed_)
            throw ContractError("tape already consumed by backward; build a new tape");
    }

    Tensor<S> make(Shape shape, std::vector<S> value, bool requires_grad,
                   std::function<void(int)> backprop) {
        check_open();
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.requires_grad = requires_grad && grad_enabled_;
        if (n.requires_grad) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return Tensor<S>{this, static_cast<int>(nodes_.size()) - 1};
    }

    bool wants_grad(int id) const { return nodes_[id].requires_grad; }

    std::vector<S>& grad_buffer(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), S(0));
        return n.grad;
    }

    void accumulate(int id, const std::vector<S>& g) {
        if (!wants_grad(id)) return;
        std::vector<S>& dst = grad_buffer(id);
        for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    /// True when small's shape is a trailing block of big's shape.
    static bool is_suffix(const Shape& big, const Shape& small) {
        if (small.size() > big.size()) return false;
        for (size_t i = 0; i < small.size(); ++i)
            if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
        return true;
    }

    Tensor<S> binary(Tensor<S> a, Tensor<S> b, BinaryOp op) {
        const Node& na = node(a.id);
        const Node& nb = node(b.id);
        const bool b_small = is_suffix(na.shape, nb.shape);
        const bool a_small = !b_small && is_suffix(nb.shape, na.shape);
        if (!b_small && !a_small)
            throw ShapeError("elementwise: incompatible shapes " + shape_str(na.shape) +
                             " vs " + shape_str(nb.shape));
        const Node& big = b_small ? na : nb;
        const int64_t n = big.value.size();
        const int64_t small_n = b_small ? nb.value.size() : na.value.size();

        std::vector<S> out(n);
        const S* A = na.value.data();
        const S* B = nb.value.data();
        for (int64_t i = 0; i < n; ++i) {
            const S x = b_small ? A[i] : A[i % small_n];
            const S y = b_small ? B[i % small_n] : B[i];
            out[i] = op == BinaryOp::kAdd ? x + y : (op == BinaryOp::kSub ? x - y : x * y);
        }
        return make(big.shape, std::move(out), na.requires_grad || nb.requires_grad,
                    [this, ai = a.id, bi = b.id, op, b_small, n, small_n](int oid) {
            const std::vector<S>& g = node(oid).grad;
            const std::vector<S>& av = node(ai).value;
            const std::vector<S>& bv = node(bi).value;
            if (wants_grad(ai)) {
                std::vector<S>& ga = grad_buffer(ai);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t ia = b_small ? i : i % small_n;
                    S gi = g[i];
                    if (op == BinaryOp::kMul) gi *= b_small ? bv[i % small_n] : bv[i];
                    ga[ia] += gi;
                }
            }
            if (wants_grad(bi)) {
                std::vector<S>& gb = grad_buffer(bi);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t ib = b_small ? i % small_n : i;
                    S gi = g[i];
                    if (op == BinaryOp::kSub) gi = -gi;
                    if (op == BinaryOp::kMul) gi = g[i] * (b_small ? av[i] : av[i % small_n]);
                    gb[ib] += gi;
                }
            }
        });
    }

    Tensor<S> reduce(Tensor<S> a, int axis, bool keepdim, bool take_mean) {
        const Node& na = node(a.id);
        const int rank = static_cast<int>(na.shape.size());
        if (axis < 0 || axis >= rank)
            throw ShapeError("reduce: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(na.shape));
        const int64_t len = na.shape[axis];
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= na.shape[i];
        for (int i = axis + 1; i < rank; ++i) inner *= na.shape[i];
        Shape out_shape;
        for (int i = 0; i < rank; ++i) {
            if (i == axis) {
                if (keepdim) out_shape.push_back(1);
            } else {
                out_shape.push_back(na.shape[i]);
            }
        }
        if (out_shape.empty()) out_shape = {1};
        const S scale = take_mean ? S(1) / static_cast<S>(len) : S(1);

        std::vector<S> out(outer * inner, S(0));
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t l = 0; l < len; ++l)
                for (int64_t in = 0; in < inner; ++in)
                    out[o * inner + in] += na.value[(o * len + l) * inner + in];
        if (take_mean)
            for (S& v : out) v *= scale;
        return make(out_shape, std::move(out), na.requires_grad,
                    [this, ai = a.id, outer, inner, len, scale](int oid) {
            if (!wants_grad(ai)) return;
            const std::vector<S>& g = node(oid).grad;
            std::vector<S>& ga = grad_buffer(ai);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t l = 0; l < len; ++l)
                    for (int64_t in = 0; in < inner; ++in)
                        ga[(o * len + l) * inner + in] += g[o * inner + in] * scale;
        });
    }

    /// Copies src into dst with axes ax0/ax1 swapped; add=true accumulates
    /// instead (used for the gradient scatter). src is indexed by in_shape.
    static void permute_two(const S* src, S* dst, const Shape& in_shape, int ax0, int ax1,
                            bool add_into_src_layout) {
        const int rank = static_cast<int>(in_shape.size());
        if (ax0 > ax1) std::swap(ax0, ax1);
        Shape out_shape = in_shape;
        std::swap(out_shape[ax0], out_shape[ax1]);
        std::vector<int64_t> in_strides(rank, 1), out_strides(rank, 1);
        for (int i = rank - 2; i >= 0; --i) {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
            out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
        }
        const int64_t n = shape_numel(in_shape);
        std::vector<int64_t> idx(rank, 0);
        for (int64_t flat = 0; flat < n; ++flat) {
            int64_t rem = flat;
            int64_t out_flat = 0;
            for (int i = 0; i < rank; ++i) {
                idx[i] = rem / in_strides[i];
                rem %= in_strides[i];
            }
            std::swap(idx[ax0], idx[ax1]);
            for (int i = 0; i < rank; ++i) out_flat += idx[i] * out_strides[i];
            if (add_into_src_layout)
                dst[flat] += src[out_flat]; // src holds the output-layout gradient
            else
                dst[out_flat] = src[flat];
        }
    }

    template <typename F>
    static void forall_patch_indices(int gh, int gw, int ps, int channels, F&& f) {
        const int w = gw * ps;
        const int h = gh * ps;
        const int64_t token_dim = static_cast<int64_t>(ps) * ps * channels;
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const int64_t tok = static_cast<int64_t>(gy) * gw + gx;
                for (int c = 0; c < channels; ++c)
                    for (int py = 0; py < ps; ++py)
                        for (int px = 0; px < ps; ++px) {
                            const int64_t src = tok * token_dim +
                                                (static_cast<int64_t>(c) * ps + py) * ps + px;
                            const int64_t dst =
                                (static_cast<int64_t>(c) * h + gy * ps + py) * w + gx * ps + px;
                            f(src, dst);
                        }
            }
    }

    // ---- matmul kernels (row-major) ----

    // C[n,k] += A[n,m] * B[m,k]
    static void kernel_nn(const S* __restrict A, const S* __restrict B, S* __restrict C,
                          int64_t n, int64_t m, int64_t k) {
        for (int64_t i = 0; i < n; ++i) {
            S* Ci = C + i * k;
            const S* Ai = A + i * m;
            for (int64_t p = 0; p < m; ++p) {
                const S a = Ai[p];
                const S* Bp = B + p * k;
                for (int64_t j = 0; j < k; ++j) Ci[j] += a * Bp[j];
            }
        }
    }

    // C[n,k] += A[n,m] * B[k,m]^T  (i.e. C = A * B' with B stored row-major [k,m])
    static void kernel_nt(const S* __restrict A, const S* __restrict B, S* __restrict C,
                          int64_t n, int64_t m, int64_t k) {
        for (int64_t i = 0; i < n; ++i) {
            const S* Ai = A + i * m;
            S* Ci = C + i * k;
            for (int64_t j = 0; j < k; ++j) {
                const S* Bj = B + j * m;
                S acc = S(0);
                for (int64_t p = 0; p < m; ++p) acc += Ai[p] * Bj[p];
                Ci[j] += acc;
            }
        }
    }

    // C[m,k] += A[n,m]^T * B[n,k]
    static void kernel_tn(const S* __restrict A, const S* __restrict B, S* __restrict C,
                          int64_t n, int64_t m, int64_t k) {
        for (int64_t i = 0; i < n; ++i) {
            const S* Ai = A + i * m;
            const S* Bi = B + i * k;
            for (int64_t p = 0; p < m; ++p) {
                const S a = Ai[p];
                S* Cp = C + p * k;
                for (int64_t j = 0; j < k; ++j) Cp[j] += a * Bi[j];
            }
        }
    }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
    bool consumed_ = false;
};

template <typename S>
const Shape& Tensor<S>::shape() const {
    return tape->node(id).shape;
}

template <typename S>
int64_t Tensor<S>::numel() const {
    return static_cast<int64_t>(tape->node(id).value.size());
}

template <typename S>
const std::vector<S>& Tensor<S>::value() const {
    return tape->node(id).value;
}

template <typename S>
bool Tensor<S>::requires_grad() const {
    return tape->node(id).requires_grad;
}

template <typename S>
S Tensor<S>::item() const {
    const auto& v = tape->node(id).value;
    if (v.size() != 1)
        throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return v[0];
}

} // namespace vdpm
