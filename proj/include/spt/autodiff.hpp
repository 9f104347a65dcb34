#pragma once

// Reverse-mode tape over a closed op set: matmul, add/sub/mul (with row and
// scalar broadcast), scale, square, GELU, sigmoid, row softmax, layer norm,
// embedding lookup and cross entropy. Forward and gradients run in f32; the
// finite-difference checker re-evaluates the tape in f64.

#include "spt/common.hpp"
#include "spt/kernels.hpp"
#include "spt/q4.hpp"
#include "spt/tensor.hpp"

#include <array>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace spt {

enum class op_kind {
    leaf,
    matmul,         // a·b or a·bᵀ
    add,
    sub,
    mul,
    scale,          // a * constant
    square,
    gelu,
    sigmoid,
    softmax_rows,
    layer_norm,     // (x, gain, bias)
    embed_lookup,   // (table), ids attached
    cross_entropy,  // (logits), targets attached -> [1] mean NLL
};

enum class bcast { full, row, scalar };

namespace act {

inline constexpr float GELU_K0 = 0.7978845608028654f;   // sqrt(2/pi)
inline constexpr float GELU_K1 = 0.044715f;

template <typename T>
inline T gelu(T x) {
    const T u = T(GELU_K0) * (x + T(GELU_K1) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
inline T gelu_grad(T x) {
    const T u = T(GELU_K0) * (x + T(GELU_K1) * x * x * x);
    const T t = std::tanh(u);
    const T du = T(GELU_K0) * (T(1) + T(3) * T(GELU_K1) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
inline T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : [&] {
        const T e = std::exp(x);
        return e / (T(1) + e);
    }();
}

} // namespace act

inline constexpr float LN_EPS = 1e-5f;

struct node {
    op_kind kind = op_kind::leaf;
    std::array<int, 3> in = {-1, -1, -1};
    int n_in = 0;

    tensor value;                          // owned output (empty for borrowed leaves)
    tensor grad;                           // allocated by backward when needed
    std::vector<int64_t> shape;

    const float * ext = nullptr;           // borrowed f32 leaf storage
    const quant_tensor * ext_q4 = nullptr; // borrowed quantized leaf (matmul rhs only)

    bool requires_grad = false;
    bool needs_grad = false;

    bool trans_b = false;                  // matmul
    bcast bc = bcast::full;                // add/sub/mul
    float c = 0.0f;                        // scale
    std::vector<int32_t> ids;              // embed_lookup ids / cross_entropy targets
    std::string name;

    int64_t numel() const { return shape_numel(shape); }
    int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int64_t cols() const { return shape.empty() ? 0 : shape.back(); }
};

struct grad_check_entry {
    std::string name;
    double max_rel = 0.0;
    bool pass = true;
};

struct grad_check_report {
    std::vector<grad_check_entry> params;
    double max_rel = 0.0;
    double tolerance = 0.0;
    bool pass = true;
};

class graph {
public:
    using id = int;

    // ----- leaves

    id leaf(tensor t, bool requires_grad = false, std::string name = "") {
        node n;
        n.kind = op_kind::leaf;
        n.shape = t.shape;
        n.value = std::move(t);
        n.requires_grad = requires_grad;
        n.needs_grad = requires_grad;
        n.name = std::move(name);
        return push(std::move(n));
    }

    id leaf_view(const float * p, std::vector<int64_t> shape, bool requires_grad = false,
                 std::string name = "") {
        node n;
        n.kind = op_kind::leaf;
        n.shape = std::move(shape);
        n.ext = p;
        n.requires_grad = requires_grad;
        n.needs_grad = requires_grad;
        n.name = std::move(name);
        return push(std::move(n));
    }

    id leaf_q4(const quant_tensor * q, std::string name = "") {
        node n;
        n.kind = op_kind::leaf;
        n.shape = q->shape;
        n.ext_q4 = q;
        n.name = std::move(name);
        return push(std::move(n));
    }

    // ----- ops

    id matmul(id a, id b, bool trans_b = false) {
        const auto & na = at(a);
        const auto & nb = at(b);
        require(na.shape.size() == 2 && nb.shape.size() == 2, errc::shape_mismatch,
                "matmul node " + std::to_string(size()) + ": operands must be 2-D, got " +
                shape_str(na.shape) + " x " + shape_str(nb.shape));
        const int64_t k  = na.shape[1];
        const int64_t kb = trans_b ? nb.shape[1] : nb.shape[0];
        require(k == kb, errc::shape_mismatch,
                "matmul node " + std::to_string(size()) + ": inner dims differ, " +
                shape_str(na.shape) + (trans_b ? " x T" : " x ") + shape_str(nb.shape));
        if (nb.ext_q4) {
            require(trans_b, errc::invalid_argument, "quantized weights require the a·bᵀ form");
        }
        node n = make(op_kind::matmul, {a, b});
        n.trans_b = trans_b;
        n.shape = {na.shape[0], trans_b ? nb.shape[0] : nb.shape[1]};
        return push(std::move(n));
    }

    id add(id a, id b) { return ewise(op_kind::add, a, b); }
    id sub(id a, id b) { return ewise(op_kind::sub, a, b); }
    id mul(id a, id b) { return ewise(op_kind::mul, a, b); }

    id scale(id a, float c) {
        node n = make(op_kind::scale, {a});
        n.c = c;
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    id square(id a) { return unary(op_kind::square, a); }
    id gelu(id a) { return unary(op_kind::gelu, a); }
    id sigmoid(id a) { return unary(op_kind::sigmoid, a); }

    id softmax_rows(id a) {
        require(at(a).cols() >= 1, errc::shape_mismatch, "softmax over empty rows");
        return unary(op_kind::softmax_rows, a);
    }

    id layer_norm(id x, id gain, id bias) {
        const auto & nx = at(x);
        const int64_t nc = nx.cols();
        require(at(gain).numel() == nc && at(bias).numel() == nc, errc::shape_mismatch,
                "layer_norm node " + std::to_string(size()) + ": gain/bias must have " +
                std::to_string(nc) + " entries");
        node n = make(op_kind::layer_norm, {x, gain, bias});
        n.shape = nx.shape;
        return push(std::move(n));
    }

    id embed_lookup(id table, std::span<const int32_t> ids) {
        const auto & nt = at(table);
        require(nt.shape.size() == 2, errc::shape_mismatch, "embed_lookup: table must be 2-D");
        for (int32_t t : ids) {
            require(t >= 0 && t < nt.shape[0], errc::invalid_argument,
                    "embed_lookup: id " + std::to_string(t) + " out of range [0," +
                    std::to_string(nt.shape[0]) + ")");
        }
        node n = make(op_kind::embed_lookup, {table});
        n.ids.assign(ids.begin(), ids.end());
        n.shape = {int64_t(ids.size()), nt.shape[1]};
        return push(std::move(n));
    }

    id cross_entropy(id logits, std::span<const int32_t> targets) {
        const auto & nl = at(logits);
        require(nl.shape.size() == 2, errc::shape_mismatch, "cross_entropy: logits must be 2-D");
        require(int64_t(targets.size()) == nl.shape[0], errc::shape_mismatch,
                "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                std::to_string(nl.shape[0]) + " rows");
        for (int32_t t : targets) {
            require(t >= 0 && t < nl.shape[1], errc::invalid_argument,
                    "cross_entropy: target " + std::to_string(t) + " out of range");
        }
        node n = make(op_kind::cross_entropy, {logits});
        n.ids.assign(targets.begin(), targets.end());
        n.shape = {1};
        return push(std::move(n));
    }

    // ----- composites (built from the closed op set)

    // sum of all entries -> [1,1]
    id sum_all(id a) {
        const auto & na = at(a);
        if (na.rows() == 1) {
            id ones = leaf(tensor::full({1, na.cols()}, 1.0f));
            return matmul(a, ones, /*trans_b=*/true);
        }
        id ones_l = leaf(tensor::full({1, na.rows()}, 1.0f));
        id rowsum = matmul(ones_l, a);          // [1, n]
        id ones_r = leaf(tensor::full({1, na.cols()}, 1.0f));
        return matmul(rowsum, ones_r, true);    // [1, 1]
    }

    id mean_scalars(const std::vector<id> & xs) {
        require(!xs.empty(), errc::invalid_argument, "mean_scalars: empty");
        id acc = xs[0];
        for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
        return scale(acc, 1.0f / float(xs.size()));
    }

    // ----- named bindings (forward(graph, inputs) -> named outputs contract)

    void bind(const std::string & name, std::span<const float> v) {
        for (auto & n : nodes_) {
            if (n.kind == op_kind::leaf && n.name == name) {
                require(!n.ext && !n.ext_q4, errc::invalid_argument, "bind: leaf '" + name + "' is borrowed");
                require(int64_t(v.size()) == n.numel(), errc::shape_mismatch,
                        "bind: '" + name + "' expects " + std::to_string(n.numel()) + " values");
                std::copy(v.begin(), v.end(), n.value.data.begin());
                return;
            }
        }
        fail(errc::invalid_argument, "bind: no leaf named '" + name + "'");
    }

    void mark_output(const std::string & name, id out) { outputs_[name] = out; }
    const std::map<std::string, id> & outputs() const { return outputs_; }

    // ----- execution

    void forward() {
        for (auto & n : nodes_) {
            if (n.kind != op_kind::leaf) eval_node(n);
        }
        forwarded_ = true;
    }

    void backward(id out) {
        require(forwarded_, errc::invalid_argument, "backward called before forward");
        require(at(out).numel() == 1, errc::invalid_argument,
                "backward seed must be scalar, got shape " + shape_str(at(out).shape));

        for (auto & n : nodes_) {
            n.grad = tensor();
        }
        ensure_grad(out);
        at(out).grad.data[0] = 1.0f;

        for (int i = out; i >= 0; --i) {
            node & n = nodes_[size_t(i)];
            if (!n.needs_grad || n.grad.data.empty() || n.kind == op_kind::leaf) continue;
            backprop_node(n);
        }
        // unused parameters get explicit zero gradients
        for (auto & n : nodes_) {
            if (n.requires_grad && n.grad.data.empty()) {
                n.grad = tensor::zeros(n.shape);
            }
        }
        backwarded_ = true;
    }

    // ----- access

    int size() const { return int(nodes_.size()); }
    const node & at(id i) const { return nodes_[size_t(i)]; }
    node & at(id i) { return nodes_[size_t(i)]; }

    const float * ptr(id i) const {
        const node & n = nodes_[size_t(i)];
        require(!n.ext_q4, errc::invalid_argument, "ptr: node is quantized");
        return n.ext ? n.ext : n.value.data.data();
    }

    tensor value_copy(id i) const {
        const node & n = nodes_[size_t(i)];
        const float * p = ptr(i);
        return tensor(n.shape, std::vector<float>(p, p + n.numel()));
    }

    const tensor & grad_of(id i) const {
        require(backwarded_, errc::invalid_argument, "grad_of before backward");
        return nodes_[size_t(i)].grad;
    }

    std::vector<id> param_ids() const {
        std::vector<id> out;
        for (int i = 0; i < size(); ++i) {
            if (nodes_[size_t(i)].requires_grad) out.push_back(i);
        }
        return out;
    }

    // Finite-difference check of every requires_grad leaf against a 64-bit
    // re-evaluation of the tape, h = 1e-4·(1+|x|).
    grad_check_report grad_check(id out, double tolerance);

    // 64-bit shadow evaluation with one leaf element perturbed (leaf < 0: none)
    double eval_f64(id out, id perturb_leaf = -1, int64_t elem = -1, double delta = 0.0) const;

private:
    std::vector<node> nodes_;
    std::map<std::string, id> outputs_;
    bool forwarded_ = false;
    bool backwarded_ = false;

    node make(op_kind k, std::initializer_list<id> ins) {
        node n;
        n.kind = k;
        int j = 0;
        for (id i : ins) {
            require(i >= 0 && i < size(), errc::invalid_argument, "op input out of range");
            n.in[size_t(j++)] = i;
            n.needs_grad = n.needs_grad || nodes_[size_t(i)].needs_grad;
        }
        n.n_in = j;
        return n;
    }

    id push(node n) {
        if (n.kind == op_kind::leaf) {
            // nothing to infer
        }
        nodes_.push_back(std::move(n));
        forwarded_ = false;
        return int(nodes_.size()) - 1;
    }

    id unary(op_kind k, id a) {
        node n = make(k, {a});
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    static bcast infer_bcast(const std::vector<int64_t> & a, const std::vector<int64_t> & b) {
        if (a == b) return bcast::full;
        if (shape_numel(b) == 1) return bcast::scalar;
        const int64_t an = a.empty() ? 0 : a.back();
        const int64_t bn = shape_numel(b);
        if (bn == an && (b.size() == 1 || (b.size() == 2 && b[0] == 1))) return bcast::row;
        fail(errc::shape_mismatch, "elementwise op: cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
    }

    id ewise(op_kind k, id a, id b) {
        node n = make(k, {a, b});
        n.bc = infer_bcast(at(a).shape, at(b).shape);
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    void ensure_value(node & n) {
        if (n.value.shape != n.shape || n.value.data.size() != size_t(n.numel())) {
            n.value = tensor::zeros(n.shape);
        } else {
            std::fill(n.value.data.begin(), n.value.data.end(), 0.0f);
        }
    }

    void ensure_grad(id i) {
        node & n = nodes_[size_t(i)];
        if (n.grad.data.empty()) n.grad = tensor::zeros(n.shape);
    }

    void eval_node(node & n);
    void backprop_node(node & n);
};

// ----- forward kernels

inline void graph::eval_node(node & n) {
    const node * a = n.n_in > 0 ? &at(n.in[0]) : nullptr;
    const node * b = n.n_in > 1 ? &at(n.in[1]) : nullptr;
    const float * pa = a ? (a->ext ? a->ext : a->value.data.data()) : nullptr;
    const float * pb = (b && !b->ext_q4) ? (b->ext ? b->ext : b->value.data.data()) : nullptr;

    switch (n.kind) {
        case op_kind::leaf:
            break;
        case op_kind::matmul: {
            ensure_value(n);
            const int64_t m = n.shape[0], on = n.shape[1], k = a->shape[1];
            if (b->ext_q4) {
                mm_nt_q4(pa, *b->ext_q4, n.value.data.data(), m, on, k);
            } else if (n.trans_b) {
                mm_nt(pa, pb, n.value.data.data(), m, on, k);
            } else {
                mm_nn(pa, pb, n.value.data.data(), m, k, on);
            }
            break;
        }
        case op_kind::add:
        case op_kind::sub:
        case op_kind::mul: {
            ensure_value(n);
            float * o = n.value.data.data();
            const int64_t total = n.numel(), cols = n.cols();
            const float sgn = n.kind == op_kind::sub ? -1.0f : 1.0f;
            for (int64_t i = 0; i < total; ++i) {
                const float bv = n.bc == bcast::full ? pb[i]
                               : n.bc == bcast::row  ? pb[i % cols]
                                                     : pb[0];
                o[i] = n.kind == op_kind::mul ? pa[i] * bv : pa[i] + sgn * bv;
            }
            break;
        }
        case op_kind::scale: {
            ensure_value(n);
            for (int64_t i = 0; i < n.numel(); ++i) n.value.data[size_t(i)] = pa[i] * n.c;
            break;
        }
        case op_kind::square: {
            ensure_value(n);
            for (int64_t i = 0; i < n.numel(); ++i) n.value.data[size_t(i)] = pa[i] * pa[i];
            break;
        }
        case op_kind::gelu: {
            ensure_value(n);
            for (int64_t i = 0; i < n.numel(); ++i) n.value.data[size_t(i)] = act::gelu(pa[i]);
            break;
        }
        case op_kind::sigmoid: {
            ensure_value(n);
            for (int64_t i = 0; i < n.numel(); ++i) n.value.data[size_t(i)] = act::sigmoid(pa[i]);
            break;
        }
        case op_kind::softmax_rows: {
            ensure_value(n);
            const int64_t rows = n.rows(), cols = n.cols();
            for (int64_t r = 0; r < rows; ++r) {
                const float * x = pa + r * cols;
                float * y = n.value.data.data() + r * cols;
                float mx = x[0];
                for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                float sum = 0.0f;
                for (int64_t j = 0; j < cols; ++j) {
                    y[j] = std::exp(x[j] - mx);
                    sum += y[j];
                }
                const float inv = 1.0f / sum;
                for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
            }
            break;
        }
        case op_kind::layer_norm: {
            ensure_value(n);
            const node & gn = at(n.in[1]);
            const node & bn = at(n.in[2]);
            const float * pg = gn.ext ? gn.ext : gn.value.data.data();
            const float * pbias = bn.ext ? bn.ext : bn.value.data.data();
            const int64_t rows = n.rows(), cols = n.cols();
            for (int64_t r = 0; r < rows; ++r) {
                const float * x = pa + r * cols;
                float * y = n.value.data.data() + r * cols;
                float mu = 0.0f;
                for (int64_t j = 0; j < cols; ++j) mu += x[j];
                mu /= float(cols);
                float var = 0.0f;
                for (int64_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
                var /= float(cols);
                const float inv = 1.0f / std::sqrt(var + LN_EPS);
                for (int64_t j = 0; j < cols; ++j) y[j] = (x[j] - mu) * inv * pg[j] + pbias[j];
            }
            break;
        }
        case op_kind::embed_lookup: {
            ensure_value(n);
            const int64_t d = a->shape[1];
            for (size_t r = 0; r < n.ids.size(); ++r) {
                const float * row = pa + int64_t(n.ids[r]) * d;
                std::copy(row, row + d, n.value.data.begin() + int64_t(r) * d);
            }
            break;
        }
        case op_kind::cross_entropy: {
            ensure_value(n);
            const int64_t rows = a->shape[0], cols = a->shape[1];
            double total = 0.0;
            for (int64_t r = 0; r < rows; ++r) {
                const float * x = pa + r * cols;
                float mx = x[0];
                for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                double lse = 0.0;
                for (int64_t j = 0; j < cols; ++j) lse += std::exp(double(x[j] - mx));
                total += std::log(lse) + double(mx) - double(x[n.ids[size_t(r)]]);
            }
            n.value.data[0] = float(total / double(rows));
            break;
        }
    }
}

// ----- backward kernels

inline void graph::backprop_node(node & n) {
    node & a = at(n.in[0]);
    const float * pa = a.ext ? a.ext : a.value.data.data();
    const float * g = n.grad.data.data();

    auto want = [&](int slot) -> node * {
        if (slot >= n.n_in) return nullptr;
        node & x = at(n.in[size_t(slot)]);
        if (!x.needs_grad) return nullptr;
        ensure_grad(n.in[size_t(slot)]);
        return &x;
    };

    // accumulate a broadcast-reduced gradient into b
    auto reduce_into = [&](node & bn, auto fn) {
        const int64_t total = n.numel(), cols = n.cols();
        float * gb = bn.grad.data.data();
        if (n.bc == bcast::full) {
            for (int64_t i = 0; i < total; ++i) gb[i] += fn(i);
        } else if (n.bc == bcast::row) {
            for (int64_t i = 0; i < total; ++i) gb[i % cols] += fn(i);
        } else {
            float s = 0.0f;
            for (int64_t i = 0; i < total; ++i) s += fn(i);
            gb[0] += s;
        }
    };

    switch (n.kind) {
        case op_kind::leaf:
            break;
        case op_kind::matmul: {
            node & b = at(n.in[1]);
            const int64_t m = n.shape[0], on = n.shape[1], k = a.shape[1];
            std::vector<float> deq;          // quantized weights enter grads dequantized
            const float * pb = nullptr;
            if (b.ext_q4) {
                if (at(n.in[0]).needs_grad) {
                    deq = dequantize_tensor(*b.ext_q4);
                    pb = deq.data();
                }
            } else {
                pb = b.ext ? b.ext : b.value.data.data();
            }
            if (n.trans_b) {
                // y = a·bᵀ: da += g·b, db += gᵀ·a
                if (node * ga = want(0)) mm_nn(g, pb, ga->grad.data.data(), m, on, k);
                if (node * gb = want(1)) mm_tn(g, pa, gb->grad.data.data(), m, on, k);
            } else {
                // y = a·b: da += g·bᵀ, db += aᵀ·g
                if (node * ga = want(0)) mm_nt(g, pb, ga->grad.data.data(), m, k, on);
                if (node * gb = want(1)) mm_tn(pa, g, gb->grad.data.data(), m, k, on);
            }
            break;
        }
        case op_kind::add:
        case op_kind::sub: {
            const float sgn = n.kind == op_kind::sub ? -1.0f : 1.0f;
            if (node * ga = want(0)) {
                float * gd = ga->grad.data.data();
                for (int64_t i = 0; i < n.numel(); ++i) gd[i] += g[i];
            }
            if (node * gb = want(1)) {
                reduce_into(*gb, [&](int64_t i) { return sgn * g[i]; });
            }
            break;
        }
        case op_kind::mul: {
            node & b = at(n.in[1]);
            const float * pb = b.ext ? b.ext : b.value.data.data();
            const int64_t cols = n.cols();
            if (node * ga = want(0)) {
                float * gd = ga->grad.data.data();
                for (int64_t i = 0; i < n.numel(); ++i) {
                    const float bv = n.bc == bcast::full ? pb[i]
                                   : n.bc == bcast::row  ? pb[i % cols]
                                                         : pb[0];
                    gd[i] += g[i] * bv;
                }
            }
            if (node * gb = want(1)) {
                reduce_into(*gb, [&](int64_t i) { return g[i] * pa[i]; });
            }
            break;
        }
        case op_kind::scale: {
            if (node * ga = want(0)) {
                float * gd = ga->grad.data.data();
                for (int64_t i = 0; i < n.numel(); ++i) gd[i] += g[i] * n.c;
            }
            break;
        }
        case op_kind::square: {
            if (node * ga = want(0)) {
                float * gd = ga->grad.data.data();
                for (int64_t i = 0; i < n.numel(); ++i) gd[i] += 2.0f * pa[i] * g[i];
            }
            break;
        }
        case op_kind::gelu: {
            if (node * ga = want(0)) {
                float * gd = ga->grad.data.data();
                for (int64_t i = 0; i < n.numel(); ++i) gd[i] += act::gelu_grad(pa[i]) * g[i];
            }
            break;
        }
        case op_kind::sigmoid: {
            if (node * ga = want(0)) {
                float * gd = ga->grad.data.data();
                const float * y = n.value.data.data();
                for (int64_t i = 0; i < n.numel(); ++i) gd[i] += y[i] * (1.0f - y[i]) * g[i];
            }
            break;
        }
        case op_kind::softmax_rows: {
            if (node * ga = want(0)) {
                const int64_t rows = n.rows(), cols = n.cols();
                for (int64_t r = 0; r < rows; ++r) {
                    const float * y = n.value.data.data() + r * cols;
                    const float * gr = g + r * cols;
                    float * gd = ga->grad.data.data() + r * cols;
                    float dot = 0.0f;
                    for (int64_t j = 0; j < cols; ++j) dot += gr[j] * y[j];
                    for (int64_t j = 0; j < cols; ++j) gd[j] += (gr[j] - dot) * y[j];
                }
            }
            break;
        }
        case op_kind::layer_norm: {
            const node & gn = at(n.in[1]);
            const float * pg = gn.ext ? gn.ext : gn.value.data.data();
            const int64_t rows = n.rows(), cols = n.cols();
            node * gx = want(0);
            node * gg = want(1);
            node * gb = want(2);
            for (int64_t r = 0; r < rows; ++r) {
                const float * x = pa + r * cols;
                const float * gr = g + r * cols;
                float mu = 0.0f;
                for (int64_t j = 0; j < cols; ++j) mu += x[j];
                mu /= float(cols);
                float var = 0.0f;
                for (int64_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
                var /= float(cols);
                const float inv = 1.0f / std::sqrt(var + LN_EPS);

                if (gg || gb) {
                    for (int64_t j = 0; j < cols; ++j) {
                        const float xh = (x[j] - mu) * inv;
                        if (gg) gg->grad.data[size_t(j)] += gr[j] * xh;
                        if (gb) gb->grad.data[size_t(j)] += gr[j];
                    }
                }
                if (gx) {
                    float mean_gy = 0.0f, mean_gyxh = 0.0f;
                    for (int64_t j = 0; j < cols; ++j) {
                        const float gy = gr[j] * pg[j];
                        const float xh = (x[j] - mu) * inv;
                        mean_gy += gy;
                        mean_gyxh += gy * xh;
                    }
                    mean_gy /= float(cols);
                    mean_gyxh /= float(cols);
                    float * gd = gx->grad.data.data() + r * cols;
                    for (int64_t j = 0; j < cols; ++j) {
                        const float gy = gr[j] * pg[j];
                        const float xh = (x[j] - mu) * inv;
                        gd[j] += (gy - mean_gy - xh * mean_gyxh) * inv;
                    }
                }
            }
            break;
        }
        case op_kind::embed_lookup: {
            if (node * ga = want(0)) {
                const int64_t d = a.shape[1];
                for (size_t r = 0; r < n.ids.size(); ++r) {
                    float * row = ga->grad.data.data() + int64_t(n.ids[r]) * d;
                    const float * gr = g + int64_t(r) * d;
                    for (int64_t j = 0; j < d; ++j) row[j] += gr[j];
                }
            }
            break;
        }
        case op_kind::cross_entropy: {
            if (node * ga = want(0)) {
                const int64_t rows = a.shape[0], cols = a.shape[1];
                const float gscale = g[0] / float(rows);
                for (int64_t r = 0; r < rows; ++r) {
                    const float * x = pa + r * cols;
                    float * gd = ga->grad.data.data() + r * cols;
                    float mx = x[0];
                    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
                    float sum = 0.0f;
                    for (int64_t j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
                    const float inv = 1.0f / sum;
                    for (int64_t j = 0; j < cols; ++j) {
                        const float p = std::exp(x[j] - mx) * inv;
                        gd[j] += (p - (j == int64_t(n.ids[size_t(r)]) ? 1.0f : 0.0f)) * gscale;
                    }
                }
            }
            break;
        }
    }
}

// ----- 64-bit shadow evaluation

inline double graph::eval_f64(id out, id perturb_leaf, int64_t elem, double delta) const {
    std::vector<std::vector<double>> vals(nodes_.size());
    for (int i = 0; i <= out; ++i) {
        const node & n = nodes_[size_t(i)];
        auto & v = vals[size_t(i)];
        const int64_t total = n.numel();
        auto in0 = [&]() -> const std::vector<double> & { return vals[size_t(n.in[0])]; };

        switch (n.kind) {
            case op_kind::leaf: {
                v.resize(size_t(total));
                if (n.ext_q4) {
                    const auto deq = dequantize_tensor(*n.ext_q4);
                    for (int64_t j = 0; j < total; ++j) v[size_t(j)] = deq[size_t(j)];
                } else {
                    const float * p = n.ext ? n.ext : n.value.data.data();
                    for (int64_t j = 0; j < total; ++j) v[size_t(j)] = p[j];
                }
                if (i == perturb_leaf) v[size_t(elem)] += delta;
                break;
            }
            case op_kind::matmul: {
                const node & na = nodes_[size_t(n.in[0])];
                const node & nb = nodes_[size_t(n.in[1])];
                const auto & va = vals[size_t(n.in[0])];
                const auto & vb = vals[size_t(n.in[1])];
                const int64_t m = n.shape[0], on = n.shape[1], k = na.shape[1];
                v.assign(size_t(total), 0.0);
                for (int64_t r = 0; r < m; ++r) {
                    for (int64_t cc = 0; cc < on; ++cc) {
                        double s = 0.0;
                        for (int64_t kk = 0; kk < k; ++kk) {
                            const double bv = n.trans_b ? vb[size_t(cc * k + kk)] : vb[size_t(kk * on + cc)];
                            s += va[size_t(r * k + kk)] * bv;
                        }
                        v[size_t(r * on + cc)] = s;
                    }
                }
                (void) nb;
                break;
            }
            case op_kind::add:
            case op_kind::sub:
            case op_kind::mul: {
                const auto & va = in0();
                const auto & vb = vals[size_t(n.in[1])];
                const int64_t cols = n.cols();
                v.resize(size_t(total));
                const double sgn = n.kind == op_kind::sub ? -1.0 : 1.0;
                for (int64_t j = 0; j < total; ++j) {
                    const double bv = n.bc == bcast::full ? vb[size_t(j)]
                                    : n.bc == bcast::row  ? vb[size_t(j % cols)]
                                                          : vb[0];
                    v[size_t(j)] = n.kind == op_kind::mul ? va[size_t(j)] * bv : va[size_t(j)] + sgn * bv;
                }
                break;
            }
            case op_kind::scale: {
                const auto & va = in0();
                v.resize(size_t(total));
                for (int64_t j = 0; j < total; ++j) v[size_t(j)] = va[size_t(j)] * double(n.c);
                break;
            }
            case op_kind::square: {
                const auto & va = in0();
                v.resize(size_t(total));
                for (int64_t j = 0; j < total; ++j) v[size_t(j)] = va[size_t(j)] * va[size_t(j)];
                break;
            }
            case op_kind::gelu: {
                const auto & va = in0();
                v.resize(size_t(total));
                for (int64_t j = 0; j < total; ++j) v[size_t(j)] = act::gelu(va[size_t(j)]);
                break;
            }
            case op_kind::sigmoid: {
                const auto & va = in0();
                v.resize(size_t(total));
                for (int64_t j = 0; j < total; ++j) v[size_t(j)] = act::sigmoid(va[size_t(j)]);
                break;
            }
            case op_kind::softmax_rows: {
                const auto & va = in0();
                const int64_t rows = n.rows(), cols = n.cols();
                v.resize(size_t(total));
                for (int64_t r = 0; r < rows; ++r) {
                    double mx = va[size_t(r * cols)];
                    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, va[size_t(r * cols + j)]);
                    double sum = 0.0;
                    for (int64_t j = 0; j < cols; ++j) {
                        v[size_t(r * cols + j)] = std::exp(va[size_t(r * cols + j)] - mx);
                        sum += v[size_t(r * cols + j)];
                    }
                    for (int64_t j = 0; j < cols; ++j) v[size_t(r * cols + j)] /= sum;
                }
                break;
            }
            case op_kind::layer_norm: {
                const auto & va = in0();
                const auto & vg = vals[size_t(n.in[1])];
                const auto & vb = vals[size_t(n.in[2])];
                const int64_t rows = n.rows(), cols = n.cols();
                v.resize(size_t(total));
                for (int64_t r = 0; r < rows; ++r) {
                    double mu = 0.0;
                    for (int64_t j = 0; j < cols; ++j) mu += va[size_t(r * cols + j)];
                    mu /= double(cols);
                    double var = 0.0;
                    for (int64_t j = 0; j < cols; ++j) {
                        const double dxx = va[size_t(r * cols + j)] - mu;
                        var += dxx * dxx;
                    }
                    var /= double(cols);
                    const double inv = 1.0 / std::sqrt(var + double(LN_EPS));
                    for (int64_t j = 0; j < cols; ++j) {
                        v[size_t(r * cols + j)] = (va[size_t(r * cols + j)] - mu) * inv * vg[size_t(j)] + vb[size_t(j)];
                    }
                }
                break;
            }
            case op_kind::embed_lookup: {
                const node & na = nodes_[size_t(n.in[0])];
                const auto & va = vals[size_t(n.in[0])];
                const int64_t d = na.shape[1];
                v.resize(size_t(total));
                for (size_t r = 0; r < n.ids.size(); ++r) {
                    for (int64_t j = 0; j < d; ++j) {
                        v[r * size_t(d) + size_t(j)] = va[size_t(int64_t(n.ids[r]) * d + j)];
                    }
                }
                break;
            }
            case op_kind::cross_entropy: {
                const node & na = nodes_[size_t(n.in[0])];
                const auto & va = vals[size_t(n.in[0])];
                const int64_t rows = na.shape[0], cols = na.shape[1];
                double tot = 0.0;
                for (int64_t r = 0; r < rows; ++r) {
                    double mx = va[size_t(r * cols)];
                    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, va[size_t(r * cols + j)]);
                    double lse = 0.0;
                    for (int64_t j = 0; j < cols; ++j) lse += std::exp(va[size_t(r * cols + j)] - mx);
                    tot += std::log(lse) + mx - va[size_t(r * cols + n.ids[size_t(r)])];
                }
                v.assign(1, tot / double(rows));
                break;
            }
        }
    }
    return vals[size_t(out)][0];
}

inline grad_check_report graph::grad_check(id out, double tolerance) {
    forward();
    backward(out);

    grad_check_report report;
    report.tolerance = tolerance;
    const double atol = 1e-6;

    int pidx = 0;
    for (id i : param_ids()) {
        const node & n = at(i);
        grad_check_entry entry;
        entry.name = n.name.empty() ? "param" + std::to_string(pidx) : n.name;
        const float * base = n.ext ? n.ext : n.value.data.data();
        for (int64_t e = 0; e < n.numel(); ++e) {
            const double x = double(base[e]);
            const double h = 1e-4 * (1.0 + std::fabs(x));
            const double fp = eval_f64(out, i, e, +h);
            const double fm = eval_f64(out, i, e, -h);
            const double fd = (fp - fm) / (2.0 * h);
            const double an = double(n.grad.data[size_t(e)]);
            const double rel = std::fabs(an - fd) / (std::max(std::fabs(an), std::fabs(fd)) + atol / tolerance);
            entry.max_rel = std::max(entry.max_rel, rel);
        }
        entry.pass = entry.max_rel <= tolerance;
        report.max_rel = std::max(report.max_rel, entry.max_rel);
        report.pass = report.pass && entry.pass;
        report.params.push_back(std::move(entry));
        ++pidx;
    }
    return report;
}

} // namespace spt
