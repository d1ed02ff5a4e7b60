#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mendkit/common.hpp"
#include "mendkit/rng.hpp"

namespace mendkit {

// Dense row-major tensor. Rank is 1 or 2 in practice ([n] vectors and
// [rows x cols] matrices); scalars are shape {1}.
template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(count(t.shape), T(0));
        return t;
    }

    static Tensor full(std::vector<std::size_t> s, T v) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(count(t.shape), v);
        return t;
    }

    static Tensor from(std::vector<std::size_t> s, std::vector<T> d) {
        if (count(s) != d.size())
            throw DimensionError("Tensor::from: shape does not match data length");
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(d);
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const {
        if (rank() != 2)
            throw DimensionError("Tensor::rows: tensor is not rank 2");
        return shape[0];
    }
    std::size_t cols() const {
        if (rank() != 2)
            throw DimensionError("Tensor::cols: tensor is not rank 2");
        return shape[1];
    }

    T& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    T at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v)))
                return false;
        return true;
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s)
            n *= e;
        return n;
    }
};

template <typename T>
void ensure_all_finite(const Tensor<T>& t, const std::string& context) {
    if (!t.all_finite())
        throw NumericError("non-finite values in " + context);
}

namespace detail {

// out[B x O] = x[B x I] * w[I x O]  (+= when accumulate)
template <typename T>
void gemm_xw(const T* x, const T* w, T* out, std::size_t B, std::size_t I, std::size_t O,
             bool accumulate) {
    if (!accumulate)
        std::fill(out, out + B * O, T(0));
    for (std::size_t b = 0; b < B; ++b) {
        const T* xr = x + b * I;
        T* yr = out + b * O;
        for (std::size_t i = 0; i < I; ++i) {
            T xi = xr[i];
            if (xi == T(0))
                continue;
            const T* wr = w + i * O;
            for (std::size_t o = 0; o < O; ++o)
                yr[o] += xi * wr[o];
        }
    }
}

// dx[B x I] += dy[B x O] * w^T
template <typename T>
void gemm_dy_wt(const T* dy, const T* w, T* dx, std::size_t B, std::size_t I, std::size_t O) {
    for (std::size_t b = 0; b < B; ++b) {
        const T* dyr = dy + b * O;
        T* dxr = dx + b * I;
        for (std::size_t i = 0; i < I; ++i) {
            const T* wr = w + i * O;
            T acc = T(0);
            for (std::size_t o = 0; o < O; ++o)
                acc += dyr[o] * wr[o];
            dxr[i] += acc;
        }
    }
}

// dw[I x O] += x^T * dy
template <typename T>
void gemm_xt_dy(const T* x, const T* dy, T* dw, std::size_t B, std::size_t I, std::size_t O) {
    for (std::size_t b = 0; b < B; ++b) {
        const T* xr = x + b * I;
        const T* dyr = dy + b * O;
        for (std::size_t i = 0; i < I; ++i) {
            T xi = xr[i];
            if (xi == T(0))
                continue;
            T* dwr = dw + i * O;
            for (std::size_t o = 0; o < O; ++o)
                dwr[o] += xi * dyr[o];
        }
    }
}

template <typename T>
T stable_sigmoid(T v) {
    if (v >= T(0)) {
        T e = std::exp(-v);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(v);
    return e / (T(1) + e);
}

} // namespace detail

// Reverse-mode tape over Tensor<T>. Operations append a record holding the
// op kind, input/output node ids and a backward closure; backward() walks
// the records in exact reverse order. One tape per forward/backward pass.
template <typename T>
class Tape {
public:
    using NodeId = std::uint32_t;

    static constexpr T kBceClamp = T(1e-7);

    struct OpRecord {
        const char* kind;
        std::array<NodeId, 3> inputs;
        std::uint8_t n_inputs;
        NodeId output;
        std::function<void(Tape&)> backward;
    };

    NodeId leaf(Tensor<T> value) {
        nodes_.push_back(Node{std::move(value), {}});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId constant(Tensor<T> value) {
        value.requires_grad = false;
        return leaf(std::move(value));
    }

    const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }
    Tensor<T>& value(NodeId id) { return nodes_[id].value; }
    const Tensor<T>& grad(NodeId id) const { return nodes_[id].grad; }
    bool requires_grad(NodeId id) const { return nodes_[id].value.requires_grad; }
    std::size_t num_ops() const { return ops_.size(); }

    // Generic entry point; also used by tests to inject custom rules.
    void push_op(const char* kind, std::initializer_list<NodeId> inputs, NodeId output,
                 std::function<void(Tape&)> backward) {
        OpRecord rec;
        rec.kind = kind;
        rec.n_inputs = static_cast<std::uint8_t>(inputs.size());
        std::size_t k = 0;
        for (NodeId id : inputs)
            rec.inputs[k++] = id;
        rec.output = output;
        rec.backward = std::move(backward);
        ops_.push_back(std::move(rec));
    }

    // y = x * w + bias, x:[B x I], w:[I x O], bias:[O]
    NodeId linear(NodeId x, NodeId w, NodeId bias) {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& wv = value(w);
        const Tensor<T>& bv = value(bias);
        if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1)
            throw DimensionError("linear: expected x[BxI], w[IxO], bias[O]");
        if (xv.cols() != wv.rows())
            throw DimensionError("linear: inner dimensions differ (" + std::to_string(xv.cols()) +
                                 " vs " + std::to_string(wv.rows()) + ")");
        if (bv.size() != wv.cols())
            throw DimensionError("linear: bias length " + std::to_string(bv.size()) +
                                 " does not match output width " + std::to_string(wv.cols()));
        std::size_t B = xv.rows(), I = xv.cols(), O = wv.cols();
        Tensor<T> out = Tensor<T>::zeros({B, O});
        detail::gemm_xw(xv.data.data(), wv.data.data(), out.data.data(), B, I, O, false);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < O; ++o)
                out.data[b * O + o] += bv.data[o];
        out.requires_grad = xv.requires_grad || wv.requires_grad || bv.requires_grad;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("linear", {x, w, bias}, y, [x, w, bias, y, B, I, O](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                if (t.requires_grad(x))
                    detail::gemm_dy_wt(g.data.data(), t.value(w).data.data(),
                                       t.grad_buf(x).data.data(), B, I, O);
                if (t.requires_grad(w))
                    detail::gemm_xt_dy(t.value(x).data.data(), g.data.data(),
                                       t.grad_buf(w).data.data(), B, I, O);
                if (t.requires_grad(bias)) {
                    T* db = t.grad_buf(bias).data.data();
                    for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t o = 0; o < O; ++o)
                            db[o] += g.data[b * O + o];
                }
            });
        }
        return y;
    }

    NodeId relu(NodeId x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out = xv;
        for (T& v : out.data)
            v = std::max(T(0), v);
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("relu", {x}, y, [x, y](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                const Tensor<T>& xin = t.value(x);
                T* dx = t.grad_buf(x).data.data();
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (xin.data[i] > T(0)) // subgradient at 0 is 0
                        dx[i] += g.data[i];
            });
        }
        return y;
    }

    NodeId sigmoid(NodeId x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out = xv;
        for (T& v : out.data)
            v = detail::stable_sigmoid(v);
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("sigmoid", {x}, y, [x, y](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                const Tensor<T>& yv = t.value(y);
                T* dx = t.grad_buf(x).data.data();
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx[i] += g.data[i] * yv.data[i] * (T(1) - yv.data[i]);
            });
        }
        return y;
    }

    // Columnwise concatenation of [B x I] and [B x J].
    NodeId concat(NodeId a, NodeId b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (av.rank() != 2 || bv.rank() != 2)
            throw DimensionError("concat: expected rank-2 tensors");
        if (av.rows() != bv.rows())
            throw DimensionError("concat: batch dimensions differ (" + std::to_string(av.rows()) +
                                 " vs " + std::to_string(bv.rows()) + ")");
        std::size_t B = av.rows(), I = av.cols(), J = bv.cols();
        Tensor<T> out = Tensor<T>::zeros({B, I + J});
        for (std::size_t r = 0; r < B; ++r) {
            std::copy_n(av.data.data() + r * I, I, out.data.data() + r * (I + J));
            std::copy_n(bv.data.data() + r * J, J, out.data.data() + r * (I + J) + I);
        }
        out.requires_grad = av.requires_grad || bv.requires_grad;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("concat", {a, b}, y, [a, b, y, B, I, J](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                for (std::size_t r = 0; r < B; ++r) {
                    if (t.requires_grad(a)) {
                        T* da = t.grad_buf(a).data.data() + r * I;
                        const T* gr = g.data.data() + r * (I + J);
                        for (std::size_t i = 0; i < I; ++i)
                            da[i] += gr[i];
                    }
                    if (t.requires_grad(b)) {
                        T* db = t.grad_buf(b).data.data() + r * J;
                        const T* gr = g.data.data() + r * (I + J) + I;
                        for (std::size_t j = 0; j < J; ++j)
                            db[j] += gr[j];
                    }
                }
            });
        }
        return y;
    }

    // Repeat a [n] vector as every row of a [B x n] matrix.
    NodeId broadcast_rows(NodeId v, std::size_t B) {
        const Tensor<T>& vv = value(v);
        if (vv.rank() != 1)
            throw DimensionError("broadcast_rows: expected a rank-1 tensor");
        std::size_t n = vv.size();
        Tensor<T> out = Tensor<T>::zeros({B, n});
        for (std::size_t r = 0; r < B; ++r)
            std::copy_n(vv.data.data(), n, out.data.data() + r * n);
        out.requires_grad = vv.requires_grad;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("broadcast_rows", {v}, y, [v, y, B, n](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                T* dv = t.grad_buf(v).data.data();
                for (std::size_t r = 0; r < B; ++r)
                    for (std::size_t i = 0; i < n; ++i)
                        dv[i] += g.data[r * n + i];
            });
        }
        return y;
    }

    // Inverted dropout: zero with probability `rate`, scale survivors by
    // 1/(1-rate). Identity in eval mode or at rate 0.
    NodeId dropout(NodeId x, T rate, bool training, CounterRng& rng) {
        if (!(rate >= T(0) && rate < T(1)))
            throw ParameterError("dropout: rate must lie in [0,1)");
        if (!training || rate == T(0))
            return x;
        const Tensor<T>& xv = value(x);
        T keep_scale = T(1) / (T(1) - rate);
        auto mask = std::make_shared<std::vector<T>>(xv.size());
        Tensor<T> out = xv;
        for (std::size_t i = 0; i < out.size(); ++i) {
            T m = (rng.uniform() >= static_cast<double>(rate)) ? keep_scale : T(0);
            (*mask)[i] = m;
            out.data[i] *= m;
        }
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("dropout", {x}, y, [x, y, mask](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                T* dx = t.grad_buf(x).data.data();
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx[i] += g.data[i] * (*mask)[i];
            });
        }
        return y;
    }

    // Mean binary cross-entropy against a constant target in [0,1].
    // Predictions are clamped to [kBceClamp, 1-kBceClamp]; the backward rule
    // is the exact derivative of the clamped forward.
    NodeId bce(NodeId pred, const Tensor<T>& target) {
        const Tensor<T>& pv = value(pred);
        if (!pv.same_shape(target))
            throw DimensionError("bce: prediction and target shapes differ");
        for (T t : target.data)
            if (!(t >= T(0) && t <= T(1)))
                throw ParameterError("bce: target values must lie in [0,1]");
        const T lo = kBceClamp, hi = T(1) - kBceClamp;
        std::size_t n = pv.size();
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            T p = std::clamp(pv.data[i], lo, hi);
            T t = target.data[i];
            acc -= static_cast<double>(t) * std::log(static_cast<double>(p)) +
                   (1.0 - static_cast<double>(t)) * std::log(1.0 - static_cast<double>(p));
        }
        Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
        out.requires_grad = pv.requires_grad;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            auto tgt = std::make_shared<Tensor<T>>(target);
            push_op("bce", {pred}, y, [pred, y, tgt, lo, hi, n](Tape& t) {
                T g = t.nodes_[y].grad.data[0];
                const Tensor<T>& pv2 = t.value(pred);
                T* dp = t.grad_buf(pred).data.data();
                T inv_n = T(1) / static_cast<T>(n);
                for (std::size_t i = 0; i < n; ++i) {
                    T p = pv2.data[i];
                    if (p <= lo || p >= hi)
                        continue; // clamped region is flat
                    dp[i] += g * inv_n * (-tgt->data[i] / p + (T(1) - tgt->data[i]) / (T(1) - p));
                }
            });
        }
        return y;
    }

    // Elementwise product of same-shape tensors.
    NodeId mul(NodeId a, NodeId b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (!av.same_shape(bv))
            throw DimensionError("mul: shapes differ");
        Tensor<T> out = av;
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] *= bv.data[i];
        out.requires_grad = av.requires_grad || bv.requires_grad;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("mul", {a, b}, y, [a, b, y](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                if (t.requires_grad(a)) {
                    T* da = t.grad_buf(a).data.data();
                    const Tensor<T>& bv2 = t.value(b);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        da[i] += g.data[i] * bv2.data[i];
                }
                if (t.requires_grad(b)) {
                    T* db = t.grad_buf(b).data.data();
                    const Tensor<T>& av2 = t.value(a);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        db[i] += g.data[i] * av2.data[i];
                }
            });
        }
        return y;
    }

    // Elementwise product with a constant tensor.
    NodeId mul_const(NodeId x, const Tensor<T>& c) {
        const Tensor<T>& xv = value(x);
        if (!xv.same_shape(c))
            throw DimensionError("mul_const: shapes differ");
        Tensor<T> out = xv;
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] *= c.data[i];
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            auto cc = std::make_shared<Tensor<T>>(c);
            push_op("mul_const", {x}, y, [x, y, cc](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                T* dx = t.grad_buf(x).data.data();
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx[i] += g.data[i] * cc->data[i];
            });
        }
        return y;
    }

    // scale * x + shift, elementwise.
    NodeId affine(NodeId x, T scale, T shift) {
        Tensor<T> out = value(x);
        for (T& v : out.data)
            v = scale * v + shift;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("affine", {x}, y, [x, y, scale](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                T* dx = t.grad_buf(x).data.data();
                for (std::size_t i = 0; i < g.size(); ++i)
                    dx[i] += scale * g.data[i];
            });
        }
        return y;
    }

    NodeId add(NodeId a, NodeId b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        if (!av.same_shape(bv))
            throw DimensionError("add: shapes differ");
        Tensor<T> out = av;
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] += bv.data[i];
        out.requires_grad = av.requires_grad || bv.requires_grad;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("add", {a, b}, y, [a, b, y](Tape& t) {
                const Tensor<T>& g = t.nodes_[y].grad;
                if (t.requires_grad(a)) {
                    T* da = t.grad_buf(a).data.data();
                    for (std::size_t i = 0; i < g.size(); ++i)
                        da[i] += g.data[i];
                }
                if (t.requires_grad(b)) {
                    T* db = t.grad_buf(b).data.data();
                    for (std::size_t i = 0; i < g.size(); ++i)
                        db[i] += g.data[i];
                }
            });
        }
        return y;
    }

    NodeId mean(NodeId x) {
        const Tensor<T>& xv = value(x);
        std::size_t n = xv.size();
        if (n == 0)
            throw DimensionError("mean: empty tensor");
        double acc = 0.0;
        for (T v : xv.data)
            acc += static_cast<double>(v);
        Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
        out.requires_grad = xv.requires_grad;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("mean", {x}, y, [x, y, n](Tape& t) {
                T g = t.nodes_[y].grad.data[0] / static_cast<T>(n);
                T* dx = t.grad_buf(x).data.data();
                for (std::size_t i = 0; i < n; ++i)
                    dx[i] += g;
            });
        }
        return y;
    }

    NodeId sum(NodeId x) {
        const Tensor<T>& xv = value(x);
        std::size_t n = xv.size();
        double acc = 0.0;
        for (T v : xv.data)
            acc += static_cast<double>(v);
        Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
        out.requires_grad = xv.requires_grad;
        NodeId y = leaf(std::move(out));
        if (value(y).requires_grad) {
            push_op("sum", {x}, y, [x, y, n](Tape& t) {
                T g = t.nodes_[y].grad.data[0];
                T* dx = t.grad_buf(x).data.data();
                for (std::size_t i = 0; i < n; ++i)
                    dx[i] += g;
            });
        }
        return y;
    }

    // Reverse sweep from a scalar root. Grads accumulate in recording order
    // reversed; nodes that do not require grad are skipped.
    void backward(NodeId root) {
        if (value(root).size() != 1)
            throw DimensionError("backward: root must be a scalar");
        if (!value(root).requires_grad)
            throw ParameterError("backward: root does not require grad");
        for (Node& n : nodes_)
            n.grad = Tensor<T>();
        grad_buf(root).data[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (nodes_[it->output].grad.size() == 0)
                continue; // no gradient reached this op's output
            it->backward(*this);
        }
    }

    // Grad tensor for a node, allocated on first touch.
    Tensor<T>& grad_buf(NodeId id) {
        Node& n = nodes_[id];
        if (n.grad.size() != n.value.size())
            n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
    };

    std::vector<Node> nodes_;
    std::vector<OpRecord> ops_;
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamConfig {
    T lr;
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor;
};

// Per-parameter Adam state with bias correction. Each tensor owns its moment
// buffers and step counter, so sparsely updated parameters (latent codes that
// only appear in some batches) stay self-consistent.
template <typename T>
class AdamState {
public:
    void step(Tensor<T>& param, const Tensor<T>& grad, const AdamConfig<T>& cfg,
              const std::string& name) {
        if (grad.size() != param.size())
            throw DimensionError("adam: gradient shape does not match parameter " + name);
        if (!grad.all_finite())
            throw NumericError("adam: non-finite gradient for parameter " + name);
        if (m_.size() != param.size()) {
            m_.assign(param.size(), T(0));
            v_.assign(param.size(), T(0));
            step_ = 0;
        }
        ++step_;
        T b1t = std::pow(cfg.beta1, static_cast<T>(step_));
        T b2t = std::pow(cfg.beta2, static_cast<T>(step_));
        for (std::size_t i = 0; i < param.size(); ++i) {
            T g = grad.data[i];
            m_[i] = cfg.beta1 * m_[i] + (T(1) - cfg.beta1) * g;
            v_[i] = cfg.beta2 * v_[i] + (T(1) - cfg.beta2) * g * g;
            T mhat = m_[i] / (T(1) - b1t);
            T vhat = v_[i] / (T(1) - b2t);
            param.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }

    std::int64_t step_count() const { return step_; }
    const std::vector<T>& m() const { return m_; }
    const std::vector<T>& v() const { return v_; }
    void restore(std::vector<T> m, std::vector<T> v, std::int64_t step) {
        m_ = std::move(m);
        v_ = std::move(v);
        step_ = step;
    }

private:
    std::vector<T> m_;
    std::vector<T> v_;
    std::int64_t step_ = 0;
};

} // namespace mendkit
