#pragma once

// Define-by-run reverse-mode differentiation over Tensor values. Every op
// builds a Node holding its value, its inputs and a closure that pushes the
// node's adjoint into the inputs. The graph lives only as long as the Var
// handles that reference it; backward() releases closures as it goes.

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "epl/tensor.hpp"

namespace epl::ad {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

template <typename T>
class Var {
   public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    // Differentiable input (model parameter or test point).
    static Var leaf(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = true;
        return Var(std::move(n));
    }

    static Var constant(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        return Var(std::move(n));
    }

    static Var scalar(T v) { return constant(Tensor<T>::scalar(v)); }

    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool valid() const { return static_cast<bool>(node_); }

    // Accumulated adjoint; zeros when the node was never reached by backward.
    Tensor<T> grad() const {
        if (node_->grad.shape() == node_->value.shape()) return node_->grad;
        return Tensor<T>(node_->value.shape());
    }

    void zero_grad() { node_->grad = Tensor<T>(); }

    const NodePtr& node() const { return node_; }

   private:
    NodePtr node_;
};

// Registers a new node. Inputs and the adjoint rule are kept only when some
// input participates in differentiation.
template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
    if (n->requires_grad) {
        n->inputs.reserve(inputs.size());
        for (const auto& in : inputs) n->inputs.push_back(in.node());
        n->backward = std::move(backward);
    }
    return Var<T>(std::move(n));
}

template <typename T>
Var<T> detach(const Var<T>& x) {
    return Var<T>::constant(x.value());
}

// Reverse sweep from a scalar loss. Each node is visited exactly once, in
// reverse topological order.
template <typename T>
void backward(const Var<T>& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward seed must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // shared ownership keeps nodes alive while inputs are released below
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            auto child = node->inputs[next++];
            if (child->requires_grad && seen.insert(child.get()).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->grad_buffer()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>& n = **it;
        if (n.backward) {
            n.grad_buffer();
            n.backward(n);
            n.backward = nullptr;
            n.inputs.clear();
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
constexpr T guard() {
    return static_cast<T>(kGuardEpsilon);
}

template <typename T, typename F, typename DF>
Var<T> unary_op(const Var<T>& x, F f, DF df) {
    const Tensor<T>& xv = x.value();
    Tensor<T> y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
    return make_node<T>(std::move(y), {x}, [df](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * df(in.value[i], self.value[i]);
    });
}

// Layout of the two operands relative to the output; the first three cases
// skip the general strided walk.
enum class BroadcastKind { same, scalar_a, scalar_b, general };

template <typename T, typename F, typename DA, typename DB>
Var<T> binary_op(const Var<T>& a, const Var<T>& b, F f, DA da, DB db) {
    auto plan = make_broadcast_plan(a.shape(), b.shape());
    const Tensor<T>& av = a.value();
    const Tensor<T>& bv = b.value();
    const std::size_t total = shape_size(plan.out);
    const BroadcastKind kind = plan.same                               ? BroadcastKind::same
                               : av.size() == 1 && bv.size() == total ? BroadcastKind::scalar_a
                               : bv.size() == 1 && av.size() == total ? BroadcastKind::scalar_b
                                                                      : BroadcastKind::general;
    Tensor<T> y(plan.out);
    switch (kind) {
        case BroadcastKind::same:
            for (std::size_t i = 0; i < total; ++i) y[i] = f(av[i], bv[i]);
            break;
        case BroadcastKind::scalar_a:
            for (std::size_t i = 0; i < total; ++i) y[i] = f(av[0], bv[i]);
            break;
        case BroadcastKind::scalar_b:
            for (std::size_t i = 0; i < total; ++i) y[i] = f(av[i], bv[0]);
            break;
        case BroadcastKind::general:
            for_each_broadcast(plan.out, plan.stride_a, plan.stride_b,
                               [&](std::size_t o, std::size_t ia, std::size_t ib) { y[o] = f(av[ia], bv[ib]); });
    }
    return make_node<T>(std::move(y), {a, b}, [plan, kind, da, db](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        const auto& g = self.grad;
        const auto& yv = self.value;
        const auto& x1 = na.value;
        const auto& x2 = nb.value;
        const std::size_t total = g.size();
        // visits (output, a, b) offsets in the cheapest way the layout allows
        auto walk = [&](auto&& fn) {
            switch (kind) {
                case BroadcastKind::same:
                    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
                    break;
                case BroadcastKind::scalar_a:
                    for (std::size_t i = 0; i < total; ++i) fn(i, std::size_t{0}, i);
                    break;
                case BroadcastKind::scalar_b:
                    for (std::size_t i = 0; i < total; ++i) fn(i, i, std::size_t{0});
                    break;
                case BroadcastKind::general:
                    for_each_broadcast(plan.out, plan.stride_a, plan.stride_b, fn);
            }
        };
        if (na.requires_grad) {
            auto& ga = na.grad_buffer();
            walk([&](std::size_t o, std::size_t ia, std::size_t ib) { ga[ia] += g[o] * da(x1[ia], x2[ib], yv[o]); });
        }
        if (nb.requires_grad) {
            auto& gb = nb.grad_buffer();
            walk([&](std::size_t o, std::size_t ia, std::size_t ib) { gb[ib] += g[o] * db(x1[ia], x2[ib], yv[o]); });
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; },
        [](T, T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; },
        [](T, T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    auto out = binary_op(
        a, b, [](T x, T y) { return x / std::max(y, guard<T>()); },
        [](T, T y, T) { return T{1} / std::max(y, guard<T>()); },
        [](T x, T y, T) { return y > guard<T>() ? -x / (y * y) : T{0}; });
    if (!out.value().all_finite()) throw NumericError("non-finite division result");
    return out;
}

template <typename T>
Var<T> negate(const Var<T>& x) {
    return unary_op(x, [](T v) { return -v; }, [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
    return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
    return unary_op(
        x, [](T v) { return std::log(std::max(v, guard<T>())); },
        [](T v, T) { return v > guard<T>() ? T{1} / v : T{0}; });
}

template <typename T>
Var<T> log2(const Var<T>& x) {
    const T inv_ln2 = T{1} / std::log(T{2});
    return unary_op(
        x, [](T v) { return std::log2(std::max(v, guard<T>())); },
        [inv_ln2](T v, T) { return v > guard<T>() ? inv_ln2 / v : T{0}; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    return unary_op(
        x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
T softplus_value(T v) {
    return v > T{0} ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
    return unary_op(
        x, [](T v) { return softplus_value(v); },
        [](T v, T) { return T{1} / (T{1} + std::exp(-v)); });
}

template <typename T>
Var<T> power(const Var<T>& x, T p) {
    return unary_op(
        x, [p](T v) { return std::pow(v, p); }, [p](T v, T) { return p * std::pow(v, p - T{1}); });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a) { return negate(a); }

template <typename T>
Var<T> operator+(const Var<T>& a, T s) { return add(a, Var<T>::scalar(s)); }
template <typename T>
Var<T> operator+(T s, const Var<T>& a) { return add(Var<T>::scalar(s), a); }
template <typename T>
Var<T> operator-(const Var<T>& a, T s) { return sub(a, Var<T>::scalar(s)); }
template <typename T>
Var<T> operator-(T s, const Var<T>& a) { return sub(Var<T>::scalar(s), a); }
template <typename T>
Var<T> operator*(const Var<T>& a, T s) { return mul(a, Var<T>::scalar(s)); }
template <typename T>
Var<T> operator*(T s, const Var<T>& a) { return mul(Var<T>::scalar(s), a); }
template <typename T>
Var<T> operator/(const Var<T>& a, T s) { return div(a, Var<T>::scalar(s)); }
template <typename T>
Var<T> operator/(T s, const Var<T>& a) { return div(Var<T>::scalar(s), a); }

enum class ElementwiseKind { add, sub, mul, div, exp, log, log2, relu, softplus, negate, power };

// Dispatch by kind; unary kinds take one input, power takes the exponent.
template <typename T>
Var<T> elementwise(ElementwiseKind kind, const std::vector<Var<T>>& inputs, T exponent = T{2}) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n) throw ShapeError("elementwise op expects " + std::to_string(n) + " inputs");
    };
    switch (kind) {
        case ElementwiseKind::add: need(2); return add(inputs[0], inputs[1]);
        case ElementwiseKind::sub: need(2); return sub(inputs[0], inputs[1]);
        case ElementwiseKind::mul: need(2); return mul(inputs[0], inputs[1]);
        case ElementwiseKind::div: need(2); return div(inputs[0], inputs[1]);
        case ElementwiseKind::exp: need(1); return exp(inputs[0]);
        case ElementwiseKind::log: need(1); return log(inputs[0]);
        case ElementwiseKind::log2: need(1); return log2(inputs[0]);
        case ElementwiseKind::relu: need(1); return relu(inputs[0]);
        case ElementwiseKind::softplus: need(1); return softplus(inputs[0]);
        case ElementwiseKind::negate: need(1); return negate(inputs[0]);
        case ElementwiseKind::power: need(1); return power(inputs[0], exponent);
    }
    throw ShapeError("unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// Reductions. Reduced axes are kept with extent 1 so results broadcast back.

inline Shape reduced_shape(const Shape& in, const std::vector<std::size_t>& axes) {
    Shape out = in;
    for (auto ax : axes) {
        if (ax >= in.size()) throw ShapeError("reduction axis out of range");
        out[ax] = 1;
    }
    return out;
}

inline void check_reducible(const Shape& in, const std::vector<std::size_t>& axes) {
    if (shape_size(in) == 0) throw EmptyReductionError("reduction over empty tensor");
    for (auto ax : axes)
        if (ax < in.size() && in[ax] == 0) throw EmptyReductionError("reduction over empty axis");
}

template <typename T>
Var<T> sum(const Var<T>& x, const std::vector<std::size_t>& axes) {
    check_reducible(x.shape(), axes);
    Shape out_shape = reduced_shape(x.shape(), axes);
    const auto so = broadcast_strides(out_shape, x.shape());
    Tensor<T> y(out_shape);
    const auto& xv = x.value();
    for_each_broadcast(x.shape(), so, so,
                       [&](std::size_t i, std::size_t o, std::size_t) { y[o] += xv[i]; });
    return make_node<T>(std::move(y), {x}, [so](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for_each_broadcast(in.value.shape(), so, so,
                           [&](std::size_t i, std::size_t o, std::size_t) { g[i] += self.grad[o]; });
    });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    std::vector<std::size_t> axes(x.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    return reshape(sum(x, axes), Shape{1});
}

template <typename T>
Var<T> mean(const Var<T>& x, const std::vector<std::size_t>& axes) {
    check_reducible(x.shape(), axes);
    std::size_t count = 1;
    for (auto ax : axes) count *= x.shape()[ax];
    return sum(x, axes) * (T{1} / static_cast<T>(count));
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    if (x.size() == 0) throw EmptyReductionError("mean over empty tensor");
    return sum_all(x) * (T{1} / static_cast<T>(x.size()));
}

// Max along axes; the result carries no gradient (used for stabilization).
template <typename T>
Tensor<T> max_value(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    check_reducible(x.shape(), axes);
    Shape out_shape = reduced_shape(x.shape(), axes);
    const auto so = broadcast_strides(out_shape, x.shape());
    Tensor<T> y(out_shape, -std::numeric_limits<T>::infinity());
    for_each_broadcast(x.shape(), so, so, [&](std::size_t i, std::size_t o, std::size_t) {
        y[o] = std::max(y[o], x[i]);
    });
    return y;
}

// Index of the maximum along one axis; ties resolve to the lowest index.
struct Indices {
    Shape shape;
    std::vector<std::int64_t> values;
};

template <typename T>
Indices argmax(const Tensor<T>& x, std::size_t axis) {
    check_reducible(x.shape(), {axis});
    Shape out_shape = reduced_shape(x.shape(), {axis});
    const auto so = broadcast_strides(out_shape, x.shape());
    const std::size_t inner = row_major_strides(x.shape())[axis];
    Indices out{out_shape, std::vector<std::int64_t>(shape_size(out_shape), -1)};
    std::vector<T> best(out.values.size(), -std::numeric_limits<T>::infinity());
    for_each_broadcast(x.shape(), so, so, [&](std::size_t i, std::size_t o, std::size_t) {
        const auto k = static_cast<std::int64_t>((i / inner) % x.shape()[axis]);
        if (out.values[o] < 0 || x[i] > best[o]) {
            best[o] = x[i];
            out.values[o] = k;
        }
    });
    return out;
}

enum class ReduceKind { sum, mean, max };

template <typename T>
Var<T> reduce(ReduceKind kind, const Var<T>& x, const std::vector<std::size_t>& axes) {
    switch (kind) {
        case ReduceKind::sum: return sum(x, axes);
        case ReduceKind::mean: return mean(x, axes);
        case ReduceKind::max: return Var<T>::constant(max_value(x.value(), axes));
    }
    throw ShapeError("unknown reduction");
}

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> y = x.value().reshaped(std::move(shape));
    return make_node<T>(std::move(y), {x}, [](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// Contiguous range [start, start+len) along axis 0.
template <typename T>
Var<T> slice0(const Var<T>& x, std::size_t start, std::size_t len) {
    const Shape& s = x.shape();
    if (s.empty() || start + len > s[0]) throw ShapeError("slice out of range");
    const std::size_t row = shape_size(s) / s[0];
    Shape out_shape = s;
    out_shape[0] = len;
    Tensor<T> y(out_shape);
    std::copy_n(x.value().data() + start * row, len * row, y.data());
    return make_node<T>(std::move(y), {x}, [start, row](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * row + i] += self.grad[i];
    });
}

// Concatenation along axis 0; trailing extents must agree.
template <typename T>
Var<T> concat0(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat of no tensors");
    Shape out_shape = parts[0].shape();
    out_shape[0] = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != out_shape.size() ||
            !std::equal(p.shape().begin() + 1, p.shape().end(), out_shape.begin() + 1))
            throw ShapeError("concat trailing shape mismatch: " + shape_str(p.shape()));
        out_shape[0] += p.shape()[0];
    }
    Tensor<T> y(out_shape);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        std::copy_n(p.value().data(), p.size(), y.data() + off);
        off += p.size();
    }
    return make_node<T>(std::move(y), parts, [offsets](Node<T>& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            Node<T>& in = *self.inputs[k];
            if (!in.requires_grad) continue;
            auto& g = in.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
        }
    });
}

template <typename T>
using RowMajorMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMajorMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix<T>>;

template <typename T>
Var<T> transpose2d(const Var<T>& x) {
    if (x.shape().size() != 2) throw ShapeError("transpose2d expects rank 2");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    Tensor<T> y({c, r});
    MatrixMap<T>(y.data(), c, r) = ConstMatrixMap<T>(x.value().data(), r, c).transpose();
    return make_node<T>(std::move(y), {x}, [r, c](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        MatrixMap<T>(in.grad_buffer().data(), r, c) +=
            ConstMatrixMap<T>(self.grad.data(), c, r).transpose();
    });
}

// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<T> y({m, n});
    MatrixMap<T>(y.data(), m, n).noalias() =
        ConstMatrixMap<T>(a.value().data(), m, k) * ConstMatrixMap<T>(b.value().data(), k, n);
    return make_node<T>(std::move(y), {a, b}, [m, k, n](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        ConstMatrixMap<T> g(self.grad.data(), m, n);
        if (na.requires_grad)
            MatrixMap<T>(na.grad_buffer().data(), m, k).noalias() +=
                g * ConstMatrixMap<T>(nb.value.data(), k, n).transpose();
        if (nb.requires_grad)
            MatrixMap<T>(nb.grad_buffer().data(), k, n).noalias() +=
                ConstMatrixMap<T>(na.value.data(), m, k).transpose() * g;
    });
}

// Softmax along axis 0 restricted to classes where mask is 1; masked entries
// get probability 0. mask has shape [N] broadcast over the trailing axes.
template <typename T>
Var<T> masked_softmax0(const Var<T>& logits, const std::vector<bool>& mask) {
    const Shape& s = logits.shape();
    if (s.empty() || mask.size() != s[0]) throw ShapeError("softmax mask length mismatch");
    Shape mshape(s.size(), 1);
    mshape[0] = s[0];
    Tensor<T> m(mshape);
    bool any = false;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        m[i] = mask[i] ? T{1} : T{0};
        any = any || mask[i];
    }
    if (!any) throw DomainError("softmax over an empty class set");
    // stabilize with the max over valid classes (no gradient through the shift)
    Tensor<T> shifted_max(reduced_shape(s, {0}), -std::numeric_limits<T>::infinity());
    const std::size_t row = shape_size(s) / s[0];
    for (std::size_t c = 0; c < s[0]; ++c) {
        if (!mask[c]) continue;
        for (std::size_t i = 0; i < row; ++i)
            shifted_max[i] = std::max(shifted_max[i], logits.value()[c * row + i]);
    }
    auto mask_var = Var<T>::constant(std::move(m));
    auto e = exp(logits - Var<T>::constant(std::move(shifted_max))) * mask_var;
    return e / sum(e, {0});
}

}  // namespace epl::ad
