#pragma once

// Reverse-mode differentiation over a fixed primitive set.
//
// A Tape records every primitive application in construction order, so the
// node list is always topologically sorted. Leaves are either constants
// (never receive gradient) or trainable parameters. backward() walks the
// tape in reverse from a scalar loss and returns one gradient per trainable
// parameter; it does not consume the tape, so calling it twice yields
// identical gradients.
//
// A tape has a single owner. Forward construction and backward must not run
// concurrently on the same tape; use one tape per worker.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saeforge/tensor.hpp"

namespace saeforge {

enum class Primitive : std::uint8_t {
    leaf,
    matmul,       // (..., m, k) x (k, n) or batched (..., m, k) x (..., k, n)
    add,          // broadcasting: one operand's shape must be a suffix of the other's
    sub,
    mul,          // elementwise, same broadcasting as add
    scale,        // multiply by a constant scalar
    relu,
    gelu,         // tanh approximation
    exp,
    softmax,      // over the last dim
    log_softmax,  // over the last dim
    layer_norm,   // over the last dim, optional gain and bias inputs
    embedding,    // row gather from a (rows, d) table
    sum,
    mean,
    l1_norm,
    squared_l2,   // sum of squares
    mse,          // mean of squared differences
    concat,
    slice,
    reshape,
    transpose,    // swap the last two dims
    permute,
    causal_mask,  // -inf above the diagonal of the last two dims
};

const char* primitive_name(Primitive kind);

using NodeId = std::size_t;

// Per-primitive static arguments.
struct PrimitiveAttrs {
    double scalar = 0.0;                // scale factor, or layer-norm epsilon
    std::vector<std::size_t> axes;      // permute order; {axis, begin, end} for slice; {axis} for concat
    std::vector<std::int32_t> indices;  // embedding row ids
    Shape shape;                        // reshape target, or the embedding index shape
};

template <typename T>
class Tape;

// Handle to a tensor recorded on a tape. This is the tape-attached form of a
// Tensor: id() is its tape_id.
template <typename T>
class Var {
public:
    Var() = default;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    NodeId id() const { return id_; }
    Tape<T>* tape() const { return tape_; }
    bool requires_grad() const;
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    NodeId id_ = 0;
};

template <typename T>
using GradientMap = std::map<NodeId, Tensor<T>>;

template <typename T>
class Tape {
public:
    struct Node {
        Primitive kind = Primitive::leaf;
        std::vector<NodeId> inputs;
        Tensor<T> value;
        std::vector<Tensor<T>> saved;
        PrimitiveAttrs attrs;
        bool requires_grad = false;
        bool trainable = false;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> parameter(Tensor<T> value);

    // Applies a primitive and records the result. The output requires
    // gradient when any input does. Throws ShapeError naming the primitive
    // and shapes on mismatch.
    Var<T> apply(Primitive kind, std::span<const Var<T>> inputs, const PrimitiveAttrs& attrs = {});

    // Gradients of a scalar loss with respect to every trainable parameter.
    GradientMap<T> backward(const Var<T>& loss) const;

    const Node& node(NodeId id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }
    std::vector<NodeId> parameters() const;

private:
    Var<T> push_leaf(Tensor<T> value, bool trainable);

    std::deque<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->node(id_).value;
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape_->node(id_).requires_grad;
}

// Gradient for a parameter handle; throws if the map has no entry.
template <typename T>
const Tensor<T>& grad_of(const GradientMap<T>& grads, const Var<T>& param);

namespace ops {

template <typename T>
Var<T> apply1(Primitive kind, const Var<T>& a, const PrimitiveAttrs& attrs = {}) {
    const Var<T> in[] = {a};
    return a.tape()->apply(kind, in, attrs);
}

template <typename T>
Var<T> apply2(Primitive kind, const Var<T>& a, const Var<T>& b, const PrimitiveAttrs& attrs = {}) {
    const Var<T> in[] = {a, b};
    return a.tape()->apply(kind, in, attrs);
}

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b) { return apply2(Primitive::matmul, a, b); }
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b) { return apply2(Primitive::add, a, b); }
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b) { return apply2(Primitive::sub, a, b); }
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b) { return apply2(Primitive::mul, a, b); }
template <typename T> Var<T> relu(const Var<T>& a) { return apply1(Primitive::relu, a); }
template <typename T> Var<T> gelu(const Var<T>& a) { return apply1(Primitive::gelu, a); }
template <typename T> Var<T> exp(const Var<T>& a) { return apply1(Primitive::exp, a); }
template <typename T> Var<T> softmax(const Var<T>& a) { return apply1(Primitive::softmax, a); }
template <typename T> Var<T> log_softmax(const Var<T>& a) { return apply1(Primitive::log_softmax, a); }
template <typename T> Var<T> sum(const Var<T>& a) { return apply1(Primitive::sum, a); }
template <typename T> Var<T> mean(const Var<T>& a) { return apply1(Primitive::mean, a); }
template <typename T> Var<T> l1_norm(const Var<T>& a) { return apply1(Primitive::l1_norm, a); }
template <typename T> Var<T> squared_l2(const Var<T>& a) { return apply1(Primitive::squared_l2, a); }
template <typename T> Var<T> mse(const Var<T>& a, const Var<T>& b) { return apply2(Primitive::mse, a, b); }
template <typename T> Var<T> transpose(const Var<T>& a) { return apply1(Primitive::transpose, a); }
template <typename T> Var<T> causal_mask(const Var<T>& a) { return apply1(Primitive::causal_mask, a); }

template <typename T>
Var<T> scale(const Var<T>& a, double factor) {
    PrimitiveAttrs attrs;
    attrs.scalar = factor;
    return apply1(Primitive::scale, a, attrs);
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, double eps) {
    PrimitiveAttrs attrs;
    attrs.scalar = eps;
    return apply1(Primitive::layer_norm, x, attrs);
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
    PrimitiveAttrs attrs;
    attrs.scalar = eps;
    const Var<T> in[] = {x, gain, bias};
    return x.tape()->apply(Primitive::layer_norm, in, attrs);
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::vector<std::int32_t> indices, Shape index_shape) {
    PrimitiveAttrs attrs;
    attrs.indices = std::move(indices);
    attrs.shape = std::move(index_shape);
    return apply1(Primitive::embedding, table, attrs);
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
    PrimitiveAttrs attrs;
    attrs.axes = {axis};
    return parts.front().tape()->apply(Primitive::concat, parts, attrs);
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    PrimitiveAttrs attrs;
    attrs.axes = {axis, begin, end};
    return apply1(Primitive::slice, a, attrs);
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    PrimitiveAttrs attrs;
    attrs.shape = std::move(shape);
    return apply1(Primitive::reshape, a, attrs);
}

template <typename T>
Var<T> permute(const Var<T>& a, std::vector<std::size_t> order) {
    PrimitiveAttrs attrs;
    attrs.axes = std::move(order);
    return apply1(Primitive::permute, a, attrs);
}

}  // namespace ops

}  // namespace saeforge
