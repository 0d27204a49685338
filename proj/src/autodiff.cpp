#include "saeforge/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace saeforge {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

[[noreturn]] void shape_fail(Primitive kind, const std::string& detail) {
    throw ShapeError(std::string(primitive_name(kind)) + ": " + detail);
}

std::string shapes_of(const std::vector<Shape>& shapes) {
    std::string out;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (i) {
            out += " and ";
        }
        out += shape_str(shapes[i]);
    }
    return out;
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) {
        return false;
    }
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Strides for a row-major shape.
std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) {
        st[i - 1] = st[i] * s[i];
    }
    return st;
}

// out[j] = in[i] where out's axis a is in's axis order[a].
template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& in, const std::vector<std::size_t>& order) {
    const Shape& is = in.shape();
    Shape os(order.size());
    for (std::size_t a = 0; a < order.size(); ++a) {
        os[a] = is[order[a]];
    }
    const auto in_strides = strides_of(is);
    std::vector<std::size_t> src_stride(order.size());
    for (std::size_t a = 0; a < order.size(); ++a) {
        src_stride[a] = in_strides[order[a]];
    }
    Tensor<T> out(os);
    const std::size_t n = out.numel();
    const std::size_t rank = os.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    auto src_data = in.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        dst[i] = src_data[src];
        for (std::size_t a = rank; a-- > 0;) {
            if (++idx[a] < os[a]) {
                src += src_stride[a];
                break;
            }
            src -= src_stride[a] * (os[a] - 1);
            idx[a] = 0;
        }
    }
    return out;
}

std::vector<std::size_t> inverse_order(const std::vector<std::size_t>& order) {
    std::vector<std::size_t> inv(order.size());
    for (std::size_t a = 0; a < order.size(); ++a) {
        inv[order[a]] = a;
    }
    return inv;
}

std::vector<std::size_t> swap_last_two(std::size_t rank) {
    std::vector<std::size_t> order(rank);
    std::iota(order.begin(), order.end(), 0);
    std::swap(order[rank - 1], order[rank - 2]);
    return order;
}

// Reduces a broadcast gradient of shape `big` down to the suffix shape `small`.
template <typename T>
Tensor<T> reduce_to_suffix(const Tensor<T>& g, const Shape& small) {
    if (g.shape() == small) {
        return g;
    }
    Tensor<T> out(small);
    const std::size_t inner = out.numel();
    auto src = g.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i % inner] += src[i];
    }
    return out;
}

// Slice geometry: [outer, axis_len, inner] view of a tensor along `axis`.
struct AxisView {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
    AxisView v;
    for (std::size_t a = 0; a < axis; ++a) {
        v.outer *= s[a];
    }
    v.len = s[axis];
    for (std::size_t a = axis + 1; a < s.size(); ++a) {
        v.inner *= s[a];
    }
    return v;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

const char* primitive_name(Primitive kind) {
    switch (kind) {
        case Primitive::leaf: return "leaf";
        case Primitive::matmul: return "matmul";
        case Primitive::add: return "add";
        case Primitive::sub: return "sub";
        case Primitive::mul: return "mul";
        case Primitive::scale: return "scale";
        case Primitive::relu: return "relu";
        case Primitive::gelu: return "gelu";
        case Primitive::exp: return "exp";
        case Primitive::softmax: return "softmax";
        case Primitive::log_softmax: return "log_softmax";
        case Primitive::layer_norm: return "layer_norm";
        case Primitive::embedding: return "embedding";
        case Primitive::sum: return "sum";
        case Primitive::mean: return "mean";
        case Primitive::l1_norm: return "l1_norm";
        case Primitive::squared_l2: return "squared_l2";
        case Primitive::mse: return "mse";
        case Primitive::concat: return "concat";
        case Primitive::slice: return "slice";
        case Primitive::reshape: return "reshape";
        case Primitive::transpose: return "transpose";
        case Primitive::permute: return "permute";
        case Primitive::causal_mask: return "causal_mask";
    }
    return "unknown";
}

template <typename T>
Var<T> Tape<T>::push_leaf(Tensor<T> value, bool trainable) {
    Node n;
    n.kind = Primitive::leaf;
    n.value = std::move(value);
    n.requires_grad = trainable;
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    return push_leaf(std::move(value), false);
}

template <typename T>
Var<T> Tape<T>::parameter(Tensor<T> value) {
    return push_leaf(std::move(value), true);
}

template <typename T>
std::vector<NodeId> Tape<T>::parameters() const {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].trainable) {
            out.push_back(i);
        }
    }
    return out;
}

template <typename T>
Var<T> Tape<T>::apply(Primitive kind, std::span<const Var<T>> inputs, const PrimitiveAttrs& attrs) {
    std::vector<Shape> shapes;
    for (const auto& v : inputs) {
        if (v.tape() != this) {
            shape_fail(kind, "input belongs to a different tape");
        }
        shapes.push_back(v.shape());
    }
    auto in = [&](std::size_t i) -> const Tensor<T>& { return nodes_[inputs[i].id()].value; };
    auto expect_arity = [&](std::size_t n) {
        if (inputs.size() != n) {
            shape_fail(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
        }
    };

    Node node;
    node.kind = kind;
    node.attrs = attrs;
    for (const auto& v : inputs) {
        node.inputs.push_back(v.id());
        node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
    }

    switch (kind) {
        case Primitive::leaf:
            shape_fail(kind, "leaves are created with constant() or parameter()");

        case Primitive::matmul: {
            expect_arity(2);
            const Shape& as = shapes[0];
            const Shape& bs = shapes[1];
            if (as.size() < 2 || bs.size() < 2 || as.back() != bs[bs.size() - 2]) {
                shape_fail(kind, "incompatible shapes " + shapes_of(shapes));
            }
            const std::size_t m = as[as.size() - 2];
            const std::size_t k = as.back();
            const std::size_t n = bs.back();
            Shape os = as;
            os.back() = n;
            Tensor<T> out(os);
            if (bs.size() == 2) {
                const std::size_t rows = in(0).numel() / k;
                ConstMap<T> A(in(0).data().data(), rows, k);
                ConstMap<T> B(in(1).data().data(), k, n);
                MutMap<T> C(out.data().data(), rows, n);
                C.noalias() = A * B;
            } else {
                if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
                    shape_fail(kind, "batched operands need equal leading dims, got " + shapes_of(shapes));
                }
                const std::size_t batch = in(0).numel() / (m * k);
                for (std::size_t b = 0; b < batch; ++b) {
                    ConstMap<T> A(in(0).data().data() + b * m * k, m, k);
                    ConstMap<T> B(in(1).data().data() + b * k * n, k, n);
                    MutMap<T> C(out.data().data() + b * m * n, m, n);
                    C.noalias() = A * B;
                }
            }
            node.value = std::move(out);
            break;
        }

        case Primitive::add:
        case Primitive::sub:
        case Primitive::mul: {
            expect_arity(2);
            const bool b_small = is_suffix(shapes[1], shapes[0]);
            const bool a_small = is_suffix(shapes[0], shapes[1]);
            if (!b_small && !a_small) {
                shape_fail(kind, "cannot broadcast " + shapes_of(shapes));
            }
            const Tensor<T>& big = b_small ? in(0) : in(1);
            const Tensor<T>& small = b_small ? in(1) : in(0);
            Tensor<T> out(big.shape());
            const std::size_t inner = small.numel();
            auto o = out.data();
            auto x = big.data();
            auto y = small.data();
            // Operand order matters for sub.
            for (std::size_t i = 0; i < o.size(); ++i) {
                const T lhs = b_small ? x[i] : y[i % inner];
                const T rhs = b_small ? y[i % inner] : x[i];
                o[i] = kind == Primitive::add ? lhs + rhs : kind == Primitive::sub ? lhs - rhs : lhs * rhs;
            }
            node.value = std::move(out);
            break;
        }

        case Primitive::scale: {
            expect_arity(1);
            Tensor<T> out = in(0);
            const T s = static_cast<T>(attrs.scalar);
            for (auto& v : out.data()) {
                v *= s;
            }
            node.value = std::move(out);
            break;
        }

        case Primitive::relu:
        case Primitive::gelu:
        case Primitive::exp: {
            expect_arity(1);
            Tensor<T> out = in(0);
            for (auto& v : out.data()) {
                if (kind == Primitive::relu) {
                    v = v > T{0} ? v : T{0};
                } else if (kind == Primitive::exp) {
                    v = std::exp(v);
                } else {
                    const T t = std::tanh(static_cast<T>(kGeluC) * (v + static_cast<T>(kGeluA) * v * v * v));
                    v = T{0.5} * v * (T{1} + t);
                }
            }
            node.value = std::move(out);
            break;
        }

        case Primitive::softmax:
        case Primitive::log_softmax: {
            expect_arity(1);
            if (shapes[0].empty()) {
                shape_fail(kind, "needs rank >= 1, got " + shape_str(shapes[0]));
            }
            Tensor<T> out = in(0);
            const std::size_t d = shapes[0].back();
            auto o = out.data();
            for (std::size_t r = 0; r < o.size() / d; ++r) {
                T* row = o.data() + r * d;
                const T mx = *std::max_element(row, row + d);
                T total = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    total += std::exp(row[j] - mx);
                }
                if (kind == Primitive::softmax) {
                    for (std::size_t j = 0; j < d; ++j) {
                        row[j] = std::exp(row[j] - mx) / total;
                    }
                } else {
                    const T lse = mx + std::log(total);
                    for (std::size_t j = 0; j < d; ++j) {
                        row[j] -= lse;
                    }
                }
            }
            node.value = std::move(out);
            break;
        }

        case Primitive::layer_norm: {
            if (inputs.size() != 1 && inputs.size() != 3) {
                shape_fail(kind, "expected 1 or 3 inputs");
            }
            if (shapes[0].empty()) {
                shape_fail(kind, "needs rank >= 1");
            }
            const std::size_t d = shapes[0].back();
            if (inputs.size() == 3 && (shapes[1] != Shape{d} || shapes[2] != Shape{d})) {
                shape_fail(kind, "gain/bias must have shape (" + std::to_string(d) + "), got " + shapes_of(shapes));
            }
            const std::size_t rows = in(0).numel() / d;
            Tensor<T> xhat(shapes[0]);
            Tensor<T> inv_std(Shape{rows});
            auto x = in(0).data();
            auto xh = xhat.data();
            const T eps = static_cast<T>(attrs.scalar);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* row = x.data() + r * d;
                T mu = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    mu += row[j];
                }
                mu /= static_cast<T>(d);
                T var = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    var += (row[j] - mu) * (row[j] - mu);
                }
                var /= static_cast<T>(d);
                const T is = T{1} / std::sqrt(var + eps);
                inv_std[r] = is;
                for (std::size_t j = 0; j < d; ++j) {
                    xh[r * d + j] = (row[j] - mu) * is;
                }
            }
            Tensor<T> out = xhat;
            if (inputs.size() == 3) {
                auto o = out.data();
                auto g = in(1).data();
                auto b = in(2).data();
                for (std::size_t i = 0; i < o.size(); ++i) {
                    o[i] = o[i] * g[i % d] + b[i % d];
                }
            }
            node.value = std::move(out);
            node.saved = {std::move(xhat), std::move(inv_std)};
            break;
        }

        case Primitive::embedding: {
            expect_arity(1);
            if (shapes[0].size() != 2) {
                shape_fail(kind, "table must be rank 2, got " + shape_str(shapes[0]));
            }
            if (shape_numel(attrs.shape) != attrs.indices.size()) {
                shape_fail(kind, "index shape " + shape_str(attrs.shape) + " does not match " +
                                     std::to_string(attrs.indices.size()) + " indices");
            }
            const std::size_t rows = shapes[0][0];
            const std::size_t d = shapes[0][1];
            Shape os = attrs.shape;
            os.push_back(d);
            Tensor<T> out(os);
            auto table = in(0).data();
            auto o = out.data();
            for (std::size_t i = 0; i < attrs.indices.size(); ++i) {
                const auto id = attrs.indices[i];
                if (id < 0 || static_cast<std::size_t>(id) >= rows) {
                    shape_fail(kind, "index " + std::to_string(id) + " out of range for table " + shape_str(shapes[0]));
                }
                std::copy_n(table.data() + static_cast<std::size_t>(id) * d, d, o.data() + i * d);
            }
            node.value = std::move(out);
            break;
        }

        case Primitive::sum:
        case Primitive::mean:
        case Primitive::l1_norm:
        case Primitive::squared_l2: {
            expect_arity(1);
            T acc = 0;
            for (auto v : in(0).data()) {
                acc += kind == Primitive::l1_norm ? std::abs(v) : kind == Primitive::squared_l2 ? v * v : v;
            }
            if (kind == Primitive::mean) {
                acc /= static_cast<T>(in(0).numel());
            }
            node.value = Tensor<T>::scalar(acc);
            break;
        }

        case Primitive::mse: {
            expect_arity(2);
            if (shapes[0] != shapes[1]) {
                shape_fail(kind, "shape mismatch " + shapes_of(shapes));
            }
            T acc = 0;
            auto a = in(0).data();
            auto b = in(1).data();
            for (std::size_t i = 0; i < a.size(); ++i) {
                acc += (a[i] - b[i]) * (a[i] - b[i]);
            }
            node.value = Tensor<T>::scalar(acc / static_cast<T>(a.size()));
            break;
        }

        case Primitive::concat: {
            if (inputs.empty() || attrs.axes.size() != 1) {
                shape_fail(kind, "needs at least one input and one axis");
            }
            const std::size_t axis = attrs.axes[0];
            Shape os = shapes[0];
            if (axis >= os.size()) {
                shape_fail(kind, "axis out of range for " + shape_str(os));
            }
            os[axis] = 0;
            for (const auto& s : shapes) {
                Shape a = s;
                Shape b = shapes[0];
                if (a.size() != b.size()) {
                    shape_fail(kind, "rank mismatch " + shapes_of(shapes));
                }
                a[axis] = b[axis] = 0;
                if (a != b) {
                    shape_fail(kind, "incompatible shapes " + shapes_of(shapes));
                }
                os[axis] += s[axis];
            }
            Tensor<T> out(os);
            const auto ov = axis_view(os, axis);
            std::size_t offset = 0;
            for (std::size_t p = 0; p < inputs.size(); ++p) {
                const auto iv = axis_view(shapes[p], axis);
                auto src = in(p).data();
                for (std::size_t o = 0; o < iv.outer; ++o) {
                    std::copy_n(src.data() + o * iv.len * iv.inner, iv.len * iv.inner,
                                out.data().data() + (o * ov.len + offset) * ov.inner);
                }
                offset += iv.len;
            }
            node.value = std::move(out);
            break;
        }

        case Primitive::slice: {
            expect_arity(1);
            if (attrs.axes.size() != 3) {
                shape_fail(kind, "needs {axis, begin, end}");
            }
            const std::size_t axis = attrs.axes[0];
            const std::size_t begin = attrs.axes[1];
            const std::size_t end = attrs.axes[2];
            if (axis >= shapes[0].size() || begin > end || end > shapes[0][axis]) {
                shape_fail(kind, "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                                     std::to_string(axis) + " invalid for " + shape_str(shapes[0]));
            }
            Shape os = shapes[0];
            os[axis] = end - begin;
            Tensor<T> out(os);
            const auto iv = axis_view(shapes[0], axis);
            const std::size_t len = end - begin;
            for (std::size_t o = 0; o < iv.outer; ++o) {
                std::copy_n(in(0).data().data() + (o * iv.len + begin) * iv.inner, len * iv.inner,
                            out.data().data() + o * len * iv.inner);
            }
            node.value = std::move(out);
            break;
        }

        case Primitive::reshape: {
            expect_arity(1);
            if (shape_numel(attrs.shape) != in(0).numel()) {
                shape_fail(kind, "cannot reshape " + shape_str(shapes[0]) + " to " + shape_str(attrs.shape));
            }
            node.value = in(0).reshaped(attrs.shape);
            break;
        }

        case Primitive::transpose: {
            expect_arity(1);
            if (shapes[0].size() < 2) {
                shape_fail(kind, "needs rank >= 2, got " + shape_str(shapes[0]));
            }
            node.value = permute_tensor(in(0), swap_last_two(shapes[0].size()));
            break;
        }

        case Primitive::permute: {
            expect_arity(1);
            auto sorted = attrs.axes;
            std::sort(sorted.begin(), sorted.end());
            bool valid = sorted.size() == shapes[0].size();
            for (std::size_t a = 0; valid && a < sorted.size(); ++a) {
                valid = sorted[a] == a;
            }
            if (!valid) {
                shape_fail(kind, "order is not a permutation of the axes of " + shape_str(shapes[0]));
            }
            node.value = permute_tensor(in(0), attrs.axes);
            break;
        }

        case Primitive::causal_mask: {
            expect_arity(1);
            if (shapes[0].size() < 2) {
                shape_fail(kind, "needs rank >= 2, got " + shape_str(shapes[0]));
            }
            Tensor<T> out = in(0);
            const std::size_t q = shapes[0][shapes[0].size() - 2];
            const std::size_t k = shapes[0].back();
            auto o = out.data();
            for (std::size_t b = 0; b < o.size() / (q * k); ++b) {
                for (std::size_t i = 0; i < q; ++i) {
                    for (std::size_t j = i + 1; j < k; ++j) {
                        o[(b * q + i) * k + j] = -std::numeric_limits<T>::infinity();
                    }
                }
            }
            node.value = std::move(out);
            break;
        }
    }

    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
GradientMap<T> Tape<T>::backward(const Var<T>& loss) const {
    if (loss.tape() != this || loss.id() >= nodes_.size()) {
        throw std::invalid_argument("backward: loss is not on this tape");
    }
    if (nodes_[loss.id()].value.numel() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                    shape_str(nodes_[loss.id()].value.shape()));
    }

    std::vector<std::optional<Tensor<T>>> grads(loss.id() + 1);
    grads[loss.id()] = Tensor<T>::full(nodes_[loss.id()].value.shape(), T{1});

    auto accumulate = [&](NodeId id, Tensor<T> g) {
        if (!nodes_[id].requires_grad) {
            return;
        }
        auto& slot = grads[id];
        if (!slot) {
            slot = std::move(g);
            return;
        }
        auto dst = slot->data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] += src[i];
        }
    };

    for (NodeId id = loss.id() + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!grads[id] || !node.requires_grad || node.kind == Primitive::leaf) {
            continue;
        }
        const Tensor<T> g = std::move(*grads[id]);
        if (!node.trainable) {
            grads[id].reset();
        }
        auto in = [&](std::size_t i) -> const Tensor<T>& { return nodes_[node.inputs[i]].value; };
        auto needs = [&](std::size_t i) { return nodes_[node.inputs[i]].requires_grad; };
        const Tensor<T>& y = node.value;

        switch (node.kind) {
            case Primitive::leaf:
                break;

            case Primitive::matmul: {
                const Shape& as = in(0).shape();
                const Shape& bs = in(1).shape();
                const std::size_t m = as[as.size() - 2];
                const std::size_t k = as.back();
                const std::size_t n = bs.back();
                if (bs.size() == 2) {
                    const std::size_t rows = in(0).numel() / k;
                    ConstMap<T> A(in(0).data().data(), rows, k);
                    ConstMap<T> B(in(1).data().data(), k, n);
                    ConstMap<T> G(g.data().data(), rows, n);
                    if (needs(0)) {
                        Tensor<T> ga(as);
                        MutMap<T>(ga.data().data(), rows, k).noalias() = G * B.transpose();
                        accumulate(node.inputs[0], std::move(ga));
                    }
                    if (needs(1)) {
                        Tensor<T> gb(bs);
                        MutMap<T>(gb.data().data(), k, n).noalias() = A.transpose() * G;
                        accumulate(node.inputs[1], std::move(gb));
                    }
                } else {
                    const std::size_t batch = in(0).numel() / (m * k);
                    Tensor<T> ga(needs(0) ? as : Shape{});
                    Tensor<T> gb(needs(1) ? bs : Shape{});
                    for (std::size_t b = 0; b < batch; ++b) {
                        ConstMap<T> A(in(0).data().data() + b * m * k, m, k);
                        ConstMap<T> B(in(1).data().data() + b * k * n, k, n);
                        ConstMap<T> G(g.data().data() + b * m * n, m, n);
                        if (needs(0)) {
                            MutMap<T>(ga.data().data() + b * m * k, m, k).noalias() = G * B.transpose();
                        }
                        if (needs(1)) {
                            MutMap<T>(gb.data().data() + b * k * n, k, n).noalias() = A.transpose() * G;
                        }
                    }
                    if (needs(0)) {
                        accumulate(node.inputs[0], std::move(ga));
                    }
                    if (needs(1)) {
                        accumulate(node.inputs[1], std::move(gb));
                    }
                }
                break;
            }

            case Primitive::add:
            case Primitive::sub: {
                const T sign_b = node.kind == Primitive::sub ? T{-1} : T{1};
                if (needs(0)) {
                    accumulate(node.inputs[0], reduce_to_suffix(g, in(0).shape()));
                }
                if (needs(1)) {
                    Tensor<T> gb = reduce_to_suffix(g, in(1).shape());
                    if (sign_b != T{1}) {
                        for (auto& v : gb.data()) {
                            v = -v;
                        }
                    }
                    accumulate(node.inputs[1], std::move(gb));
                }
                break;
            }

            case Primitive::mul: {
                for (std::size_t side = 0; side < 2; ++side) {
                    if (!needs(side)) {
                        continue;
                    }
                    const Tensor<T>& other = in(1 - side);
                    Tensor<T> full(g.shape());
                    auto f = full.data();
                    auto gd = g.data();
                    auto od = other.data();
                    const std::size_t on = other.numel();
                    for (std::size_t i = 0; i < f.size(); ++i) {
                        f[i] = gd[i] * od[i % on];
                    }
                    accumulate(node.inputs[side], reduce_to_suffix(full, in(side).shape()));
                }
                break;
            }

            case Primitive::scale: {
                Tensor<T> ga = g;
                const T s = static_cast<T>(node.attrs.scalar);
                for (auto& v : ga.data()) {
                    v *= s;
                }
                accumulate(node.inputs[0], std::move(ga));
                break;
            }

            case Primitive::relu:
            case Primitive::gelu:
            case Primitive::exp: {
                Tensor<T> ga = g;
                auto gd = ga.data();
                auto x = in(0).data();
                auto yd = y.data();
                for (std::size_t i = 0; i < gd.size(); ++i) {
                    if (node.kind == Primitive::relu) {
                        // Derivative at exactly zero is taken as zero.
                        gd[i] = x[i] > T{0} ? gd[i] : T{0};
                    } else if (node.kind == Primitive::exp) {
                        gd[i] *= yd[i];
                    } else {
                        const T v = x[i];
                        const T c = static_cast<T>(kGeluC);
                        const T a = static_cast<T>(kGeluA);
                        const T t = std::tanh(c * (v + a * v * v * v));
                        const T dt = (T{1} - t * t) * c * (T{1} + T{3} * a * v * v);
                        gd[i] *= T{0.5} * (T{1} + t) + T{0.5} * v * dt;
                    }
                }
                accumulate(node.inputs[0], std::move(ga));
                break;
            }

            case Primitive::softmax:
            case Primitive::log_softmax: {
                const std::size_t d = y.shape().back();
                Tensor<T> ga(y.shape());
                auto gd = g.data();
                auto yd = y.data();
                auto out = ga.data();
                for (std::size_t r = 0; r < yd.size() / d; ++r) {
                    const std::size_t o = r * d;
                    if (node.kind == Primitive::softmax) {
                        T dot = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                            dot += gd[o + j] * yd[o + j];
                        }
                        for (std::size_t j = 0; j < d; ++j) {
                            out[o + j] = yd[o + j] * (gd[o + j] - dot);
                        }
                    } else {
                        T gs = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                            gs += gd[o + j];
                        }
                        for (std::size_t j = 0; j < d; ++j) {
                            out[o + j] = gd[o + j] - std::exp(yd[o + j]) * gs;
                        }
                    }
                }
                accumulate(node.inputs[0], std::move(ga));
                break;
            }

            case Primitive::layer_norm: {
                const Tensor<T>& xhat = node.saved[0];
                const Tensor<T>& inv_std = node.saved[1];
                const std::size_t d = xhat.shape().back();
                const std::size_t rows = xhat.numel() / d;
                const bool affine = node.inputs.size() == 3;
                auto gd = g.data();
                auto xh = xhat.data();
                if (affine && needs(1)) {
                    Tensor<T> gg(Shape{d});
                    for (std::size_t i = 0; i < gd.size(); ++i) {
                        gg[i % d] += gd[i] * xh[i];
                    }
                    accumulate(node.inputs[1], std::move(gg));
                }
                if (affine && needs(2)) {
                    accumulate(node.inputs[2], reduce_to_suffix(g, Shape{d}));
                }
                if (needs(0)) {
                    Tensor<T> gx(xhat.shape());
                    auto gxd = gx.data();
                    std::vector<T> dxh(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                        T mean_d = 0;
                        T mean_dx = 0;
                        for (std::size_t j = 0; j < d; ++j) {
                            const std::size_t i = r * d + j;
                            dxh[j] = affine ? gd[i] * in(1)[j] : gd[i];
                            mean_d += dxh[j];
                            mean_dx += dxh[j] * xh[i];
                        }
                        mean_d /= static_cast<T>(d);
                        mean_dx /= static_cast<T>(d);
                        for (std::size_t j = 0; j < d; ++j) {
                            const std::size_t i = r * d + j;
                            gxd[i] = inv_std[r] * (dxh[j] - mean_d - xh[i] * mean_dx);
                        }
                    }
                    accumulate(node.inputs[0], std::move(gx));
                }
                break;
            }

            case Primitive::embedding: {
                const std::size_t d = in(0).shape()[1];
                Tensor<T> gt(in(0).shape());
                auto gd = g.data();
                auto out = gt.data();
                for (std::size_t i = 0; i < node.attrs.indices.size(); ++i) {
                    const std::size_t row = static_cast<std::size_t>(node.attrs.indices[i]);
                    for (std::size_t j = 0; j < d; ++j) {
                        out[row * d + j] += gd[i * d + j];
                    }
                }
                accumulate(node.inputs[0], std::move(gt));
                break;
            }

            case Primitive::sum:
            case Primitive::mean:
            case Primitive::l1_norm:
            case Primitive::squared_l2: {
                const T gs = g[0];
                Tensor<T> ga(in(0).shape());
                auto out = ga.data();
                auto x = in(0).data();
                const T inv_n = T{1} / static_cast<T>(x.size());
                for (std::size_t i = 0; i < out.size(); ++i) {
                    switch (node.kind) {
                        case Primitive::sum: out[i] = gs; break;
                        case Primitive::mean: out[i] = gs * inv_n; break;
                        case Primitive::l1_norm:
                            out[i] = x[i] > T{0} ? gs : x[i] < T{0} ? -gs : T{0};
                            break;
                        default: out[i] = T{2} * x[i] * gs; break;
                    }
                }
                accumulate(node.inputs[0], std::move(ga));
                break;
            }

            case Primitive::mse: {
                const T coef = T{2} * g[0] / static_cast<T>(in(0).numel());
                for (std::size_t side = 0; side < 2; ++side) {
                    if (!needs(side)) {
                        continue;
                    }
                    Tensor<T> ga(in(0).shape());
                    auto a = in(0).data();
                    auto b = in(1).data();
                    const T sign = side == 0 ? T{1} : T{-1};
                    for (std::size_t i = 0; i < a.size(); ++i) {
                        ga[i] = sign * coef * (a[i] - b[i]);
                    }
                    accumulate(node.inputs[side], std::move(ga));
                }
                break;
            }

            case Primitive::concat: {
                const std::size_t axis = node.attrs.axes[0];
                const auto ov = axis_view(y.shape(), axis);
                std::size_t offset = 0;
                for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                    const auto iv = axis_view(in(p).shape(), axis);
                    if (needs(p)) {
                        Tensor<T> gp(in(p).shape());
                        for (std::size_t o = 0; o < iv.outer; ++o) {
                            std::copy_n(g.data().data() + (o * ov.len + offset) * ov.inner, iv.len * iv.inner,
                                        gp.data().data() + o * iv.len * iv.inner);
                        }
                        accumulate(node.inputs[p], std::move(gp));
                    }
                    offset += iv.len;
                }
                break;
            }

            case Primitive::slice: {
                const std::size_t axis = node.attrs.axes[0];
                const std::size_t begin = node.attrs.axes[1];
                const std::size_t len = node.attrs.axes[2] - begin;
                const auto iv = axis_view(in(0).shape(), axis);
                Tensor<T> ga(in(0).shape());
                for (std::size_t o = 0; o < iv.outer; ++o) {
                    std::copy_n(g.data().data() + o * len * iv.inner, len * iv.inner,
                                ga.data().data() + (o * iv.len + begin) * iv.inner);
                }
                accumulate(node.inputs[0], std::move(ga));
                break;
            }

            case Primitive::reshape:
                accumulate(node.inputs[0], g.reshaped(in(0).shape()));
                break;

            case Primitive::transpose:
                accumulate(node.inputs[0], permute_tensor(g, swap_last_two(g.rank())));
                break;

            case Primitive::permute:
                accumulate(node.inputs[0], permute_tensor(g, inverse_order(node.attrs.axes)));
                break;

            case Primitive::causal_mask: {
                Tensor<T> ga = g;
                const std::size_t q = ga.shape()[ga.rank() - 2];
                const std::size_t k = ga.shape().back();
                auto gd = ga.data();
                for (std::size_t b = 0; b < gd.size() / (q * k); ++b) {
                    for (std::size_t i = 0; i < q; ++i) {
                        for (std::size_t j = i + 1; j < k; ++j) {
                            gd[(b * q + i) * k + j] = T{0};
                        }
                    }
                }
                accumulate(node.inputs[0], std::move(ga));
                break;
            }
        }
    }

    GradientMap<T> out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (!nodes_[id].trainable) {
            continue;
        }
        if (id < grads.size() && grads[id]) {
            out.emplace(id, std::move(*grads[id]));
        } else {
            out.emplace(id, Tensor<T>(nodes_[id].value.shape()));
        }
    }
    return out;
}

template <typename T>
const Tensor<T>& grad_of(const GradientMap<T>& grads, const Var<T>& param) {
    auto it = grads.find(param.id());
    if (it == grads.end()) {
        throw std::invalid_argument("grad_of: node " + std::to_string(param.id()) + " has no gradient entry");
    }
    return it->second;
}

template class Tape<float>;
template class Tape<double>;
template const Tensor<float>& grad_of(const GradientMap<float>&, const Var<float>&);
template const Tensor<double>& grad_of(const GradientMap<double>&, const Var<double>&);

}  // namespace saeforge
