#pragma once

// Dense double-precision tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every operation whose inputs
// require gradients records a node that remembers its inputs and a local
// backward rule; backward() walks the recorded graph in reverse topological
// order. Graphs are built per forward pass and released with the last handle
// to their root.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "varprompt/errors.hpp"

namespace varprompt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

enum class OpKind {
    Leaf, Add, Sub, Mul, Div, Exp, Log, Tanh, Sigmoid, Softplus, Sqrt, Neg, Sin, Cos,
    MatMul, Transpose, Reshape, Sum, Mean, Max, Norm, Take, Concat
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    OpKind kind = OpKind::Leaf;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into each input's grad.
    std::function<void(Node&)> backward;
    // Last traversal that reached this node; avoids a visited set per trace.
    std::uint64_t stamp = 0;
};

inline std::uint64_t next_stamp() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

inline void check_finite(std::span<const double> v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NonFiniteValue(std::string(what) + " produced a non-finite value");
}

} // namespace detail

class Tensor;
class Graph;

class Tensor {
public:
    Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_numel(shape) != values.size())
            throw ShapeMismatch("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                                " values, got " + std::to_string(values.size()));
        detail::check_finite(values, "tensor construction");
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }
    static Tensor full(Shape s, double v, bool requires_grad = false) {
        auto n = shape_numel(s);
        return Tensor(std::move(s), std::vector<double>(n, v), requires_grad);
    }
    static Tensor zeros(Shape s, bool requires_grad = false) { return full(std::move(s), 0.0, requires_grad); }
    static Tensor ones(Shape s, bool requires_grad = false) { return full(std::move(s), 1.0, requires_grad); }
    static Tensor vector(std::vector<double> v, bool requires_grad = false) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v), requires_grad);
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v, bool requires_grad = false) {
        return Tensor(Shape{rows, cols}, std::move(v), requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

    std::span<const double> data() const { return node_->value; }
    std::vector<double> to_vector() const { return node_->value; }
    double operator[](std::size_t i) const { return node_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.at(1) + c]; }

    double item() const {
        if (numel() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->kind == OpKind::Leaf; }
    OpKind kind() const { return node_->kind; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::vector<double> grad_vector() const {
        return has_grad() ? node_->grad : std::vector<double>(numel(), 0.0);
    }
    void zero_grad() { node_->grad.clear(); }

    // Writable storage for leaf parameters (optimizer updates between passes).
    std::span<double> mutable_data() {
        if (!is_leaf()) throw DomainError("mutable_data() is only allowed on leaf tensors");
        return node_->value;
    }
    void assign(std::span<const double> v) {
        if (v.size() != numel()) throw ShapeMismatch("assign() size mismatch");
        detail::check_finite(v, "assign");
        std::copy(v.begin(), v.end(), mutable_data().begin());
    }

    // Same values, no history, no gradient requirement.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }
    Tensor clone_leaf(bool requires_grad) const { return Tensor(shape(), node_->value, requires_grad); }

    void backward() const;

    // Identity of the underlying node; two handles compare equal iff they share it.
    const void* id() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

    std::shared_ptr<detail::Node> node_;

    friend class Graph;
    friend struct TensorAccess;
};

// Internal factory used by the operation implementations.
struct TensorAccess {
    static Tensor make(Shape shape, std::vector<double> value, OpKind kind,
                       std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward,
                       const char* what) {
        detail::check_finite(value, what);
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(value);
        n->kind = kind;
        bool needs = false;
        for (auto& t : inputs) needs = needs || t.requires_grad();
        n->requires_grad = needs;
        if (needs) {
            n->inputs.reserve(inputs.size());
            for (auto& t : inputs) n->inputs.push_back(t.node_);
            n->backward = std::move(backward);
        }
        return Tensor(std::move(n));
    }
    static detail::Node& node(const Tensor& t) { return *t.node_; }
};

// The recorded computation reachable from a root, in topological order
// (inputs before consumers). Only nodes that require gradients are recorded.
class Graph {
public:
    static Graph trace(const Tensor& root) {
        Graph g;
        if (!root.requires_grad()) return g;
        const std::uint64_t stamp = detail::next_stamp();
        // Iterative post-order DFS.
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(root.node_.get(), 0);
        root.node_->stamp = stamp;
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->inputs.size()) {
                detail::Node* child = node->inputs[next++].get();
                if (child->requires_grad && child->stamp != stamp) {
                    child->stamp = stamp;
                    stack.emplace_back(child, 0);
                }
            } else {
                g.order_.push_back(node);
                stack.pop_back();
            }
        }
        return g;
    }

    std::size_t size() const { return order_.size(); }
    OpKind kind(std::size_t i) const { return order_.at(i)->kind; }

    bool topologically_ordered() const {
        std::unordered_set<const detail::Node*> placed;
        for (auto* n : order_) {
            for (auto& in : n->inputs)
                if (in->requires_grad && !placed.count(in.get())) return false;
            placed.insert(n);
        }
        return true;
    }

    // Returns the number of nodes whose backward rule ran.
    std::size_t run_backward() {
        if (order_.empty()) return 0;
        for (auto* n : order_) {
            if (n->kind != OpKind::Leaf || n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
        }
        auto* root = order_.back();
        std::fill(root->grad.begin(), root->grad.end(), 1.0);
        std::size_t visits = 0;
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::Node* n = *it;
            if (n->kind == OpKind::Leaf) continue;
            if (n->backward) {
                n->backward(*n);
                ++visits;
            }
        }
        for (auto* n : order_) {
            if (n->kind != OpKind::Leaf) {
                n->grad.clear();
                n->grad.shrink_to_fit();
            } else {
                detail::check_finite(n->grad, "backward");
            }
        }
        return visits;
    }

private:
    std::vector<detail::Node*> order_;
};

inline void Tensor::backward() const {
    if (numel() != 1) throw NonScalarRoot("backward() requires a scalar root, got " + shape_str(shape()));
    auto g = Graph::trace(*this);
    if (g.size() == 0) return;
    if (node_->kind == OpKind::Leaf) {
        if (node_->grad.empty()) node_->grad.assign(1, 0.0);
        node_->grad[0] += 1.0;
        return;
    }
    g.run_backward();
}

inline void backward(const Tensor& root) { root.backward(); }

// ---------------------------------------------------------------------------
// Broadcasting: align trailing axes, extent-1 axes stretch.

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// For each output flat index, the flat index of the source element it reads.
inline std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
    std::size_t n = shape_numel(out);
    std::vector<std::size_t> idx(n);
    if (src == out) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return idx;
    }
    if (shape_numel(src) == 1) return idx;
    std::size_t r = out.size(), off = r - src.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = src.size(); i-- > 0;) {
        stride[i + off] = src[i] == 1 ? 0 : s;
        s *= src[i];
    }
    std::vector<std::size_t> counter(r, 0);
    std::size_t cur = 0;
    for (std::size_t k = 0; k < n; ++k) {
        idx[k] = cur;
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            cur += stride[d];
            if (counter[d] < out[d]) break;
            cur -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return idx;
}

enum class Layout { Same, LeftScalar, RightScalar, General };

template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, OpKind kind, const char* what, Fwd fwd, DA da, DB db) {
    Shape out = broadcast_shape(a.shape(), b.shape());
    const std::size_t n = shape_numel(out);
    Layout layout = Layout::General;
    if (a.shape() == out && b.shape() == out) layout = Layout::Same;
    else if (a.numel() == 1 && b.shape() == out) layout = Layout::LeftScalar;
    else if (b.numel() == 1 && a.shape() == out) layout = Layout::RightScalar;
    std::vector<std::size_t> ia, ib;
    if (layout == Layout::General) {
        ia = broadcast_index(a.shape(), out);
        ib = broadcast_index(b.shape(), out);
    }
    auto av = a.data();
    auto bv = b.data();
    std::vector<double> v(n);
    switch (layout) {
    case Layout::Same:
        for (std::size_t k = 0; k < n; ++k) v[k] = fwd(av[k], bv[k]);
        break;
    case Layout::LeftScalar:
        for (std::size_t k = 0; k < n; ++k) v[k] = fwd(av[0], bv[k]);
        break;
    case Layout::RightScalar:
        for (std::size_t k = 0; k < n; ++k) v[k] = fwd(av[k], bv[0]);
        break;
    case Layout::General:
        for (std::size_t k = 0; k < n; ++k) v[k] = fwd(av[ia[k]], bv[ib[k]]);
        break;
    }
    return TensorAccess::make(
        out, std::move(v), kind, {a, b},
        [layout, ia = std::move(ia), ib = std::move(ib), da, db](Node& self) {
            Node& na = *self.inputs[0];
            Node& nb = *self.inputs[1];
            for (std::size_t k = 0; k < self.grad.size(); ++k) {
                std::size_t ja = k, jb = k;
                if (layout == Layout::LeftScalar) ja = 0;
                else if (layout == Layout::RightScalar) jb = 0;
                else if (layout == Layout::General) {
                    ja = ia[k];
                    jb = ib[k];
                }
                double g = self.grad[k];
                double x = na.value[ja], y = nb.value[jb];
                if (na.requires_grad) na.grad[ja] += g * da(x, y, self.value[k]);
                if (nb.requires_grad) nb.grad[jb] += g * db(x, y, self.value[k]);
            }
        },
        what);
}

// d is the local derivative as a function of (input, output).
template <class Fwd, class D>
Tensor unary(const Tensor& a, OpKind kind, const char* what, Fwd fwd, D d) {
    auto av = a.data();
    std::vector<double> v(av.size());
    for (std::size_t k = 0; k < av.size(); ++k) v[k] = fwd(av[k]);
    return TensorAccess::make(
        a.shape(), std::move(v), kind, {a},
        [d](Node& self) {
            Node& na = *self.inputs[0];
            for (std::size_t k = 0; k < self.grad.size(); ++k) {
                double local = d(na.value[k], self.value[k]);
                if (!std::isfinite(local)) throw DomainError("non-finite local derivative in backward");
                na.grad[k] += self.grad[k] * local;
            }
        },
        what);
}

inline double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations.

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, OpKind::Add, "add", [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, OpKind::Sub, "sub", [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, OpKind::Mul, "mul", [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    for (double y : b.data())
        if (y == 0.0) throw DomainError("division by zero");
    return detail::binary(
        a, b, OpKind::Div, "div", [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; }, [](double, double y, double o) { return -o / y; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary(
        a, OpKind::Exp, "exp", [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

inline Tensor log(const Tensor& a) {
    for (double x : a.data())
        if (x <= 0.0) throw DomainError("log of non-positive value");
    return detail::unary(
        a, OpKind::Log, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary(
        a, OpKind::Tanh, "tanh", [](double x) { return std::tanh(x); },
        [](double, double o) { return 1.0 - o * o; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary(
        a, OpKind::Sigmoid, "sigmoid", detail::stable_sigmoid, [](double, double o) { return o * (1.0 - o); });
}

inline Tensor softplus(const Tensor& a) {
    return detail::unary(
        a, OpKind::Softplus, "softplus", detail::stable_softplus,
        [](double x, double) { return detail::stable_sigmoid(x); });
}

// sqrt(0) evaluates to 0 but has no finite derivative; differentiating through
// it raises DomainError.
inline Tensor sqrt(const Tensor& a) {
    for (double x : a.data())
        if (x < 0.0) throw DomainError("sqrt of negative value");
    return detail::unary(
        a, OpKind::Sqrt, "sqrt", [](double x) { return std::sqrt(x); },
        [](double, double o) {
            if (o == 0.0) throw DomainError("sqrt is not differentiable at 0");
            return 0.5 / o;
        });
}

inline Tensor neg(const Tensor& a) {
    return detail::unary(
        a, OpKind::Neg, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor sin(const Tensor& a) {
    return detail::unary(
        a, OpKind::Sin, "sin", [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

inline Tensor cos(const Tensor& a) {
    return detail::unary(
        a, OpKind::Cos, "cos", [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

enum class Elementwise { Add, Sub, Mul, Div, Exp, Log, Tanh, Sigmoid, Softplus, Sqrt, Neg, Sin, Cos };

inline bool is_binary(Elementwise k) {
    return k == Elementwise::Add || k == Elementwise::Sub || k == Elementwise::Mul || k == Elementwise::Div;
}

inline Tensor elementwise(Elementwise kind, const Tensor& a, const std::optional<Tensor>& b = std::nullopt) {
    if (is_binary(kind) && !b) throw ShapeMismatch("binary elementwise operation needs two operands");
    switch (kind) {
    case Elementwise::Add: return add(a, *b);
    case Elementwise::Sub: return sub(a, *b);
    case Elementwise::Mul: return mul(a, *b);
    case Elementwise::Div: return div(a, *b);
    case Elementwise::Exp: return exp(a);
    case Elementwise::Log: return log(a);
    case Elementwise::Tanh: return tanh(a);
    case Elementwise::Sigmoid: return sigmoid(a);
    case Elementwise::Softplus: return softplus(a);
    case Elementwise::Sqrt: return sqrt(a);
    case Elementwise::Neg: return neg(a);
    case Elementwise::Sin: return sin(a);
    case Elementwise::Cos: return cos(a);
    }
    throw DomainError("unknown elementwise kind");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }

// ---------------------------------------------------------------------------
// Linear algebra and shape manipulation.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeMismatch("matmul " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    auto av = a.data();
    auto bv = b.data();
    std::vector<double> v(m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            double x = av[i * k + l];
            const double* brow = bv.data() + l * p;
            double* orow = v.data() + i * p;
            for (std::size_t j = 0; j < p; ++j) orow[j] += x * brow[j];
        }
    return TensorAccess::make(
        Shape{m, p}, std::move(v), OpKind::MatMul, {a, b},
        [m, k, p](detail::Node& self) {
            auto& na = *self.inputs[0];
            auto& nb = *self.inputs[1];
            const double* g = self.grad.data();
            if (na.requires_grad) {
                // dA = G * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * nb.value[l * p + j];
                        na.grad[i * k + l] += s;
                    }
            }
            if (nb.requires_grad) {
                // dB = A^T * G
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        double x = na.value[i * k + l];
                        for (std::size_t j = 0; j < p; ++j) nb.grad[l * p + j] += x * g[i * p + j];
                    }
            }
        },
        "matmul");
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeMismatch("transpose expects a matrix, got " + shape_str(a.shape()));
    std::size_t r = a.dim(0), c = a.dim(1);
    auto av = a.data();
    std::vector<double> v(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[j * r + i] = av[i * c + j];
    return TensorAccess::make(
        Shape{c, r}, std::move(v), OpKind::Transpose, {a},
        [r, c](detail::Node& self) {
            auto& na = *self.inputs[0];
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) na.grad[i * c + j] += self.grad[j * r + i];
        },
        "transpose");
}

inline Tensor reshape(const Tensor& a, Shape s) {
    if (shape_numel(s) != a.numel())
        throw ShapeMismatch("reshape " + shape_str(a.shape()) + " to " + shape_str(s));
    return TensorAccess::make(
        std::move(s), a.to_vector(), OpKind::Reshape, {a},
        [](detail::Node& self) {
            auto& na = *self.inputs[0];
            for (std::size_t k = 0; k < self.grad.size(); ++k) na.grad[k] += self.grad[k];
        },
        "reshape");
}

// Gathers the listed flat indices into a 1-D tensor.
inline Tensor take(const Tensor& a, std::vector<std::size_t> indices) {
    std::vector<double> v(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= a.numel()) throw ShapeMismatch("take index out of range");
        v[k] = a[indices[k]];
    }
    Shape s{indices.size()};
    return TensorAccess::make(
        std::move(s), std::move(v), OpKind::Take, {a},
        [indices = std::move(indices)](detail::Node& self) {
            auto& na = *self.inputs[0];
            for (std::size_t k = 0; k < indices.size(); ++k) na.grad[indices[k]] += self.grad[k];
        },
        "take");
}

// Stacks equally-shaped matrices along the row axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
    std::size_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
    std::size_t rows = 0;
    std::vector<double> v;
    for (auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols) throw ShapeMismatch("concat_rows column mismatch");
        rows += p.dim(0);
        v.insert(v.end(), p.data().begin(), p.data().end());
    }
    return TensorAccess::make(
        Shape{rows, cols}, std::move(v), OpKind::Concat, parts,
        [](detail::Node& self) {
            std::size_t off = 0;
            for (auto& in : self.inputs) {
                if (in->requires_grad)
                    for (std::size_t k = 0; k < in->value.size(); ++k) in->grad[k] += self.grad[off + k];
                off += in->value.size();
            }
        },
        "concat_rows");
}

// ---------------------------------------------------------------------------
// Reductions. Without an axis the result is a scalar (rank 0); with an axis
// that axis is removed.

enum class Reduce { Sum, Mean, Max };

namespace detail {

struct AxisSplit {
    std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

} // namespace detail

inline Tensor reduce(Reduce kind, const Tensor& a, std::optional<std::size_t> axis = std::nullopt) {
    if (axis && *axis >= a.rank())
        throw InvalidAxis("axis " + std::to_string(*axis) + " for tensor of rank " + std::to_string(a.rank()));
    if (a.numel() == 0) throw ShapeMismatch("reduction of an empty tensor");
    Shape out_shape;
    detail::AxisSplit sp{1, a.numel(), 1};
    if (axis) {
        sp = detail::split_axis(a.shape(), *axis);
        out_shape = a.shape();
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(*axis));
    }
    auto av = a.data();
    std::size_t n_out = sp.outer * sp.inner;
    std::vector<double> v(n_out);
    std::vector<std::size_t> arg;
    if (kind == Reduce::Max) arg.resize(n_out);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t base = o * sp.extent * sp.inner + i;
            std::size_t out = o * sp.inner + i;
            if (kind == Reduce::Max) {
                std::size_t best = base;
                for (std::size_t e = 1; e < sp.extent; ++e) {
                    std::size_t idx = base + e * sp.inner;
                    if (av[idx] > av[best]) best = idx;
                }
                v[out] = av[best];
                arg[out] = best;
            } else {
                double s = 0.0;
                for (std::size_t e = 0; e < sp.extent; ++e) s += av[base + e * sp.inner];
                v[out] = kind == Reduce::Mean ? s / static_cast<double>(sp.extent) : s;
            }
        }
    OpKind op = kind == Reduce::Sum ? OpKind::Sum : kind == Reduce::Mean ? OpKind::Mean : OpKind::Max;
    return TensorAccess::make(
        std::move(out_shape), std::move(v), op, {a},
        [kind, sp, arg = std::move(arg)](detail::Node& self) {
            auto& na = *self.inputs[0];
            if (kind == Reduce::Max) {
                for (std::size_t out = 0; out < arg.size(); ++out) na.grad[arg[out]] += self.grad[out];
                return;
            }
            double scale = kind == Reduce::Mean ? 1.0 / static_cast<double>(sp.extent) : 1.0;
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    double g = self.grad[o * sp.inner + i] * scale;
                    std::size_t base = o * sp.extent * sp.inner + i;
                    for (std::size_t e = 0; e < sp.extent; ++e) na.grad[base + e * sp.inner] += g;
                }
        },
        "reduce");
}

inline Tensor sum(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(Reduce::Sum, a, axis); }
inline Tensor mean(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(Reduce::Mean, a, axis); }
inline Tensor max(const Tensor& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(Reduce::Max, a, axis); }

// Euclidean norm over all elements. The subgradient at the origin is zero.
inline Tensor norm(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x * x;
    double r = std::sqrt(s);
    return TensorAccess::make(
        Shape{}, {r}, OpKind::Norm, {a},
        [](detail::Node& self) {
            auto& na = *self.inputs[0];
            double r = self.value[0];
            if (r == 0.0) return;
            double g = self.grad[0] / r;
            for (std::size_t k = 0; k < na.value.size(); ++k) na.grad[k] += g * na.value[k];
        },
        "norm");
}

// Norm of each row of a matrix; zero subgradient for zero rows.
inline Tensor row_norms(const Tensor& a) {
    if (a.rank() != 2) throw ShapeMismatch("row_norms expects a matrix, got " + shape_str(a.shape()));
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    auto av = a.data();
    std::vector<double> v(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += av[r * cols + c] * av[r * cols + c];
        v[r] = std::sqrt(s);
    }
    return TensorAccess::make(
        Shape{rows}, std::move(v), OpKind::Norm, {a},
        [cols](detail::Node& self) {
            auto& na = *self.inputs[0];
            for (std::size_t r = 0; r < self.value.size(); ++r) {
                if (self.value[r] == 0.0) continue;
                double g = self.grad[r] / self.value[r];
                for (std::size_t c = 0; c < cols; ++c) na.grad[r * cols + c] += g * na.value[r * cols + c];
            }
        },
        "row_norms");
}

} // namespace varprompt
