#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "slotworld/random.hpp"

namespace slotworld {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const MatrixRM<T>>;

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

namespace detail {
inline thread_local bool grad_mode = true;
}

// Disables graph recording in the current thread for its lifetime.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily, same length as value
    bool needs_grad = false;
    bool is_leaf = true;
    bool consumed = false;  // set on a loss root once backward has run
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Value-semantics handle onto a graph node. Copies share the node.
template <typename T>
class TensorT {
public:
    using Node = TensorNode<T>;
    using NodePtr = std::shared_ptr<Node>;

    TensorT() = default;
    explicit TensorT(NodePtr n) : node_(std::move(n)) {}

    static TensorT zeros(std::vector<int> shape) { return full(std::move(shape), T(0)); }

    static TensorT full(std::vector<int> shape, T v) {
        auto n = std::make_shared<Node>();
        int64_t count = 1;
        for (int e : shape) {
            require(e > 0, "tensor extents must be positive, got " + shape_str(shape));
            count *= e;
        }
        n->shape = std::move(shape);
        n->value.assign(count, v);
        return TensorT(std::move(n));
    }

    static TensorT from_data(std::vector<int> shape, std::vector<T> data) {
        auto n = std::make_shared<Node>();
        int64_t count = 1;
        for (int e : shape) count *= e;
        require(count == static_cast<int64_t>(data.size()),
                "from_data: shape " + shape_str(shape) + " does not match data length " +
                    std::to_string(data.size()));
        n->shape = std::move(shape);
        n->value = std::move(data);
        return TensorT(std::move(n));
    }

    static TensorT scalar(T v) { return full({1}, v); }

    static TensorT randn(std::vector<int> shape, RandomStream& rng, T stddev = T(1)) {
        TensorT t = zeros(std::move(shape));
        for (auto& x : t.data()) x = static_cast<T>(rng.normal() * stddev);
        return t;
    }

    static TensorT rand_uniform(std::vector<int> shape, RandomStream& rng, T lo, T hi) {
        TensorT t = zeros(std::move(shape));
        for (auto& x : t.data()) x = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int rows() const { return node_->shape.at(0); }
    int cols() const { return node_->shape.at(1); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    T item() const {
        require(numel() == 1, "item(): tensor is not scalar, shape " + shape_str(shape()));
        return node_->value[0];
    }

    TensorT& set_requires_grad(bool b) {
        require(node_->is_leaf, "requires_grad can only be toggled on leaf tensors");
        node_->needs_grad = b;
        return *this;
    }
    bool requires_grad() const { return node_->is_leaf && node_->needs_grad; }
    bool needs_grad() const { return node_->needs_grad; }

    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    NodePtr node() const { return node_; }

    MatMap<T> mat() {
        require(shape().size() == 2, "mat(): need rank-2 tensor, got " + shape_str(shape()));
        return MatMap<T>(node_->value.data(), rows(), cols());
    }
    ConstMatMap<T> mat() const {
        require(shape().size() == 2, "mat(): need rank-2 tensor, got " + shape_str(shape()));
        return ConstMatMap<T>(node_->value.data(), rows(), cols());
    }

    // Reverse-mode sweep from a scalar loss. Accumulates d(loss)/d(x) into the
    // grad buffer of every reachable tensor that needs gradients.
    void backward() const {
        require(numel() == 1, "backward: loss must be scalar, shape " + shape_str(shape()));
        require(node_->needs_grad,
                "backward: loss does not depend on any tensor with requires_grad");
        require(!node_->consumed, "backward: graph already consumed by a previous backward");
        node_->consumed = true;

        // iterative post-order topological sort over the needs_grad subgraph
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx].get();
                ++idx;
                if (p->needs_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn) n->backward_fn(*n);
        }
    }

private:
    NodePtr node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

template <typename T>
TensorT<T> make_op(const char* op, std::vector<int> shape, std::vector<T> value,
                   std::vector<TensorT<T>> inputs,
                   std::function<void(TensorNode<T>&)> backward_fn) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    n->is_leaf = false;
    if (grad_mode) {
        bool any = false;
        for (const auto& in : inputs)
            if (in.node()->needs_grad) any = true;
        if (any) {
            n->needs_grad = true;
            n->parents.reserve(inputs.size());
            for (const auto& in : inputs) n->parents.push_back(in.node());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return TensorT<T>(std::move(n));
}

template <typename T>
bool wants(const std::shared_ptr<TensorNode<T>>& p) {
    return p->needs_grad;
}

template <typename T>
void acc(TensorNode<T>& dst, const T* src) {
    dst.ensure_grad();
    T* g = dst.grad.data();
    const int64_t n = dst.numel();
    for (int64_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise primitives
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("add", a, b);
    std::vector<T> out(a.data());
    const T* bp = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>("add", a.shape(), std::move(out), {a, b},
                              [an, bn](TensorNode<T>& self) {
                                  if (detail::wants(an)) detail::acc(*an, self.grad.data());
                                  if (detail::wants(bn)) detail::acc(*bn, self.grad.data());
                              });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("sub", a, b);
    std::vector<T> out(a.data());
    const T* bp = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>("sub", a.shape(), std::move(out), {a, b},
                              [an, bn](TensorNode<T>& self) {
                                  if (detail::wants(an)) detail::acc(*an, self.grad.data());
                                  if (detail::wants(bn)) {
                                      bn->ensure_grad();
                                      for (int64_t i = 0; i < bn->numel(); ++i)
                                          bn->grad[i] -= self.grad[i];
                                  }
                              });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("mul", a, b);
    std::vector<T> out(a.data());
    const T* bp = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        "mul", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& self) {
            if (detail::wants(an)) {
                an->ensure_grad();
                for (int64_t i = 0; i < an->numel(); ++i)
                    an->grad[i] += self.grad[i] * bn->value[i];
            }
            if (detail::wants(bn)) {
                bn->ensure_grad();
                for (int64_t i = 0; i < bn->numel(); ++i)
                    bn->grad[i] += self.grad[i] * an->value[i];
            }
        });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("div", a, b);
    std::vector<T> out(a.data());
    const T* bp = b.data().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] /= bp[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        "div", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& self) {
            if (detail::wants(an)) {
                an->ensure_grad();
                for (int64_t i = 0; i < an->numel(); ++i)
                    an->grad[i] += self.grad[i] / bn->value[i];
            }
            if (detail::wants(bn)) {
                bn->ensure_grad();
                for (int64_t i = 0; i < bn->numel(); ++i)
                    bn->grad[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
            }
        });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    std::vector<T> out(a.data());
    for (auto& x : out) x = -x;
    auto an = a.node();
    return detail::make_op<T>("neg", a.shape(), std::move(out), {a},
                              [an](TensorNode<T>& self) {
                                  if (!detail::wants(an)) return;
                                  an->ensure_grad();
                                  for (int64_t i = 0; i < an->numel(); ++i)
                                      an->grad[i] -= self.grad[i];
                              });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, double c) {
    std::vector<T> out(a.data());
    for (auto& x : out) x = static_cast<T>(x * c);
    auto an = a.node();
    return detail::make_op<T>("scale", a.shape(), std::move(out), {a},
                              [an, c](TensorNode<T>& self) {
                                  if (!detail::wants(an)) return;
                                  an->ensure_grad();
                                  for (int64_t i = 0; i < an->numel(); ++i)
                                      an->grad[i] += static_cast<T>(self.grad[i] * c);
                              });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, double c) {
    std::vector<T> out(a.data());
    for (auto& x : out) x = static_cast<T>(x + c);
    auto an = a.node();
    return detail::make_op<T>("add_scalar", a.shape(), std::move(out), {a},
                              [an](TensorNode<T>& self) {
                                  if (detail::wants(an)) detail::acc(*an, self.grad.data());
                              });
}

template <typename T, typename F, typename DF>
TensorT<T> unary_op(const char* name, const TensorT<T>& a, F f, DF dfdy) {
    // dfdy receives (input value, output value)
    std::vector<T> out(a.data());
    for (auto& x : out) x = f(x);
    auto an = a.node();
    std::vector<T> saved = out;
    return detail::make_op<T>(name, a.shape(), std::move(out), {a},
                              [an, dfdy, saved = std::move(saved)](TensorNode<T>& self) {
                                  if (!detail::wants(an)) return;
                                  an->ensure_grad();
                                  for (int64_t i = 0; i < an->numel(); ++i)
                                      an->grad[i] += self.grad[i] * dfdy(an->value[i], saved[i]);
                              });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    return unary_op(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& a) {
    return unary_op(
        "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    return unary_op(
        "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> sqrt_op(const TensorT<T>& a) {
    return unary_op(
        "sqrt", a, [](T x) { return std::sqrt(x); },
        [](T, T y) { return T(0.5) / y; });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.cols() == b.rows(),
            "matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<T> out(static_cast<size_t>(m) * n);
    MatMap<T>(out.data(), m, n).noalias() = a.mat() * b.mat();
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        "matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode<T>& self) {
            ConstMatMap<T> g(self.grad.data(), m, n);
            if (detail::wants(an)) {
                an->ensure_grad();
                MatMap<T>(an->grad.data(), m, k).noalias() +=
                    g * ConstMatMap<T>(bn->value.data(), k, n).transpose();
            }
            if (detail::wants(bn)) {
                bn->ensure_grad();
                MatMap<T>(bn->grad.data(), k, n).noalias() +=
                    ConstMatMap<T>(an->value.data(), m, k).transpose() * g;
            }
        });
}

// y = x*W + b  (b optional row-broadcast bias)
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b = {}) {
    require(x.shape().size() == 2 && w.shape().size() == 2 && x.cols() == w.rows(),
            "linear: incompatible shapes " + shape_str(x.shape()) + " vs " +
                shape_str(w.shape()));
    const int m = x.rows(), k = x.cols(), n = w.cols();
    if (b.defined())
        require(b.numel() == n, "linear: bias length " + std::to_string(b.numel()) +
                                    " does not match output dim " + std::to_string(n));
    std::vector<T> out(static_cast<size_t>(m) * n);
    MatMap<T> om(out.data(), m, n);
    om.noalias() = x.mat() * w.mat();
    if (b.defined()) {
        const T* bp = b.data().data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += bp[j];
    }
    auto xn = x.node();
    auto wn = w.node();
    std::vector<TensorT<T>> inputs = {x, w};
    if (b.defined()) inputs.push_back(b);
    auto bnode = b.defined() ? b.node() : nullptr;
    return detail::make_op<T>(
        "linear", {m, n}, std::move(out), std::move(inputs),
        [xn, wn, bnode, m, k, n](TensorNode<T>& self) {
            ConstMatMap<T> g(self.grad.data(), m, n);
            if (detail::wants(xn)) {
                xn->ensure_grad();
                MatMap<T>(xn->grad.data(), m, k).noalias() +=
                    g * ConstMatMap<T>(wn->value.data(), k, n).transpose();
            }
            if (detail::wants(wn)) {
                wn->ensure_grad();
                MatMap<T>(wn->grad.data(), k, n).noalias() +=
                    ConstMatMap<T>(xn->value.data(), m, k).transpose() * g;
            }
            if (bnode && detail::wants(bnode)) {
                bnode->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        bnode->grad[j] += self.grad[static_cast<size_t>(i) * n + j];
            }
        });
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    require(a.shape().size() == 2, "transpose: need rank-2, got " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    std::vector<T> out(a.data().size());
    MatMap<T>(out.data(), n, m) = a.mat().transpose();
    auto an = a.node();
    return detail::make_op<T>("transpose", {n, m}, std::move(out), {a},
                              [an, m, n](TensorNode<T>& self) {
                                  if (!detail::wants(an)) return;
                                  an->ensure_grad();
                                  MatMap<T>(an->grad.data(), m, n) +=
                                      ConstMatMap<T>(self.grad.data(), n, m).transpose();
                              });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, std::vector<int> shape) {
    int64_t count = 1;
    for (int e : shape) count *= e;
    require(count == a.numel(), "reshape: " + shape_str(a.shape()) + " -> " +
                                    shape_str(shape) + " changes element count");
    std::vector<T> out(a.data());
    auto an = a.node();
    return detail::make_op<T>("reshape", std::move(shape), std::move(out), {a},
                              [an](TensorNode<T>& self) {
                                  if (detail::wants(an)) detail::acc(*an, self.grad.data());
                              });
}

template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& parts) {
    require(!parts.empty(), "concat_rows: empty input list");
    const int n = parts[0].cols();
    int m = 0;
    for (const auto& p : parts) {
        require(p.shape().size() == 2 && p.cols() == n,
                "concat_rows: column mismatch " + shape_str(p.shape()));
        m += p.rows();
    }
    std::vector<T> out;
    out.reserve(static_cast<size_t>(m) * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_op<T>("concat_rows", {m, n}, std::move(out), parts,
                              [nodes](TensorNode<T>& self) {
                                  size_t off = 0;
                                  for (const auto& p : nodes) {
                                      const size_t len = p->value.size();
                                      if (detail::wants(p)) {
                                          p->ensure_grad();
                                          for (size_t i = 0; i < len; ++i)
                                              p->grad[i] += self.grad[off + i];
                                      }
                                      off += len;
                                  }
                              });
}

template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
    require(!parts.empty(), "concat_cols: empty input list");
    const int m = parts[0].rows();
    int n = 0;
    for (const auto& p : parts) {
        require(p.shape().size() == 2 && p.rows() == m,
                "concat_cols: row mismatch " + shape_str(p.shape()));
        n += p.cols();
    }
    std::vector<T> out(static_cast<size_t>(m) * n);
    int coff = 0;
    for (const auto& p : parts) {
        const int pc = p.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < pc; ++j)
                out[static_cast<size_t>(i) * n + coff + j] =
                    p.data()[static_cast<size_t>(i) * pc + j];
        coff += pc;
    }
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_op<T>("concat_cols", {m, n}, std::move(out), parts,
                              [nodes, m, n](TensorNode<T>& self) {
                                  int coff = 0;
                                  for (const auto& p : nodes) {
                                      const int pc = p->shape[1];
                                      if (detail::wants(p)) {
                                          p->ensure_grad();
                                          for (int i = 0; i < m; ++i)
                                              for (int j = 0; j < pc; ++j)
                                                  p->grad[static_cast<size_t>(i) * pc + j] +=
                                                      self.grad[static_cast<size_t>(i) * n +
                                                                coff + j];
                                      }
                                      coff += pc;
                                  }
                              });
}

template <typename T>
TensorT<T> slice_rows(const TensorT<T>& a, int r0, int r1) {
    require(a.shape().size() == 2 && 0 <= r0 && r0 < r1 && r1 <= a.rows(),
            "slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                ") for " + shape_str(a.shape()));
    const int n = a.cols();
    std::vector<T> out(a.data().begin() + static_cast<size_t>(r0) * n,
                       a.data().begin() + static_cast<size_t>(r1) * n);
    auto an = a.node();
    return detail::make_op<T>("slice_rows", {r1 - r0, n}, std::move(out), {a},
                              [an, r0, n](TensorNode<T>& self) {
                                  if (!detail::wants(an)) return;
                                  an->ensure_grad();
                                  const size_t off = static_cast<size_t>(r0) * n;
                                  for (size_t i = 0; i < self.value.size(); ++i)
                                      an->grad[off + i] += self.grad[i];
                              });
}

template <typename T>
TensorT<T> slice_cols(const TensorT<T>& a, int c0, int c1) {
    require(a.shape().size() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.cols(),
            "slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                ") for " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols(), w = c1 - c0;
    std::vector<T> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<size_t>(i) * w + j] = a.data()[static_cast<size_t>(i) * n + c0 + j];
    auto an = a.node();
    return detail::make_op<T>("slice_cols", {m, w}, std::move(out), {a},
                              [an, c0, m, n, w](TensorNode<T>& self) {
                                  if (!detail::wants(an)) return;
                                  an->ensure_grad();
                                  for (int i = 0; i < m; ++i)
                                      for (int j = 0; j < w; ++j)
                                          an->grad[static_cast<size_t>(i) * n + c0 + j] +=
                                              self.grad[static_cast<size_t>(i) * w + j];
                              });
}

// replicate a row vector (shape {d} or {1,d}) into n rows
template <typename T>
TensorT<T> broadcast_rows(const TensorT<T>& v, int n) {
    const int d = static_cast<int>(v.numel());
    std::vector<T> out(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<size_t>(i) * d);
    auto vn = v.node();
    return detail::make_op<T>("broadcast_rows", {n, d}, std::move(out), {v},
                              [vn, n, d](TensorNode<T>& self) {
                                  if (!detail::wants(vn)) return;
                                  vn->ensure_grad();
                                  for (int i = 0; i < n; ++i)
                                      for (int j = 0; j < d; ++j)
                                          vn->grad[j] += self.grad[static_cast<size_t>(i) * d + j];
                              });
}

// A: n x d, v: {d} -> A + v per row
template <typename T>
TensorT<T> add_rowvec(const TensorT<T>& a, const TensorT<T>& v) {
    require(a.shape().size() == 2 && v.numel() == a.cols(),
            "add_rowvec: shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(v.shape()));
    const int m = a.rows(), n = a.cols();
    std::vector<T> out(a.data());
    const T* vp = v.data().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += vp[j];
    auto an = a.node();
    auto vn = v.node();
    return detail::make_op<T>("add_rowvec", a.shape(), std::move(out), {a, v},
                              [an, vn, m, n](TensorNode<T>& self) {
                                  if (detail::wants(an)) detail::acc(*an, self.grad.data());
                                  if (detail::wants(vn)) {
                                      vn->ensure_grad();
                                      for (int i = 0; i < m; ++i)
                                          for (int j = 0; j < n; ++j)
                                              vn->grad[j] +=
                                                  self.grad[static_cast<size_t>(i) * n + j];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    T s = 0;
    for (T x : a.data()) s += x;
    auto an = a.node();
    return detail::make_op<T>("sum", {1}, {s}, {a}, [an](TensorNode<T>& self) {
        if (!detail::wants(an)) return;
        an->ensure_grad();
        const T g = self.grad[0];
        for (int64_t i = 0; i < an->numel(); ++i) an->grad[i] += g;
    });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    T s = 0;
    for (T x : a.data()) s += x;
    const T inv = T(1) / static_cast<T>(a.numel());
    auto an = a.node();
    return detail::make_op<T>("mean", {1}, {s * inv}, {a}, [an, inv](TensorNode<T>& self) {
        if (!detail::wants(an)) return;
        an->ensure_grad();
        const T g = self.grad[0] * inv;
        for (int64_t i = 0; i < an->numel(); ++i) an->grad[i] += g;
    });
}

template <typename T>
TensorT<T> sum_sq(const TensorT<T>& d) {
    return sum(mul(d, d));
}

template <typename T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
    check_same_shape("mse", a, b);
    auto d = sub(a, b);
    return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// normalization / softmax
// ---------------------------------------------------------------------------

// softmax over one axis of a rank-2 tensor
template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int axis) {
    require(a.shape().size() == 2 && (axis == 0 || axis == 1),
            "softmax: need rank-2 tensor and axis 0/1, got " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    std::vector<T> out(a.data());
    auto apply = [&](int count, int len, auto index) {
        for (int c = 0; c < count; ++c) {
            T mx = out[index(c, 0)];
            for (int i = 1; i < len; ++i) mx = std::max(mx, out[index(c, i)]);
            T denom = 0;
            for (int i = 0; i < len; ++i) {
                T e = std::exp(out[index(c, i)] - mx);
                out[index(c, i)] = e;
                denom += e;
            }
            for (int i = 0; i < len; ++i) out[index(c, i)] /= denom;
        }
    };
    if (axis == 1)
        apply(m, n, [n](int c, int i) { return static_cast<size_t>(c) * n + i; });
    else
        apply(n, m, [n](int c, int i) { return static_cast<size_t>(i) * n + c; });

    auto an = a.node();
    std::vector<T> y = out;
    return detail::make_op<T>(
        "softmax", a.shape(), std::move(out), {a},
        [an, y = std::move(y), m, n, axis](TensorNode<T>& self) {
            if (!detail::wants(an)) return;
            an->ensure_grad();
            auto apply = [&](int count, int len, auto index) {
                for (int c = 0; c < count; ++c) {
                    T dot = 0;
                    for (int i = 0; i < len; ++i) dot += self.grad[index(c, i)] * y[index(c, i)];
                    for (int i = 0; i < len; ++i)
                        an->grad[index(c, i)] += y[index(c, i)] * (self.grad[index(c, i)] - dot);
                }
            };
            if (axis == 1)
                apply(m, n, [n](int c, int i) { return static_cast<size_t>(c) * n + i; });
            else
                apply(n, m, [n](int c, int i) { return static_cast<size_t>(i) * n + c; });
        });
}

// y_ij = a_ij / (sum_j a_ij + eps); the per-slot location renormalization
template <typename T>
TensorT<T> rows_normalize(const TensorT<T>& a, double eps) {
    require(a.shape().size() == 2, "rows_normalize: need rank-2, got " + shape_str(a.shape()));
    const int m = a.rows(), n = a.cols();
    std::vector<T> out(a.data());
    std::vector<T> sums(m);
    for (int i = 0; i < m; ++i) {
        T s = 0;
        for (int j = 0; j < n; ++j) s += out[static_cast<size_t>(i) * n + j];
        s += static_cast<T>(eps);
        sums[i] = s;
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] /= s;
    }
    auto an = a.node();
    return detail::make_op<T>(
        "rows_normalize", a.shape(), std::move(out), {a},
        [an, sums = std::move(sums), m, n](TensorNode<T>& self) {
            if (!detail::wants(an)) return;
            an->ensure_grad();
            for (int i = 0; i < m; ++i) {
                T dot = 0;
                for (int j = 0; j < n; ++j) {
                    const size_t k = static_cast<size_t>(i) * n + j;
                    dot += self.grad[k] * self.value[k];
                }
                const T inv = T(1) / sums[i];
                for (int j = 0; j < n; ++j) {
                    const size_t k = static_cast<size_t>(i) * n + j;
                    an->grad[k] += (self.grad[k] - dot) * inv;
                }
            }
        });
}

// layer normalization over the last dim with learned gain/bias
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      double eps = 1e-5) {
    require(x.shape().size() == 2, "layer_norm: need rank-2, got " + shape_str(x.shape()));
    const int m = x.rows(), n = x.cols();
    require(gamma.numel() == n && beta.numel() == n,
            "layer_norm: gain/bias length mismatch for " + shape_str(x.shape()));
    std::vector<T> out(static_cast<size_t>(m) * n);
    std::vector<T> xhat(static_cast<size_t>(m) * n);
    std::vector<T> inv_std(m);
    const T* xp = x.data().data();
    const T* gp = gamma.data().data();
    const T* bp = beta.data().data();
    for (int i = 0; i < m; ++i) {
        const T* row = xp + static_cast<size_t>(i) * n;
        T mu = 0;
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var = 0;
        for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
        inv_std[i] = is;
        for (int j = 0; j < n; ++j) {
            const size_t k = static_cast<size_t>(i) * n + j;
            xhat[k] = (row[j] - mu) * is;
            out[k] = xhat[k] * gp[j] + bp[j];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_op<T>(
        "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), m,
         n](TensorNode<T>& self) {
            for (int i = 0; i < m; ++i) {
                const T* grow = self.grad.data() + static_cast<size_t>(i) * n;
                const T* xh = xhat.data() + static_cast<size_t>(i) * n;
                if (detail::wants(gn)) {
                    gn->ensure_grad();
                    for (int j = 0; j < n; ++j) gn->grad[j] += grow[j] * xh[j];
                }
                if (detail::wants(bn)) {
                    bn->ensure_grad();
                    for (int j = 0; j < n; ++j) bn->grad[j] += grow[j];
                }
                if (detail::wants(xn)) {
                    xn->ensure_grad();
                    T sum_g = 0, sum_gx = 0;
                    for (int j = 0; j < n; ++j) {
                        const T gy = grow[j] * gn->value[j];
                        sum_g += gy;
                        sum_gx += gy * xh[j];
                    }
                    const T invn = T(1) / static_cast<T>(n);
                    for (int j = 0; j < n; ++j) {
                        const T gy = grow[j] * gn->value[j];
                        xn->grad[static_cast<size_t>(i) * n + j] +=
                            inv_std[i] * (gy - invn * sum_g - xh[j] * invn * sum_gx);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// broadcast-decoder helpers
// ---------------------------------------------------------------------------

// out[s*L + p, :] = a[s, :] + b[p, :]; pairs every row of a with every row of b
template <typename T>
TensorT<T> outer_add(const TensorT<T>& a, const TensorT<T>& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.cols() == b.cols(),
            "outer_add: incompatible shapes " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int s = a.rows(), l = b.rows(), d = a.cols();
    std::vector<T> out(static_cast<size_t>(s) * l * d);
    for (int i = 0; i < s; ++i) {
        const T* arow = a.data().data() + static_cast<size_t>(i) * d;
        for (int p = 0; p < l; ++p) {
            const T* brow = b.data().data() + static_cast<size_t>(p) * d;
            T* orow = out.data() + (static_cast<size_t>(i) * l + p) * d;
            for (int j = 0; j < d; ++j) orow[j] = arow[j] + brow[j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        "outer_add", {s * l, d}, std::move(out), {a, b},
        [an, bn, s, l, d](TensorNode<T>& self) {
            if (detail::wants(an)) {
                an->ensure_grad();
                for (int i = 0; i < s; ++i)
                    for (int p = 0; p < l; ++p) {
                        const T* grow = self.grad.data() + (static_cast<size_t>(i) * l + p) * d;
                        T* arow = an->grad.data() + static_cast<size_t>(i) * d;
                        for (int j = 0; j < d; ++j) arow[j] += grow[j];
                    }
            }
            if (detail::wants(bn)) {
                bn->ensure_grad();
                for (int i = 0; i < s; ++i)
                    for (int p = 0; p < l; ++p) {
                        const T* grow = self.grad.data() + (static_cast<size_t>(i) * l + p) * d;
                        T* brow = bn->grad.data() + static_cast<size_t>(p) * d;
                        for (int j = 0; j < d; ++j) brow[j] += grow[j];
                    }
            }
        });
}

// alpha compositing: w is S x L (per-slot pixel weights), x is (S*L) x C
// (per-slot pixel colors); out[p, c] = sum_s w[s, p] * x[s*L + p, c]
template <typename T>
TensorT<T> mask_mix(const TensorT<T>& w, const TensorT<T>& x) {
    require(w.shape().size() == 2 && x.shape().size() == 2 &&
                static_cast<int64_t>(w.rows()) * w.cols() == x.rows(),
            "mask_mix: incompatible shapes " + shape_str(w.shape()) + " vs " +
                shape_str(x.shape()));
    const int s = w.rows(), l = w.cols(), c = x.cols();
    std::vector<T> out(static_cast<size_t>(l) * c, T(0));
    for (int i = 0; i < s; ++i)
        for (int p = 0; p < l; ++p) {
            const T wv = w.data()[static_cast<size_t>(i) * l + p];
            const T* xrow = x.data().data() + (static_cast<size_t>(i) * l + p) * c;
            T* orow = out.data() + static_cast<size_t>(p) * c;
            for (int j = 0; j < c; ++j) orow[j] += wv * xrow[j];
        }
    auto wn = w.node();
    auto xn = x.node();
    return detail::make_op<T>(
        "mask_mix", {l, c}, std::move(out), {w, x}, [wn, xn, s, l, c](TensorNode<T>& self) {
            for (int i = 0; i < s; ++i)
                for (int p = 0; p < l; ++p) {
                    const T* grow = self.grad.data() + static_cast<size_t>(p) * c;
                    const size_t xoff = (static_cast<size_t>(i) * l + p) * c;
                    if (detail::wants(wn)) {
                        wn->ensure_grad();
                        T dw = 0;
                        for (int j = 0; j < c; ++j) dw += grow[j] * xn->value[xoff + j];
                        wn->grad[static_cast<size_t>(i) * l + p] += dw;
                    }
                    if (detail::wants(xn)) {
                        xn->ensure_grad();
                        const T wv = wn->value[static_cast<size_t>(i) * l + p];
                        for (int j = 0; j < c; ++j) xn->grad[xoff + j] += wv * grow[j];
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// misc
// ---------------------------------------------------------------------------

// standard transformer sinusoidal table; row t is the encoding of position t
template <typename T>
TensorT<T> sinusoidal_embedding(int n_positions, int dim) {
    require(dim % 2 == 0, "sinusoidal_embedding: dim must be even");
    TensorT<T> out = TensorT<T>::zeros({n_positions, dim});
    auto& v = out.data();
    for (int t = 0; t < n_positions; ++t)
        for (int i = 0; i < dim / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / dim);
            v[static_cast<size_t>(t) * dim + 2 * i] = static_cast<T>(std::sin(t * freq));
            v[static_cast<size_t>(t) * dim + 2 * i + 1] = static_cast<T>(std::cos(t * freq));
        }
    return out;
}

// mean over rows of (1 - cosine similarity); rows of a and b are paired
template <typename T>
TensorT<T> cosine_distance_rows(const TensorT<T>& a, const TensorT<T>& b, double eps = 1e-8) {
    check_same_shape("cosine_distance_rows", a, b);
    const int m = a.rows();
    TensorT<T> total = TensorT<T>::scalar(0);
    for (int i = 0; i < m; ++i) {
        auto ra = slice_rows(a, i, i + 1);
        auto rb = slice_rows(b, i, i + 1);
        auto dot = sum(mul(ra, rb));
        auto na = sqrt_op(add_scalar(sum(mul(ra, ra)), eps));
        auto nb = sqrt_op(add_scalar(sum(mul(rb, rb)), eps));
        auto cos = div(dot, mul(na, nb));
        total = add(total, sub(TensorT<T>::scalar(1), cos));
    }
    return scale(total, 1.0 / m);
}

template <typename T>
TensorT<T> detach(const TensorT<T>& a) {
    return TensorT<T>::from_data(a.shape(), a.data());
}

}  // namespace slotworld
