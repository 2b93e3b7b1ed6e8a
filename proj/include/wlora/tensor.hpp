#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "wlora/errors.hpp"
#include "wlora/rng.hpp"

namespace wlora {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream oss;
    oss << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        oss << s[i] << (i + 1 < s.size() ? "," : "");
    }
    oss << ")";
    return oss.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) {
        n *= e;
    }
    return n;
}

namespace detail {

// One tape entry: the value produced by a primitive op, its parents, and the
// closure that pushes the output gradient back onto them. Leaves have no
// parents and a null backprop.
template <typename S>
struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backprop;
    bool consumed = false;

    std::size_t numel() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), S(0));
        }
    }
};

}  // namespace detail

// Dense tensor handle with reverse-mode autodiff. Copying copies the handle;
// ops build fresh nodes so graphs are per-forward.
template <typename S>
class BasicTensor {
public:
    using Scalar = S;
    using NodePtr = std::shared_ptr<detail::Node<S>>;

    BasicTensor() : node_(std::make_shared<detail::Node<S>>()) {}

    static BasicTensor from(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        BasicTensor t;
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<S> data(shape_numel(shape), S(0));
        return from(std::move(shape), std::move(data), requires_grad);
    }

    static BasicTensor full(Shape shape, S v, bool requires_grad = false) {
        std::vector<S> data(shape_numel(shape), v);
        return from(std::move(shape), std::move(data), requires_grad);
    }

    static BasicTensor scalar(S v) { return from({}, {v}); }

    static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        std::vector<S> data(shape_numel(shape));
        for (auto& x : data) {
            x = static_cast<S>(rng.normal() * stddev);
        }
        return from(std::move(shape), std::move(data), requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }
    bool is_scalar() const { return numel() == 1 && ndim() <= 1; }

    const std::vector<S>& data() const { return node_->value; }
    std::vector<S>& mutable_data() { return node_->value; }
    S item() const {
        if (!is_scalar()) {
            throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
        }
        return node_->value[0];
    }
    S at(std::size_t i) const { return node_->value.at(i); }
    S at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    const std::vector<S>& grad() const {
        if (!has_grad()) {
            throw StateError("gradient not populated; run backward() first");
        }
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), S(0)); }
    void drop_grad() { node_->grad.clear(); }

    // Deep copy of the value with no graph attachment.
    BasicTensor clone_detached() const {
        return from(node_->shape, node_->value, false);
    }

    NodePtr node() const { return node_; }

    static BasicTensor wrap(NodePtr n) {
        BasicTensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    NodePtr node_;
};

namespace detail {

template <typename S>
std::shared_ptr<Node<S>> make_op_node(Shape shape, std::vector<S> value, const char* op,
                                      std::vector<std::shared_ptr<Node<S>>> parents,
                                      std::function<void(const Node<S>&)> backprop) {
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool needs = false;
    for (const auto& p : parents) {
        needs = needs || p->requires_grad;
    }
    n->requires_grad = needs;
    if (needs) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

}  // namespace detail

// Reverse-traversal order over the recorded ops reachable from a root. The
// order is a topological sort, so replaying it backwards visits every node
// after all of its consumers.
template <typename S>
class ComputationTape {
public:
    explicit ComputationTape(const BasicTensor<S>& root) {
        std::unordered_set<const detail::Node<S>*> seen;
        build(root.node(), seen);
    }

    std::size_t size() const { return order_.size(); }

    // Zeroes the gradients of every recorded op output. Leaf gradients are
    // left alone so they accumulate across sweeps; intermediate gradients are
    // recomputed from scratch on each sweep.
    void reset_op_grads() {
        for (auto& n : order_) {
            if (n->backprop) {
                n->grad.assign(n->value.size(), S(0));
            }
        }
    }

    // Runs the backward sweep assuming root->grad is seeded. Unless retained,
    // every visited record is cleared so a second sweep cannot run. The tape
    // holds owning references, so clearing parent links mid-sweep is safe.
    void run_backward(bool retain) {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            detail::Node<S>* n = it->get();
            if (!n->backprop) {
                continue;
            }
            for (auto& p : n->parents) {
                if (p->requires_grad) {
                    p->ensure_grad();
                }
            }
            n->backprop(*n);
            if (!retain) {
                n->backprop = nullptr;
                n->parents.clear();
                n->consumed = true;
            }
        }
    }

private:
    void build(const std::shared_ptr<detail::Node<S>>& n,
               std::unordered_set<const detail::Node<S>*>& seen) {
        if (seen.count(n.get())) {
            return;
        }
        seen.insert(n.get());
        for (const auto& p : n->parents) {
            build(p, seen);
        }
        order_.push_back(n);
    }

    std::vector<std::shared_ptr<detail::Node<S>>> order_;
};

// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad leaf.
template <typename S>
void backward(const BasicTensor<S>& loss, bool retain_tape = false) {
    if (!loss.is_scalar()) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    auto root = loss.node();
    if (root->consumed) {
        throw StateError("backward: tape already consumed; re-run the forward pass");
    }
    ComputationTape<S> tape(loss);
    tape.reset_op_grads();
    if (root->requires_grad) {
        root->ensure_grad();
        root->grad[0] = S(1);
    }
    tape.run_backward(retain_tape);
    if (!retain_tape) {
        root->consumed = true;
    }
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void check_same_shape(const BasicTensor<S>& a, const BasicTensor<S>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

// matmul: (m,p)x(p,q)->(m,q) or (m,p)x(p,)->(m,).
template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
    if (a.ndim() != 2 || (b.ndim() != 2 && b.ndim() != 1)) {
        throw DimensionError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0];
    const std::size_t p = a.shape()[1];
    const bool vec = b.ndim() == 1;
    const std::size_t q = vec ? 1 : b.shape()[1];
    if (p != b.shape()[0]) {
        throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }
    std::vector<S> out(m * q, S(0));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < p; ++l) {
            const S ail = av[i * p + l];
            for (std::size_t j = 0; j < q; ++j) {
                out[i * q + j] += ail * bv[l * q + j];
            }
        }
    }
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_op_node<S>(
        vec ? Shape{m} : Shape{m, q}, std::move(out), "matmul", {an, bn},
        [an, bn, m, p, q](const detail::Node<S>& self) {
            const auto& gy = self.grad;
            if (an->requires_grad) {
                auto& ga = an->grad;
                const auto& bv = bn->value;
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t l = 0; l < p; ++l) {
                        S acc = S(0);
                        for (std::size_t j = 0; j < q; ++j) {
                            acc += gy[i * q + j] * bv[l * q + j];
                        }
                        ga[i * p + l] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad;
                const auto& av = an->value;
                for (std::size_t l = 0; l < p; ++l) {
                    for (std::size_t i = 0; i < m; ++i) {
                        const S ail = av[i * p + l];
                        for (std::size_t j = 0; j < q; ++j) {
                            gb[l * q + j] += ail * gy[i * q + j];
                        }
                    }
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

template <typename S>
BasicTensor<S> transpose(const BasicTensor<S>& a) {
    if (a.ndim() != 2) {
        throw DimensionError("transpose: expected 2-d tensor, got " + shape_str(a.shape()));
    }
    const std::size_t m = a.shape()[0];
    const std::size_t n = a.shape()[1];
    std::vector<S> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    auto an = a.node();
    auto node = detail::make_op_node<S>(
        {n, m}, std::move(out), "transpose", {an},
        [an, m, n](const detail::Node<S>& self) {
            if (!an->requires_grad) {
                return;
            }
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    an->grad[i * n + j] += self.grad[j * m + i];
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_op_node<S>(
        a.shape(), std::move(out), "add", {an, bn},
        [an, bn](const detail::Node<S>& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (an->requires_grad) {
                    an->grad[i] += self.grad[i];
                }
                if (bn->requires_grad) {
                    bn->grad[i] += self.grad[i];
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] - b.data()[i];
    }
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_op_node<S>(
        a.shape(), std::move(out), "sub", {an, bn},
        [an, bn](const detail::Node<S>& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (an->requires_grad) {
                    an->grad[i] += self.grad[i];
                }
                if (bn->requires_grad) {
                    bn->grad[i] -= self.grad[i];
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Elementwise (Hadamard) product.
template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_op_node<S>(
        a.shape(), std::move(out), "mul", {an, bn},
        [an, bn](const detail::Node<S>& self) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (an->requires_grad) {
                    an->grad[i] += self.grad[i] * bn->value[i];
                }
                if (bn->requires_grad) {
                    bn->grad[i] += self.grad[i] * an->value[i];
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Scalar-tensor broadcast: y = c * a for a plain constant c.
template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S c) {
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = c * a.data()[i];
    }
    auto an = a.node();
    auto node = detail::make_op_node<S>(
        a.shape(), std::move(out), "scale", {an},
        [an, c](const detail::Node<S>& self) {
            if (!an->requires_grad) {
                return;
            }
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                an->grad[i] += c * self.grad[i];
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Multiplies a whole tensor by one entry of a (possibly trainable) vector.
// Used for gated adapter branches: y = gates[idx] * x.
template <typename S>
BasicTensor<S> scale_by_entry(const BasicTensor<S>& x, const BasicTensor<S>& gates, std::size_t idx) {
    if (gates.ndim() != 1 || idx >= gates.numel()) {
        throw ContractError("scale_by_entry: index " + std::to_string(idx) +
                            " out of range for gate vector " + shape_str(gates.shape()));
    }
    const S g = gates.data()[idx];
    std::vector<S> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = g * x.data()[i];
    }
    auto xn = x.node();
    auto gn = gates.node();
    auto node = detail::make_op_node<S>(
        x.shape(), std::move(out), "scale_by_entry", {xn, gn},
        [xn, gn, idx, g](const detail::Node<S>& self) {
            if (xn->requires_grad) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    xn->grad[i] += g * self.grad[i];
                }
            }
            if (gn->requires_grad) {
                S acc = S(0);
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    acc += self.grad[i] * xn->value[i];
                }
                gn->grad[idx] += acc;
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Row-bias broadcast: bias[i] added to every element of row i of a 2-d tensor,
// or plain vector add when mat is 1-d.
template <typename S>
BasicTensor<S> add_bias(const BasicTensor<S>& mat, const BasicTensor<S>& bias) {
    if (bias.ndim() != 1) {
        throw DimensionError("add_bias: bias must be 1-d, got " + shape_str(bias.shape()));
    }
    const std::size_t m = mat.shape().at(0);
    if (m != bias.numel()) {
        throw DimensionError("add_bias: rows of " + shape_str(mat.shape()) +
                             " do not match bias " + shape_str(bias.shape()));
    }
    const std::size_t n = mat.ndim() == 2 ? mat.shape()[1] : 1;
    std::vector<S> out(mat.numel());
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = mat.data()[i * n + j] + bias.data()[i];
        }
    }
    auto mn = mat.node();
    auto bn = bias.node();
    auto node = detail::make_op_node<S>(
        mat.shape(), std::move(out), "add_bias", {mn, bn},
        [mn, bn, m, n](const detail::Node<S>& self) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    if (mn->requires_grad) {
                        mn->grad[i * n + j] += self.grad[i * n + j];
                    }
                    if (bn->requires_grad) {
                        bn->grad[i] += self.grad[i * n + j];
                    }
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& a) {
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
    }
    auto an = a.node();
    auto node = detail::make_op_node<S>(
        a.shape(), std::move(out), "relu", {an},
        [an](const detail::Node<S>& self) {
            if (!an->requires_grad) {
                return;
            }
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (an->value[i] > S(0)) {
                    an->grad[i] += self.grad[i];
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

namespace detail {

template <typename S>
void softmax_span(const S* x, S* y, std::size_t n) {
    S mx = x[0];
    for (std::size_t i = 1; i < n; ++i) {
        mx = std::max(mx, x[i]);
    }
    S z = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        z += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        y[i] /= z;
    }
}

// g_x = y .* (g_y - <g_y, y>), per softmax span.
template <typename S>
void softmax_backprop_span(const S* y, const S* gy, S* gx, std::size_t n) {
    S dot = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        dot += gy[i] * y[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        gx[i] += y[i] * (gy[i] - dot);
    }
}

}  // namespace detail

// Max-subtracted softmax over a 1-d tensor.
template <typename S>
BasicTensor<S> softmax(const BasicTensor<S>& a) {
    if (a.ndim() != 1 || a.numel() == 0) {
        throw DimensionError("softmax: expected non-empty 1-d tensor, got " + shape_str(a.shape()));
    }
    std::vector<S> out(a.numel());
    detail::softmax_span(a.data().data(), out.data(), a.numel());
    auto an = a.node();
    auto node = detail::make_op_node<S>(
        a.shape(), std::move(out), "softmax", {an},
        [an](const detail::Node<S>& self) {
            if (!an->requires_grad) {
                return;
            }
            detail::softmax_backprop_span(self.value.data(), self.grad.data(), an->grad.data(),
                                          self.value.size());
        });
    return BasicTensor<S>::wrap(node);
}

// Row-wise softmax of a 2-d tensor (each row sums to 1).
template <typename S>
BasicTensor<S> softmax_rows(const BasicTensor<S>& a) {
    if (a.ndim() != 2) {
        throw DimensionError("softmax_rows: expected 2-d tensor, got " + shape_str(a.shape()));
    }
    const std::size_t m = a.shape()[0];
    const std::size_t n = a.shape()[1];
    std::vector<S> out(a.numel());
    for (std::size_t i = 0; i < m; ++i) {
        detail::softmax_span(a.data().data() + i * n, out.data() + i * n, n);
    }
    auto an = a.node();
    auto node = detail::make_op_node<S>(
        a.shape(), std::move(out), "softmax_rows", {an},
        [an, m, n](const detail::Node<S>& self) {
            if (!an->requires_grad) {
                return;
            }
            for (std::size_t i = 0; i < m; ++i) {
                detail::softmax_backprop_span(self.value.data() + i * n, self.grad.data() + i * n,
                                              an->grad.data() + i * n, n);
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Log-sum-exp stabilized cross entropy of a logit vector against a class id.
template <typename S>
BasicTensor<S> cross_entropy(const BasicTensor<S>& logits, std::size_t label) {
    if (logits.ndim() != 1 || logits.numel() == 0) {
        throw DimensionError("cross_entropy: logits must be 1-d, got " + shape_str(logits.shape()));
    }
    if (label >= logits.numel()) {
        throw ContractError("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(logits.numel()) + " classes");
    }
    const std::size_t n = logits.numel();
    const auto& x = logits.data();
    S mx = x[0];
    for (std::size_t i = 1; i < n; ++i) {
        mx = std::max(mx, x[i]);
    }
    S z = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        z += std::exp(x[i] - mx);
    }
    const S loss = std::log(z) + mx - x[label];
    std::vector<S> probs(n);
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = std::exp(x[i] - mx) / z;
    }
    auto ln = logits.node();
    auto node = detail::make_op_node<S>(
        {}, {loss}, "cross_entropy", {ln},
        [ln, probs = std::move(probs), label](const detail::Node<S>& self) {
            if (!ln->requires_grad) {
                return;
            }
            const S g = self.grad[0];
            for (std::size_t i = 0; i < probs.size(); ++i) {
                ln->grad[i] += g * (probs[i] - (i == label ? S(1) : S(0)));
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Mean squared error over all elements.
template <typename S>
BasicTensor<S> mse(const BasicTensor<S>& a, const BasicTensor<S>& b) {
    detail::check_same_shape(a, b, "mse");
    const std::size_t n = a.numel();
    S acc = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        const S d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    const S loss = acc / static_cast<S>(n);
    auto an = a.node();
    auto bn = b.node();
    auto node = detail::make_op_node<S>(
        {}, {loss}, "mse", {an, bn},
        [an, bn, n](const detail::Node<S>& self) {
            const S g = self.grad[0] * S(2) / static_cast<S>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const S d = an->value[i] - bn->value[i];
                if (an->requires_grad) {
                    an->grad[i] += g * d;
                }
                if (bn->requires_grad) {
                    bn->grad[i] -= g * d;
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a) {
    S acc = S(0);
    for (const S v : a.data()) {
        acc += v;
    }
    auto an = a.node();
    auto node = detail::make_op_node<S>(
        {}, {acc}, "sum", {an},
        [an](const detail::Node<S>& self) {
            if (!an->requires_grad) {
                return;
            }
            for (auto& g : an->grad) {
                g += self.grad[0];
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Per-column layer norm of a 2-d tensor (or of a single 1-d vector), with
// learnable gain/shift vectors indexed by row.
template <typename S>
BasicTensor<S> layer_norm_cols(const BasicTensor<S>& x, const BasicTensor<S>& gamma,
                               const BasicTensor<S>& beta, S eps = S(1e-5)) {
    const std::size_t d = x.shape().at(0);
    const std::size_t cols = x.ndim() == 2 ? x.shape()[1] : 1;
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm_cols: gamma/beta length must equal rows of x: " +
                             shape_str(x.shape()));
    }
    std::vector<S> out(x.numel());
    std::vector<S> xhat(x.numel());
    std::vector<S> inv_std(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        S mean = S(0);
        for (std::size_t i = 0; i < d; ++i) {
            mean += x.data()[i * cols + j];
        }
        mean /= static_cast<S>(d);
        S var = S(0);
        for (std::size_t i = 0; i < d; ++i) {
            const S c = x.data()[i * cols + j] - mean;
            var += c * c;
        }
        var /= static_cast<S>(d);
        inv_std[j] = S(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) {
            const S h = (x.data()[i * cols + j] - mean) * inv_std[j];
            xhat[i * cols + j] = h;
            out[i * cols + j] = gamma.data()[i] * h + beta.data()[i];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto node = detail::make_op_node<S>(
        x.shape(), std::move(out), "layer_norm_cols", {xn, gn, bn},
        [xn, gn, bn, d, cols, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](const detail::Node<S>& self) {
            for (std::size_t j = 0; j < cols; ++j) {
                // dL/dxhat_i = g_i * gamma_i for this column
                S sum_dxhat = S(0);
                S sum_dxhat_xhat = S(0);
                for (std::size_t i = 0; i < d; ++i) {
                    const S dxh = self.grad[i * cols + j] * gn->value[i];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat[i * cols + j];
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const S gy = self.grad[i * cols + j];
                    if (gn->requires_grad) {
                        gn->grad[i] += gy * xhat[i * cols + j];
                    }
                    if (bn->requires_grad) {
                        bn->grad[i] += gy;
                    }
                    if (xn->requires_grad) {
                        const S dxh = gy * gn->value[i];
                        xn->grad[i * cols + j] +=
                            inv_std[j] * (dxh - (sum_dxhat + xhat[i * cols + j] * sum_dxhat_xhat) /
                                                    static_cast<S>(d));
                    }
                }
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Rows [begin, end) of a 2-d tensor as a new tensor.
template <typename S>
BasicTensor<S> slice_rows(const BasicTensor<S>& x, std::size_t begin, std::size_t end) {
    if (x.ndim() != 2 || begin >= end || end > x.rows()) {
        throw ContractError("slice_rows: invalid range [" + std::to_string(begin) + "," +
                            std::to_string(end) + ") for " + shape_str(x.shape()));
    }
    const std::size_t n = x.cols();
    const std::size_t m = end - begin;
    std::vector<S> out(m * n);
    std::copy(x.data().begin() + begin * n, x.data().begin() + end * n, out.begin());
    auto xn = x.node();
    auto node = detail::make_op_node<S>(
        {m, n}, std::move(out), "slice_rows", {xn},
        [xn, begin, m, n](const detail::Node<S>& self) {
            if (!xn->requires_grad) {
                return;
            }
            for (std::size_t i = 0; i < m * n; ++i) {
                xn->grad[begin * n + i] += self.grad[i];
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Vertical stack of 2-d tensors with equal column counts.
template <typename S>
BasicTensor<S> concat_rows(const std::vector<BasicTensor<S>>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_rows: need at least one tensor");
    }
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.cols() != n) {
            throw DimensionError("concat_rows: column counts disagree");
        }
        m += p.rows();
    }
    std::vector<S> out;
    out.reserve(m * n);
    std::vector<typename BasicTensor<S>::NodePtr> nodes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        nodes.push_back(p.node());
    }
    auto node = detail::make_op_node<S>(
        {m, n}, std::move(out), "concat_rows", nodes,
        [nodes](const detail::Node<S>& self) {
            std::size_t offset = 0;
            for (const auto& p : nodes) {
                if (p->requires_grad) {
                    for (std::size_t i = 0; i < p->value.size(); ++i) {
                        p->grad[i] += self.grad[offset + i];
                    }
                }
                offset += p->value.size();
            }
        });
    return BasicTensor<S>::wrap(node);
}

// Inverted dropout with keep-scaling 1/(1-p); identity when p == 0.
template <typename S>
BasicTensor<S> dropout(const BasicTensor<S>& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) {
        throw ContractError("dropout: p must lie in [0,1), got " + std::to_string(p));
    }
    if (p == 0.0) {
        return x;
    }
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    std::vector<S> mask(x.numel());
    std::vector<S> out(x.numel());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = rng.uniform() < p ? S(0) : keep_scale;
        out[i] = x.data()[i] * mask[i];
    }
    auto xn = x.node();
    auto node = detail::make_op_node<S>(
        x.shape(), std::move(out), "dropout", {xn},
        [xn, mask = std::move(mask)](const detail::Node<S>& self) {
            if (!xn->requires_grad) {
                return;
            }
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                xn->grad[i] += self.grad[i] * mask[i];
            }
        });
    return BasicTensor<S>::wrap(node);
}

using Tensor = BasicTensor<double>;
using Tensor32 = BasicTensor<float>;

}  // namespace wlora
