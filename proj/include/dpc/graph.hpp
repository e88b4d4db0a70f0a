#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dpc/errors.hpp"
#include "dpc/tensor.hpp"

// Define-by-run reverse-mode engine. Every operation evaluates eagerly,
// records its inputs and a backprop closure, and the tape is just the DAG
// reachable from the loss node. Graphs are rebuilt per forward pass because
// the prompt composition differs per instance.

namespace dpc {

namespace hooks {
// Deliberately corrupts the multiply backward rules so gradient-check
// plumbing can be shown to catch a broken derivative. Never set outside
// tests and the CLI gradcheck hook.
inline bool corrupt_multiply_backward = false;
} // namespace hooks

template <class S>
struct GraphNode {
    TensorT<S> value;
    TensorT<S> grad; // allocated only when requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<GraphNode<S>>> inputs;
    std::function<void(GraphNode<S>&)> backprop; // empty for leaves
    const char* kind = "leaf";
};

template <class S>
class ValueT {
public:
    ValueT() = default;
    explicit ValueT(std::shared_ptr<GraphNode<S>> n) : node_(std::move(n)) {}

    const TensorT<S>& tensor() const { return node_->value; }
    const std::vector<std::size_t>& shape() const { return node_->value.shape; }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* kind() const { return node_->kind; }

    S scalar() const {
        if (node_->value.size() != 1) {
            throw ContractViolation(std::string("scalar() on non-scalar node '") + node_->kind +
                                    "' of shape " + shape_str(node_->value.shape));
        }
        return node_->value.values[0];
    }

    const TensorT<S>& grad() const { return node_->grad; }
    std::shared_ptr<GraphNode<S>>& node() { return node_; }
    const std::shared_ptr<GraphNode<S>>& node() const { return node_; }
    bool valid() const { return node_ != nullptr; }

private:
    std::shared_ptr<GraphNode<S>> node_;
};

namespace detail {

template <class S>
ValueT<S> make_node(const char* kind, TensorT<S> value,
                    std::vector<std::shared_ptr<GraphNode<S>>> inputs,
                    std::function<void(GraphNode<S>&)> backprop) {
    if (!all_finite(value)) {
        throw NumericError(std::string("non-finite output from '") + kind + "'");
    }
    auto node = std::make_shared<GraphNode<S>>();
    node->value = std::move(value);
    node->kind = kind;
    for (auto& in : inputs) {
        if (in->requires_grad) node->requires_grad = true;
    }
    node->inputs = std::move(inputs);
    if (node->requires_grad) {
        node->grad = TensorT<S>(node->value.shape, S(0));
        node->backprop = std::move(backprop);
    }
    return ValueT<S>(std::move(node));
}

template <class S>
void expect_rank(const char* kind, const ValueT<S>& v, std::size_t rank) {
    if (v.shape().size() != rank) {
        throw ContractViolation(std::string(kind) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(v.shape()));
    }
}

template <class S>
void expect_same_shape(const char* kind, const ValueT<S>& a, const ValueT<S>& b) {
    if (a.shape() != b.shape()) {
        throw ContractViolation(std::string(kind) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Tape: parameter bindings for one forward pass
// ---------------------------------------------------------------------------

// Owns the leaf bookkeeping of a single forward pass: the same Parameter is
// memoized to one leaf node, and backward() flushes leaf gradients into the
// trainable parameters it saw. One backward per tape.
template <class S>
class TapeT {
public:
    ValueT<S> constant(TensorT<S> v, const char* kind = "const") {
        return detail::make_node<S>(kind, std::move(v), {}, {});
    }

    // Differentiable leaf not bound to a Parameter; used by tests and by the
    // finite-difference path through encoder inputs.
    ValueT<S> variable(TensorT<S> v, const char* kind = "var") {
        auto node = std::make_shared<GraphNode<S>>();
        node->value = std::move(v);
        node->kind = kind;
        node->requires_grad = true;
        node->grad = TensorT<S>(node->value.shape, S(0));
        return ValueT<S>(std::move(node));
    }

    ValueT<S> use(ParameterT<S>& p) {
        auto it = bound_.find(&p);
        if (it != bound_.end()) return it->second;
        ValueT<S> leaf;
        if (p.trainable) {
            leaf = variable(p.value, "param");
        } else {
            leaf = constant(p.value, "frozen");
        }
        bound_.emplace(&p, leaf);
        order_.push_back(&p);
        return leaf;
    }

    // Reverse-mode sweep from a scalar loss. Visits every reachable node
    // exactly once in reverse topological order, then accumulates leaf
    // gradients into the bound trainable parameters.
    void backward(const ValueT<S>& loss) {
        if (consumed_) {
            throw ContractViolation("tape: backward() called twice on the same tape");
        }
        consumed_ = true;
        if (loss.size() != 1) {
            throw ContractViolation("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) return; // nothing trainable upstream

        // iterative post-order DFS
        std::vector<GraphNode<S>*> topo;
        std::unordered_set<GraphNode<S>*> seen;
        std::vector<std::pair<GraphNode<S>*, std::size_t>> stack;
        stack.emplace_back(loss.node().get(), 0);
        seen.insert(loss.node().get());
        while (!stack.empty()) {
            auto& [node, next_child] = stack.back();
            bool descended = false;
            while (next_child < node->inputs.size()) {
                GraphNode<S>* child = node->inputs[next_child++].get();
                if (child->requires_grad && seen.insert(child).second) {
                    stack.emplace_back(child, 0);
                    descended = true;
                    break;
                }
            }
            if (!descended && (stack.back().second >= stack.back().first->inputs.size())) {
                topo.push_back(stack.back().first);
                stack.pop_back();
            }
        }

        loss.node()->grad.values[0] = S(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            if ((*it)->backprop) (*it)->backprop(**it);
        }

        for (ParameterT<S>* p : order_) {
            if (!p->trainable) continue;
            const auto& leaf = bound_.at(p);
            for (std::size_t i = 0; i < p->grad.size(); ++i) {
                p->grad.values[i] += leaf.node()->grad.values[i];
            }
        }
    }

private:
    std::unordered_map<const ParameterT<S>*, ValueT<S>> bound_;
    std::vector<ParameterT<S>*> order_;
    bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

template <class S>
ValueT<S> add(const ValueT<S>& a, const ValueT<S>& b) {
    detail::expect_same_shape("add", a, b);
    TensorT<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.tensor()[i] + b.tensor()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_node<S>("add", std::move(out), {an, bn}, [an, bn](GraphNode<S>& n) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
    });
}

template <class S>
ValueT<S> mul(const ValueT<S>& a, const ValueT<S>& b) {
    detail::expect_same_shape("mul", a, b);
    TensorT<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.tensor()[i] * b.tensor()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_node<S>("mul", std::move(out), {an, bn}, [an, bn](GraphNode<S>& n) {
        const S tweak = hooks::corrupt_multiply_backward ? S(1.25) : S(1);
        if (an->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                an->grad[i] += tweak * n.grad[i] * bn->value[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                bn->grad[i] += tweak * n.grad[i] * an->value[i];
    });
}

// multiply by a host constant
template <class S>
ValueT<S> scale(const ValueT<S>& a, S c) {
    TensorT<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.tensor()[i] * c;
    auto an = a.node();
    return detail::make_node<S>("scale", std::move(out), {an}, [an, c](GraphNode<S>& n) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += c * n.grad[i];
    });
}

// multiply a tensor by a scalar node; both sides differentiable
template <class S>
ValueT<S> mul_scalar(const ValueT<S>& t, const ValueT<S>& s) {
    if (s.size() != 1) {
        throw ContractViolation("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
    }
    const S sv = s.tensor()[0];
    TensorT<S> out(t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.tensor()[i] * sv;
    auto tn = t.node(), sn = s.node();
    return detail::make_node<S>("mul_scalar", std::move(out), {tn, sn}, [tn, sn](GraphNode<S>& n) {
        const S tweak = hooks::corrupt_multiply_backward ? S(1.25) : S(1);
        const S svv = sn->value[0];
        if (tn->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                tn->grad[i] += tweak * n.grad[i] * svv;
        if (sn->requires_grad) {
            S acc = 0;
            for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * tn->value[i];
            sn->grad[0] += tweak * acc;
        }
    });
}

template <class S>
ValueT<S> matmul(const ValueT<S>& a, const ValueT<S>& b) {
    detail::expect_rank("matmul", a, 2);
    detail::expect_rank("matmul", b, 2);
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    if (b.shape()[0] != k) {
        throw ContractViolation("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
    }
    const std::size_t n_cols = b.shape()[1];
    TensorT<S> out({m, n_cols});
    const auto& av = a.tensor().values;
    const auto& bv = b.tensor().values;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const S aik = av[i * k + kk];
            for (std::size_t j = 0; j < n_cols; ++j) {
                out.values[i * n_cols + j] += aik * bv[kk * n_cols + j];
            }
        }
    }
    auto an = a.node(), bn = b.node();
    return detail::make_node<S>(
        "matmul", std::move(out), {an, bn}, [an, bn, m, k, n_cols](GraphNode<S>& n) {
            if (an->requires_grad) { // dA += dC * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n_cols; ++j) {
                        const S g = n.grad.values[i * n_cols + j];
                        for (std::size_t kk = 0; kk < k; ++kk)
                            an->grad.values[i * k + kk] += g * bn->value.values[kk * n_cols + j];
                    }
            }
            if (bn->requires_grad) { // dB += A^T * dC
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const S aik = an->value.values[i * k + kk];
                        for (std::size_t j = 0; j < n_cols; ++j)
                            bn->grad.values[kk * n_cols + j] += aik * n.grad.values[i * n_cols + j];
                    }
            }
        });
}

template <class S>
ValueT<S> transpose(const ValueT<S>& a) {
    detail::expect_rank("transpose", a, 2);
    const std::size_t m = a.shape()[0], n_cols = a.shape()[1];
    TensorT<S> out({n_cols, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n_cols; ++j) out.values[j * m + i] = a.tensor().values[i * n_cols + j];
    auto an = a.node();
    return detail::make_node<S>("transpose", std::move(out), {an}, [an, m, n_cols](GraphNode<S>& n) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n_cols; ++j)
                an->grad.values[i * n_cols + j] += n.grad.values[j * m + i];
    });
}

template <class S>
ValueT<S> reshape(const ValueT<S>& a, std::vector<std::size_t> new_shape) {
    if (shape_numel(new_shape) != a.size()) {
        throw ContractViolation("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(new_shape));
    }
    TensorT<S> out(std::move(new_shape), a.tensor().values);
    auto an = a.node();
    return detail::make_node<S>("reshape", std::move(out), {an}, [an](GraphNode<S>& n) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad.values[i] += n.grad.values[i];
    });
}

// Concatenate rank-1 tensors along axis 0 or rank-2 tensors along axis 0/1.
template <class S>
ValueT<S> concat(const std::vector<ValueT<S>>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractViolation("concat: no inputs");
    const std::size_t rank = parts[0].shape().size();
    if (rank < 1 || rank > 2 || axis >= rank) {
        throw ContractViolation("concat: unsupported rank " + std::to_string(rank) + " / axis " +
                                std::to_string(axis));
    }
    for (const auto& p : parts) {
        if (p.shape().size() != rank) {
            throw ContractViolation("concat: mixed ranks");
        }
        for (std::size_t ax = 0; ax < rank; ++ax) {
            if (ax != axis && p.shape()[ax] != parts[0].shape()[ax]) {
                throw ContractViolation("concat: extent mismatch off axis, " +
                                        shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
            }
        }
    }

    std::vector<std::shared_ptr<GraphNode<S>>> inputs;
    inputs.reserve(parts.size());
    for (const auto& p : parts) inputs.push_back(p.node());

    if (rank == 1) {
        std::size_t total = 0;
        for (const auto& p : parts) total += p.size();
        TensorT<S> out({total});
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.tensor().values.begin(), p.tensor().values.end(), out.values.begin() + off);
            off += p.size();
        }
        return detail::make_node<S>("concat", std::move(out), std::move(inputs),
                                    [](GraphNode<S>& n) {
                                        std::size_t off2 = 0;
                                        for (auto& in : n.inputs) {
                                            const std::size_t len = in->value.size();
                                            if (in->requires_grad)
                                                for (std::size_t i = 0; i < len; ++i)
                                                    in->grad.values[i] += n.grad.values[off2 + i];
                                            off2 += len;
                                        }
                                    });
    }

    // rank 2
    const std::size_t rows0 = parts[0].shape()[0], cols0 = parts[0].shape()[1];
    if (axis == 0) {
        std::size_t rows = 0;
        for (const auto& p : parts) rows += p.shape()[0];
        TensorT<S> out({rows, cols0});
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.tensor().values.begin(), p.tensor().values.end(), out.values.begin() + off);
            off += p.size();
        }
        return detail::make_node<S>("concat", std::move(out), std::move(inputs),
                                    [](GraphNode<S>& n) {
                                        std::size_t off2 = 0;
                                        for (auto& in : n.inputs) {
                                            const std::size_t len = in->value.size();
                                            if (in->requires_grad)
                                                for (std::size_t i = 0; i < len; ++i)
                                                    in->grad.values[i] += n.grad.values[off2 + i];
                                            off2 += len;
                                        }
                                    });
    }

    std::size_t cols = 0;
    for (const auto& p : parts) cols += p.shape()[1];
    TensorT<S> out({rows0, cols});
    std::size_t col_off = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.shape()[1];
        for (std::size_t r = 0; r < rows0; ++r)
            for (std::size_t c = 0; c < pc; ++c)
                out.values[r * cols + col_off + c] = p.tensor().values[r * pc + c];
        col_off += pc;
    }
    return detail::make_node<S>("concat", std::move(out), std::move(inputs),
                                [rows0, cols](GraphNode<S>& n) {
                                    std::size_t coff = 0;
                                    for (auto& in : n.inputs) {
                                        const std::size_t pc = in->value.shape[1];
                                        if (in->requires_grad)
                                            for (std::size_t r = 0; r < rows0; ++r)
                                                for (std::size_t c = 0; c < pc; ++c)
                                                    in->grad.values[r * pc + c] +=
                                                        n.grad.values[r * cols + coff + c];
                                        coff += pc;
                                    }
                                });
}

// Embedding-row gather: rows of a (V, d) table by index, scatter-add backward.
template <class S>
ValueT<S> gather_rows(const ValueT<S>& table, std::vector<std::size_t> ids) {
    detail::expect_rank("gather_rows", table, 2);
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    if (ids.empty()) throw ContractViolation("gather_rows: empty id list");
    for (std::size_t id : ids) {
        if (id >= v) {
            throw ContractViolation("gather_rows: id " + std::to_string(id) +
                                    " out of range for table " + shape_str(table.shape()));
        }
    }
    TensorT<S> out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(table.tensor().values.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                    out.values.begin() + static_cast<std::ptrdiff_t>(r * d));
    auto tn = table.node();
    return detail::make_node<S>("gather_rows", std::move(out), {tn},
                                [tn, ids = std::move(ids), d](GraphNode<S>& n) {
                                    if (!tn->requires_grad) return;
                                    for (std::size_t r = 0; r < ids.size(); ++r)
                                        for (std::size_t c = 0; c < d; ++c)
                                            tn->grad.values[ids[r] * d + c] += n.grad.values[r * d + c];
                                });
}

// Mean over one axis of a rank-2 tensor.
template <class S>
ValueT<S> mean_axis(const ValueT<S>& a, std::size_t axis) {
    detail::expect_rank("mean_axis", a, 2);
    if (axis > 1) throw ContractViolation("mean_axis: axis " + std::to_string(axis) + " invalid");
    const std::size_t m = a.shape()[0], n_cols = a.shape()[1];
    auto an = a.node();
    if (axis == 0) {
        TensorT<S> out({n_cols});
        for (std::size_t j = 0; j < n_cols; ++j) {
            S acc = 0;
            for (std::size_t i = 0; i < m; ++i) acc += a.tensor().values[i * n_cols + j];
            out.values[j] = acc / static_cast<S>(m);
        }
        return detail::make_node<S>("mean_axis", std::move(out), {an}, [an, m, n_cols](GraphNode<S>& n) {
            if (!an->requires_grad) return;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n_cols; ++j)
                    an->grad.values[i * n_cols + j] += n.grad.values[j] / static_cast<S>(m);
        });
    }
    TensorT<S> out({m});
    for (std::size_t i = 0; i < m; ++i) {
        S acc = 0;
        for (std::size_t j = 0; j < n_cols; ++j) acc += a.tensor().values[i * n_cols + j];
        out.values[i] = acc / static_cast<S>(n_cols);
    }
    return detail::make_node<S>("mean_axis", std::move(out), {an}, [an, m, n_cols](GraphNode<S>& n) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n_cols; ++j)
                an->grad.values[i * n_cols + j] += n.grad.values[i] / static_cast<S>(n_cols);
    });
}

template <class S>
ValueT<S> sum_all(const ValueT<S>& a) {
    S acc = 0;
    for (S v : a.tensor().values) acc += v;
    TensorT<S> out({1});
    out.values[0] = acc;
    auto an = a.node();
    return detail::make_node<S>("sum_all", std::move(out), {an}, [an](GraphNode<S>& n) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad.values[i] += n.grad.values[0];
    });
}

// Layer normalization over the last axis with affine parameters.
// Accepts rank-1 (W) or rank-2 (T, W) inputs; gamma/beta have shape (W).
template <class S>
ValueT<S> layer_norm(const ValueT<S>& x, const ValueT<S>& gamma, const ValueT<S>& beta,
                     S eps = S(1e-5)) {
    const std::size_t rank = x.shape().size();
    if (rank < 1 || rank > 2) {
        throw ContractViolation("layer_norm: unsupported shape " + shape_str(x.shape()));
    }
    const std::size_t w = x.shape()[rank - 1];
    const std::size_t rows = rank == 2 ? x.shape()[0] : 1;
    detail::expect_rank("layer_norm", gamma, 1);
    detail::expect_rank("layer_norm", beta, 1);
    if (gamma.shape()[0] != w || beta.shape()[0] != w) {
        throw ContractViolation("layer_norm: affine width mismatch, x " + shape_str(x.shape()) +
                                ", gamma " + shape_str(gamma.shape()));
    }

    TensorT<S> out(x.shape());
    std::vector<S> inv_std(rows), means(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xv = x.tensor().values.data() + r * w;
        S mean = 0;
        for (std::size_t j = 0; j < w; ++j) mean += xv[j];
        mean /= static_cast<S>(w);
        S var = 0;
        for (std::size_t j = 0; j < w; ++j) {
            const S c = xv[j] - mean;
            var += c * c;
        }
        var /= static_cast<S>(w);
        const S istd = S(1) / std::sqrt(var + eps);
        means[r] = mean;
        inv_std[r] = istd;
        for (std::size_t j = 0; j < w; ++j) {
            out.values[r * w + j] = gamma.tensor()[j] * (xv[j] - mean) * istd + beta.tensor()[j];
        }
    }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_node<S>(
        "layer_norm", std::move(out), {xn, gn, bn},
        [xn, gn, bn, rows, w, means = std::move(means), inv_std = std::move(inv_std)](GraphNode<S>& n) {
            for (std::size_t r = 0; r < rows; ++r) {
                const S* xv = xn->value.values.data() + r * w;
                const S* dy = n.grad.values.data() + r * w;
                const S mean = means[r], istd = inv_std[r];
                if (gn->requires_grad || bn->requires_grad) {
                    for (std::size_t j = 0; j < w; ++j) {
                        const S xhat = (xv[j] - mean) * istd;
                        if (gn->requires_grad) gn->grad.values[j] += dy[j] * xhat;
                        if (bn->requires_grad) bn->grad.values[j] += dy[j];
                    }
                }
                if (!xn->requires_grad) continue;
                // dx = istd * (g - mean(g) - xhat * mean(g*xhat)), g = gamma*dy
                S g_mean = 0, gx_mean = 0;
                for (std::size_t j = 0; j < w; ++j) {
                    const S g = gn->value[j] * dy[j];
                    const S xhat = (xv[j] - mean) * istd;
                    g_mean += g;
                    gx_mean += g * xhat;
                }
                g_mean /= static_cast<S>(w);
                gx_mean /= static_cast<S>(w);
                for (std::size_t j = 0; j < w; ++j) {
                    const S g = gn->value[j] * dy[j];
                    const S xhat = (xv[j] - mean) * istd;
                    xn->grad.values[r * w + j] += istd * (g - g_mean - xhat * gx_mean);
                }
            }
        });
}

// Softmax along one axis of a rank-1 or rank-2 tensor.
template <class S>
ValueT<S> softmax(const ValueT<S>& x, std::size_t axis) {
    const std::size_t rank = x.shape().size();
    if (rank < 1 || rank > 2 || axis >= rank) {
        throw ContractViolation("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                                shape_str(x.shape()));
    }
    if (rank == 2 && axis == 0) {
        // normalize down columns via the row implementation
        return transpose(softmax(transpose(x), 1));
    }
    const std::size_t w = x.shape()[rank - 1];
    const std::size_t rows = rank == 2 ? x.shape()[0] : 1;
    TensorT<S> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xv = x.tensor().values.data() + r * w;
        S mx = xv[0];
        for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, xv[j]);
        S denom = 0;
        for (std::size_t j = 0; j < w; ++j) {
            const S e = std::exp(xv[j] - mx);
            out.values[r * w + j] = e;
            denom += e;
        }
        for (std::size_t j = 0; j < w; ++j) out.values[r * w + j] /= denom;
    }
    auto xn = x.node();
    return detail::make_node<S>("softmax", std::move(out), {xn}, [xn, rows, w](GraphNode<S>& n) {
        if (!xn->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const S* y = n.value.values.data() + r * w;
            const S* dy = n.grad.values.data() + r * w;
            S dot = 0;
            for (std::size_t j = 0; j < w; ++j) dot += y[j] * dy[j];
            for (std::size_t j = 0; j < w; ++j)
                xn->grad.values[r * w + j] += y[j] * (dy[j] - dot);
        }
    });
}

template <class S>
ValueT<S> softmax(const ValueT<S>& x) {
    return softmax(x, x.shape().size() - 1);
}

template <class S>
ValueT<S> relu(const ValueT<S>& a) {
    TensorT<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.tensor()[i] > S(0) ? a.tensor()[i] : S(0);
    auto an = a.node();
    return detail::make_node<S>("relu", std::move(out), {an}, [an](GraphNode<S>& n) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (an->value[i] > S(0)) an->grad[i] += n.grad[i];
    });
}

// Exact GELU: x * Phi(x) with the Gaussian CDF via erf.
template <class S>
ValueT<S> gelu(const ValueT<S>& a) {
    static constexpr double inv_sqrt2 = 0.70710678118654752440;
    static constexpr double inv_sqrt2pi = 0.39894228040143267794;
    TensorT<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = static_cast<double>(a.tensor()[i]);
        out[i] = static_cast<S>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
    }
    auto an = a.node();
    return detail::make_node<S>("gelu", std::move(out), {an}, [an](GraphNode<S>& n) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double x = static_cast<double>(an->value[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            an->grad[i] += n.grad[i] * static_cast<S>(cdf + x * pdf);
        }
    });
}

template <class S>
ValueT<S> l2_norm(const ValueT<S>& a) {
    detail::expect_rank("l2_norm", a, 1);
    S acc = 0;
    for (S v : a.tensor().values) acc += v * v;
    const S norm = std::sqrt(acc);
    TensorT<S> out({1});
    out.values[0] = norm;
    auto an = a.node();
    return detail::make_node<S>("l2_norm", std::move(out), {an}, [an](GraphNode<S>& n) {
        if (!an->requires_grad) return;
        const S norm2 = n.value.values[0];
        if (norm2 == S(0)) {
            throw NumericError("l2_norm: gradient undefined at the zero vector");
        }
        for (std::size_t i = 0; i < an->grad.size(); ++i)
            an->grad[i] += n.grad.values[0] * an->value[i] / norm2;
    });
}

// Cosine similarity of two d-vectors, differentiable in both.
// Zero-norm inputs are an error, never a silent 0.
template <class S>
ValueT<S> cosine_similarity(const ValueT<S>& a, const ValueT<S>& b) {
    detail::expect_rank("cosine_similarity", a, 1);
    detail::expect_rank("cosine_similarity", b, 1);
    if (a.shape()[0] != b.shape()[0]) {
        throw ContractViolation("cosine_similarity: dimension mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
    }
    const std::size_t d = a.shape()[0];
    S dot = 0, na2 = 0, nb2 = 0;
    for (std::size_t i = 0; i < d; ++i) {
        dot += a.tensor()[i] * b.tensor()[i];
        na2 += a.tensor()[i] * a.tensor()[i];
        nb2 += b.tensor()[i] * b.tensor()[i];
    }
    const S na = std::sqrt(na2), nb = std::sqrt(nb2);
    if (na == S(0) || nb == S(0)) {
        throw NumericError(std::string("cosine_similarity: zero-norm ") +
                           (na == S(0) ? "left" : "right") + " input");
    }
    const S sim = dot / (na * nb);
    TensorT<S> out({1});
    out.values[0] = sim;
    auto an = a.node(), bn = b.node();
    return detail::make_node<S>(
        "cosine_similarity", std::move(out), {an, bn}, [an, bn, d, na, nb, sim](GraphNode<S>& n) {
            const S g = n.grad.values[0];
            if (an->requires_grad) {
                const S inv = S(1) / (na * nb);
                for (std::size_t i = 0; i < d; ++i)
                    an->grad[i] += g * (bn->value[i] * inv - sim * an->value[i] / (na * na));
            }
            if (bn->requires_grad) {
                const S inv = S(1) / (na * nb);
                for (std::size_t i = 0; i < d; ++i)
                    bn->grad[i] += g * (an->value[i] * inv - sim * bn->value[i] / (nb * nb));
            }
        });
}

// Broadcast-add a row vector (W) onto every row of a (T, W) matrix.
template <class S>
ValueT<S> add_rowvec(const ValueT<S>& m, const ValueT<S>& v) {
    detail::expect_rank("add_rowvec", m, 2);
    detail::expect_rank("add_rowvec", v, 1);
    const std::size_t rows = m.shape()[0], w = m.shape()[1];
    if (v.shape()[0] != w) {
        throw ContractViolation("add_rowvec: width mismatch " + shape_str(m.shape()) + " vs " +
                                shape_str(v.shape()));
    }
    TensorT<S> out(m.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j)
            out.values[r * w + j] = m.tensor().values[r * w + j] + v.tensor()[j];
    auto mn = m.node(), vn = v.node();
    return detail::make_node<S>("add_rowvec", std::move(out), {mn, vn}, [mn, vn, rows, w](GraphNode<S>& n) {
        if (mn->requires_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i) mn->grad.values[i] += n.grad.values[i];
        if (vn->requires_grad)
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < w; ++j) vn->grad.values[j] += n.grad.values[r * w + j];
    });
}

// Cross-entropy of one logit row against a target class, with a temperature
// multiplier applied before the softmax: -log softmax(scale * logits)[target].
// Fused for numerical stability; backward is scale * (softmax - onehot).
template <class S>
ValueT<S> cross_entropy(const ValueT<S>& logits, std::size_t target, S logit_scale = S(1)) {
    detail::expect_rank("cross_entropy", logits, 1);
    const std::size_t c = logits.shape()[0];
    if (target >= c) {
        throw ContractViolation("cross_entropy: target " + std::to_string(target) +
                                " out of range for " + std::to_string(c) + " classes");
    }
    if (!(logit_scale > S(0))) {
        throw ContractViolation("cross_entropy: logit_scale must be positive");
    }
    std::vector<S> scaled(c);
    S mx = logits.tensor()[0] * logit_scale;
    for (std::size_t i = 0; i < c; ++i) {
        scaled[i] = logits.tensor()[i] * logit_scale;
        mx = std::max(mx, scaled[i]);
    }
    S denom = 0;
    for (std::size_t i = 0; i < c; ++i) denom += std::exp(scaled[i] - mx);
    const S loss = std::log(denom) + mx - scaled[target];
    TensorT<S> out({1});
    out.values[0] = loss;
    auto ln = logits.node();
    return detail::make_node<S>(
        "cross_entropy", std::move(out), {ln},
        [ln, target, logit_scale, scaled = std::move(scaled), mx, denom, c](GraphNode<S>& n) {
            if (!ln->requires_grad) return;
            const S g = n.grad.values[0];
            for (std::size_t i = 0; i < c; ++i) {
                const S p = std::exp(scaled[i] - mx) / denom;
                ln->grad[i] += g * logit_scale * (p - (i == target ? S(1) : S(0)));
            }
        });
}

} // namespace dpc
