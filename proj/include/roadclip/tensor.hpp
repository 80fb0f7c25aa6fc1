#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "roadclip/errors.hpp"
#include "roadclip/threading.hpp"

namespace roadclip {

// Reverse-mode autodiff over dense tensors of rank 0..2.  A Tensor is a
// value-semantic handle to a heap node; ops build a DAG only while gradient
// recording is on and some input requires grad.  Values are immutable between
// graph construction and backward(), so backward closures read inputs
// straight from their parent nodes.

inline bool& grad_recording_flag() {
    thread_local bool on = true;
    return on;
}

inline bool grad_recording() { return grad_recording_flag(); }

/// RAII guard that disables graph construction (inference / data paths).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_recording_flag()) { grad_recording_flag() = false; }
    ~NoGradGuard() { grad_recording_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // pulls from grad, pushes into parents
};

namespace detail {

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace detail

template <typename T>
class Tensor {
public:
    Tensor() : node_(nullptr) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(std::vector<int> shape, T v, bool requires_grad = false) {
        for (int d : shape)
            if (d < 0) throw ValidationError("tensor: negative dimension in shape " + detail::shape_str(shape));
        if (shape.size() > 2) throw ValidationError("tensor: rank above 2 is not supported");
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value.assign(static_cast<size_t>(detail::numel_of(n->shape)), v);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_values(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        if (values.size() != t.node_->value.size())
            throw ValidationError("tensor: value count " + std::to_string(values.size()) +
                                  " does not fill shape " + detail::shape_str(t.shape()));
        t.node_->value = std::move(values);
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return filled({}, v, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    int rows() const { return rank() == 2 ? dim(0) : 1; }
    int cols() const { return rank() >= 1 ? dim(rank() - 1) : 1; }

    // Spans view node storage; binding them to an expiring handle would
    // dangle, so rvalue access is refused outright.
    std::span<T> values() & { return node_->value; }
    std::span<const T> values() const& { return node_->value; }
    std::span<T> values() && = delete;
    T item() const {
        if (numel() != 1) throw ValidationError("tensor: item() on non-scalar shape " + detail::shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const& {
        if (node_->grad.empty())
            throw ValidationError("tensor: gradient not populated; run backward first");
        return node_->grad;
    }
    std::span<const T> grad() && = delete;
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
    void drop_grad() { node_->grad.clear(); }

    std::shared_ptr<TensorNode<T>>& node() { return node_; }
    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
bool track(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_recording()) return false;
    for (auto* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

/// Make the result node; wires parents + closure only when tracking.
template <typename T>
Tensor<T> make_result(std::vector<int> shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(TensorNode<T>&)> backprop) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (track<T>(inputs)) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (auto* t : inputs) n->parents.push_back(t->node());
        n->backprop = std::move(backprop);
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
void ensure_grad(TensorNode<T>& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
}

}  // namespace detail

/// Accumulate d(root)/d(leaf) into every requires-grad node reachable from
/// root.  Root must be scalar.  Topological order is rebuilt per call with an
/// iterative DFS whose child order follows the parents vector, so the
/// accumulation order, and the result bit pattern, is a pure function of the
/// graph.
template <typename T>
void backward(Tensor<T>& root) {
    if (root.numel() != 1)
        throw ValidationError("backward: root must be scalar, got shape " + detail::shape_str(root.shape()));
    if (!root.requires_grad())
        throw ValidationError("backward: root does not require grad");

    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    detail::ensure_grad(*root.node());
    root.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backprop) {
            for (auto& p : n->parents)
                if (p->requires_grad) detail::ensure_grad(*p);
            n->backprop(*n);
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    // Same shape, matrix + row vector, or anything + scalar.
    auto va = a.values();
    auto vb = b.values();
    if (a.shape() == b.shape()) {
        std::vector<T> out(va.begin(), va.end());
        for (size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < n.grad.size(); ++i) {
                if (pa.requires_grad) pa.grad[i] += n.grad[i];
                if (pb.requires_grad) pb.grad[i] += n.grad[i];
            }
        });
    }
    if (b.numel() == 1 && b.rank() == 0) {
        T s = vb[0];
        std::vector<T> out(va.begin(), va.end());
        for (auto& v : out) v += s;
        return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < n.grad.size(); ++i) {
                if (pa.requires_grad) pa.grad[i] += n.grad[i];
                if (pb.requires_grad) pb.grad[0] += n.grad[i];
            }
        });
    }
    if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) {
        int m = a.dim(0), c = a.dim(1);
        std::vector<T> out(va.begin(), va.end());
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] += vb[static_cast<size_t>(j)];
        return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [m, c](TensorNode<T>& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) {
                    T g = n.grad[static_cast<size_t>(i) * c + j];
                    if (pa.requires_grad) pa.grad[static_cast<size_t>(i) * c + j] += g;
                    if (pb.requires_grad) pb.grad[static_cast<size_t>(j)] += g;
                }
        });
    }
    throw ValidationError("add: incompatible shapes " + detail::shape_str(a.shape()) + " and " +
                          detail::shape_str(b.shape()));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ValidationError("sub: shapes differ, " + detail::shape_str(a.shape()) + " vs " +
                              detail::shape_str(b.shape()));
    auto va = a.values();
    auto vb = b.values();
    std::vector<T> out(va.begin(), va.end());
    for (size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (size_t i = 0; i < n.grad.size(); ++i) {
            if (pa.requires_grad) pa.grad[i] += n.grad[i];
            if (pb.requires_grad) pb.grad[i] -= n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    // Same shape (Hadamard) or anything times scalar tensor.
    auto va = a.values();
    auto vb = b.values();
    if (a.shape() == b.shape()) {
        std::vector<T> out(va.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
        return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [](TensorNode<T>& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < n.grad.size(); ++i) {
                if (pa.requires_grad) pa.grad[i] += n.grad[i] * pb.value[i];
                if (pb.requires_grad) pb.grad[i] += n.grad[i] * pa.value[i];
            }
        });
    }
    if (b.rank() == 0) {
        T s = vb[0];
        std::vector<T> out(va.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] * s;
        return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [s](TensorNode<T>& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            for (size_t i = 0; i < n.grad.size(); ++i) {
                if (pa.requires_grad) pa.grad[i] += n.grad[i] * s;
                if (pb.requires_grad) pb.grad[0] += n.grad[i] * pa.value[i];
            }
        });
    }
    throw ValidationError("mul: incompatible shapes " + detail::shape_str(a.shape()) + " and " +
                          detail::shape_str(b.shape()));
}

/// Multiply by a compile-time-known constant (not differentiable through c).
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    auto vx = x.values();
    std::vector<T> out(vx.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = vx[i] * c;
    return detail::make_result<T>(x.shape(), std::move(out), {&x}, [c](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ValidationError("matmul: expects rank-2 inputs, got " + detail::shape_str(a.shape()) +
                              " and " + detail::shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ValidationError("matmul: inner dimensions differ, " + detail::shape_str(a.shape()) +
                              " vs " + detail::shape_str(b.shape()));
    const T* A = a.values().data();
    const T* B = b.values().data();
    std::vector<T> out(static_cast<size_t>(m) * n, T(0));
    // k*n inner kernel per output row: contiguous in B and C, vectorizes.
    parallel_for(m, [&](int64_t i) {
        T* C = out.data() + i * n;
        const T* Ar = A + i * k;
        for (int p = 0; p < k; ++p) {
            T av = Ar[p];
            const T* Br = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) C[j] += av * Br[j];
        }
    }, 64);
    return detail::make_result<T>({m, n}, std::move(out), {&a, &b}, [m, k, n](TensorNode<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const T* G = node.grad.data();
        if (pa.requires_grad) {
            // dA = G B^T : row dot row, both contiguous.
            const T* B = pb.value.data();
            T* dA = pa.grad.data();
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const T* Gr = G + static_cast<size_t>(i) * n;
                    const T* Br = B + static_cast<size_t>(p) * n;
                    T acc = T(0);
                    for (int j = 0; j < n; ++j) acc += Gr[j] * Br[j];
                    dA[static_cast<size_t>(i) * k + p] += acc;
                }
        }
        if (pb.requires_grad) {
            // dB = A^T G : axpy rows of G into rows of dB.
            const T* A = pa.value.data();
            T* dB = pb.grad.data();
            for (int i = 0; i < m; ++i) {
                const T* Gr = G + static_cast<size_t>(i) * n;
                for (int p = 0; p < k; ++p) {
                    T av = A[static_cast<size_t>(i) * k + p];
                    T* dBr = dB + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) dBr[j] += av * Gr[j];
                }
            }
        }
    });
}

/// Row vector [k] times matrix [k x n] -> [n].
template <typename T>
Tensor<T> vecmat(const Tensor<T>& v, const Tensor<T>& w) {
    if (v.rank() != 1 || w.rank() != 2 || v.dim(0) != w.dim(0))
        throw ValidationError("vecmat: incompatible shapes " + detail::shape_str(v.shape()) + " and " +
                              detail::shape_str(w.shape()));
    int k = w.dim(0), n = w.dim(1);
    const T* V = v.values().data();
    const T* W = w.values().data();
    std::vector<T> out(static_cast<size_t>(n), T(0));
    for (int p = 0; p < k; ++p) {
        T av = V[p];
        const T* Wr = W + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j)] += av * Wr[j];
    }
    return detail::make_result<T>({n}, std::move(out), {&v, &w}, [k, n](TensorNode<T>& node) {
        auto& pv = *node.parents[0];
        auto& pw = *node.parents[1];
        const T* G = node.grad.data();
        if (pv.requires_grad) {
            const T* W = pw.value.data();
            for (int p = 0; p < k; ++p) {
                const T* Wr = W + static_cast<size_t>(p) * n;
                T acc = T(0);
                for (int j = 0; j < n; ++j) acc += Wr[j] * G[j];
                pv.grad[static_cast<size_t>(p)] += acc;
            }
        }
        if (pw.requires_grad) {
            const T* V = pv.value.data();
            for (int p = 0; p < k; ++p) {
                T av = V[p];
                T* dWr = pw.grad.data() + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) dWr[j] += av * G[j];
            }
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw ValidationError("transpose: expects rank-2, got " + detail::shape_str(x.shape()));
    int m = x.dim(0), n = x.dim(1);
    const T* X = x.values().data();
    std::vector<T> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = X[static_cast<size_t>(i) * n + j];
    return detail::make_result<T>({n, m}, std::move(out), {&x}, [m, n](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                p.grad[static_cast<size_t>(i) * n + j] += node.grad[static_cast<size_t>(j) * m + i];
    });
}

// ---------------------------------------------------------------------------
// reductions and nonlinearities
// ---------------------------------------------------------------------------

/// Softmax along `axis` (rank-1: the only axis; rank-2: 0 = down columns,
/// 1 = along rows).  Max-subtracted per slice.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    if (x.rank() == 1) {
        if (axis != -1 && axis != 0) throw ValidationError("softmax: axis out of range for rank-1");
        // treat as a single row
        int n = x.dim(0);
        const T* X = x.values().data();
        std::vector<T> out(static_cast<size_t>(n));
        T mx = X[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, X[j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) {
            out[static_cast<size_t>(j)] = std::exp(X[j] - mx);
            sum += out[static_cast<size_t>(j)];
        }
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j)] /= sum;
        return detail::make_result<T>(x.shape(), std::move(out), {&x}, [n](TensorNode<T>& node) {
            auto& p = *node.parents[0];
            const T* Y = node.value.data();
            const T* G = node.grad.data();
            T dot = T(0);
            for (int j = 0; j < n; ++j) dot += G[j] * Y[j];
            for (int j = 0; j < n; ++j) p.grad[static_cast<size_t>(j)] += Y[j] * (G[j] - dot);
        });
    }
    if (x.rank() != 2) throw ValidationError("softmax: expects rank 1 or 2");
    if (axis == -1) axis = 1;
    if (axis == 0) return transpose(softmax(transpose(x), 1));
    if (axis != 1) throw ValidationError("softmax: axis out of range for rank-2");
    int m = x.dim(0), n = x.dim(1);
    if (n == 0) throw ValidationError("softmax: empty rows");
    const T* X = x.values().data();
    std::vector<T> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        const T* Xr = X + static_cast<size_t>(i) * n;
        T* Yr = out.data() + static_cast<size_t>(i) * n;
        T mx = Xr[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, Xr[j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) {
            Yr[j] = std::exp(Xr[j] - mx);
            sum += Yr[j];
        }
        for (int j = 0; j < n; ++j) Yr[j] /= sum;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {&x}, [m, n](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        for (int i = 0; i < m; ++i) {
            const T* Y = node.value.data() + static_cast<size_t>(i) * n;
            const T* G = node.grad.data() + static_cast<size_t>(i) * n;
            T* D = p.grad.data() + static_cast<size_t>(i) * n;
            T dot = T(0);
            for (int j = 0; j < n; ++j) dot += G[j] * Y[j];
            for (int j = 0; j < n; ++j) D[j] += Y[j] * (G[j] - dot);
        }
    });
}

/// Layer norm over the last axis with learnable gain/bias of width n.
/// Variance is the biased estimate; eps sits under the square root.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    int n = x.cols();
    int m = x.rank() == 2 ? x.dim(0) : 1;
    if (x.rank() < 1 || n == 0) throw ValidationError("layer_norm: needs at least one feature");
    if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n)
        throw ValidationError("layer_norm: gain/bias must be rank-1 of width " + std::to_string(n));
    const T* X = x.values().data();
    const T* Gn = gain.values().data();
    const T* Bs = bias.values().data();
    std::vector<T> out(static_cast<size_t>(m) * n);
    std::vector<T> xhat(static_cast<size_t>(m) * n);
    std::vector<T> inv_sd(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const T* Xr = X + static_cast<size_t>(i) * n;
        T mean = T(0);
        for (int j = 0; j < n; ++j) mean += Xr[j];
        mean /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) {
            T d = Xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        T isd = T(1) / std::sqrt(var + eps);
        inv_sd[static_cast<size_t>(i)] = isd;
        for (int j = 0; j < n; ++j) {
            T xh = (Xr[j] - mean) * isd;
            xhat[static_cast<size_t>(i) * n + j] = xh;
            out[static_cast<size_t>(i) * n + j] = Gn[j] * xh + Bs[j];
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), {&x, &gain, &bias},
        [m, n, xhat = std::move(xhat), inv_sd = std::move(inv_sd)](TensorNode<T>& node) {
            auto& px = *node.parents[0];
            auto& pg = *node.parents[1];
            auto& pb = *node.parents[2];
            const T* Gn = pg.value.data();
            for (int i = 0; i < m; ++i) {
                const T* G = node.grad.data() + static_cast<size_t>(i) * n;
                const T* Xh = xhat.data() + static_cast<size_t>(i) * n;
                if (pg.requires_grad)
                    for (int j = 0; j < n; ++j) pg.grad[static_cast<size_t>(j)] += G[j] * Xh[j];
                if (pb.requires_grad)
                    for (int j = 0; j < n; ++j) pb.grad[static_cast<size_t>(j)] += G[j];
                if (px.requires_grad) {
                    T isd = inv_sd[static_cast<size_t>(i)];
                    T mean_dxh = T(0), mean_dxh_xh = T(0);
                    for (int j = 0; j < n; ++j) {
                        T dxh = G[j] * Gn[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * Xh[j];
                    }
                    mean_dxh /= static_cast<T>(n);
                    mean_dxh_xh /= static_cast<T>(n);
                    T* D = px.grad.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        T dxh = G[j] * Gn[j];
                        D[j] += isd * (dxh - mean_dxh - Xh[j] * mean_dxh_xh);
                    }
                }
            }
        });
}

/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    const T* X = x.values().data();
    std::vector<T> out(x.values().size());
    constexpr T inv_sqrt2 = T(0.7071067811865475244);
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = T(0.5) * X[i] * (T(1) + std::erf(X[i] * inv_sqrt2));
    return detail::make_result<T>(x.shape(), std::move(out), {&x}, [](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        constexpr T inv_sqrt2 = T(0.7071067811865475244);
        constexpr T inv_sqrt2pi = T(0.3989422804014326779);
        for (size_t i = 0; i < node.grad.size(); ++i) {
            T v = p.value[i];
            T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            p.grad[i] += node.grad[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    const T* X = x.values().data();
    std::vector<T> out(x.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(X[i]);
    return detail::make_result<T>(x.shape(), std::move(out), {&x}, [](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        for (size_t i = 0; i < node.grad.size(); ++i) p.grad[i] += node.grad[i] * node.value[i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    return detail::make_result<T>({}, {acc}, {&x}, [](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        T g = node.grad[0];
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ValidationError("mean: empty tensor");
    T acc = T(0);
    for (T v : x.values()) acc += v;
    T inv = T(1) / static_cast<T>(x.numel());
    return detail::make_result<T>({}, {acc * inv}, {&x}, [inv](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        T g = node.grad[0] * inv;
        for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

/// Column means of a matrix: [m x n] -> [n].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(0) == 0)
        throw ValidationError("mean_rows: expects a non-empty rank-2 input");
    int m = x.dim(0), n = x.dim(1);
    const T* X = x.values().data();
    std::vector<T> out(static_cast<size_t>(n), T(0));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j)] += X[static_cast<size_t>(i) * n + j];
    T inv = T(1) / static_cast<T>(m);
    for (auto& v : out) v *= inv;
    return detail::make_result<T>({n}, std::move(out), {&x}, [m, n, inv](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                p.grad[static_cast<size_t>(i) * n + j] += node.grad[static_cast<size_t>(j)] * inv;
    });
}

/// Stable log-sum-exp of each row: [m x n] -> [m].
template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) == 0)
        throw ValidationError("logsumexp_rows: expects rank-2 with non-empty rows");
    int m = x.dim(0), n = x.dim(1);
    const T* X = x.values().data();
    std::vector<T> out(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const T* Xr = X + static_cast<size_t>(i) * n;
        T mx = Xr[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, Xr[j]);
        T s = T(0);
        for (int j = 0; j < n; ++j) s += std::exp(Xr[j] - mx);
        out[static_cast<size_t>(i)] = mx + std::log(s);
    }
    return detail::make_result<T>({m}, std::move(out), {&x}, [m, n](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        const T* X = p.value.data();
        for (int i = 0; i < m; ++i) {
            const T* Xr = X + static_cast<size_t>(i) * n;
            T lse = node.value[static_cast<size_t>(i)];
            T g = node.grad[static_cast<size_t>(i)];
            T* D = p.grad.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) D[j] += g * std::exp(Xr[j] - lse);
        }
    });
}

/// Diagonal of a square matrix -> [n].
template <typename T>
Tensor<T> diag(const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(0) != x.dim(1))
        throw ValidationError("diag: expects a square matrix, got " + detail::shape_str(x.shape()));
    int n = x.dim(0);
    const T* X = x.values().data();
    std::vector<T> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = X[static_cast<size_t>(i) * n + i];
    return detail::make_result<T>({n}, std::move(out), {&x}, [n](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        for (int i = 0; i < n; ++i)
            p.grad[static_cast<size_t>(i) * n + i] += node.grad[static_cast<size_t>(i)];
    });
}

// ---------------------------------------------------------------------------
// shape surgery
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
    if (detail::numel_of(shape) != x.numel())
        throw ValidationError("reshape: element count mismatch, " + detail::shape_str(x.shape()) +
                              " to " + detail::shape_str(shape));
    if (shape.size() > 2) throw ValidationError("reshape: rank above 2 is not supported");
    auto vx = x.values();
    return detail::make_result<T>(std::move(shape), std::vector<T>(vx.begin(), vx.end()), {&x},
                                  [](TensorNode<T>& node) {
                                      auto& p = *node.parents[0];
                                      for (size_t i = 0; i < node.grad.size(); ++i) p.grad[i] += node.grad[i];
                                  });
}

/// Rows [r0, r1) of a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int r0, int r1) {
    if (x.rank() != 2) throw ValidationError("slice_rows: expects rank-2");
    int m = x.dim(0), n = x.dim(1);
    if (r0 < 0 || r1 < r0 || r1 > m)
        throw ValidationError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                              ") outside " + detail::shape_str(x.shape()));
    auto vx = x.values();
    std::vector<T> out(vx.begin() + static_cast<size_t>(r0) * n, vx.begin() + static_cast<size_t>(r1) * n);
    return detail::make_result<T>({r1 - r0, n}, std::move(out), {&x}, [r0, n](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        for (size_t i = 0; i < node.grad.size(); ++i)
            p.grad[static_cast<size_t>(r0) * n + i] += node.grad[i];
    });
}

/// Single row as a rank-1 vector.
template <typename T>
Tensor<T> row(const Tensor<T>& x, int i) {
    Tensor<T> r = slice_rows(x, i, i + 1);
    return reshape(r, {x.dim(1)});
}

/// Columns [c0, c1) of a matrix.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int c0, int c1) {
    if (x.rank() != 2) throw ValidationError("slice_cols: expects rank-2");
    int m = x.dim(0), n = x.dim(1);
    if (c0 < 0 || c1 < c0 || c1 > n)
        throw ValidationError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                              ") outside " + detail::shape_str(x.shape()));
    int w = c1 - c0;
    const T* X = x.values().data();
    std::vector<T> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<size_t>(i) * w + j] = X[static_cast<size_t>(i) * n + c0 + j];
    return detail::make_result<T>({m, w}, std::move(out), {&x}, [m, n, c0, w](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                p.grad[static_cast<size_t>(i) * n + c0 + j] += node.grad[static_cast<size_t>(i) * w + j];
    });
}

/// Element i of a rank-1 vector as a scalar.
template <typename T>
Tensor<T> element(const Tensor<T>& x, int i) {
    if (x.rank() != 1 || i < 0 || i >= x.dim(0))
        throw ValidationError("element: index " + std::to_string(i) + " outside " + detail::shape_str(x.shape()));
    return detail::make_result<T>({}, {x.values()[static_cast<size_t>(i)]}, {&x}, [i](TensorNode<T>& node) {
        node.parents[0]->grad[static_cast<size_t>(i)] += node.grad[0];
    });
}

/// Stack equal-width pieces along rows.  Rank-1 parts contribute one row,
/// rank-2 parts their rows.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ValidationError("concat_rows: no parts");
    int n = parts[0].cols();
    int m = 0;
    for (const auto& p : parts) {
        if (p.rank() < 1 || p.rank() > 2 || p.cols() != n)
            throw ValidationError("concat_rows: parts must share width " + std::to_string(n));
        m += p.rows();
    }
    std::vector<T> out;
    out.reserve(static_cast<size_t>(m) * n);
    bool track_any = false;
    for (const auto& p : parts) {
        auto v = p.values();
        out.insert(out.end(), v.begin(), v.end());
        track_any = track_any || p.requires_grad();
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = {m, n};
    node->value = std::move(out);
    if (grad_recording() && track_any) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        node->backprop = [](TensorNode<T>& nd) {
            size_t off = 0;
            for (auto& p : nd.parents) {
                size_t cnt = p->value.size();
                if (p->requires_grad)
                    for (size_t i = 0; i < cnt; ++i) p->grad[i] += nd.grad[off + i];
                off += cnt;
            }
        };
    }
    return Tensor<T>(std::move(node));
}

/// Concatenate matrices with equal row counts along columns.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no parts");
    int m = parts[0].rank() == 2 ? parts[0].dim(0) : -1;
    int n = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m)
            throw ValidationError("concat_cols: parts must be rank-2 with equal row counts");
        n += p.dim(1);
    }
    std::vector<T> out(static_cast<size_t>(m) * n);
    int coff = 0;
    bool track_any = false;
    for (const auto& p : parts) {
        int w = p.dim(1);
        const T* src = p.values().data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                out[static_cast<size_t>(i) * n + coff + j] = src[static_cast<size_t>(i) * w + j];
        coff += w;
        track_any = track_any || p.requires_grad();
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = {m, n};
    node->value = std::move(out);
    if (grad_recording() && track_any) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        node->backprop = [m, n](TensorNode<T>& nd) {
            int coff = 0;
            for (auto& p : nd.parents) {
                int w = p->shape[1];
                if (p->requires_grad)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p->grad[static_cast<size_t>(i) * w + j] +=
                                nd.grad[static_cast<size_t>(i) * n + coff + j];
                coff += w;
            }
        };
    }
    return Tensor<T>(std::move(node));
}

/// Stack scalars into a rank-1 vector.
template <typename T>
Tensor<T> stack_scalars(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ValidationError("stack_scalars: no parts");
    std::vector<T> out;
    out.reserve(parts.size());
    bool track_any = false;
    for (const auto& p : parts) {
        if (p.numel() != 1) throw ValidationError("stack_scalars: parts must be scalars");
        out.push_back(p.values()[0]);
        track_any = track_any || p.requires_grad();
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = {static_cast<int>(parts.size())};
    node->value = std::move(out);
    if (grad_recording() && track_any) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        node->backprop = [](TensorNode<T>& nd) {
            for (size_t i = 0; i < nd.parents.size(); ++i)
                if (nd.parents[i]->requires_grad) nd.parents[i]->grad[0] += nd.grad[i];
        };
    }
    return Tensor<T>(std::move(node));
}

/// Gather rows of an embedding table; duplicate ids accumulate gradient.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ValidationError("take_rows: table must be rank-2");
    int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw ValidationError("take_rows: id " + std::to_string(id) + " outside table of " +
                                  std::to_string(v) + " rows");
    const T* Tb = table.values().data();
    std::vector<T> out(ids.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(Tb + static_cast<size_t>(ids[i]) * d, d, out.data() + i * static_cast<size_t>(d));
    return detail::make_result<T>({static_cast<int>(ids.size()), d}, std::move(out), {&table},
                                  [ids, d](TensorNode<T>& node) {
                                      auto& p = *node.parents[0];
                                      for (size_t i = 0; i < ids.size(); ++i) {
                                          const T* g = node.grad.data() + i * static_cast<size_t>(d);
                                          T* dst = p.grad.data() + static_cast<size_t>(ids[i]) * d;
                                          for (int j = 0; j < d; ++j) dst[j] += g[j];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// geometry on vectors
// ---------------------------------------------------------------------------

/// x / ||x||; the zero vector maps to itself and passes no gradient there.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x) {
    if (x.rank() != 1) throw ValidationError("l2_normalize: expects rank-1");
    int n = x.dim(0);
    const T* X = x.values().data();
    T sq = T(0);
    for (int j = 0; j < n; ++j) sq += X[j] * X[j];
    T norm = std::sqrt(sq);
    std::vector<T> out(static_cast<size_t>(n));
    if (norm == T(0)) {
        return detail::make_result<T>(x.shape(), std::move(out), {&x}, [](TensorNode<T>&) {});
    }
    T inv = T(1) / norm;
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j)] = X[j] * inv;
    return detail::make_result<T>(x.shape(), std::move(out), {&x}, [n, inv](TensorNode<T>& node) {
        auto& p = *node.parents[0];
        const T* Y = node.value.data();
        const T* G = node.grad.data();
        T dot = T(0);
        for (int j = 0; j < n; ++j) dot += G[j] * Y[j];
        for (int j = 0; j < n; ++j) p.grad[static_cast<size_t>(j)] += inv * (G[j] - Y[j] * dot);
    });
}

/// Cosine similarity of two rank-1 vectors; zero-norm input is an error.
template <typename T>
Tensor<T> cosine_sim(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.dim(0) != b.dim(0))
        throw ValidationError("cosine_sim: expects rank-1 vectors of equal length");
    int n = a.dim(0);
    const T* A = a.values().data();
    const T* B = b.values().data();
    T aa = T(0), bb = T(0), ab = T(0);
    for (int j = 0; j < n; ++j) {
        aa += A[j] * A[j];
        bb += B[j] * B[j];
        ab += A[j] * B[j];
    }
    if (aa == T(0) || bb == T(0))
        throw NumericError("cosine_sim: zero-norm input");
    T na = std::sqrt(aa), nb = std::sqrt(bb);
    T c = ab / (na * nb);
    return detail::make_result<T>({}, {c}, {&a, &b}, [n, na, nb, c](TensorNode<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const T* A = pa.value.data();
        const T* B = pb.value.data();
        T g = node.grad[0];
        T inv_ab = T(1) / (na * nb);
        for (int j = 0; j < n; ++j) {
            if (pa.requires_grad) pa.grad[static_cast<size_t>(j)] += g * (B[j] * inv_ab - c * A[j] / (na * na));
            if (pb.requires_grad) pb.grad[static_cast<size_t>(j)] += g * (A[j] * inv_ab - c * B[j] / (nb * nb));
        }
    });
}

}  // namespace roadclip
