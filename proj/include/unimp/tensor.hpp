#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
// Nodes record their inputs and a backprop rule; backward() replays the
// rules in reverse recording order, so every node is visited after all of
// its consumers and shared subexpressions accumulate correctly.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <unordered_set>
#include <vector>

#include "unimp/core.hpp"

namespace unimp {

namespace detail {

inline std::atomic<uint64_t> node_counter{0};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

}  // namespace detail

namespace autograd {

inline thread_local bool grad_enabled = true;

// Disables graph recording in a scope (inference / evaluation paths).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled) { grad_enabled = false; }
    ~NoGradGuard() { grad_enabled = prev; }
};

}  // namespace autograd

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from(std::move(shape), {});
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> data) {
        auto node = std::make_shared<detail::Node<T>>();
        const long long n = unimp::numel(shape);
        if (data.empty()) {
            data.assign(static_cast<size_t>(n), T(0));
        } else if (static_cast<long long>(data.size()) != n) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        node->shape = std::move(shape);
        node->value = std::move(data);
        node->seq = detail::node_counter.fetch_add(1, std::memory_order_relaxed);
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    long long size() const { return static_cast<long long>(node_->value.size()); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        if (b) {
            node_->ensure_grad();
        } else {
            node_->grad.clear();
            node_->grad.shrink_to_fit();
        }
        return *this;
    }

    // Accumulated gradient; empty unless requires_grad.
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& grad() { return node_->grad; }

    void zero_grad() {
        if (node_->requires_grad) {
            node_->ensure_grad();
            std::fill(node_->grad.begin(), node_->grad.end(), T(0));
        }
    }

    T item() const {
        if (size() != 1) throw ValidationError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    std::shared_ptr<detail::Node<T>>& node() { return node_; }
    const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node<T>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backprop) {
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(value));
    if (!autograd::grad_enabled) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.node()->requires_grad;
    if (!needs) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (const auto& in : inputs) node.parents.push_back(in.node());
    node.backprop = std::move(backprop);
    return out;
}

template <typename T>
void accumulate(Node<T>& dst, const T* src, size_t n) {
    if (!dst.requires_grad) return;
    dst.ensure_grad();
    T* g = dst.grad.data();
    for (size_t i = 0; i < n; ++i) g[i] += src[i];
}

}  // namespace detail

// ----------------------------- kernels -----------------------------

namespace kern {

constexpr long long kParallelFlops = 16'000'000;

// C[m,n] (+)= A[m,k] * B[k,n]. Four-row register blocking; each output row
// accumulates in the same (p-outer, j-inner) order on every path, so the
// result does not depend on the partitioning.
template <typename T>
void mm(const T* a, const T* b, T* c, int m, int k, int n, bool acc) {
    auto body = [&](long long r0, long long r1) {
        long long i = r0;
        for (; i + 4 <= r1; i += 4) {
            T* c0 = c + i * n;
            T* c1 = c0 + n;
            T* c2 = c1 + n;
            T* c3 = c2 + n;
            if (!acc) std::fill(c0, c3 + n, T(0));
            const T* a0 = a + i * k;
            const T* a1 = a0 + k;
            const T* a2 = a1 + k;
            const T* a3 = a2 + k;
            for (int p = 0; p < k; ++p) {
                const T x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
                const T* brow = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) {
                    const T bv = brow[j];
                    c0[j] += x0 * bv;
                    c1[j] += x1 * bv;
                    c2[j] += x2 * bv;
                    c3[j] += x3 * bv;
                }
            }
        }
        for (; i < r1; ++i) {
            T* crow = c + i * n;
            if (!acc) std::fill(crow, crow + n, T(0));
            const T* arow = a + i * k;
            for (int p = 0; p < k; ++p) {
                const T ap = arow[p];
                const T* brow = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += ap * brow[j];
            }
        }
    };
    if (2LL * m * k * n >= kParallelFlops) {
        ThreadPool::instance().parallel_for(0, m, body);
    } else {
        body(0, m);
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T   (rows of B are the right-hand columns).
// Materializes B^T so the inner loop stays a vectorizable row update
// instead of a scalar dot-product reduction.
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool acc) {
    std::vector<T> bt(static_cast<size_t>(k) * n);
    for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p) bt[static_cast<size_t>(p) * n + j] = b[static_cast<size_t>(j) * k + p];
    mm(a, bt.data(), c, m, k, n, acc);
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool acc) {
    auto body = [&](long long r0, long long r1) {
        if (!acc) {
            for (long long i = r0; i < r1; ++i) std::fill(c + i * n, c + (i + 1) * n, T(0));
        }
        for (int t = 0; t < k; ++t) {
            const T* brow = b + static_cast<size_t>(t) * n;
            for (long long i = r0; i < r1; ++i) {
                const T at = a[static_cast<size_t>(t) * m + i];
                T* crow = c + i * n;
                for (int j = 0; j < n; ++j) crow[j] += at * brow[j];
            }
        }
    };
    if (2LL * m * k * n >= kParallelFlops) {
        ThreadPool::instance().parallel_for(0, m, body);
    } else {
        body(0, m);
    }
}

}  // namespace kern

// ----------------------------- operations -----------------------------

template <typename T>
void check_rank2(const Tensor<T>& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul inner extents disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(static_cast<size_t>(m) * n);
    kern::mm(a.data().data(), b.data().data(), out.data(), m, k, n, false);
    return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const T* dc = node.grad.data();
        if (pa.requires_grad) {
            pa.ensure_grad();
            kern::mm_nt(dc, pb.value.data(), pa.grad.data(), m, n, k, true);  // dA = dC * B^T
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            kern::mm_tn(pa.value.data(), dc, pb.grad.data(), k, m, n, true);  // dB = A^T * dC
        }
    });
}

// a * b^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    check_rank2(a, "matmul_nt");
    check_rank2(b, "matmul_nt");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (k != b.dim(1)) {
        throw DimensionError("matmul_nt inner extents disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    }
    std::vector<T> out(static_cast<size_t>(m) * n);
    kern::mm_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
    return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const T* dc = node.grad.data();
        if (pa.requires_grad) {
            pa.ensure_grad();
            kern::mm(dc, pb.value.data(), pa.grad.data(), m, n, k, true);  // dA = dC * B
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            kern::mm_tn(dc, pa.value.data(), pb.grad.data(), n, m, k, true);  // dB = dC^T * A
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    check_rank2(a, "transpose");
    const int m = a.dim(0), n = a.dim(1);
    std::vector<T> out(a.data().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    return detail::make_result<T>({n, m}, std::move(out), {a}, [m, n](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i)
                pa.grad[static_cast<size_t>(i) * n + j] += node.grad[static_cast<size_t>(j) * m + i];
    });
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + " shapes disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& node) {
        detail::accumulate(*node.parents[0], node.grad.data(), node.grad.size());
        detail::accumulate(*node.parents[1], node.grad.data(), node.grad.size());
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& node) {
        detail::accumulate(*node.parents[0], node.grad.data(), node.grad.size());
        auto& pb = *node.parents[1];
        if (!pb.requires_grad) return;
        pb.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) pb.grad[i] -= node.grad[i];
    });
}

// The single permitted broadcast: trailing-dimension vector add.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
    if (a.rank() < 1 || v.rank() != 1 || a.dim(a.rank() - 1) != v.dim(0)) {
        throw DimensionError("add_rowvec shapes disagree: " + shape_str(a.shape()) + " + " + shape_str(v.shape()));
    }
    const int d = v.dim(0);
    const long long rows = a.size() / d;
    std::vector<T> out(a.data().size());
    for (long long r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) out[r * d + j] = a.data()[r * d + j] + v.data()[j];
    return detail::make_result<T>(a.shape(), std::move(out), {a, v}, [rows, d](detail::Node<T>& node) {
        detail::accumulate(*node.parents[0], node.grad.data(), node.grad.size());
        auto& pv = *node.parents[1];
        if (!pv.requires_grad) return;
        pv.ensure_grad();
        for (long long r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) pv.grad[j] += node.grad[r * d + j];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) pa.grad[i] += node.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) pb.grad[i] += node.grad[i] * pa.value[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [c](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) pa.grad[i] += node.grad[i] * c;
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& node) {
        detail::accumulate(*node.parents[0], node.grad.data(), node.grad.size());
    });
}

// out = s * x where s is a one-element tensor (e.g. a learnable gate).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.size() != 1) throw DimensionError("scale_by expects a one-element scale, got " + shape_str(s.shape()));
    const T sv = s.data()[0];
    std::vector<T> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
    return detail::make_result<T>(x.shape(), std::move(out), {x, s}, [sv](detail::Node<T>& node) {
        auto& px = *node.parents[0];
        auto& ps = *node.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            for (size_t i = 0; i < node.grad.size(); ++i) px.grad[i] += node.grad[i] * sv;
        }
        if (ps.requires_grad) {
            ps.ensure_grad();
            T acc = T(0);
            for (size_t i = 0; i < node.grad.size(); ++i) acc += node.grad[i] * px.value[i];
            ps.grad[0] += acc;
        }
    });
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) pa.grad[i] += node.grad[i] * node.value[i];
    });
}

template <typename T>
Tensor<T> tanh_t(const Tensor<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data()[i]);
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const T y = node.value[i];
            pa.grad[i] += node.grad[i] * (T(1) - y * y);
        }
    });
}

namespace detail {

// Branch-free rational tanh (float lanes auto-vectorize); doubles keep the
// library call so the finite-difference oracle path stays at full accuracy.
inline float scalar_tanh(float x) {
    x = std::min(7.90531111f, std::max(-7.90531111f, x));
    const float x2 = x * x;
    float p = -2.76076847742355e-16f;
    p = p * x2 + 2.00018790482477e-13f;
    p = p * x2 + -8.60467152213735e-11f;
    p = p * x2 + 5.12229709037114e-08f;
    p = p * x2 + 1.48572235717979e-05f;
    p = p * x2 + 6.37261928875436e-04f;
    p = p * x2 + 4.89352455891786e-03f;
    p = p * x;
    float q = 1.19825839466702e-06f;
    q = q * x2 + 1.18534705686654e-04f;
    q = q * x2 + 2.26843463243900e-03f;
    q = q * x2 + 4.89352518554385e-03f;
    return p / q;
}

inline double scalar_tanh(double x) { return std::tanh(x); }

}  // namespace detail

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = T(0.044715);
    std::vector<T> out(a.data().size());
    auto cached_tanh = std::make_shared<std::vector<T>>(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const T x = a.data()[i];
        const T t = detail::scalar_tanh(c * (x + k * x * x * x));
        (*cached_tanh)[i] = t;
        out[i] = T(0.5) * x * (T(1) + t);
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [cached_tanh](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const T x = pa.value[i];
            const T t = (*cached_tanh)[i];
            const T dudx = c * (T(1) + T(3) * k * x * x);
            const T dydx = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * dudx;
            pa.grad[i] += node.grad[i] * dydx;
        }
    });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], lo);
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [lo](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            if (pa.value[i] > lo) pa.grad[i] += node.grad[i];
        }
    });
}

// Row-wise softmax over the last dimension with an additive {0, -inf} mask.
// A fully-masked row yields an all-zero row instead of NaNs.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const std::vector<T>& mask) {
    if (logits.rank() < 1) throw DimensionError("masked_softmax expects rank >= 1");
    if (mask.size() != logits.data().size()) {
        throw DimensionError("masked_softmax mask length " + std::to_string(mask.size()) +
                             " does not match logits " + shape_str(logits.shape()));
    }
    const int n = logits.dim(logits.rank() - 1);
    const long long rows = logits.size() / n;
    const T neg_inf = -std::numeric_limits<T>::infinity();
    std::vector<T> out(logits.data().size());
    for (long long r = 0; r < rows; ++r) {
        const T* x = logits.data().data() + r * n;
        const T* m = mask.data() + r * n;
        T* y = out.data() + r * n;
        T rowmax = neg_inf;
        for (int j = 0; j < n; ++j) rowmax = std::max(rowmax, x[j] + m[j]);
        if (rowmax == neg_inf) {
            std::fill(y, y + n, T(0));
            continue;
        }
        T denom = T(0);
        for (int j = 0; j < n; ++j) {
            const T z = x[j] + m[j];
            y[j] = z == neg_inf ? T(0) : std::exp(z - rowmax);
            denom += y[j];
        }
        const T inv = T(1) / denom;
        for (int j = 0; j < n; ++j) y[j] *= inv;
    }
    return detail::make_result<T>(logits.shape(), std::move(out), {logits}, [n, rows](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (long long r = 0; r < rows; ++r) {
            const T* y = node.value.data() + r * n;
            const T* dy = node.grad.data() + r * n;
            T* dx = pa.grad.data() + r * n;
            T dot = T(0);
            for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
            for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
}

constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1) throw DimensionError("layer_norm rank mismatch");
    const int d = x.dim(x.rank() - 1);
    if (gain.dim(0) != d || bias.dim(0) != d) {
        throw DimensionError("layer_norm affine extents disagree with " + shape_str(x.shape()));
    }
    const long long rows = x.size() / d;
    std::vector<T> out(x.data().size());
    for (long long r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * d;
        T* yr = out.data() + r * d;
        T mean = T(0);
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) {
            const T c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * inv * gain.data()[j] + bias.data()[j];
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x, gain, bias}, [d, rows](detail::Node<T>& node) {
        auto& px = *node.parents[0];
        auto& pg = *node.parents[1];
        auto& pb = *node.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        std::vector<T> u(static_cast<size_t>(d));
        for (long long r = 0; r < rows; ++r) {
            const T* xr = px.value.data() + r * d;
            const T* dy = node.grad.data() + r * d;
            T mean = T(0);
            for (int j = 0; j < d; ++j) mean += xr[j];
            mean /= static_cast<T>(d);
            T var = T(0);
            for (int j = 0; j < d; ++j) {
                const T c = xr[j] - mean;
                var += c * c;
            }
            var /= static_cast<T>(d);
            const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
            T mean_u = T(0), mean_ux = T(0);
            for (int j = 0; j < d; ++j) {
                const T xhat = (xr[j] - mean) * inv;
                u[j] = dy[j] * pg.value[j];
                mean_u += u[j];
                mean_ux += u[j] * xhat;
                if (pg.requires_grad) pg.grad[j] += dy[j] * xhat;
                if (pb.requires_grad) pb.grad[j] += dy[j];
            }
            if (!px.requires_grad) continue;
            mean_u /= static_cast<T>(d);
            mean_ux /= static_cast<T>(d);
            T* dx = px.grad.data() + r * d;
            for (int j = 0; j < d; ++j) {
                const T xhat = (xr[j] - mean) * inv;
                dx[j] += inv * (u[j] - mean_u - xhat * mean_ux);
            }
        }
    });
}

// Per-token negative log-likelihood; entries at ignore_index produce 0 and
// receive no gradient.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& targets, int ignore_index) {
    check_rank2(logits, "cross_entropy_logits");
    const int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n) {
        throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                             shape_str(logits.shape()) + " logits");
    }
    for (int t : targets) {
        if (t != ignore_index && (t < 0 || t >= v)) {
            throw IndexError("cross_entropy_logits target " + std::to_string(t) + " out of range [0," + std::to_string(v) + ")");
        }
    }
    std::vector<T> out(static_cast<size_t>(n));
    auto probs = std::make_shared<std::vector<T>>(logits.data().size());
    for (int r = 0; r < n; ++r) {
        const T* x = logits.data().data() + static_cast<size_t>(r) * v;
        T* p = probs->data() + static_cast<size_t>(r) * v;
        if (targets[r] == ignore_index) {
            out[r] = T(0);
            continue;
        }
        T rowmax = x[0];
        for (int j = 1; j < v; ++j) rowmax = std::max(rowmax, x[j]);
        T denom = T(0);
        for (int j = 0; j < v; ++j) {
            p[j] = std::exp(x[j] - rowmax);
            denom += p[j];
        }
        const T inv = T(1) / denom;
        for (int j = 0; j < v; ++j) p[j] *= inv;
        out[r] = std::log(denom) + rowmax - x[targets[r]];
    }
    return detail::make_result<T>({n}, std::move(out), {logits},
                                  [n, v, targets, probs, ignore_index](detail::Node<T>& node) {
        auto& pl = *node.parents[0];
        if (!pl.requires_grad) return;
        pl.ensure_grad();
        for (int r = 0; r < n; ++r) {
            if (targets[r] == ignore_index) continue;
            const T d = node.grad[r];
            if (d == T(0)) continue;
            const T* p = probs->data() + static_cast<size_t>(r) * v;
            T* dl = pl.grad.data() + static_cast<size_t>(r) * v;
            for (int j = 0; j < v; ++j) dl[j] += d * p[j];
            dl[targets[r]] -= d;
        }
    });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
    check_rank2(table, "embedding");
    const int v = table.dim(0), d = table.dim(1);
    const int n = static_cast<int>(ids.size());
    std::vector<T> out(static_cast<size_t>(n) * d);
    for (int r = 0; r < n; ++r) {
        if (ids[r] < 0 || ids[r] >= v) throw IndexError("embedding id " + std::to_string(ids[r]) + " out of range");
        std::memcpy(out.data() + static_cast<size_t>(r) * d, table.data().data() + static_cast<size_t>(ids[r]) * d,
                    sizeof(T) * d);
    }
    return detail::make_result<T>({n, d}, std::move(out), {table}, [ids, d](detail::Node<T>& node) {
        auto& pt = *node.parents[0];
        if (!pt.requires_grad) return;
        pt.ensure_grad();
        for (size_t r = 0; r < ids.size(); ++r) {
            const T* g = node.grad.data() + r * d;
            T* dst = pt.grad.data() + static_cast<size_t>(ids[r]) * d;
            for (int j = 0; j < d; ++j) dst[j] += g[j];
        }
    });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int c0, int c1) {
    check_rank2(a, "slice_cols");
    const int m = a.dim(0), n = a.dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1) throw IndexError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + shape_str(a.shape()));
    const int w = c1 - c0;
    std::vector<T> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i)
        std::memcpy(out.data() + static_cast<size_t>(i) * w, a.data().data() + static_cast<size_t>(i) * n + c0, sizeof(T) * w);
    return detail::make_result<T>({m, w}, std::move(out), {a}, [m, n, c0, w](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int i = 0; i < m; ++i) {
            const T* g = node.grad.data() + static_cast<size_t>(i) * w;
            T* dst = pa.grad.data() + static_cast<size_t>(i) * n + c0;
            for (int j = 0; j < w; ++j) dst[j] += g[j];
        }
    });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int r0, int r1) {
    check_rank2(a, "slice_rows");
    const int m = a.dim(0), n = a.dim(1);
    if (r0 < 0 || r1 > m || r0 >= r1) throw IndexError("slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + shape_str(a.shape()));
    const int h = r1 - r0;
    std::vector<T> out(a.data().begin() + static_cast<size_t>(r0) * n, a.data().begin() + static_cast<size_t>(r1) * n);
    return detail::make_result<T>({h, n}, std::move(out), {a}, [r0, n, h](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        T* dst = pa.grad.data() + static_cast<size_t>(r0) * n;
        for (size_t i = 0; i < static_cast<size_t>(h) * n; ++i) dst[i] += node.grad[i];
    });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of zero tensors");
    const int m = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        check_rank2(p, "concat_cols");
        if (p.dim(0) != m) throw DimensionError("concat_cols row counts disagree");
        total += p.dim(1);
    }
    std::vector<T> out(static_cast<size_t>(m) * total);
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < m; ++i)
            std::memcpy(out.data() + static_cast<size_t>(i) * total + off, p.data().data() + static_cast<size_t>(i) * w,
                        sizeof(T) * w);
        off += w;
    }
    Tensor<T> result = Tensor<T>::from({m, total}, std::move(out));
    if (!autograd::grad_enabled) return result;
    bool needs = false;
    for (const auto& p : parts) needs = needs || p.requires_grad();
    if (!needs) return result;
    auto& node = *result.node();
    node.requires_grad = true;
    std::vector<int> widths;
    for (const auto& p : parts) {
        node.parents.push_back(p.node());
        widths.push_back(p.dim(1));
    }
    node.backprop = [m, total, widths](detail::Node<T>& nd) {
        int off2 = 0;
        for (size_t t = 0; t < nd.parents.size(); ++t) {
            auto& pp = *nd.parents[t];
            const int w = widths[t];
            if (pp.requires_grad) {
                pp.ensure_grad();
                for (int i = 0; i < m; ++i) {
                    const T* g = nd.grad.data() + static_cast<size_t>(i) * total + off2;
                    T* dst = pp.grad.data() + static_cast<size_t>(i) * w;
                    for (int j = 0; j < w; ++j) dst[j] += g[j];
                }
            }
            off2 += w;
        }
    };
    return result;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows of zero tensors");
    const int n = parts[0].dim(parts[0].rank() - 1);
    int total = 0;
    for (const auto& p : parts) {
        check_rank2(p, "concat_rows");
        if (p.dim(1) != n) throw DimensionError("concat_rows column counts disagree");
        total += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(static_cast<size_t>(total) * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    Tensor<T> result = Tensor<T>::from({total, n}, std::move(out));
    if (!autograd::grad_enabled) return result;
    bool needs = false;
    for (const auto& p : parts) needs = needs || p.requires_grad();
    if (!needs) return result;
    auto& node = *result.node();
    node.requires_grad = true;
    std::vector<int> heights;
    for (const auto& p : parts) {
        node.parents.push_back(p.node());
        heights.push_back(p.dim(0));
    }
    node.backprop = [n, heights](detail::Node<T>& nd) {
        size_t off = 0;
        for (size_t t = 0; t < nd.parents.size(); ++t) {
            auto& pp = *nd.parents[t];
            const size_t count = static_cast<size_t>(heights[t]) * n;
            if (pp.requires_grad) {
                pp.ensure_grad();
                for (size_t i = 0; i < count; ++i) pp.grad[i] += nd.grad[off + i];
            }
            off += count;
        }
    };
    return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    return detail::make_result<T>({1}, {acc}, {a}, [](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T g = node.grad[0];
        for (auto& gv : pa.grad) gv += g;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Weighted sum with constant weights; the workhorse for segment-masked losses.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, const std::vector<T>& w) {
    if (w.size() != a.data().size()) throw DimensionError("weighted_sum weight length mismatch");
    T acc = T(0);
    for (size_t i = 0; i < w.size(); ++i) acc += a.data()[i] * w[i];
    return detail::make_result<T>({1}, {acc}, {a}, [w](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T g = node.grad[0];
        for (size_t i = 0; i < w.size(); ++i) pa.grad[i] += g * w[i];
    });
}

// Mean over rows: [m, n] -> [1, n].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    check_rank2(a, "mean_rows");
    const int m = a.dim(0), n = a.dim(1);
    std::vector<T> out(static_cast<size_t>(n), T(0));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[j] += a.data()[static_cast<size_t>(i) * n + j];
    for (int j = 0; j < n; ++j) out[j] /= static_cast<T>(m);
    return detail::make_result<T>({1, n}, std::move(out), {a}, [m, n](detail::Node<T>& node) {
        auto& pa = *node.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        const T inv = T(1) / static_cast<T>(m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) pa.grad[static_cast<size_t>(i) * n + j] += node.grad[j] * inv;
    });
}

// out = x with rows[i] added at positions[i]; duplicate positions accumulate.
template <typename T>
Tensor<T> add_rows_at(const Tensor<T>& x, const std::vector<int>& positions, const Tensor<T>& rows) {
    check_rank2(x, "add_rows_at");
    check_rank2(rows, "add_rows_at");
    const int m = x.dim(0), n = x.dim(1);
    if (rows.dim(1) != n || rows.dim(0) != static_cast<int>(positions.size())) {
        throw DimensionError("add_rows_at rows " + shape_str(rows.shape()) + " vs " + std::to_string(positions.size()) + " positions");
    }
    for (int p : positions)
        if (p < 0 || p >= m) throw IndexError("add_rows_at position " + std::to_string(p) + " out of range");
    std::vector<T> out = x.data();
    for (size_t i = 0; i < positions.size(); ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(positions[i]) * n + j] += rows.data()[i * n + j];
    return detail::make_result<T>(x.shape(), std::move(out), {x, rows}, [positions, n](detail::Node<T>& node) {
        detail::accumulate(*node.parents[0], node.grad.data(), node.grad.size());
        auto& pr = *node.parents[1];
        if (!pr.requires_grad) return;
        pr.ensure_grad();
        for (size_t i = 0; i < positions.size(); ++i)
            for (int j = 0; j < n; ++j) pr.grad[i * n + j] += node.grad[static_cast<size_t>(positions[i]) * n + j];
    });
}

// out = x with rows[i] substituted at positions[i]; positions must be unique.
template <typename T>
Tensor<T> replace_rows_at(const Tensor<T>& x, const std::vector<int>& positions, const Tensor<T>& rows) {
    check_rank2(x, "replace_rows_at");
    check_rank2(rows, "replace_rows_at");
    const int m = x.dim(0), n = x.dim(1);
    if (rows.dim(1) != n || rows.dim(0) != static_cast<int>(positions.size())) {
        throw DimensionError("replace_rows_at rows " + shape_str(rows.shape()) + " vs " + std::to_string(positions.size()) + " positions");
    }
    std::unordered_set<int> seen;
    for (int p : positions) {
        if (p < 0 || p >= m) throw IndexError("replace_rows_at position " + std::to_string(p) + " out of range");
        if (!seen.insert(p).second) throw ValidationError("replace_rows_at duplicate position " + std::to_string(p));
    }
    std::vector<T> out = x.data();
    for (size_t i = 0; i < positions.size(); ++i)
        std::memcpy(out.data() + static_cast<size_t>(positions[i]) * n, rows.data().data() + i * n, sizeof(T) * n);
    return detail::make_result<T>(x.shape(), std::move(out), {x, rows}, [positions, n](detail::Node<T>& node) {
        auto& px = *node.parents[0];
        auto& pr = *node.parents[1];
        if (px.requires_grad) {
            px.ensure_grad();
            std::unordered_set<int> replaced(positions.begin(), positions.end());
            const int rows_total = px.shape[0];
            for (int i = 0; i < rows_total; ++i) {
                if (replaced.count(i)) continue;
                const T* g = node.grad.data() + static_cast<size_t>(i) * n;
                T* dst = px.grad.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) dst[j] += g[j];
            }
        }
        if (pr.requires_grad) {
            pr.ensure_grad();
            for (size_t i = 0; i < positions.size(); ++i)
                for (int j = 0; j < n; ++j) pr.grad[i * n + j] += node.grad[static_cast<size_t>(positions[i]) * n + j];
        }
    });
}

// Multi-head scaled-dot attention where every query row attends to one
// contiguous kv window [begin_r, end_r). Causal masks, per-image patch
// blocks, and item-exclusive image slots are all windows, so the whole
// attention sublayer is a single recorded op. Rows with an empty window
// produce zeros. Matches the masked_softmax composition bit for bit.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const std::vector<int>& win_begin, const std::vector<int>& win_end, int heads,
                           T scale_factor) {
    check_rank2(q, "window_attention");
    check_rank2(k, "window_attention");
    check_rank2(v, "window_attention");
    const int rows = q.dim(0), d = q.dim(1), kv_rows = k.dim(0);
    if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != kv_rows) {
        throw DimensionError("window_attention shapes disagree: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                             ", " + shape_str(v.shape()));
    }
    if (heads < 1 || d % heads != 0) throw DimensionError("window_attention heads must divide width");
    if (static_cast<int>(win_begin.size()) != rows || static_cast<int>(win_end.size()) != rows) {
        throw DimensionError("window_attention needs one window per query row");
    }
    std::vector<int> prob_offset(static_cast<size_t>(rows) + 1, 0);
    for (int r = 0; r < rows; ++r) {
        const int b = win_begin[static_cast<size_t>(r)], e = win_end[static_cast<size_t>(r)];
        if (b < 0 || e > kv_rows || b > e) throw IndexError("window_attention window out of range at row " + std::to_string(r));
        prob_offset[static_cast<size_t>(r) + 1] = prob_offset[static_cast<size_t>(r)] + (e - b);
    }
    const int hd = d / heads;
    const long long span_total = prob_offset[static_cast<size_t>(rows)];
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(span_total) * heads);

    std::vector<T> out(q.data().size(), T(0));
    const T* qd = q.data().data();
    const T* kd = k.data().data();
    const T* vd = v.data().data();
    auto body = [&](long long r0, long long r1) {
        std::vector<T> scores;
        for (long long r = r0; r < r1; ++r) {
            const int b = win_begin[static_cast<size_t>(r)], e = win_end[static_cast<size_t>(r)];
            const int len = e - b;
            if (len == 0) continue;
            scores.resize(static_cast<size_t>(len));
            for (int h = 0; h < heads; ++h) {
                const T* qr = qd + r * d + static_cast<size_t>(h) * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < len; ++j) {
                    const T* kj = kd + static_cast<size_t>(b + j) * d + static_cast<size_t>(h) * hd;
                    T acc = T(0);
                    for (int t = 0; t < hd; ++t) acc += qr[t] * kj[t];
                    scores[static_cast<size_t>(j)] = acc * scale_factor;
                    mx = std::max(mx, scores[static_cast<size_t>(j)]);
                }
                T denom = T(0);
                for (int j = 0; j < len; ++j) {
                    scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                    denom += scores[static_cast<size_t>(j)];
                }
                const T inv = T(1) / denom;
                T* prow = probs->data() + (static_cast<size_t>(prob_offset[static_cast<size_t>(r)]) * heads) +
                          static_cast<size_t>(h) * len;
                T* orow = out.data() + r * d + static_cast<size_t>(h) * hd;
                for (int j = 0; j < len; ++j) {
                    const T p = scores[static_cast<size_t>(j)] * inv;
                    prow[j] = p;
                    const T* vj = vd + static_cast<size_t>(b + j) * d + static_cast<size_t>(h) * hd;
                    for (int t = 0; t < hd; ++t) orow[t] += p * vj[t];
                }
            }
        }
    };
    if (2LL * span_total * d * 2 >= kern::kParallelFlops) {
        ThreadPool::instance().parallel_for(0, rows, body);
    } else {
        body(0, rows);
    }

    return detail::make_result<T>(q.shape(), std::move(out), {q, k, v},
                                  [win_begin, win_end, prob_offset, probs, heads, hd, d,
                                   scale_factor](detail::Node<T>& node) {
        auto& pq = *node.parents[0];
        auto& pk = *node.parents[1];
        auto& pv = *node.parents[2];
        const bool need_q = pq.requires_grad, need_k = pk.requires_grad, need_v = pv.requires_grad;
        if (need_q) pq.ensure_grad();
        if (need_k) pk.ensure_grad();
        if (need_v) pv.ensure_grad();
        const int rows = static_cast<int>(win_begin.size());
        std::vector<T> dp;
        for (int r = 0; r < rows; ++r) {
            const int b = win_begin[static_cast<size_t>(r)], e = win_end[static_cast<size_t>(r)];
            const int len = e - b;
            if (len == 0) continue;
            dp.resize(static_cast<size_t>(len));
            for (int h = 0; h < heads; ++h) {
                const T* prow = probs->data() + (static_cast<size_t>(prob_offset[static_cast<size_t>(r)]) * heads) +
                                static_cast<size_t>(h) * len;
                const T* dout = node.grad.data() + static_cast<size_t>(r) * d + static_cast<size_t>(h) * hd;
                const T* qr = pq.value.data() + static_cast<size_t>(r) * d + static_cast<size_t>(h) * hd;
                T dot = T(0);
                for (int j = 0; j < len; ++j) {
                    const T* vj = pv.value.data() + static_cast<size_t>(b + j) * d + static_cast<size_t>(h) * hd;
                    T acc = T(0);
                    for (int t = 0; t < hd; ++t) acc += dout[t] * vj[t];
                    dp[static_cast<size_t>(j)] = acc;
                    dot += acc * prow[j];
                    if (need_v) {
                        T* dvj = pv.grad.data() + static_cast<size_t>(b + j) * d + static_cast<size_t>(h) * hd;
                        for (int t = 0; t < hd; ++t) dvj[t] += prow[j] * dout[t];
                    }
                }
                if (!need_q && !need_k) continue;
                T* dq = need_q ? pq.grad.data() + static_cast<size_t>(r) * d + static_cast<size_t>(h) * hd : nullptr;
                for (int j = 0; j < len; ++j) {
                    const T ds = prow[j] * (dp[static_cast<size_t>(j)] - dot) * scale_factor;
                    const T* kj = pk.value.data() + static_cast<size_t>(b + j) * d + static_cast<size_t>(h) * hd;
                    if (need_q) {
                        for (int t = 0; t < hd; ++t) dq[t] += ds * kj[t];
                    }
                    if (need_k) {
                        T* dkj = pk.grad.data() + static_cast<size_t>(b + j) * d + static_cast<size_t>(h) * hd;
                        for (int t = 0; t < hd; ++t) dkj[t] += ds * qr[t];
                    }
                }
            }
        }
    });
}

// loss = -(1-p)^gamma * log(p), elementwise on target likelihoods p in (0, 1].
// The derivative runs through both the modulating factor and the log term.
template <typename T>
Tensor<T> focal_nll(const Tensor<T>& p, T gamma) {
    if (gamma < T(0)) throw DomainError("focal_nll gamma must be >= 0");
    std::vector<T> out(p.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const T pi = p.data()[i];
        if (pi <= T(0)) throw DomainError("focal_nll likelihood must be positive (clamp before entry)");
        const T mod = gamma == T(0) ? T(1) : std::pow(std::max(T(1) - pi, T(0)), gamma);
        out[i] = -mod * std::log(pi);
    }
    return detail::make_result<T>(p.shape(), std::move(out), {p}, [gamma](detail::Node<T>& node) {
        auto& pp = *node.parents[0];
        if (!pp.requires_grad) return;
        pp.ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const T pi = pp.value[i];
            T dfdp;
            if (gamma == T(0)) {
                dfdp = -T(1) / pi;
            } else {
                const T m = std::max(T(1) - pi, T(0));
                if (m <= T(1e-12)) {
                    dfdp = T(0);  // both factors vanish as p -> 1
                } else {
                    dfdp = gamma * std::pow(m, gamma - T(1)) * std::log(pi) - std::pow(m, gamma) / pi;
                }
            }
            pp.grad[i] += node.grad[i] * dfdp;
        }
    });
}

// ----------------------------- backward -----------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) {
        throw ValidationError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    }
    auto root = loss.node();
    if (!root->requires_grad) return;

    std::vector<std::shared_ptr<detail::Node<T>>> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::shared_ptr<detail::Node<T>>> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto node = std::move(stack.back());
        stack.pop_back();
        for (auto& p : node->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
        }
        if (node->backprop) order.push_back(std::move(node));
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->seq > b->seq; });

    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto& node : order) {
        node->backprop(*node);
        // Release the consumed part of the graph as we walk it.
        node->backprop = nullptr;
        node->parents.clear();
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
}

}  // namespace unimp
