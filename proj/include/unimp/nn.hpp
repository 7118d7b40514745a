#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unimp/rng.hpp"
#include "unimp/tensor.hpp"

namespace unimp {

template <typename T>
struct NamedParam {
    std::string name;
    std::string group;
    Tensor<T> tensor;
};

template <typename T>
inline Tensor<T> randn_param(Rng& rng, Shape shape, double stddev) {
    auto t = Tensor<T>::zeros(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    t.set_requires_grad(true);
    return t;
}

template <typename T>
inline Tensor<T> const_param(Shape shape, T value) {
    auto t = Tensor<T>::full(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

constexpr double kInitStd = 0.02;

template <typename T>
struct Linear {
    Tensor<T> w;  // [in, out]
    Tensor<T> b;  // [out], undefined when bias-less

    static Linear create(Rng& rng, int in, int out, bool bias = true, double stddev = kInitStd) {
        Linear l;
        l.w = randn_param<T>(rng, {in, out}, stddev);
        if (bias) l.b = const_param<T>({out}, T(0));
        return l;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto y = matmul(x, w);
        return b.defined() ? add_rowvec(y, b) : y;
    }

    void collect(std::vector<NamedParam<T>>& out, const std::string& prefix, const std::string& group) const {
        out.push_back({prefix + "/w", group, w});
        if (b.defined()) out.push_back({prefix + "/b", group, b});
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gain;
    Tensor<T> bias;

    static LayerNormParams create(int d) {
        return {const_param<T>({d}, T(1)), const_param<T>({d}, T(0))};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }

    void collect(std::vector<NamedParam<T>>& out, const std::string& prefix, const std::string& group) const {
        out.push_back({prefix + "/gain", group, gain});
        out.push_back({prefix + "/bias", group, bias});
    }
};

// Additive causal mask for an n-token sequence, row-major [n, n].
template <typename T>
inline std::vector<T> causal_mask(int n) {
    const T neg_inf = -std::numeric_limits<T>::infinity();
    std::vector<T> mask(static_cast<size_t>(n) * n, T(0));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) mask[static_cast<size_t>(i) * n + j] = neg_inf;
    return mask;
}


// Pre-norm transformer block: x += Attn(LN(x)); x += MLP(LN(x)).
// attn_mask is an additive [n, n] mask (nullptr = bidirectional).
template <typename T>
struct TransformerBlock {
    LayerNormParams<T> ln1, ln2;
    Linear<T> wq, wk, wv, wo;
    Linear<T> mlp_in, mlp_out;
    int heads = 1;

    static TransformerBlock create(Rng& rng, int d, int heads) {
        if (heads < 1 || d % heads != 0) throw ValidationError("hidden size must divide by head count");
        TransformerBlock blk;
        blk.ln1 = LayerNormParams<T>::create(d);
        blk.ln2 = LayerNormParams<T>::create(d);
        blk.wq = Linear<T>::create(rng, d, d);
        blk.wk = Linear<T>::create(rng, d, d);
        blk.wv = Linear<T>::create(rng, d, d);
        blk.wo = Linear<T>::create(rng, d, d);
        blk.mlp_in = Linear<T>::create(rng, d, 4 * d);
        blk.mlp_out = Linear<T>::create(rng, 4 * d, d);
        blk.heads = heads;
        return blk;
    }

    // Batched form: x stacks independent sequences row-wise at `offsets`
    // (size B+1); attention windows never cross a segment boundary, so rows
    // match the single-sequence path exactly.
    Tensor<T> forward_segmented(const Tensor<T>& x, const std::vector<int>& offsets, bool causal) const {
        const int d = x.dim(1);
        const int hd = d / heads;
        auto x_norm = ln1(x);
        auto q = wq(x_norm), k = wk(x_norm), v = wv(x_norm);
        std::vector<int> begin(static_cast<size_t>(x.dim(0))), end(static_cast<size_t>(x.dim(0)));
        for (size_t s = 0; s + 1 < offsets.size(); ++s) {
            for (int r = offsets[s]; r < offsets[s + 1]; ++r) {
                begin[static_cast<size_t>(r)] = offsets[s];
                end[static_cast<size_t>(r)] = causal ? r + 1 : offsets[s + 1];
            }
        }
        auto attended = window_attention(q, k, v, begin, end, heads,
                                         T(1) / static_cast<T>(std::sqrt(static_cast<double>(hd))));
        auto h1 = add(x, wo(attended));
        return add(h1, mlp_out(gelu(mlp_in(ln2(h1)))));
    }

    Tensor<T> operator()(const Tensor<T>& x, bool causal) const {
        return forward_segmented(x, {0, x.dim(0)}, causal);
    }

    void collect(std::vector<NamedParam<T>>& out, const std::string& prefix, const std::string& group) const {
        ln1.collect(out, prefix + "/ln1", group);
        ln2.collect(out, prefix + "/ln2", group);
        wq.collect(out, prefix + "/wq", group);
        wk.collect(out, prefix + "/wk", group);
        wv.collect(out, prefix + "/wv", group);
        wo.collect(out, prefix + "/wo", group);
        mlp_in.collect(out, prefix + "/mlp_in", group);
        mlp_out.collect(out, prefix + "/mlp_out", group);
    }
};

}  // namespace unimp
