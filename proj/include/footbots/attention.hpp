#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "footbots/tensor.hpp"

namespace footbots {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

// Bernoulli dropout with inverted scaling; identity when ctx is absent.
struct DropoutCtx {
    SplitMix64* rng = nullptr;
    double p = 0.0;
    bool active() const { return rng != nullptr && p > 0.0; }
};

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, const DropoutCtx& ctx) {
    if (!ctx.active()) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - ctx.p));
    std::vector<T> mask(x.values().size());
    for (auto& m : mask) m = ctx.rng->uniform() >= ctx.p ? keep_scale : T(0);
    Tensor<T> mask_t(x.shape(), std::move(mask));
    return mul(x, mask_t).named("dropout");
}

// ---------------------------------------------------------------------------
// Position-wise feed-forward network
// ---------------------------------------------------------------------------

template <typename T>
struct FfnParams {
    Tensor<T> w1, b1, w2, b2;

    static FfnParams init(int d_in, int d_hidden, int d_out, SplitMix64& rng) {
        FfnParams p;
        p.w1 = Tensor<T>::xavier({d_in, d_hidden}, d_in, d_hidden, rng);
        p.b1 = Tensor<T>::parameter({d_hidden}, std::vector<T>(static_cast<std::size_t>(d_hidden), T(0)));
        p.w2 = Tensor<T>::xavier({d_hidden, d_out}, d_hidden, d_out, rng);
        p.b2 = Tensor<T>::parameter({d_out}, std::vector<T>(static_cast<std::size_t>(d_out), T(0)));
        return p;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.emplace_back(prefix + ".w1", &w1);
        out.emplace_back(prefix + ".b1", &b1);
        out.emplace_back(prefix + ".w2", &w2);
        out.emplace_back(prefix + ".b2", &b2);
    }
};

template <typename T>
Tensor<T> ffn_forward(const FfnParams<T>& p, const Tensor<T>& x) {
    return add_bias(matmul(relu(add_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

// ---------------------------------------------------------------------------
// Scaled dot-product and multi-head attention
// ---------------------------------------------------------------------------

// Q: [n, d_k], K: [n_v, d_k], V: [n_v, d_v] -> [n, d_v]. Each output row is a
// convex combination of V rows.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               Tensor<T>* attn_weights = nullptr) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("scaled_dot_attention: expects rank-2 inputs");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("scaled_dot_attention: query width " + shape_str(q.shape()) +
                         " does not match key width " + shape_str(k.shape()));
    if (k.dim(0) != v.dim(0))
        throw ShapeError("scaled_dot_attention: key count " + shape_str(k.shape()) +
                         " does not match value count " + shape_str(v.shape()));
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
    Tensor<T> logits = scale(matmul(q, transpose(k, {1, 0})), inv_sqrt_dk);
    Tensor<T> w = softmax(logits, 1);
    if (attn_weights) *attn_weights = w;
    return matmul(w, v);
}

template <typename T>
struct MhaParams {
    Tensor<T> wq, wk, wv;  // [d, heads*d_k] / [d, heads*d_v], heads laid out contiguously
    Tensor<T> wo;          // [heads*d_v, d]
    int heads = 1;

    static MhaParams init(int d, int heads, SplitMix64& rng) {
        if (heads < 1 || d % heads != 0)
            throw ContractError("multi-head attention: heads (" + std::to_string(heads) +
                                ") must divide model width (" + std::to_string(d) + ")");
        MhaParams p;
        p.heads = heads;
        p.wq = Tensor<T>::xavier({d, d}, d, d, rng);
        p.wk = Tensor<T>::xavier({d, d}, d, d, rng);
        p.wv = Tensor<T>::xavier({d, d}, d, d, rng);
        p.wo = Tensor<T>::xavier({d, d}, d, d, rng);
        return p;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.emplace_back(prefix + ".wq", &wq);
        out.emplace_back(prefix + ".wk", &wk);
        out.emplace_back(prefix + ".wv", &wv);
        out.emplace_back(prefix + ".wo", &wo);
    }
};

// queries_in: [B, n, d] (or [n, d]), keys_values_in: [B, n_v, d] (or [n_v, d]).
// Per-head scaled dot attention, concatenated, then output-projected.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& queries_in, const Tensor<T>& keys_values_in,
                               const MhaParams<T>& p, Tensor<T>* attn_weights = nullptr) {
    const bool lifted = queries_in.rank() == 2;
    Tensor<T> qi = lifted ? reshape(queries_in, {1, queries_in.dim(0), queries_in.dim(1)}) : queries_in;
    Tensor<T> kv = keys_values_in.rank() == 2
                       ? reshape(keys_values_in, {1, keys_values_in.dim(0), keys_values_in.dim(1)})
                       : keys_values_in;
    if (qi.rank() != 3 || kv.rank() != 3)
        throw ShapeError("multi_head_attention: expects rank-2 or rank-3 inputs");
    const int d = p.wq.dim(0);
    if (qi.dim(2) != d || kv.dim(2) != d)
        throw ShapeError("multi_head_attention: input width mismatch, queries " +
                         shape_str(qi.shape()) + " / keys " + shape_str(kv.shape()) +
                         " vs model width " + std::to_string(d));
    if (qi.dim(0) != kv.dim(0))
        throw ShapeError("multi_head_attention: batch mismatch " + shape_str(qi.shape()) + " vs " +
                         shape_str(kv.shape()));

    const int B = qi.dim(0), n = qi.dim(1), m = kv.dim(1);
    const int h = p.heads;
    const int dk = p.wq.dim(1) / h;
    const int dv = p.wv.dim(1) / h;

    auto split_heads = [&](const Tensor<T>& x, int rows, int dh) {
        // [B, rows, h*dh] -> [B*h, rows, dh]
        return reshape(transpose(reshape(x, {B, rows, h, dh}), {0, 2, 1, 3}), {B * h, rows, dh});
    };
    Tensor<T> qh = split_heads(matmul(qi, p.wq), n, dk);
    Tensor<T> kh = split_heads(matmul(kv, p.wk), m, dk);
    Tensor<T> vh = split_heads(matmul(kv, p.wv), m, dv);

    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
    Tensor<T> logits = scale(matmul(qh, transpose(kh, {0, 2, 1})), inv_sqrt_dk);
    Tensor<T> w = softmax(logits, 2);  // [B*h, n, m]
    if (attn_weights) *attn_weights = w;

    Tensor<T> ctx = matmul(w, vh);  // [B*h, n, dv]
    ctx = reshape(transpose(reshape(ctx, {B, h, n, dv}), {0, 2, 1, 3}), {B, n, h * dv});
    Tensor<T> out = matmul(ctx, p.wo);
    return lifted ? reshape(out, {n, d}) : out;
}

// ---------------------------------------------------------------------------
// Layer-norm parameter pair
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormParams {
    Tensor<T> gain, bias;

    static LayerNormParams init(int d) {
        LayerNormParams p;
        p.gain = Tensor<T>::parameter({d}, std::vector<T>(static_cast<std::size_t>(d), T(1)));
        p.bias = Tensor<T>::parameter({d}, std::vector<T>(static_cast<std::size_t>(d), T(0)));
        return p;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.emplace_back(prefix + ".gain", &gain);
        out.emplace_back(prefix + ".bias", &bias);
    }
};

// ---------------------------------------------------------------------------
// Set Attention Block: post-norm encoder block without positional encoding,
// permutation-equivariant over its set axis.
// ---------------------------------------------------------------------------

template <typename T>
struct SabParams {
    MhaParams<T> mha;
    FfnParams<T> ffn;
    LayerNormParams<T> ln1, ln2;

    static SabParams init(int d, int heads, int d_ff, SplitMix64& rng) {
        SabParams p;
        p.mha = MhaParams<T>::init(d, heads, rng);
        p.ffn = FfnParams<T>::init(d, d_ff, d, rng);
        p.ln1 = LayerNormParams<T>::init(d);
        p.ln2 = LayerNormParams<T>::init(d);
        return p;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        mha.collect(prefix + ".mha", out);
        ffn.collect(prefix + ".ffn", out);
        ln1.collect(prefix + ".ln1", out);
        ln2.collect(prefix + ".ln2", out);
    }
};

template <typename T>
Tensor<T> sab(const SabParams<T>& p, const Tensor<T>& x, const DropoutCtx& drop = {}) {
    Tensor<T> y = layer_norm(add(x, dropout(multi_head_attention(x, x, p.mha), drop)), p.ln1.gain,
                             p.ln1.bias);
    return layer_norm(add(y, dropout(ffn_forward(p.ffn, y), drop)), p.ln2.gain, p.ln2.bias);
}

// ---------------------------------------------------------------------------
// Multi-Attention Block Decoder: self-attention plus cross-attention to the
// encoder context. No causal mask; all frames are emitted in one shot.
// ---------------------------------------------------------------------------

template <typename T>
struct MabdParams {
    MhaParams<T> self_mha, cross_mha;
    FfnParams<T> ffn;
    LayerNormParams<T> ln1, ln2, ln3;

    static MabdParams init(int d, int heads, int d_ff, SplitMix64& rng) {
        MabdParams p;
        p.self_mha = MhaParams<T>::init(d, heads, rng);
        p.cross_mha = MhaParams<T>::init(d, heads, rng);
        p.ffn = FfnParams<T>::init(d, d_ff, d, rng);
        p.ln1 = LayerNormParams<T>::init(d);
        p.ln2 = LayerNormParams<T>::init(d);
        p.ln3 = LayerNormParams<T>::init(d);
        return p;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        self_mha.collect(prefix + ".self_mha", out);
        cross_mha.collect(prefix + ".cross_mha", out);
        ffn.collect(prefix + ".ffn", out);
        ln1.collect(prefix + ".ln1", out);
        ln2.collect(prefix + ".ln2", out);
        ln3.collect(prefix + ".ln3", out);
    }
};

template <typename T>
Tensor<T> mabd(const MabdParams<T>& p, const Tensor<T>& target, const Tensor<T>& context,
               const DropoutCtx& drop = {}) {
    Tensor<T> y1 = layer_norm(add(target, dropout(multi_head_attention(target, target, p.self_mha), drop)),
                              p.ln1.gain, p.ln1.bias);
    Tensor<T> y2 = layer_norm(add(y1, dropout(multi_head_attention(y1, context, p.cross_mha), drop)),
                              p.ln2.gain, p.ln2.bias);
    return layer_norm(add(y2, dropout(ffn_forward(p.ffn, y2), drop)), p.ln3.gain, p.ln3.bias);
}

// ---------------------------------------------------------------------------
// Sinusoidal positional encoding
// ---------------------------------------------------------------------------

// Table of sinusoidal values, entries in [-1, 1]; row 0 is (0, 1, 0, 1, ...).
template <typename T>
Tensor<T> positional_encoding(int length, int d) {
    if (length <= 0 || d <= 0) throw ContractError("positional_encoding: length and width must be positive");
    std::vector<T> v(static_cast<std::size_t>(length) * d);
    for (int pos = 0; pos < length; ++pos) {
        for (int i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
            const double angle = pos * freq;
            v[static_cast<std::size_t>(pos * d + i)] = static_cast<T>(std::sin(angle));
            if (i + 1 < d) v[static_cast<std::size_t>(pos * d + i + 1)] = static_cast<T>(std::cos(angle));
        }
    }
    return Tensor<T>({length, d}, std::move(v)).named("positional_encoding");
}

// First `length` rows of a precomputed table; rejects requests beyond max_len.
template <typename T>
Tensor<T> pe_rows(const Tensor<T>& table, int length) {
    if (length > table.dim(0))
        throw ContractError("positional encoding: requested length " + std::to_string(length) +
                            " exceeds table of " + std::to_string(table.dim(0)));
    if (length == table.dim(0)) return table;
    return slice(table, 0, 0, length);
}

}  // namespace footbots
