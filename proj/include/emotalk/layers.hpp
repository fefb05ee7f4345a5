#pragma once

// Parameter bundles and the composed building blocks: multi-head attention
// with its projections, pre-norm transformer blocks, and the strided conv
// frontend. Init rule for learned weights is uniform(-1/sqrt(fan_in), +...).

#include <cmath>
#include <string>
#include <vector>

#include "emotalk/ops.hpp"

namespace emotalk {

struct AttentionConfig {
    int model_dim = 64;
    int num_heads = 4;
    int ff_dim = 128;
    bool causal = false;

    void validate() const {
        if (model_dim <= 0 || num_heads <= 0 || ff_dim <= 0)
            throw ConfigError("attention dims must be positive");
        if (model_dim % num_heads != 0)
            throw ConfigError("model_dim " + std::to_string(model_dim) +
                              " not divisible by num_heads " + std::to_string(num_heads));
    }
};

inline GradTensor init_weight(Shape shape, std::int64_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return GradTensor::rand_uniform(std::move(shape), -bound, bound, rng, true);
}

struct LayerNormParams {
    GradTensor gain, bias;

    static LayerNormParams init(std::int64_t dim) {
        return {GradTensor::full({dim}, 1.0f, true), GradTensor::zeros({dim}, true)};
    }
    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + "g", gain);
        out.emplace_back(prefix + "b", bias);
    }
};

struct AttentionParams {
    GradTensor wq, bq, wk, bk, wv, bv, wo, bo;

    static AttentionParams init(std::int64_t dim, Rng& rng) {
        AttentionParams p;
        p.wq = init_weight({dim, dim}, dim, rng);
        p.bq = init_weight({dim}, dim, rng);
        p.wk = init_weight({dim, dim}, dim, rng);
        p.bk = init_weight({dim}, dim, rng);
        p.wv = init_weight({dim, dim}, dim, rng);
        p.bv = init_weight({dim}, dim, rng);
        p.wo = init_weight({dim, dim}, dim, rng);
        p.bo = init_weight({dim}, dim, rng);
        return p;
    }
    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + "wq", wq);
        out.emplace_back(prefix + "bq", bq);
        out.emplace_back(prefix + "wk", wk);
        out.emplace_back(prefix + "bk", bk);
        out.emplace_back(prefix + "wv", wv);
        out.emplace_back(prefix + "bv", bv);
        out.emplace_back(prefix + "wo", wo);
        out.emplace_back(prefix + "bo", bo);
    }
};

struct FeedForwardParams {
    GradTensor w1, b1, w2, b2;

    static FeedForwardParams init(std::int64_t dim, std::int64_t ff_dim, Rng& rng) {
        FeedForwardParams p;
        p.w1 = init_weight({dim, ff_dim}, dim, rng);
        p.b1 = init_weight({ff_dim}, dim, rng);
        p.w2 = init_weight({ff_dim, dim}, ff_dim, rng);
        p.b2 = init_weight({dim}, ff_dim, rng);
        return p;
    }
    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + "w1", w1);
        out.emplace_back(prefix + "b1", b1);
        out.emplace_back(prefix + "w2", w2);
        out.emplace_back(prefix + "b2", b2);
    }
};

struct BlockParams {
    AttentionParams attn;
    LayerNormParams ln1, ln2;
    FeedForwardParams ff;

    static BlockParams init(const AttentionConfig& cfg, Rng& rng) {
        BlockParams p;
        p.attn = AttentionParams::init(cfg.model_dim, rng);
        p.ln1 = LayerNormParams::init(cfg.model_dim);
        p.ln2 = LayerNormParams::init(cfg.model_dim);
        p.ff = FeedForwardParams::init(cfg.model_dim, cfg.ff_dim, rng);
        return p;
    }
    void collect(const std::string& prefix, NamedParams& out) const {
        attn.collect(prefix + "attn.", out);
        ln1.collect(prefix + "ln1.", out);
        ln2.collect(prefix + "ln2.", out);
        ff.collect(prefix + "ff.", out);
    }
};

inline GradTensor multi_head_attention(const GradTensor& q, const GradTensor& k, const GradTensor& v,
                                       const AttentionParams& p, const AttentionConfig& cfg,
                                       const std::vector<std::uint8_t>* mask = nullptr) {
    cfg.validate();
    if (q.rank() != 2 || q.dim(1) != cfg.model_dim)
        throw DimensionError("attention input " + shape_str(q.shape()) + " vs model_dim " +
                             std::to_string(cfg.model_dim));
    GradTensor qp = linear(q, p.wq, p.bq);
    GradTensor kp = linear(k, p.wk, p.bk);
    GradTensor vp = linear(v, p.wv, p.bv);
    GradTensor o = attention_core(qp, kp, vp, cfg.num_heads, cfg.causal, mask);
    return linear(o, p.wo, p.bo);
}

// Pre-norm residual block: x + MHA(LN1(x)), then h + FF(LN2(h)).
inline GradTensor transformer_block(const GradTensor& x, const BlockParams& p,
                                    const AttentionConfig& cfg) {
    GradTensor a = layer_norm(x, p.ln1.gain, p.ln1.bias);
    GradTensor h = add(x, multi_head_attention(a, a, a, p.attn, cfg));
    GradTensor n = layer_norm(h, p.ln2.gain, p.ln2.bias);
    GradTensor f = linear(gelu(linear(n, p.ff.w1, p.ff.b1)), p.ff.w2, p.ff.b2);
    return add(h, f);
}

struct ConvLayerParams {
    GradTensor w; // [3 × in_dim × out_dim], kernel-major
    GradTensor b; // [out_dim]

    static ConvLayerParams init(std::int64_t in_dim, std::int64_t out_dim, Rng& rng) {
        ConvLayerParams p;
        p.w = init_weight({3, in_dim, out_dim}, 3 * in_dim, rng);
        p.b = init_weight({out_dim}, 3 * in_dim, rng);
        return p;
    }
    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + "w", w);
        out.emplace_back(prefix + "b", b);
    }
};

// One kernel-3 same-padded strided conv along the time axis.
inline GradTensor conv1d_layer(const GradTensor& x, const GradTensor& w, const GradTensor& b,
                               int stride) {
    detail::require_rank2(x, "conv input");
    if (w.rank() != 3 || w.dim(0) != 3)
        throw DimensionError("conv weight must be [3 x in x out], got " + shape_str(w.shape()));
    if (stride < 1) throw ConfigError("conv stride must be >= 1");
    const std::int64_t T = x.dim(0), Din = x.dim(1), Dout = w.dim(2);
    if (w.dim(1) != Din)
        throw DimensionError("conv weight " + shape_str(w.shape()) + " vs input " +
                             shape_str(x.shape()));
    if (b.rank() != 1 || b.dim(0) != Dout)
        throw DimensionError("conv bias " + shape_str(b.shape()) + " vs out dim " +
                             std::to_string(Dout));
    const std::int64_t To = (T + stride - 1) / stride;

    std::vector<float> o(static_cast<std::size_t>(To * Dout));
    for (std::int64_t t = 0; t < To; ++t)
        std::copy(b.data(), b.data() + Dout, o.data() + t * Dout);
    const float* xv = x.data();
    const float* wv = w.data();
    for (std::int64_t t = 0; t < To; ++t) {
        float* orow = o.data() + t * Dout;
        for (std::int64_t kk = 0; kk < 3; ++kk) {
            const std::int64_t u = t * stride + kk - 1;
            if (u < 0 || u >= T) continue;
            const float* xrow = xv + u * Din;
            for (std::int64_t i = 0; i < Din; ++i) {
                const float xval = xrow[i];
                const float* wrow = wv + (kk * Din + i) * Dout;
                for (std::int64_t oo = 0; oo < Dout; ++oo) orow[oo] += xval * wrow[oo];
            }
        }
    }
    auto out = GradTensor::from({To, Dout}, std::move(o));
    if (detail::want_grad({&x, &w, &b})) {
        auto xn = x.node(), wn = w.node(), bn = b.node();
        auto* self = out.node().get();
        detail::attach(out, {xn, wn, bn}, [self, xn, wn, bn, T, To, Din, Dout, stride]() {
            const float* g = self->grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t t = 0; t < To; ++t) {
                    const float* grow = g + t * Dout;
                    for (std::int64_t oo = 0; oo < Dout; ++oo) bn->grad[static_cast<std::size_t>(oo)] += grow[oo];
                }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                const float* xv2 = xn->values.data();
                for (std::int64_t t = 0; t < To; ++t) {
                    const float* grow = g + t * Dout;
                    for (std::int64_t kk = 0; kk < 3; ++kk) {
                        const std::int64_t u = t * stride + kk - 1;
                        if (u < 0 || u >= T) continue;
                        const float* xrow = xv2 + u * Din;
                        for (std::int64_t i = 0; i < Din; ++i) {
                            const float xval = xrow[i];
                            float* drow = wn->grad.data() + (kk * Din + i) * Dout;
                            for (std::int64_t oo = 0; oo < Dout; ++oo) drow[oo] += xval * grow[oo];
                        }
                    }
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                // weights transposed per kernel tap so the inner loop is a broadcast
                auto wt = std::vector<float>(static_cast<std::size_t>(3 * Dout * Din));
                const float* wv2 = wn->values.data();
                for (std::int64_t kk = 0; kk < 3; ++kk)
                    for (std::int64_t i = 0; i < Din; ++i)
                        for (std::int64_t oo = 0; oo < Dout; ++oo)
                            wt[static_cast<std::size_t>((kk * Dout + oo) * Din + i)] =
                                wv2[(kk * Din + i) * Dout + oo];
                for (std::int64_t t = 0; t < To; ++t) {
                    const float* grow = g + t * Dout;
                    for (std::int64_t kk = 0; kk < 3; ++kk) {
                        const std::int64_t u = t * stride + kk - 1;
                        if (u < 0 || u >= T) continue;
                        float* dxrow = xn->grad.data() + u * Din;
                        for (std::int64_t oo = 0; oo < Dout; ++oo) {
                            const float gval = grow[oo];
                            const float* wrow = wt.data() + (kk * Dout + oo) * Din;
                            for (std::int64_t i = 0; i < Din; ++i) dxrow[i] += gval * wrow[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Conv frontend: each layer halves (per stride) the frame count, GELU between.
// Output length composes ceil(T/stride) across layers.
inline GradTensor conv1d_subsample(const GradTensor& x, const std::vector<ConvLayerParams>& layers,
                                   int stride) {
    detail::require_rank2(x, "conv_subsample input");
    if (layers.empty()) throw ConfigError("conv_subsample needs at least one layer");
    if (x.dim(0) < 3)
        throw InputTooShortError("speech input has " + std::to_string(x.dim(0)) +
                                 " frames, need at least the kernel width 3");
    GradTensor cur = x;
    for (const auto& l : layers) cur = gelu(conv1d_layer(cur, l.w, l.b, stride));
    return cur;
}

} // namespace emotalk
