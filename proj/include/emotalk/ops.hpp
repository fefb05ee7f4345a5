#pragma once

// Primitive differentiable ops. Two rules hold everywhere:
//   1. accumulation over a contraction axis is sequential per output element
//      (row-major), so results are bit-deterministic across runs;
//   2. innermost loops write distinct elements (broadcast form), so the
//      compiler can vectorize them without reassociating any reduction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "emotalk/tensor.hpp"

namespace emotalk {

namespace detail {

// C[M×N] += A[M×K] · B[K×N]
inline void mm_acc(const float* a, const float* b, float* c, std::int64_t M, std::int64_t K,
                   std::int64_t N) {
    for (std::int64_t i = 0; i < M; ++i) {
        const float* arow = a + i * K;
        float* crow = c + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const float av = arow[k];
            const float* brow = b + k * N;
            for (std::int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

inline std::vector<float> transposed(const float* m, std::int64_t rows, std::int64_t cols) {
    std::vector<float> t(static_cast<std::size_t>(rows * cols));
    for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < cols; ++j) t[static_cast<std::size_t>(j * rows + i)] = m[i * cols + j];
    return t;
}

inline void require_rank2(const GradTensor& t, const char* what) {
    if (t.rank() != 2) throw DimensionError(std::string(what) + " must be rank 2, shape is " + shape_str(t.shape()));
}

inline bool want_grad(std::initializer_list<const GradTensor*> inputs) {
    if (!grad_enabled()) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Marks `out` as produced from `parents` with the given pullback.
inline void attach(GradTensor& out, std::vector<std::shared_ptr<TensorNode>> parents,
                   std::function<void()> backward_fn) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(backward_fn);
}

} // namespace detail

inline GradTensor matmul(const GradTensor& a, const GradTensor& b) {
    detail::require_rank2(a, "matmul lhs");
    detail::require_rank2(b, "matmul rhs");
    const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    if (b.dim(0) != K)
        throw DimensionError("matmul inner dims disagree: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    std::vector<float> c(static_cast<std::size_t>(M * N), 0.0f);
    detail::mm_acc(a.data(), b.data(), c.data(), M, K, N);
    auto out = GradTensor::from({M, N}, std::move(c));
    if (detail::want_grad({&a, &b})) {
        auto an = a.node(), bn = b.node();
        auto* self = out.node().get();
        detail::attach(out, {an, bn}, [self, an, bn, M, K, N]() {
            const float* g = self->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                auto bt = detail::transposed(bn->values.data(), K, N); // [N×K]
                detail::mm_acc(g, bt.data(), an->grad.data(), M, N, K);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                const float* av = an->values.data();
                float* db = bn->grad.data();
                for (std::int64_t i = 0; i < M; ++i)
                    for (std::int64_t k = 0; k < K; ++k) {
                        const float aik = av[i * K + k];
                        const float* grow = g + i * N;
                        float* drow = db + k * N;
                        for (std::int64_t j = 0; j < N; ++j) drow[j] += aik * grow[j];
                    }
            }
        });
    }
    return out;
}

inline GradTensor add(const GradTensor& a, const GradTensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    std::vector<float> v(a.values());
    const float* bv = b.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
    auto out = GradTensor::from(a.shape(), std::move(v));
    if (detail::want_grad({&a, &b})) {
        auto an = a.node(), bn = b.node();
        auto* self = out.node().get();
        detail::attach(out, {an, bn}, [self, an, bn]() {
            const float* g = self->grad.data();
            const std::size_t n = self->values.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i];
            }
        });
    }
    return out;
}

inline GradTensor scale(const GradTensor& a, double s) {
    const float sf = static_cast<float>(s);
    std::vector<float> v(a.values());
    for (auto& x : v) x *= sf;
    auto out = GradTensor::from(a.shape(), std::move(v));
    if (detail::want_grad({&a})) {
        auto an = a.node();
        auto* self = out.node().get();
        detail::attach(out, {an}, [self, an, sf]() {
            an->ensure_grad();
            const float* g = self->grad.data();
            for (std::size_t i = 0; i < self->values.size(); ++i) an->grad[i] += sf * g[i];
        });
    }
    return out;
}

// x[T×K] · w[K×N] + b[N], the workhorse of every projection.
inline GradTensor linear(const GradTensor& x, const GradTensor& w, const GradTensor& b) {
    detail::require_rank2(x, "linear input");
    detail::require_rank2(w, "linear weight");
    const std::int64_t T = x.dim(0), K = x.dim(1), N = w.dim(1);
    if (w.dim(0) != K)
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(w.shape()));
    if (b.rank() != 1 || b.dim(0) != N)
        throw DimensionError("linear: bias " + shape_str(b.shape()) + " vs weight " +
                             shape_str(w.shape()));
    std::vector<float> c(static_cast<std::size_t>(T * N));
    for (std::int64_t i = 0; i < T; ++i)
        std::copy(b.data(), b.data() + N, c.data() + i * N);
    detail::mm_acc(x.data(), w.data(), c.data(), T, K, N);
    auto out = GradTensor::from({T, N}, std::move(c));
    if (detail::want_grad({&x, &w, &b})) {
        auto xn = x.node(), wn = w.node(), bn = b.node();
        auto* self = out.node().get();
        detail::attach(out, {xn, wn, bn}, [self, xn, wn, bn, T, K, N]() {
            const float* g = self->grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                auto wt = detail::transposed(wn->values.data(), K, N); // [N×K]
                detail::mm_acc(g, wt.data(), xn->grad.data(), T, N, K);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                const float* xv = xn->values.data();
                float* dw = wn->grad.data();
                for (std::int64_t i = 0; i < T; ++i)
                    for (std::int64_t k = 0; k < K; ++k) {
                        const float xik = xv[i * K + k];
                        const float* grow = g + i * N;
                        float* drow = dw + k * N;
                        for (std::int64_t j = 0; j < N; ++j) drow[j] += xik * grow[j];
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                float* db = bn->grad.data();
                for (std::int64_t i = 0; i < T; ++i) {
                    const float* grow = g + i * N;
                    for (std::int64_t j = 0; j < N; ++j) db[j] += grow[j];
                }
            }
        });
    }
    return out;
}

inline GradTensor gelu(const GradTensor& x) {
    const std::size_t n = x.values().size();
    std::vector<float> v(n);
    const float* xv = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double xd = xv[i];
        v[i] = static_cast<float>(0.5 * xd * (1.0 + std::erf(xd * 0.7071067811865476)));
    }
    auto out = GradTensor::from(x.shape(), std::move(v));
    if (detail::want_grad({&x})) {
        auto xn = x.node();
        auto* self = out.node().get();
        detail::attach(out, {xn}, [self, xn]() {
            xn->ensure_grad();
            const float* g = self->grad.data();
            const float* xv2 = xn->values.data();
            for (std::size_t i = 0; i < self->values.size(); ++i) {
                const double xd = xv2[i];
                const double phi = std::exp(-0.5 * xd * xd) * 0.3989422804014327; // N(0,1) pdf
                const double Phi = 0.5 * (1.0 + std::erf(xd * 0.7071067811865476));
                xn->grad[i] += static_cast<float>((Phi + xd * phi) * g[i]);
            }
        });
    }
    return out;
}

inline GradTensor softmax(const GradTensor& x, int axis) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= x.rank())
        throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(x.shape()));
    for (float v : x.values())
        if (!std::isfinite(v)) throw NumericError("softmax input contains a non-finite value");
    const auto& shp = x.shape();
    std::int64_t outer = 1, inner = 1;
    const std::int64_t n = shp[static_cast<std::size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= shp[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shp.size(); ++i) inner *= shp[i];

    std::vector<float> p(x.values().size());
    const float* xv = x.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            float m = xv[base];
            for (std::int64_t i = 1; i < n; ++i) m = std::max(m, xv[base + i * inner]);
            float s = 0.0f;
            for (std::int64_t i = 0; i < n; ++i) {
                const float e = std::exp(xv[base + i * inner] - m);
                p[static_cast<std::size_t>(base + i * inner)] = e;
                s += e;
            }
            const float invs = 1.0f / s;
            for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(base + i * inner)] *= invs;
        }
    auto out = GradTensor::from(shp, std::move(p));
    if (detail::want_grad({&x})) {
        auto xn = x.node();
        auto* self = out.node().get();
        detail::attach(out, {xn}, [self, xn, outer, n, inner]() {
            xn->ensure_grad();
            const float* g = self->grad.data();
            const float* pv = self->values.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    float dot = 0.0f;
                    for (std::int64_t i = 0; i < n; ++i) {
                        const std::int64_t e = base + i * inner;
                        dot += g[e] * pv[e];
                    }
                    for (std::int64_t i = 0; i < n; ++i) {
                        const std::int64_t e = base + i * inner;
                        xn->grad[e] += pv[e] * (g[e] - dot);
                    }
                }
        });
    }
    return out;
}

inline GradTensor layer_norm(const GradTensor& x, const GradTensor& gain, const GradTensor& bias,
                             double eps = 1e-5) {
    if (eps <= 0) throw NumericError("layer_norm eps must be positive");
    const std::int64_t D = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != D || bias.rank() != 1 || bias.dim(0) != D)
        throw DimensionError("layer_norm affine params must be [" + std::to_string(D) + "], got " +
                             shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    const std::int64_t rows = x.numel() / D;
    std::vector<float> y(x.values().size());
    auto xhat = std::make_shared<std::vector<float>>(x.values().size());
    auto inv = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
    const float* xv = x.data();
    const float* gv = gain.data();
    const float* bv = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* row = xv + r * D;
        float mean = 0.0f;
        for (std::int64_t d = 0; d < D; ++d) mean += row[d];
        mean /= static_cast<float>(D);
        float var = 0.0f;
        for (std::int64_t d = 0; d < D; ++d) {
            const float c = row[d] - mean;
            var += c * c;
        }
        var /= static_cast<float>(D);
        const float iv = 1.0f / std::sqrt(var + static_cast<float>(eps));
        (*inv)[static_cast<std::size_t>(r)] = iv;
        for (std::int64_t d = 0; d < D; ++d) {
            const float xh = (row[d] - mean) * iv;
            (*xhat)[static_cast<std::size_t>(r * D + d)] = xh;
            y[static_cast<std::size_t>(r * D + d)] = gv[d] * xh + bv[d];
        }
    }
    auto out = GradTensor::from(x.shape(), std::move(y));
    if (detail::want_grad({&x, &gain, &bias})) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node();
        auto* self = out.node().get();
        detail::attach(out, {xn, gn, bn}, [self, xn, gn, bn, xhat, inv, rows, D]() {
            const float* g = self->grad.data();
            const float* gv2 = gn->values.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const float* grow = g + r * D;
                const float* xh = xhat->data() + r * D;
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    float sum1 = 0.0f, sum2 = 0.0f;
                    for (std::int64_t d = 0; d < D; ++d) {
                        const float dxh = grow[d] * gv2[d];
                        sum1 += dxh;
                        sum2 += dxh * xh[d];
                    }
                    const float iv = (*inv)[static_cast<std::size_t>(r)];
                    const float invD = 1.0f / static_cast<float>(D);
                    float* dx = xn->grad.data() + r * D;
                    for (std::int64_t d = 0; d < D; ++d) {
                        const float dxh = grow[d] * gv2[d];
                        dx[d] += iv * (dxh - sum1 * invD - xh[d] * sum2 * invD);
                    }
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::int64_t d = 0; d < D; ++d) gn->grad[d] += grow[d] * xh[d];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::int64_t d = 0; d < D; ++d) bn->grad[d] += grow[d];
                }
            }
        });
    }
    return out;
}

// Embedding lookup: out row i = table row ids[i].
inline GradTensor rows_select(const GradTensor& table, const std::vector<std::int32_t>& ids) {
    detail::require_rank2(table, "rows_select table");
    const std::int64_t V = table.dim(0), D = table.dim(1);
    if (ids.empty()) throw DimensionError("rows_select needs at least one id");
    for (auto id : ids)
        if (id < 0 || id >= V)
            throw IndexError("rows_select id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(V) + ")");
    const std::int64_t N = static_cast<std::int64_t>(ids.size());
    std::vector<float> v(static_cast<std::size_t>(N * D));
    const float* tv = table.data();
    for (std::int64_t i = 0; i < N; ++i)
        std::copy(tv + ids[static_cast<std::size_t>(i)] * D, tv + (ids[static_cast<std::size_t>(i)] + 1) * D,
                  v.data() + i * D);
    auto out = GradTensor::from({N, D}, std::move(v));
    if (detail::want_grad({&table})) {
        auto tn = table.node();
        auto* self = out.node().get();
        detail::attach(out, {tn}, [self, tn, ids, N, D]() {
            tn->ensure_grad();
            const float* g = self->grad.data();
            for (std::int64_t i = 0; i < N; ++i) {
                float* drow = tn->grad.data() + ids[static_cast<std::size_t>(i)] * D;
                const float* grow = g + i * D;
                for (std::int64_t d = 0; d < D; ++d) drow[d] += grow[d];
            }
        });
    }
    return out;
}

// Stacks rank-2 pieces with a common column count along the row axis.
inline GradTensor concat_rows(const std::vector<GradTensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows needs at least one part");
    detail::require_rank2(parts[0], "concat_rows part");
    const std::int64_t D = parts[0].dim(1);
    std::int64_t T = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_rows part");
        if (p.dim(1) != D)
            throw DimensionError("concat_rows column mismatch: " + shape_str(p.shape()) +
                                 " vs [*, " + std::to_string(D) + "]");
        T += p.dim(0);
    }
    std::vector<float> v(static_cast<std::size_t>(T * D));
    std::int64_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), v.data() + row * D);
        row += p.dim(0);
    }
    auto out = GradTensor::from({T, D}, std::move(v));
    bool rg = grad_enabled();
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (rg && any) {
        std::vector<std::shared_ptr<TensorNode>> parents;
        for (const auto& p : parts) parents.push_back(p.node());
        auto* self = out.node().get();
        detail::attach(out, parents, [self, parents, D]() {
            const float* g = self->grad.data();
            std::int64_t row2 = 0;
            for (const auto& pn : parents) {
                const std::int64_t rows = pn->shape[0];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    const float* gbase = g + row2 * D;
                    for (std::int64_t i = 0; i < rows * D; ++i) pn->grad[static_cast<std::size_t>(i)] += gbase[i];
                }
                row2 += rows;
            }
        });
    }
    return out;
}

// Time-mean pooling: [T×D] -> [1×D].
inline GradTensor mean_rows(const GradTensor& x) {
    detail::require_rank2(x, "mean_rows input");
    const std::int64_t T = x.dim(0), D = x.dim(1);
    std::vector<float> v(static_cast<std::size_t>(D), 0.0f);
    const float* xv = x.data();
    for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t d = 0; d < D; ++d) v[static_cast<std::size_t>(d)] += xv[t * D + d];
    const float invT = 1.0f / static_cast<float>(T);
    for (auto& e : v) e *= invT;
    auto out = GradTensor::from({1, D}, std::move(v));
    if (detail::want_grad({&x})) {
        auto xn = x.node();
        auto* self = out.node().get();
        detail::attach(out, {xn}, [self, xn, T, D, invT]() {
            xn->ensure_grad();
            const float* g = self->grad.data();
            for (std::int64_t t = 0; t < T; ++t)
                for (std::int64_t d = 0; d < D; ++d) xn->grad[static_cast<std::size_t>(t * D + d)] += g[d] * invT;
        });
    }
    return out;
}

// Scalar dot with fixed coefficients; the scalarizer used by gradient tests.
inline GradTensor contract(const GradTensor& x, const std::vector<float>& coefs) {
    if (coefs.size() != x.values().size())
        throw DimensionError("contract coefficient count " + std::to_string(coefs.size()) +
                             " does not match tensor numel " + std::to_string(x.numel()));
    float s = 0.0f;
    const float* xv = x.data();
    for (std::size_t i = 0; i < coefs.size(); ++i) s += coefs[i] * xv[i];
    auto out = GradTensor::scalar(s);
    if (detail::want_grad({&x})) {
        auto xn = x.node();
        auto* self = out.node().get();
        detail::attach(out, {xn}, [self, xn, coefs]() {
            xn->ensure_grad();
            const float g0 = self->grad[0];
            for (std::size_t i = 0; i < coefs.size(); ++i) xn->grad[i] += coefs[i] * g0;
        });
    }
    return out;
}

// Mean negative log-softmax over rows whose target is not ignore_index.
inline GradTensor cross_entropy(const GradTensor& logits, const std::vector<std::int32_t>& targets,
                                std::int32_t ignore_index = -1) {
    detail::require_rank2(logits, "cross_entropy logits");
    const std::int64_t N = logits.dim(0), V = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != N)
        throw DimensionError("cross_entropy target count " + std::to_string(targets.size()) +
                             " does not match logit rows " + std::to_string(N));
    for (auto t : targets)
        if (t != ignore_index && (t < 0 || t >= V))
            throw IndexError("cross_entropy target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(V) + ")");
    std::int64_t count = 0;
    auto probs = std::make_shared<std::vector<float>>(logits.values().size(), 0.0f);
    const float* lv = logits.data();
    double total = 0.0;
    for (std::int64_t i = 0; i < N; ++i) {
        if (targets[static_cast<std::size_t>(i)] == ignore_index) continue;
        ++count;
        const float* row = lv + i * V;
        float m = row[0];
        for (std::int64_t v = 1; v < V; ++v) m = std::max(m, row[v]);
        double s = 0.0;
        for (std::int64_t v = 0; v < V; ++v) s += std::exp(static_cast<double>(row[v] - m));
        for (std::int64_t v = 0; v < V; ++v)
            (*probs)[static_cast<std::size_t>(i * V + v)] =
                static_cast<float>(std::exp(static_cast<double>(row[v] - m)) / s);
        total += std::log(s) + m - row[targets[static_cast<std::size_t>(i)]];
    }
    const float loss = count ? static_cast<float>(total / static_cast<double>(count)) : 0.0f;
    auto out = GradTensor::scalar(loss);
    if (detail::want_grad({&logits})) {
        auto ln = logits.node();
        auto* self = out.node().get();
        detail::attach(out, {ln}, [self, ln, probs, targets, ignore_index, N, V, count]() {
            ln->ensure_grad();
            if (count == 0) return; // all ignored: zero loss, zero gradient
            const float g0 = self->grad[0] / static_cast<float>(count);
            for (std::int64_t i = 0; i < N; ++i) {
                const std::int32_t t = targets[static_cast<std::size_t>(i)];
                if (t == ignore_index) continue;
                float* drow = ln->grad.data() + i * V;
                const float* prow = probs->data() + i * V;
                for (std::int64_t v = 0; v < V; ++v) drow[v] += prow[v] * g0;
                drow[t] -= g0;
            }
        });
    }
    return out;
}

// Softmax(logits)-weighted sum of equally shaped layer outputs.
inline GradTensor weighted_layer_sum(const std::vector<GradTensor>& layers, const GradTensor& logits) {
    if (layers.empty()) throw DimensionError("weighted_layer_sum needs at least one layer");
    if (logits.rank() != 1 || logits.dim(0) != static_cast<std::int64_t>(layers.size()))
        throw DimensionError("weighted_layer_sum: " + std::to_string(layers.size()) +
                             " layers vs logits " + shape_str(logits.shape()));
    const Shape& shp = layers[0].shape();
    for (const auto& l : layers)
        if (l.shape() != shp)
            throw DimensionError("weighted_layer_sum layer shape mismatch: " + shape_str(l.shape()) +
                                 " vs " + shape_str(shp));
    const std::size_t n = layers.size();
    const std::size_t numel = layers[0].values().size();

    auto w = std::make_shared<std::vector<float>>(n);
    {
        const float* lg = logits.data();
        double m = lg[0];
        for (std::size_t i = 1; i < n; ++i) m = std::max(m, static_cast<double>(lg[i]));
        double s = 0.0;
        std::vector<double> e(n);
        for (std::size_t i = 0; i < n; ++i) {
            e[i] = std::exp(static_cast<double>(lg[i]) - m);
            s += e[i];
        }
        for (std::size_t i = 0; i < n; ++i) (*w)[i] = static_cast<float>(e[i] / s);
    }

    std::vector<float> v(numel, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        const float wi = (*w)[i];
        const float* lv = layers[i].data();
        for (std::size_t e = 0; e < numel; ++e) v[e] += wi * lv[e];
    }
    auto out = GradTensor::from(shp, std::move(v));

    bool any = logits.requires_grad();
    for (const auto& l : layers) any = any || l.requires_grad();
    if (grad_enabled() && any) {
        std::vector<std::shared_ptr<TensorNode>> parents;
        for (const auto& l : layers) parents.push_back(l.node());
        auto lgn = logits.node();
        parents.push_back(lgn);
        auto* self = out.node().get();
        detail::attach(out, parents, [self, parents, lgn, w, n, numel]() {
            const float* g = self->grad.data();
            std::vector<double> s(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& ln = parents[i];
                const float* lv = ln->values.data();
                double si = 0.0;
                for (std::size_t e = 0; e < numel; ++e) si += static_cast<double>(g[e]) * lv[e];
                s[i] = si;
                if (ln->requires_grad) {
                    ln->ensure_grad();
                    const float wi = (*w)[i];
                    for (std::size_t e = 0; e < numel; ++e) ln->grad[e] += wi * g[e];
                }
            }
            if (lgn->requires_grad) {
                lgn->ensure_grad();
                double dot = 0.0;
                for (std::size_t i = 0; i < n; ++i) dot += static_cast<double>((*w)[i]) * s[i];
                for (std::size_t i = 0; i < n; ++i)
                    lgn->grad[i] += static_cast<float>((*w)[i] * (s[i] - dot));
            }
        });
    }
    return out;
}

// Fused scaled-dot-product attention over already-projected q/k/v, split into
// heads along the channel axis. mask[i*T+j] != 0 means position i may attend
// to j; the causal flag additionally forbids j > i. Per-head probabilities are
// kept for the backward pass.
inline GradTensor attention_core(const GradTensor& q, const GradTensor& k, const GradTensor& v,
                                 int num_heads, bool causal,
                                 const std::vector<std::uint8_t>* mask = nullptr) {
    detail::require_rank2(q, "attention q");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw DimensionError("attention q/k/v shapes differ: " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    const std::int64_t T = q.dim(0), D = q.dim(1);
    if (num_heads <= 0 || D % num_heads != 0)
        throw DimensionError("attention: model dim " + std::to_string(D) +
                             " not divisible by num_heads " + std::to_string(num_heads));
    if (mask && static_cast<std::int64_t>(mask->size()) != T * T)
        throw DimensionError("attention mask must be " + std::to_string(T) + "x" + std::to_string(T) +
                             ", got " + std::to_string(mask->size()) + " entries");
    const std::int64_t H = num_heads, dh = D / H;
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
    constexpr float kForbidden = -1e30f;

    struct HeadCtx {
        std::vector<float> qh, kh, vh, p;
    };
    auto heads = std::make_shared<std::vector<HeadCtx>>(static_cast<std::size_t>(H));
    std::vector<float> o(static_cast<std::size_t>(T * D), 0.0f);

    for (std::int64_t h = 0; h < H; ++h) {
        HeadCtx& ctx = (*heads)[static_cast<std::size_t>(h)];
        const std::int64_t c0 = h * dh;
        ctx.qh.resize(static_cast<std::size_t>(T * dh));
        ctx.kh.resize(static_cast<std::size_t>(T * dh));
        ctx.vh.resize(static_cast<std::size_t>(T * dh));
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t d = 0; d < dh; ++d) {
                ctx.qh[static_cast<std::size_t>(t * dh + d)] = q.data()[t * D + c0 + d];
                ctx.kh[static_cast<std::size_t>(t * dh + d)] = k.data()[t * D + c0 + d];
                ctx.vh[static_cast<std::size_t>(t * dh + d)] = v.data()[t * D + c0 + d];
            }
        auto kt = detail::transposed(ctx.kh.data(), T, dh); // [dh×T]
        std::vector<float>& p = ctx.p;
        p.assign(static_cast<std::size_t>(T * T), 0.0f);
        detail::mm_acc(ctx.qh.data(), kt.data(), p.data(), T, dh, T);
        for (std::int64_t i = 0; i < T; ++i) {
            float* row = p.data() + i * T;
            for (std::int64_t j = 0; j < T; ++j) {
                row[j] *= att_scale;
                const bool allowed = (!causal || j <= i) && (!mask || (*mask)[static_cast<std::size_t>(i * T + j)]);
                if (!allowed) row[j] = kForbidden;
            }
            float m = row[0];
            for (std::int64_t j = 1; j < T; ++j) m = std::max(m, row[j]);
            if (m <= kForbidden) { // every position forbidden: attend to nothing
                std::fill(row, row + T, 0.0f);
                continue;
            }
            float s = 0.0f;
            for (std::int64_t j = 0; j < T; ++j) {
                row[j] = std::exp(row[j] - m);
                s += row[j];
            }
            const float invs = 1.0f / s;
            for (std::int64_t j = 0; j < T; ++j) row[j] *= invs;
        }
        // per-head output into its channel slice
        std::vector<float> oh(static_cast<std::size_t>(T * dh), 0.0f);
        detail::mm_acc(p.data(), ctx.vh.data(), oh.data(), T, T, dh);
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t d = 0; d < dh; ++d) o[static_cast<std::size_t>(t * D + c0 + d)] = oh[static_cast<std::size_t>(t * dh + d)];
    }
    auto out = GradTensor::from({T, D}, std::move(o));
    if (detail::want_grad({&q, &k, &v})) {
        auto qn = q.node(), kn = k.node(), vn = v.node();
        auto* self = out.node().get();
        detail::attach(out, {qn, kn, vn}, [self, qn, kn, vn, heads, T, D, H, dh, att_scale]() {
            const float* g = self->grad.data();
            const bool wq = qn->requires_grad, wk = kn->requires_grad, wv = vn->requires_grad;
            if (wq) qn->ensure_grad();
            if (wk) kn->ensure_grad();
            if (wv) vn->ensure_grad();
            std::vector<float> goh(static_cast<std::size_t>(T * dh));
            std::vector<float> dvh(static_cast<std::size_t>(T * dh));
            std::vector<float> dp(static_cast<std::size_t>(T * T));
            std::vector<float> ds(static_cast<std::size_t>(T * T));
            for (std::int64_t h = 0; h < H; ++h) {
                const HeadCtx& ctx = (*heads)[static_cast<std::size_t>(h)];
                const std::int64_t c0 = h * dh;
                for (std::int64_t t = 0; t < T; ++t)
                    for (std::int64_t d = 0; d < dh; ++d)
                        goh[static_cast<std::size_t>(t * dh + d)] = g[t * D + c0 + d];
                if (wv) {
                    std::fill(dvh.begin(), dvh.end(), 0.0f);
                    for (std::int64_t i = 0; i < T; ++i) {
                        const float* prow = ctx.p.data() + i * T;
                        const float* grow = goh.data() + i * dh;
                        for (std::int64_t t = 0; t < T; ++t) {
                            const float pit = prow[t];
                            float* drow = dvh.data() + t * dh;
                            for (std::int64_t d = 0; d < dh; ++d) drow[d] += pit * grow[d];
                        }
                    }
                    for (std::int64_t t = 0; t < T; ++t)
                        for (std::int64_t d = 0; d < dh; ++d)
                            vn->grad[static_cast<std::size_t>(t * D + c0 + d)] += dvh[static_cast<std::size_t>(t * dh + d)];
                }
                if (wq || wk) {
                    auto vt = detail::transposed(ctx.vh.data(), T, dh); // [dh×T]
                    std::fill(dp.begin(), dp.end(), 0.0f);
                    detail::mm_acc(goh.data(), vt.data(), dp.data(), T, dh, T);
                    for (std::int64_t i = 0; i < T; ++i) {
                        const float* prow = ctx.p.data() + i * T;
                        const float* dprow = dp.data() + i * T;
                        float dot = 0.0f;
                        for (std::int64_t j = 0; j < T; ++j) dot += dprow[j] * prow[j];
                        float* dsrow = ds.data() + i * T;
                        for (std::int64_t j = 0; j < T; ++j)
                            dsrow[j] = att_scale * prow[j] * (dprow[j] - dot);
                    }
                    for (std::int64_t i = 0; i < T; ++i) {
                        const float* dsrow = ds.data() + i * T;
                        if (wq) {
                            float* dqrow = qn->grad.data() + i * D + c0;
                            for (std::int64_t j = 0; j < T; ++j) {
                                const float sij = dsrow[j];
                                const float* krow = ctx.kh.data() + j * dh;
                                for (std::int64_t d = 0; d < dh; ++d) dqrow[d] += sij * krow[d];
                            }
                        }
                        if (wk) {
                            const float* qrow = ctx.qh.data() + i * dh;
                            for (std::int64_t j = 0; j < T; ++j) {
                                const float sij = dsrow[j];
                                float* dkrow = kn->grad.data() + j * D + c0;
                                for (std::int64_t d = 0; d < dh; ++d) dkrow[d] += sij * qrow[d];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

} // namespace emotalk
