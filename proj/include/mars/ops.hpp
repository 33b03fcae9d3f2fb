#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mars/kernels.hpp"
#include "mars/tensor.hpp"

namespace mars {

namespace detail {

template <class T>
void require_matrix(const BasicTensor<T>& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <class T>
void require_finite(std::span<const T> x, const char* op) {
    for (T v : x)
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
    std::vector<T> out(m * n);
    kernels::matmul(a.data().data(), b.data().data(), out.data(), m, k, n);
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (na.requires_grad) kernels::matmul_grad_a(self.grad.data(), nb.data.data(), na.grad.data(), m, k, n);
        if (nb.requires_grad) kernels::matmul_grad_b(na.data.data(), self.grad.data(), nb.grad.data(), m, k, n);
    });
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t s = 0; s < 2; ++s) {
            Node& in = *self.inputs[s];
            if (!in.requires_grad) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
        }
    });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
        Node& in = *self.inputs[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * factor;
    });
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::gelu(x[i]);
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        Node& in = *self.inputs[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            in.grad[i] += self.grad[i] * kernels::gelu_derivative(in.data[i]);
    });
}

/// Row-wise layer norm of an n×d matrix (or a length-d vector) with
/// per-feature gamma and beta of length d.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5)) {
    const std::size_t d = x.cols();
    if (gamma.numel() != d || beta.numel() != d)
        throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gamma " +
                             shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
    const std::size_t n = x.rows();
    std::vector<T> out(n * d);
    auto xhat = std::make_shared<std::vector<T>>(n * d);
    auto rstd = std::make_shared<std::vector<T>>(n);
    for (std::size_t i = 0; i < n; ++i)
        kernels::layer_norm_row(x.row(i), gamma.data().data(), beta.data().data(), eps, d, out.data() + i * d,
                                xhat->data() + i * d, rstd->data() + i);
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result(x.shape(), std::move(out), {x, gamma, beta}, [n, d, xhat, rstd](Node& self) {
        Node& nx = *self.inputs[0];
        Node& ng = *self.inputs[1];
        Node& nb = *self.inputs[2];
        for (std::size_t i = 0; i < n; ++i) {
            const T* dy = self.grad.data() + i * d;
            const T* h = xhat->data() + i * d;
            if (ng.requires_grad)
                for (std::size_t j = 0; j < d; ++j) ng.grad[j] += dy[j] * h[j];
            if (nb.requires_grad)
                for (std::size_t j = 0; j < d; ++j) nb.grad[j] += dy[j];
            if (nx.requires_grad) {
                T mean_dh = 0, mean_dh_h = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const T dh = dy[j] * ng.data[j];
                    mean_dh += dh;
                    mean_dh_h += dh * h[j];
                }
                mean_dh /= static_cast<T>(d);
                mean_dh_h /= static_cast<T>(d);
                T* dx = nx.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j)
                    dx[j] += (*rstd)[i] * (dy[j] * ng.data[j] - mean_dh - h[j] * mean_dh_h);
            }
        }
    });
}

/// out[r] = x[index[r]]; the backward pass scatter-adds.
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::vector<std::size_t> index) {
    const std::size_t d = x.cols();
    const std::size_t n = x.rank() == 1 ? 1 : x.shape()[0];
    if (index.empty()) throw DimensionError("gather_rows: empty index list");
    std::vector<T> out(index.size() * d);
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= n)
            throw IndexError("gather_rows: row " + std::to_string(index[r]) + " outside " + shape_str(x.shape()));
        std::copy_n(x.row(index[r]), d, out.data() + r * d);
    }
    using Node = typename BasicTensor<T>::Node;
    const Shape shape{index.size(), d};
    return BasicTensor<T>::make_result(shape, std::move(out), {x}, [d, index = std::move(index)](Node& self) {
        Node& in = *self.inputs[0];
        for (std::size_t r = 0; r < index.size(); ++r) {
            T* dst = in.grad.data() + index[r] * d;
            const T* src = self.grad.data() + r * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

template <class T>
BasicTensor<T> concat_rows(const std::vector<BasicTensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t d = parts[0].cols();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.cols() != d)
            throw DimensionError("concat_rows: widths differ, " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        total += p.rows();
    }
    std::vector<T> out;
    out.reserve(total * d);
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result({total, d}, std::move(out), parts, [offsets](Node& self) {
        for (std::size_t s = 0; s < self.inputs.size(); ++s) {
            Node& in = *self.inputs[s];
            if (!in.requires_grad) continue;
            for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += self.grad[offsets[s] + i];
        }
    });
}

template <class T>
BasicTensor<T> concat_cols(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_matrix(a, "concat_cols");
    detail::require_matrix(b, "concat_cols");
    if (a.rows() != b.rows())
        throw DimensionError("concat_cols: row counts differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.rows(), da = a.cols(), db = b.cols();
    std::vector<T> out(n * (da + db));
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.row(i), da, out.data() + i * (da + db));
        std::copy_n(b.row(i), db, out.data() + i * (da + db) + da);
    }
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result({n, da + db}, std::move(out), {a, b}, [n, da, db](Node& self) {
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        for (std::size_t i = 0; i < n; ++i) {
            const T* g = self.grad.data() + i * (da + db);
            if (na.requires_grad)
                for (std::size_t j = 0; j < da; ++j) na.grad[i * da + j] += g[j];
            if (nb.requires_grad)
                for (std::size_t j = 0; j < db; ++j) nb.grad[i * db + j] += g[da + j];
        }
    });
}

/// Multi-head causal self-attention over T×d query/key/value matrices.
/// Row i sees rows 0..i; scores are scaled by 1/sqrt(d/heads).
template <class T>
BasicTensor<T> causal_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                std::size_t heads) {
    detail::require_matrix(q, "causal_attention");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw DimensionError("causal_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                             ", v " + shape_str(v.shape()));
    const std::size_t n = q.rows(), d = q.cols();
    if (heads == 0 || d % heads != 0)
        throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    std::vector<T> out(n * d);
    // probs[h][i][j] for j ≤ i, stored densely as heads × n × n
    auto probs = std::make_shared<std::vector<T>>(heads * n * n, T(0));
    std::vector<T> row_probs(heads * n);
    for (std::size_t i = 0; i < n; ++i) {
        kernels::attention_row(q.row(i), k.data().data(), v.data().data(), i + 1, d, heads, out.data() + i * d,
                               row_probs.data());
        for (std::size_t h = 0; h < heads; ++h)
            std::copy_n(row_probs.data() + h * (i + 1), i + 1, probs->data() + (h * n + i) * n);
    }
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result({n, d}, std::move(out), {q, k, v}, [n, d, heads, probs](Node& self) {
        Node& nq = *self.inputs[0];
        Node& nk = *self.inputs[1];
        Node& nv = *self.inputs[2];
        const std::size_t dk = d / heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dk));
        std::vector<T> dp(n);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dk;
            for (std::size_t i = 0; i < n; ++i) {
                const T* p = probs->data() + (h * n + i) * n;
                const T* dout = self.grad.data() + i * d + off;
                T dot = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const T* vj = nv.data.data() + j * d + off;
                    T s = 0;
                    for (std::size_t c = 0; c < dk; ++c) s += dout[c] * vj[c];
                    dp[j] = s;
                    dot += p[j] * s;
                    if (nv.requires_grad) {
                        T* dvj = nv.grad.data() + j * d + off;
                        for (std::size_t c = 0; c < dk; ++c) dvj[c] += p[j] * dout[c];
                    }
                }
                const T* qi = nq.data.data() + i * d + off;
                for (std::size_t j = 0; j <= i; ++j) {
                    const T ds = p[j] * (dp[j] - dot) * scale;
                    if (nq.requires_grad) {
                        T* dqi = nq.grad.data() + i * d + off;
                        const T* kj = nk.data.data() + j * d + off;
                        for (std::size_t c = 0; c < dk; ++c) dqi[c] += ds * kj[c];
                    }
                    if (nk.requires_grad) {
                        T* dkj = nk.grad.data() + j * d + off;
                        for (std::size_t c = 0; c < dk; ++c) dkj[c] += ds * qi[c];
                    }
                }
            }
        }
    });
}

/// Sum over rows of −log softmax(logits[r][lo..hi))[target[r]]. Rows whose
/// target is negative are skipped. The softmax is restricted to columns
/// [lo, hi); pass lo=0, hi=cols for the full distribution.
template <class T>
BasicTensor<T> cross_entropy_rows(const BasicTensor<T>& logits, const std::vector<std::int64_t>& targets,
                                  std::size_t lo = 0, std::size_t hi = SIZE_MAX) {
    const std::size_t n = logits.rows(), v = logits.cols();
    if (hi == SIZE_MAX) hi = v;
    if (targets.size() != n)
        throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(n) + " rows");
    if (lo >= hi || hi > v) throw IndexError("cross_entropy_rows: bad column range");
    double total = 0;
    auto lse = std::make_shared<std::vector<double>>(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const std::int64_t t = targets[r];
        if (t < 0) continue;
        if (static_cast<std::size_t>(t) < lo || static_cast<std::size_t>(t) >= hi)
            throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                             std::to_string(hi) + ")");
        const T* row = logits.row(r);
        (*lse)[r] = kernels::log_sum_exp(row, lo, hi);
        total += (*lse)[r] - static_cast<double>(row[t]);
    }
    using Node = typename BasicTensor<T>::Node;
    return BasicTensor<T>::make_result({1}, {static_cast<T>(total)}, {logits},
                                       [n, v, lo, hi, targets, lse](Node& self) {
                                           Node& in = *self.inputs[0];
                                           const double g = self.grad[0];
                                           for (std::size_t r = 0; r < n; ++r) {
                                               if (targets[r] < 0) continue;
                                               const T* row = in.data.data() + r * v;
                                               T* dr = in.grad.data() + r * v;
                                               for (std::size_t j = lo; j < hi; ++j)
                                                   dr[j] += static_cast<T>(g * std::exp(row[j] - (*lse)[r]));
                                               dr[targets[r]] -= static_cast<T>(g);
                                           }
                                       });
}

// ---- plain-vector helpers (no graph) ----

/// Softmax of x / temperature with max subtraction.
template <class T>
std::vector<T> softmax(std::span<const T> x, T temperature = T(1)) {
    if (x.empty()) throw DimensionError("softmax: empty input");
    if (!(temperature > T(0))) throw NumericError("softmax: temperature must be positive");
    detail::require_finite(x, "softmax");
    double mx = -INFINITY;
    for (T v : x) mx = std::max(mx, static_cast<double>(v) / temperature);
    std::vector<double> e(x.size());
    double sum = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(static_cast<double>(x[i]) / temperature - mx);
        sum += e[i];
    }
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(e[i] / sum);
    return out;
}

/// −log softmax(logits)[target], computed through log-sum-exp.
template <class T>
T cross_entropy(std::span<const T> logits, std::size_t target) {
    if (target >= logits.size())
        throw IndexError("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                         std::to_string(logits.size()) + ")");
    return static_cast<T>(kernels::log_sum_exp(logits.data(), 0, logits.size()) - static_cast<double>(logits[target]));
}

template <class T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta, T eps = T(1e-5)) {
    if (x.empty() || gamma.size() != x.size() || beta.size() != x.size())
        throw DimensionError("layer_norm: mismatched vector lengths");
    std::vector<T> y(x.size());
    kernels::layer_norm_row(x.data(), gamma.data(), beta.data(), eps, x.size(), y.data());
    return y;
}

}  // namespace mars
