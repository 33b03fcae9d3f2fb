#pragma once

// Raw row-major loops shared by the autograd ops and the incremental decoder.
// Every output row is computed from its own input row with a fixed
// accumulation order, so a one-row call reproduces the matching row of a
// many-row call bit for bit. Build with -ffp-contract=off to keep it that way.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <vector>

namespace mars::kernels {

// c[m×n] = a[m×k] · b[k×n]
template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        std::fill(ci, ci + n, T(0));
        const T* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T s = ai[p];
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
        }
    }
}

// da[m×k] += dc[m×n] · bᵀ  (b is k×n)
template <class T>
void matmul_grad_a(const T* dc, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
    std::vector<T> bt(n * k);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    for (std::size_t i = 0; i < m; ++i) {
        T* dai = da + i * k;
        const T* dci = dc + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const T s = dci[j];
            const T* btj = bt.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) dai[p] += s * btj[p];
        }
    }
}

// db[k×n] += aᵀ · dc  (a is m×k, dc is m×n)
template <class T>
void matmul_grad_b(const T* a, const T* dc, T* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        const T* dci = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T s = ai[p];
            T* dbp = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbp[j] += s * dci[j];
        }
    }
}

// y = gamma ⊙ (x − mean)/sqrt(var + eps) + beta over one row of width d.
// xhat and rstd are optional outputs kept for the backward pass.
template <class T>
void layer_norm_row(const T* x, const T* gamma, const T* beta, T eps, std::size_t d, T* y,
                    T* xhat = nullptr, T* rstd_out = nullptr) {
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
        const T c = x[j] - mean;
        var += c * c;
    }
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
        const T h = (x[j] - mean) * rstd;
        if (xhat) xhat[j] = h;
        y[j] = h * gamma[j] + beta[j];
    }
    if (rstd_out) *rstd_out = rstd;
}

template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_derivative(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::sqrt2 * std::numbers::inv_sqrtpi);
    return cdf + x * pdf;
}

// Multi-head causal attention for a single query row against the first
// n_keys rows of keys/values (row stride d). probs, when given, receives
// heads × n_keys attention weights.
template <class T>
void attention_row(const T* q, const T* keys, const T* values, std::size_t n_keys, std::size_t d,
                   std::size_t heads, T* out, T* probs = nullptr) {
    const std::size_t dk = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));
    std::vector<T> local;
    if (!probs) {
        local.resize(heads * n_keys);
        probs = local.data();
    }
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dk;
        T* p = probs + h * n_keys;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n_keys; ++j) {
            const T* kj = keys + j * d + off;
            T s = 0;
            for (std::size_t c = 0; c < dk; ++c) s += q[off + c] * kj[c];
            s *= scale;
            p[j] = s;
            mx = std::max(mx, s);
        }
        T sum = 0;
        for (std::size_t j = 0; j < n_keys; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < n_keys; ++j) p[j] *= inv;
        T* o = out + off;
        std::fill(o, o + dk, T(0));
        for (std::size_t j = 0; j < n_keys; ++j) {
            const T w = p[j];
            const T* vj = values + j * d + off;
            for (std::size_t c = 0; c < dk; ++c) o[c] += w * vj[c];
        }
    }
}

// log Σ exp(x[lo..hi)) with max subtraction, accumulated in double.
template <class T>
double log_sum_exp(const T* x, std::size_t lo, std::size_t hi) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = lo; j < hi; ++j) mx = std::max(mx, static_cast<double>(x[j]));
    double sum = 0;
    for (std::size_t j = lo; j < hi; ++j) sum += std::exp(static_cast<double>(x[j]) - mx);
    return mx + std::log(sum);
}

}  // namespace mars::kernels
