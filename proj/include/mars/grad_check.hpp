#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mars/tensor.hpp"

namespace mars {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
};

// |a − n| / max(|a|, |n|, floor). The floor keeps rounding noise on
// near-zero gradients from dominating the ratio.
inline double grad_rel_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

template <class T>
void check_step(T eps) {
    if (!(eps >= T(1e-4) && eps <= T(1e-2))) throw NumericError("grad_check: eps must lie in [1e-4, 1e-2]");
}

template <class T>
double finite_loss(const std::function<BasicTensor<T>()>& loss_fn) {
    const T v = loss_fn().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
    return static_cast<double>(v);
}

// Reverse-mode gradients of every tensor in params, one vector per tensor.
template <class T>
std::vector<std::vector<double>> analytic_grads(const std::function<BasicTensor<T>()>& loss_fn,
                                                std::vector<BasicTensor<T>>& params) {
    for (auto& p : params) {
        if (!p.requires_grad()) p.set_requires_grad(true);
        p.zero_grad();
    }
    BasicTensor<T> loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    loss.backward();
    std::vector<std::vector<double>> out;
    for (const auto& p : params) out.emplace_back(p.grad().begin(), p.grad().end());
    return out;
}

// Central differences on params, scored against the analytic gradients.
template <class S>
GradCheckResult compare_central(const std::vector<std::vector<double>>& analytic,
                                const std::function<BasicTensor<S>()>& loss_fn, std::vector<BasicTensor<S>>& params,
                                S eps, double floor) {
    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto data = params[pi].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const S saved = data[i];
            data[i] = saved + eps;
            const double up = finite_loss(loss_fn);
            data[i] = saved - eps;
            const double down = finite_loss(loss_fn);
            data[i] = saved;
            // the step actually taken after rounding θ±eps to S
            const double h = static_cast<double>(static_cast<S>(saved + eps)) -
                             static_cast<double>(static_cast<S>(saved - eps));
            const double numeric = (up - down) / h;
            const double err = grad_rel_error(analytic[pi][i], numeric, floor);
            ++res.checked;
            if (res.checked == 1 || err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_param = pi;
                res.worst_index = i;
                res.worst_analytic = analytic[pi][i];
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace detail

/// Compares reverse-mode gradients against central finite differences
/// (f(θ+eps) − f(θ−eps)) / 2eps on every element of every tensor in params.
template <class T>
GradCheckResult grad_check(const std::function<BasicTensor<T>()>& loss_fn, std::vector<BasicTensor<T>> params,
                           T eps, double floor = 1e-2) {
    detail::check_step(eps);
    const auto analytic = detail::analytic_grads(loss_fn, params);
    return detail::compare_central(analytic, loss_fn, params, eps, floor);
}

/// Checks the reverse-mode gradients of a T computation against finite
/// differences of a wider shadow of the same computation. shadow_params must
/// hold the same values as params, converted to S. Useful when T rounding
/// noise in f(θ±eps) swamps small gradient entries.
template <class T, class S>
GradCheckResult grad_check_shadowed(const std::function<BasicTensor<T>()>& loss_fn, std::vector<BasicTensor<T>> params,
                                    const std::function<BasicTensor<S>()>& shadow_fn,
                                    std::vector<BasicTensor<S>> shadow_params, S eps, double floor = 1e-2) {
    detail::check_step(eps);
    if (shadow_params.size() != params.size())
        throw DimensionError("grad_check: " + std::to_string(params.size()) + " parameters but " +
                             std::to_string(shadow_params.size()) + " shadows");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != shadow_params[i].shape())
            throw DimensionError("grad_check: shadow " + std::to_string(i) + " has shape " +
                                 shape_str(shadow_params[i].shape()) + ", expected " + shape_str(params[i].shape()));
        const auto a = params[i].data();
        const auto b = shadow_params[i].data();
        for (std::size_t j = 0; j < a.size(); ++j)
            if (static_cast<S>(a[j]) != b[j])
                throw NumericError("grad_check: shadow " + std::to_string(i) + " differs at element " + std::to_string(j));
    }
    const auto analytic = detail::analytic_grads(loss_fn, params);
    return detail::compare_central(analytic, shadow_fn, shadow_params, eps, floor);
}

}  // namespace mars
