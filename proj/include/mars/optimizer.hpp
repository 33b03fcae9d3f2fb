#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mars/model.hpp"

namespace mars {

/// Linear warmup from 0 to peak over warmup_steps updates, then constant.
struct WarmupSchedule {
    double peak = 1e-4;
    std::size_t warmup_steps = 1;

    double operator()(std::size_t step) const {
        if (warmup_steps == 0) return peak;
        return peak * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
    }

    /// warmup_ratio of total_steps, rounded up, at least one step.
    static WarmupSchedule from_ratio(double peak, double warmup_ratio, std::size_t total_steps) {
        const auto w = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
        return {peak, std::max<std::size_t>(1, w)};
    }
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping

    void validate() const {
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
        if (!(weight_decay >= 0)) throw ConfigError("weight decay must be non-negative");
    }
};

/// Decoupled-weight-decay Adam over the trainable tensors of a parameter
/// list. Tensors that do not require grad are skipped entirely.
class AdamW {
public:
    AdamW(const std::vector<NamedTensor>& params, AdamWConfig cfg, WarmupSchedule schedule)
        : cfg_(cfg), schedule_(schedule) {
        cfg_.validate();
        for (const auto& [name, t] : params) {
            if (!t.requires_grad()) continue;
            slots_.push_back({name, t, std::vector<float>(t.numel(), 0.0f), std::vector<float>(t.numel(), 0.0f)});
        }
    }

    std::size_t steps() const { return step_; }
    double last_lr() const { return last_lr_; }
    double last_grad_norm() const { return last_norm_; }
    const WarmupSchedule& schedule() const { return schedule_; }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    /// One update from the accumulated gradients; returns the learning rate
    /// used. A non-finite gradient aborts before any parameter changes.
    double step() {
        double sq = 0;
        for (const auto& s : slots_) {
            const auto g = s.param.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (!std::isfinite(g[i]))
                    throw NumericError("non-finite gradient in " + s.name + " at element " + std::to_string(i));
                sq += static_cast<double>(g[i]) * g[i];
            }
        }
        last_norm_ = std::sqrt(sq);
        const double clip = (cfg_.clip_norm > 0 && last_norm_ > cfg_.clip_norm) ? cfg_.clip_norm / last_norm_ : 1.0;

        ++step_;
        const double lr = schedule_(step_);
        last_lr_ = lr;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (auto& s : slots_) {
            auto p = s.param.mutable_data();
            const auto g = s.param.grad();
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = static_cast<double>(g[i]) * clip;
                const double m = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
                const double v = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
                s.m[i] = static_cast<float>(m);
                s.v[i] = static_cast<float>(v);
                const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps) + cfg_.weight_decay * p[i];
                p[i] = static_cast<float>(p[i] - lr * update);
            }
        }
        return lr;
    }

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<float> m, v;
    };

    AdamWConfig cfg_;
    WarmupSchedule schedule_;
    std::vector<Slot> slots_;
    std::size_t step_ = 0;
    double last_lr_ = 0;
    double last_norm_ = 0;
};

}  // namespace mars
