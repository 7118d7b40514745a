#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unimp/tensor.hpp"

namespace unimp {

template <typename T>
struct AdamWConfig {
    T lr = T(2e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);
};

// Decoupled weight decay Adam. One moment pair per registered parameter;
// parameters whose requires_grad was cleared (frozen groups) are skipped.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Tensor<T>> params, AdamWConfig<T> cfg) : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].data().size(), T(0));
            v_[i].assign(params_[i].data().size(), T(0));
        }
    }

    void set_lr(T lr) { cfg_.lr = lr; }
    T lr() const { return cfg_.lr; }
    long long step_count() const { return step_; }

    void step() {
        ++step_;
        const T bc1 = T(1) - std::pow(cfg_.beta1, static_cast<T>(step_));
        const T bc2 = T(1) - std::pow(cfg_.beta2, static_cast<T>(step_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.requires_grad()) continue;
            auto& data = p.data();
            const auto& grad = p.grad();
            if (!grad.empty() && grad.size() != data.size()) {
                throw DimensionError("adamw gradient length " + std::to_string(grad.size()) +
                                     " does not match parameter " + shape_str(p.shape()));
            }
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < data.size(); ++j) {
                const T g = grad.empty() ? T(0) : grad[j];
                m[j] = cfg_.beta1 * m[j] + (T(1) - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (T(1) - cfg_.beta2) * g * g;
                const T mhat = m[j] / bc1;
                const T vhat = v[j] / bc2;
                data[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * data[j]);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor<T>> params_;
    AdamWConfig<T> cfg_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    long long step_ = 0;
};

// Linear warmup to base_lr over warmup_fraction * total_steps, then cosine
// decay to zero at total_steps.
inline double lr_at(long long step, long long total_steps, double base_lr, double warmup_fraction) {
    if (step < 0 || step > total_steps) throw ValidationError("lr_at step out of range");
    const double warmup = warmup_fraction * static_cast<double>(total_steps);
    if (warmup > 0 && static_cast<double>(step) < warmup) {
        return base_lr * static_cast<double>(step) / warmup;
    }
    if (step >= total_steps) return 0.0;
    const double progress = (static_cast<double>(step) - warmup) / (static_cast<double>(total_steps) - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace unimp
