#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "deepscm/error.hpp"
#include "deepscm/tensor.hpp"

namespace deepscm {

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed parameter list. Parameters without a gradient (not
/// reached by the last backward) are left untouched but still advance t.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)) {
        state_.beta1 = beta1;
        state_.beta2 = beta2;
        state_.eps = eps;
        for (const Tensor& p : params_) {
            state_.m.emplace_back(p.size(), 0.0);
            state_.v.emplace_back(p.size(), 0.0);
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    void step(double lr) {
        if (!(lr > 0.0)) {
            throw ContractError("adam: learning rate must be positive");
        }
        ++state_.t;
        const double bc1 = 1.0 - std::pow(state_.beta1, static_cast<double>(state_.t));
        const double bc2 = 1.0 - std::pow(state_.beta2, static_cast<double>(state_.t));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.has_grad()) continue;
            auto g = p.grad();
            auto w = p.mutable_data();
            auto& m = state_.m[i];
            auto& v = state_.v[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = state_.beta1 * m[j] + (1.0 - state_.beta1) * g[j];
                v[j] = state_.beta2 * v[j] + (1.0 - state_.beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + state_.eps);
            }
        }
    }

    const AdamState& state() const { return state_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    AdamState state_;
};

/// Cosine annealing with warm restarts; cycle i lasts t0 * t_mult^i epochs.
struct LrSchedule {
    double eta_max = 2e-4;
    double eta_min = 1e-5;
    double t0 = 10.0;
    double t_mult = 2.0;
};

/// Learning rate at a (possibly fractional) epoch.
inline double lr_at(double epoch, const LrSchedule& s) {
    if (epoch < 0.0) {
        throw ContractError("lr_at: epoch must be non-negative");
    }
    if (!(s.t0 > 0.0) || s.t_mult < 1.0) {
        throw ContractError("lr_at: need t0 > 0 and t_mult >= 1");
    }
    double t_cur = epoch;
    double t_i = s.t0;
    while (t_cur >= t_i) {
        t_cur -= t_i;
        t_i *= s.t_mult;
    }
    return s.eta_min + (s.eta_max - s.eta_min) * (1.0 + std::cos(std::numbers::pi * t_cur / t_i)) / 2.0;
}

} // namespace deepscm
