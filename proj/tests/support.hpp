#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"

namespace deepscm::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool track = true) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = scale * standard_normal(rng);
    return Tensor::from(std::move(shape), std::move(v), track);
}

/// Reduce a tensor to a scalar with fixed random weights so every output
/// element contributes to the gradient.
inline Tensor project(const Tensor& y, Rng& rng) {
    return sum(mul(y, random_tensor(y.shape(), rng, 1.0, false)));
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) over all inputs,
/// with central differences of step h.
inline double grad_check(std::vector<Tensor> inputs, const std::function<Tensor()>& loss_fn,
                         double h = 1e-5) {
    for (Tensor& t : inputs) t.zero_grad();
    backward(loss_fn());
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (Tensor& t : inputs) {
        std::vector<double> analytic(t.size(), 0.0);
        if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
        auto data = t.mutable_data();
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double up = loss_fn().item();
            data[i] = orig - h;
            const double down = loss_fn().item();
            data[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            diff += (analytic[i] - numeric) * (analytic[i] - numeric);
            na += analytic[i] * analytic[i];
            nn += numeric * numeric;
        }
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
    return std::sqrt(diff) / denom;
}

} // namespace deepscm::testing
