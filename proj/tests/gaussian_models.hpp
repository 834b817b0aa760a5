#pragma once

#include <utility>
#include <vector>

#include "deepscm/decorrelator.hpp"
#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"

namespace deepscm::testing {

/// u1 ~ N(0,1) scalar, u2 = 2·u1 + e, e ~ N(0, 0.25).
inline std::pair<Tensor, Tensor> scalar_model(std::size_t n, Rng& rng) {
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = standard_normal(rng);
        b[i] = 2.0 * a[i] + 0.5 * standard_normal(rng);
    }
    return {Tensor::from({n, 1}, std::move(a)), Tensor::from({n, 1}, std::move(b))};
}

/// d-dim correlated Gaussian: u1 = A·z + m, u2 = B·u1 + c + 0.3·e, with
/// A, B, m, c drawn once from `rng`.
inline std::pair<Tensor, Tensor> gaussian_model(std::size_t n, std::size_t d, Rng& rng) {
    std::vector<double> a(d * d), bmat(d * d), m(d), c(d);
    for (double& v : a) v = standard_normal(rng) / std::sqrt(static_cast<double>(d));
    for (double& v : bmat) v = standard_normal(rng) / std::sqrt(static_cast<double>(d));
    for (double& v : m) v = standard_normal(rng);
    for (double& v : c) v = standard_normal(rng);
    for (std::size_t i = 0; i < d; ++i) a[i * d + i] += 1.0;
    std::vector<double> u1(n * d), u2(n * d), z(d);
    for (std::size_t s = 0; s < n; ++s) {
        for (double& v : z) v = standard_normal(rng);
        for (std::size_t i = 0; i < d; ++i) {
            double acc = m[i];
            for (std::size_t j = 0; j < d; ++j) acc += a[i * d + j] * z[j];
            u1[s * d + i] = acc;
        }
        for (std::size_t i = 0; i < d; ++i) {
            double acc = c[i] + 0.3 * standard_normal(rng);
            for (std::size_t j = 0; j < d; ++j) acc += bmat[i * d + j] * u1[s * d + j];
            u2[s * d + i] = acc;
        }
    }
    return {Tensor::from({n, d}, std::move(u1)), Tensor::from({n, d}, std::move(u2))};
}

/// Relative Frobenius distance of (W, b) from a reference estimator.
inline double rel_frobenius(const AffineEstimator& a, const AffineEstimator& ref) {
    const double num = (a.W - ref.W).squaredNorm() + (a.b - ref.b).squaredNorm();
    return std::sqrt(num / (ref.W.squaredNorm() + ref.b.squaredNorm()));
}

} // namespace deepscm::testing
