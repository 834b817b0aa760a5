#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "deepscm/error.hpp"
#include "deepscm/layers.hpp"
#include "deepscm/optim.hpp"
#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"

// LMMSE decorrelation of the enhancement features against the basic ones:
//   u2 = W u1 + b + r,   Cov[u1, r] = 0 at the optimum,
// plus the Gaussian/Hadamard/AM-GM entropy bound chain on r.

namespace deepscm {

/// Column-vector convention: u2 ≈ W u1 + b.
struct AffineEstimator {
    Eigen::MatrixXd W;
    Eigen::VectorXd b;
};

struct ResidualStats {
    double mean_sq_norm = 0.0;
    Eigen::MatrixXd cross_cov;
    std::size_t sample_count = 0;

    double max_abs_cross_cov() const { return cross_cov.size() ? cross_cov.cwiseAbs().maxCoeff() : 0.0; }
};

/// View of a [N×d] tensor as an N×d row-major matrix.
inline Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
as_matrix(const Tensor& samples) {
    require_matrix(samples, "as_matrix");
    return {samples.data().data(), static_cast<Eigen::Index>(samples.dim(0)),
            static_cast<Eigen::Index>(samples.dim(1))};
}

inline Eigen::MatrixXd centered(const Tensor& samples) {
    Eigen::MatrixXd x = as_matrix(samples);
    const Eigen::RowVectorXd mu = x.colwise().mean();
    x.rowwise() -= mu;
    return x;
}

/// Unbiased sample cross-covariance Ĉov[a, b] (d_a × d_b).
inline Eigen::MatrixXd cross_cov(const Tensor& a, const Tensor& b) {
    require_matrix(a, "cross_cov");
    require_matrix(b, "cross_cov");
    if (a.dim(0) != b.dim(0)) {
        throw ShapeError("cross_cov: sample counts differ");
    }
    if (a.dim(0) < 2) {
        throw InsufficientSamplesError("cross_cov: need at least two samples");
    }
    return centered(a).transpose() * centered(b) / static_cast<double>(a.dim(0) - 1);
}

/// 1e-8 · tr(Var[u1]) / d, a scale-aware guard for near-singular features.
inline double default_ridge(const Tensor& u1) {
    const Eigen::MatrixXd var = cross_cov(u1, u1);
    return 1e-8 * var.trace() / static_cast<double>(var.rows());
}

inline AffineEstimator fit_lmmse(const Tensor& u1, const Tensor& u2, double ridge) {
    require_matrix(u1, "fit_lmmse");
    require_matrix(u2, "fit_lmmse");
    if (u1.dim(0) != u2.dim(0)) {
        throw ShapeError("fit_lmmse: sample counts differ");
    }
    if (u1.dim(0) <= u1.dim(1)) {
        throw InsufficientSamplesError("fit_lmmse: need more samples than feature dimensions");
    }
    if (ridge < 0.0) {
        throw ContractError("fit_lmmse: ridge must be non-negative");
    }
    Eigen::MatrixXd var1 = cross_cov(u1, u1);
    var1.diagonal().array() += ridge;
    const Eigen::MatrixXd cov21 = cross_cov(u2, u1);
    Eigen::LLT<Eigen::MatrixXd> llt(var1);
    if (llt.info() != Eigen::Success || llt.rcond() < 1e-13) {
        throw SingularCovarianceError("fit_lmmse: Var[u1] is singular");
    }
    AffineEstimator est;
    // W = Cov21 Var1^-1  <=>  Var1 Wᵀ = Cov12.
    est.W = llt.solve(cov21.transpose()).transpose();
    const Eigen::VectorXd mu1 = as_matrix(u1).colwise().mean().transpose();
    const Eigen::VectorXd mu2 = as_matrix(u2).colwise().mean().transpose();
    est.b = mu2 - est.W * mu1;
    return est;
}

/// r = u2 - (u1·W + b) through a trainable row-convention layer.
inline Tensor residual(const Tensor& u1, const Tensor& u2, const Dense& decorrelator) {
    return sub(u2, decorrelator(u1));
}

/// Row-convention layer holding an estimator's (W, b) as constants.
inline Dense to_dense(const AffineEstimator& est, bool track_grad = false) {
    const auto d_in = static_cast<std::size_t>(est.W.cols());
    const auto d_out = static_cast<std::size_t>(est.W.rows());
    std::vector<double> w(d_in * d_out), b(d_out);
    for (std::size_t i = 0; i < d_in; ++i) {
        for (std::size_t j = 0; j < d_out; ++j) {
            w[i * d_out + j] = est.W(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
        }
    }
    for (std::size_t j = 0; j < d_out; ++j) b[j] = est.b(static_cast<Eigen::Index>(j));
    return {Tensor::from({d_in, d_out}, std::move(w), track_grad),
            Tensor::from({d_out}, std::move(b), track_grad)};
}

inline AffineEstimator to_estimator(const Dense& layer) {
    AffineEstimator est;
    const auto d_in = static_cast<Eigen::Index>(layer.in());
    const auto d_out = static_cast<Eigen::Index>(layer.out());
    est.W.resize(d_out, d_in);
    est.b.resize(d_out);
    for (Eigen::Index i = 0; i < d_in; ++i) {
        for (Eigen::Index j = 0; j < d_out; ++j) est.W(j, i) = layer.w[static_cast<std::size_t>(i * d_out + j)];
    }
    for (Eigen::Index j = 0; j < d_out; ++j) est.b(j) = layer.b[static_cast<std::size_t>(j)];
    return est;
}

inline Tensor residual(const Tensor& u1, const Tensor& u2, const AffineEstimator& est) {
    if (static_cast<std::size_t>(est.W.cols()) != u1.cols() ||
        static_cast<std::size_t>(est.W.rows()) != u2.cols()) {
        throw ShapeError("residual: estimator does not match feature widths");
    }
    const Tensor a = as_batch(u1, u1.cols(), "residual");
    const Tensor b = as_batch(u2, u2.cols(), "residual");
    const Tensor r = residual(a, b, to_dense(est));
    return u1.rank() == 1 ? reshape(r, {r.size()}) : r;
}

/// Empirical mean of ||u2 - W u1 - b||².
inline double lmmse_objective(const Tensor& u1, const Tensor& u2, const AffineEstimator& est) {
    const Eigen::MatrixXd pred = (as_matrix(u1) * est.W.transpose()).rowwise() + est.b.transpose();
    return (as_matrix(u2) - pred).rowwise().squaredNorm().mean();
}

inline double mean_sq_norm(const Tensor& r) {
    return as_matrix(r).rowwise().squaredNorm().mean();
}

inline ResidualStats residual_stats(const Tensor& u1, const Tensor& r) {
    return {mean_sq_norm(r), cross_cov(u1, r), r.dim(0)};
}

/// n · ln(πe/n · Ê||R||²), in nats, for R of dimension 2n.
inline double entropy_upper_bound(const Tensor& r, std::size_t n) {
    if (r.rows() < 1 || n == 0) {
        throw InsufficientSamplesError("entropy_upper_bound: need samples and n >= 1");
    }
    const double ms = mean_sq_norm(r);
    if (!(ms > 0.0)) {
        throw DegenerateBoundError("entropy_upper_bound: all-zero residuals (log 0)");
    }
    const double dn = static_cast<double>(n);
    return dn * std::log(std::numbers::pi * std::numbers::e / dn * ms);
}

/// The four successive upper bounds on h(R), from population (1/N) sample
/// moments so the chain is monotone for every input:
///   [0] ½ ln((2πe)^{2n} |Var R|)          Gaussian max-entropy
///   [1] ½ ln((2πe)^{2n} Π Var R_i)        Hadamard
///   [2] ½ ln((2πe)^{2n} (Σ Var R_i/2n)^{2n})  AM-GM
///   [3] n ln(πe/n Σ E[R_i²])              variance <= second moment
inline std::array<double, 4> bound_chain_check(const Tensor& r) {
    require_matrix(r, "bound_chain_check");
    const std::size_t d = r.dim(1);
    if (d % 2 != 0) {
        throw ShapeError("bound_chain_check: residual width must be even (2n)");
    }
    if (r.dim(0) < 2) {
        throw InsufficientSamplesError("bound_chain_check: need at least two samples");
    }
    const double dn = static_cast<double>(d) / 2.0;
    const double big_n = static_cast<double>(r.dim(0));
    const Eigen::MatrixXd c = centered(r);
    const Eigen::MatrixXd var = c.transpose() * c / big_n;
    Eigen::LLT<Eigen::MatrixXd> llt(var);
    if (llt.info() != Eigen::Success || llt.rcond() < 1e-14) {
        throw SingularCovarianceError("bound_chain_check: sample covariance is singular");
    }
    const double log_two_pi_e = std::log(2.0 * std::numbers::pi * std::numbers::e);
    const Eigen::MatrixXd l = llt.matrixL();
    const double logdet = 2.0 * l.diagonal().array().log().sum();
    const double log_diag = var.diagonal().array().log().sum();
    const double trace = var.trace();
    const double second_moment = as_matrix(r).array().square().colwise().mean().sum();
    return {dn * log_two_pi_e + 0.5 * logdet, dn * log_two_pi_e + 0.5 * log_diag,
            dn * log_two_pi_e + dn * std::log(trace / (2.0 * dn)),
            dn * std::log(std::numbers::pi * std::numbers::e / dn * second_moment)};
}

/// One cosine anneal over the whole run (t0 = epochs).
struct AffineFitOptions {
    std::size_t epochs = 200;
    std::size_t batch_size = 256;
    LrSchedule schedule{5e-2, 1e-6, 200.0, 2.0};
};

/// Gradient route to the LMMSE solution: one affine layer trained with
/// Adam on the mean ||u2 - (u1·W + b)||² objective.
inline Dense fit_affine_by_adam(const Tensor& u1, const Tensor& u2, const AffineFitOptions& opt,
                                Rng& rng) {
    require_matrix(u1, "fit_affine_by_adam");
    require_matrix(u2, "fit_affine_by_adam");
    const std::size_t big_n = u1.dim(0), d_in = u1.dim(1), d_out = u2.dim(1);
    Dense layer{Tensor::zeros({d_in, d_out}, true), Tensor::zeros({d_out}, true)};
    Adam adam({layer.w, layer.b});
    std::vector<std::size_t> order(big_n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t steps_per_epoch = (big_n + opt.batch_size - 1) / opt.batch_size;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        for (std::size_t i = big_n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const std::size_t lo = s * opt.batch_size, hi = std::min(big_n, lo + opt.batch_size);
            std::vector<double> a, b;
            for (std::size_t k = lo; k < hi; ++k) {
                const std::size_t row = order[k];
                a.insert(a.end(), u1.data().begin() + row * d_in, u1.data().begin() + (row + 1) * d_in);
                b.insert(b.end(), u2.data().begin() + row * d_out, u2.data().begin() + (row + 1) * d_out);
            }
            const Tensor xa = Tensor::from({hi - lo, d_in}, std::move(a));
            const Tensor xb = Tensor::from({hi - lo, d_out}, std::move(b));
            adam.zero_grad();
            const Tensor loss = scale(sum_sq(residual(xa, xb, layer)), 1.0 / static_cast<double>(hi - lo));
            backward(loss);
            const double epoch_pos = static_cast<double>(epoch) +
                                     static_cast<double>(s) / static_cast<double>(steps_per_epoch);
            adam.step(lr_at(epoch_pos, opt.schedule));
        }
    }
    return layer;
}

} // namespace deepscm
