#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <string>
#include <vector>

#include "deepscm/constellation.hpp"
#include "deepscm/layers.hpp"
#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"

// Probabilistic modulator: a perceptron emits, for every channel use and
// every I/Q axis, logits over the constellation's per-axis amplitude levels.
// Symbols are drawn with Gumbel-Softmax and mapped to interleaved I/Q reals.

namespace deepscm {

struct ModulatorParams {
    Perceptron net;
    std::size_t channel_uses = 0;
    std::size_t order = 0;

    std::size_t side() const { return qam_side(order); }
    std::size_t categoricals() const { return channel_uses * 2; }
};

inline ModulatorParams make_modulator(std::size_t channel_uses, std::size_t order,
                                      std::size_t hidden, Rng& rng) {
    const std::size_t side = qam_side(order);
    return {make_perceptron(2 * channel_uses, hidden, channel_uses * 2 * side, rng), channel_uses,
            order};
}

/// Categoricals for a batch, laid out as rows (sample, channel use, axis)
/// over `side` amplitude levels.
struct SymbolDistribution {
    Tensor log_probs;
    Tensor probs;
    std::size_t batch = 0;
    std::size_t channel_uses = 0;
    std::size_t side = 0;
};

inline SymbolDistribution symbol_logits(const Tensor& u, const ModulatorParams& params) {
    const std::size_t n = params.channel_uses, side = params.side();
    const Tensor x = as_batch(u, 2 * n, "symbol_logits");
    const std::size_t batch = x.dim(0);
    const Tensor logits = reshape(params.net(x), {batch * n * 2, side});
    SymbolDistribution dist;
    dist.log_probs = log_softmax_rows(logits);
    dist.probs = softmax_rows(logits);
    dist.batch = batch;
    dist.channel_uses = n;
    dist.side = side;
    return dist;
}

struct GumbelConfig {
    double temperature = 1.0;
    bool hard = true;
};

/// softmax((log p + g) / tau) with caller-provided Gumbel noise g.
inline Tensor gumbel_softmax_with_noise(const Tensor& log_probs, const Tensor& noise,
                                        const GumbelConfig& cfg) {
    if (!(cfg.temperature > 0.0)) {
        throw ContractError("gumbel_softmax: temperature must be positive");
    }
    const Tensor soft = softmax_rows(scale(add(log_probs, noise), 1.0 / cfg.temperature));
    return cfg.hard ? straight_through_onehot(soft) : soft;
}

inline Tensor gumbel_noise(const Shape& shape, Rng& rng) {
    std::vector<double> g(shape_size(shape));
    for (double& v : g) v = standard_gumbel(rng);
    return Tensor::from(shape, std::move(g));
}

inline Tensor gumbel_softmax_sample(const SymbolDistribution& dist, const GumbelConfig& cfg,
                                    Rng& rng) {
    if (!(cfg.temperature > 0.0)) {
        throw ContractError("gumbel_softmax: temperature must be positive");
    }
    return gumbel_softmax_with_noise(dist.log_probs, gumbel_noise(dist.log_probs.shape(), rng), cfg);
}

inline std::vector<int> argmax_rows(const Tensor& x) {
    const std::size_t k = x.cols(), m = x.rows();
    std::vector<int> out(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = x.data().data() + r * k;
        out[r] = static_cast<int>(std::max_element(row, row + k) - row);
    }
    return out;
}

/// Rows of (relaxed) one-hots over levels -> [batch × 2n] interleaved I/Q.
inline Tensor map_to_symbols(const Tensor& onehots, const Constellation& c, std::size_t batch) {
    if (onehots.cols() != c.side()) {
        throw ShapeError("map_to_symbols: " + std::to_string(onehots.cols()) +
                         " categories for a constellation with " + std::to_string(c.side()) +
                         " levels per axis");
    }
    if (onehots.rows() % (2 * batch) != 0) {
        throw ShapeError("map_to_symbols: row count not divisible by 2*batch");
    }
    const Tensor levels = Tensor::from({c.side(), 1}, c.levels);
    const Tensor flat = matmul(reshape(onehots, {onehots.rows(), c.side()}), levels);
    return reshape(flat, {batch, onehots.rows() / batch});
}

inline std::vector<Complex> to_complex(std::span<const double> interleaved) {
    std::vector<Complex> out(interleaved.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = {interleaved[2 * i], interleaved[2 * i + 1]};
    }
    return out;
}

/// Per-row gain sqrt(n·P / sum(energy_row)) applied to x, with gradients
/// to both x and the energy terms.
inline Tensor rescale_rows_to_power(const Tensor& x, const Tensor& energy, double power) {
    require_matrix(x, "rescale_rows_to_power");
    require_same_shape(x, energy, "rescale_rows_to_power");
    const std::size_t m = x.dim(0), c = x.dim(1);
    const double symbols = static_cast<double>(c) / 2.0;
    std::vector<double> gains(m), totals(m), out(x.size());
    for (std::size_t r = 0; r < m; ++r) {
        double e = 0.0;
        for (std::size_t j = 0; j < c; ++j) e += energy.at(r, j);
        if (!(e > 0.0)) {
            throw DegeneratePowerError("normalize_power: sequence " + std::to_string(r) +
                                       " has zero expected energy");
        }
        totals[r] = e;
        gains[r] = std::sqrt(symbols * power / e);
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = gains[r] * x.at(r, j);
    }
    return make_op_result({m, c}, std::move(out), {&x, &energy},
                          [m, c, gains = std::move(gains), totals = std::move(totals)](
                              detail::Node& self) {
        const auto& xd = parent_data(self, 0);
        auto* gx = parent_grad(self, 0);
        auto* ge = parent_grad(self, 1);
        for (std::size_t r = 0; r < m; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                if (gx) (*gx)[r * c + j] += gains[r] * self.grad[r * c + j];
                dot += self.grad[r * c + j] * xd[r * c + j];
            }
            if (ge) {
                const double d = -gains[r] * dot / (2.0 * totals[r]);
                for (std::size_t j = 0; j < c; ++j) (*ge)[r * c + j] += d;
            }
        }
    });
}

/// Exact per-sequence constraint ||y||²/n == P.
inline Tensor normalize_power(const Tensor& y, double power) {
    return normalize_power_rows(as_batch(y, y.cols(), "normalize_power"), power);
}

/// Distribution-level variant: scales by the modulator's expected symbol
/// energy instead of the realized one.
inline Tensor normalize_expected_power(const Tensor& y, const SymbolDistribution& dist,
                                       const Constellation& c, double power) {
    std::vector<double> sq(c.levels);
    for (double& v : sq) v *= v;
    const Tensor level_sq = Tensor::from({c.side(), 1}, std::move(sq));
    const Tensor energy = reshape(matmul(dist.probs, level_sq), y.shape());
    return rescale_rows_to_power(y, energy, power);
}

/// Average complex-symbol power of each row of interleaved I/Q reals.
inline std::vector<double> row_power(const Tensor& y) {
    const std::size_t m = y.rows(), c = y.cols();
    std::vector<double> out(m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < c; ++j) out[r] += y.at(r, j) * y.at(r, j);
        out[r] /= static_cast<double>(c) / 2.0;
    }
    return out;
}

} // namespace deepscm
