#pragma once

#include <cmath>
#include <string>

#include "deepscm/error.hpp"
#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"

namespace deepscm {

inline double sigma2_from_snr(double power, double snr_db) {
    if (!(power > 0.0)) {
        throw ContractError("sigma2_from_snr: power must be positive");
    }
    return power / std::pow(10.0, snr_db / 10.0);
}

/// Two-receiver degraded AWGN broadcast channel. Receiver 2 is the stronger one.
struct ChannelConfig {
    double power = 1.0;
    double snr1_db = -5.0;
    double snr2_db = 20.0;

    double sigma2_1() const { return sigma2_from_snr(power, snr1_db); }
    double sigma2_2() const { return sigma2_from_snr(power, snr2_db); }
};

inline void validate_degraded(const ChannelConfig& cfg) {
    if (!(cfg.snr2_db > cfg.snr1_db)) {
        throw DegradednessError("channel: receiver 2 SNR (" + std::to_string(cfg.snr2_db) +
                                " dB) must exceed receiver 1 SNR (" +
                                std::to_string(cfg.snr1_db) + " dB)");
    }
}

/// Complex AWGN on interleaved I/Q reals: each real component gets N(0, σ²/2).
/// The noise is a constant, so gradients pass straight through to y.
inline Tensor awgn(const Tensor& y, double sigma2, Rng& rng) {
    if (sigma2 < 0.0) {
        throw ContractError("awgn: noise variance must be non-negative");
    }
    if (sigma2 == 0.0) {
        return add(y, Tensor::zeros(y.shape()));
    }
    const double sd = std::sqrt(sigma2 / 2.0);
    std::vector<double> noise(y.size());
    for (double& v : noise) v = sd * standard_normal(rng);
    return add(y, Tensor::from(y.shape(), std::move(noise)));
}

} // namespace deepscm
