#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "deepscm/error.hpp"

namespace deepscm {

using Complex = std::complex<double>;

/// Unit-power square QAM alphabet. Points are ordered lexicographically,
/// index = i_level * side + q_level.
struct Constellation {
    std::size_t order = 0;
    std::vector<double> levels;
    std::vector<Complex> points;

    std::size_t side() const { return levels.size(); }
};

/// Two constellations superposed with power allocation factor `paf`:
/// point[i * M2 + j] = sqrt(paf * P) inner[i] + sqrt((1 - paf) * P) outer[j].
struct SuperConstellation {
    Constellation inner;
    Constellation outer;
    double paf = 0.0;
    double power = 1.0;
    std::vector<Complex> points;

    std::size_t index_of(std::size_t inner_index, std::size_t outer_index) const {
        return inner_index * outer.order + outer_index;
    }
};

inline std::size_t qam_side(std::size_t order) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(order))));
    if (order < 4 || side * side != order || side % 2 != 0) {
        throw UnsupportedOrderError("qam: order " + std::to_string(order) +
                                    " is not a square with an even side");
    }
    return side;
}

inline Constellation make_square_qam(std::size_t order) {
    const std::size_t side = qam_side(order);
    Constellation c;
    c.order = order;
    // Odd-integer grid has per-dimension mean square (M-1)/3.
    const double rms = std::sqrt(2.0 * (static_cast<double>(order) - 1.0) / 3.0);
    for (std::size_t i = 0; i < side; ++i) {
        c.levels.push_back((2.0 * static_cast<double>(i) - static_cast<double>(side - 1)) / rms);
    }
    for (double re : c.levels) {
        for (double im : c.levels) {
            c.points.emplace_back(re, im);
        }
    }
    return c;
}

inline void require_paf(double paf) {
    if (!(paf > 0.5 && paf < 1.0)) {
        throw ContractError("power allocation factor " + std::to_string(paf) +
                            " outside (0.5, 1)");
    }
}

inline SuperConstellation superpose(const Constellation& inner, const Constellation& outer,
                                    double paf, double power) {
    require_paf(paf);
    if (!(power > 0.0)) {
        throw ContractError("superpose: power must be positive");
    }
    SuperConstellation sc;
    sc.inner = inner;
    sc.outer = outer;
    sc.paf = paf;
    sc.power = power;
    const double gi = std::sqrt(paf * power);
    const double go = std::sqrt((1.0 - paf) * power);
    sc.points.reserve(inner.points.size() * outer.points.size());
    for (const Complex& ci : inner.points) {
        for (const Complex& co : outer.points) {
            sc.points.push_back(gi * ci + go * co);
        }
    }
    return sc;
}

/// Smallest pairwise distance of a point set (0 when two points coincide).
inline double min_distance(const std::vector<Complex>& points) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (std::size_t j = i + 1; j < points.size(); ++j) {
            best = std::min(best, std::abs(points[i] - points[j]));
        }
    }
    return best;
}

inline double min_distance(const SuperConstellation& sc) { return min_distance(sc.points); }

/// Distinct in-phase amplitudes, ascending; values within `tol` are merged.
inline std::vector<double> per_dim_levels(const SuperConstellation& sc, double tol = 1e-9) {
    std::vector<double> re;
    re.reserve(sc.points.size());
    for (const Complex& p : sc.points) re.push_back(p.real());
    std::sort(re.begin(), re.end());
    std::vector<double> out;
    for (double v : re) {
        if (out.empty() || v - out.back() > tol) out.push_back(v);
    }
    return out;
}

/// Mean |point|² under uniform symbols.
inline double average_power(const std::vector<Complex>& points) {
    double acc = 0.0;
    for (const Complex& p : points) acc += std::norm(p);
    return acc / static_cast<double>(points.size());
}

/// Index of the nearest point; ties resolve to the lowest index.
inline std::size_t nearest_point(const std::vector<Complex>& points, Complex z) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < points.size(); ++i) {
        const double d = std::norm(points[i] - z);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

} // namespace deepscm
