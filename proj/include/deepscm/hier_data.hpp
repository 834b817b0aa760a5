#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "deepscm/error.hpp"
#include "deepscm/rng.hpp"
#include "deepscm/tensor.hpp"

// Synthetic hierarchical source with the Markov structure S1 -> S2 -> X:
// every coarse class owns L2/L1 fine classes, every fine class a mean in R^k,
// and X is that mean plus isotropic Gaussian noise, squashed into [0,1]^k.

namespace deepscm {

struct HierSpec {
    std::size_t L1 = 4;
    std::size_t L2 = 8;
    std::size_t k = 32;
    double coarse_sep = 10.0;
    double fine_sep = 2.0;
    double noise_sd = 0.5;
    std::uint64_t seed = 1;

    std::size_t children() const { return L2 / L1; }
    double span() const { return coarse_sep + 3.0 * noise_sd; }
};

inline void validate(const HierSpec& spec) {
    if (spec.L1 == 0 || spec.L2 == 0 || spec.L2 % spec.L1 != 0) {
        throw ContractError("hier spec: L2 must be a positive multiple of L1");
    }
    if (spec.k < 2) {
        throw ContractError("hier spec: k must be at least 2");
    }
    if (!(spec.coarse_sep > 0.0) || spec.fine_sep < 0.0 || spec.noise_sd < 0.0) {
        throw ContractError("hier spec: separations and noise must be non-negative, coarse_sep > 0");
    }
}

inline int coarse_of(int s2, const HierSpec& spec) {
    if (s2 < 0 || static_cast<std::size_t>(s2) >= spec.L2) {
        throw IndexError("coarse_of: fine label " + std::to_string(s2) + " outside [0," +
                         std::to_string(spec.L2) + ")");
    }
    return s2 / static_cast<int>(spec.children());
}

struct Sample {
    std::vector<double> x;
    int s1 = 0;
    int s2 = 0;
};

/// Column-oriented batch of samples; x is [N×k].
struct Dataset {
    Tensor x;
    std::vector<int> s1;
    std::vector<int> s2;

    std::size_t size() const { return s1.size(); }

    Sample sample(std::size_t i) const {
        const std::size_t k = x.cols();
        return {{x.data().begin() + i * k, x.data().begin() + (i + 1) * k}, s1[i], s2[i]};
    }

    Dataset subset(std::span<const std::size_t> rows) const {
        const std::size_t k = x.cols();
        std::vector<double> xs;
        xs.reserve(rows.size() * k);
        Dataset out;
        for (std::size_t r : rows) {
            xs.insert(xs.end(), x.data().begin() + r * k, x.data().begin() + (r + 1) * k);
            out.s1.push_back(s1[r]);
            out.s2.push_back(s2[r]);
        }
        out.x = Tensor::from({rows.size(), k}, std::move(xs));
        return out;
    }
};

class HierSource {
public:
    explicit HierSource(HierSpec spec) : spec_(std::move(spec)) {
        validate(spec_);
        Rng rng = make_rng(spec_.seed, "hier/means");
        const std::size_t k = spec_.k;
        fine_means_.assign(spec_.L2 * k, 0.0);
        for (std::size_t c = 0; c < spec_.L1; ++c) {
            std::vector<double> coarse(k);
            for (double& v : coarse) v = spec_.coarse_sep * (2.0 * uniform_open(rng) - 1.0);
            for (std::size_t f = 0; f < spec_.children(); ++f) {
                const std::size_t fine = c * spec_.children() + f;
                for (std::size_t j = 0; j < k; ++j) {
                    fine_means_[fine * k + j] =
                        coarse[j] + spec_.fine_sep * (2.0 * uniform_open(rng) - 1.0);
                }
            }
        }
    }

    const HierSpec& spec() const { return spec_; }

    double squash(double raw) const {
        return std::clamp(0.5 + raw / (2.0 * spec_.span()), 0.0, 1.0);
    }

    /// Fine-class mean in the observable [0,1]^k space.
    std::vector<double> observable_mean(int s2) const {
        std::vector<double> out(spec_.k);
        for (std::size_t j = 0; j < spec_.k; ++j) {
            out[j] = squash(fine_means_[static_cast<std::size_t>(s2) * spec_.k + j]);
        }
        return out;
    }

    /// Sample `index` of stream `tag`; independent of every other index.
    Sample draw(std::string_view tag, std::uint64_t index) const {
        Rng rng = make_rng(spec_.seed, tag, index);
        Sample s;
        s.s2 = static_cast<int>(std::min<std::size_t>(
            spec_.L2 - 1, static_cast<std::size_t>(uniform_open(rng) * static_cast<double>(spec_.L2))));
        s.s1 = coarse_of(s.s2, spec_);
        s.x.resize(spec_.k);
        for (std::size_t j = 0; j < spec_.k; ++j) {
            const double raw = fine_means_[static_cast<std::size_t>(s.s2) * spec_.k + j] +
                               spec_.noise_sd * standard_normal(rng);
            s.x[j] = squash(raw);
        }
        return s;
    }

    Dataset generate(std::size_t count, std::string_view tag = "train") const {
        if (count < 1) {
            throw ContractError("generate: need at least one sample");
        }
        std::vector<double> xs;
        xs.reserve(count * spec_.k);
        Dataset d;
        for (std::size_t i = 0; i < count; ++i) {
            Sample s = draw(tag, i);
            xs.insert(xs.end(), s.x.begin(), s.x.end());
            d.s1.push_back(s.s1);
            d.s2.push_back(s.s2);
        }
        d.x = Tensor::from({count, spec_.k}, std::move(xs));
        return d;
    }

    /// Nearest observable fine mean; ties go to the lowest label.
    int nearest_fine(std::span<const double> x) const {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t f = 0; f < spec_.L2; ++f) {
            double d = 0.0;
            for (std::size_t j = 0; j < spec_.k; ++j) {
                const double diff = x[j] - squash(fine_means_[f * spec_.k + j]);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(f);
            }
        }
        return best;
    }

private:
    HierSpec spec_;
    std::vector<double> fine_means_;
};

inline Dataset generate(const HierSpec& spec, std::size_t count, std::string_view tag = "train") {
    return HierSource(spec).generate(count, tag);
}

struct BayesAccuracy {
    double coarse = 0.0;
    double fine = 0.0;
};

/// Accuracy of nearest-true-fine-mean classification on a fresh draw.
inline BayesAccuracy bayes_reference(const HierSpec& spec, std::size_t n_test) {
    const HierSource source(spec);
    std::size_t coarse_ok = 0, fine_ok = 0;
    for (std::size_t i = 0; i < n_test; ++i) {
        const Sample s = source.draw("bayes", i);
        const int f = source.nearest_fine(s.x);
        fine_ok += f == s.s2;
        coarse_ok += coarse_of(f, spec) == s.s1;
    }
    const double n = static_cast<double>(n_test);
    return {static_cast<double>(coarse_ok) / n, static_cast<double>(fine_ok) / n};
}

/// CSV with header s1,s2,x_0..x_{k-1}; values printed with 17 significant digits.
inline void export_dataset_csv(const std::string& path, const Dataset& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open " + path + " for writing");
    }
    const std::size_t k = d.x.cols();
    out << "s1,s2";
    for (std::size_t j = 0; j < k; ++j) out << ",x_" << j;
    out << '\n';
    char buf[32];
    for (std::size_t i = 0; i < d.size(); ++i) {
        out << d.s1[i] << ',' << d.s2[i];
        for (std::size_t j = 0; j < k; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", d.x.at(i, j));
            out << ',' << buf;
        }
        out << '\n';
    }
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

inline Dataset import_dataset_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::string line;
    if (!std::getline(in, line) || line.rfind("s1,s2", 0) != 0) {
        throw IoError(path + ": missing s1,s2,x_... header");
    }
    const auto k = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',') - 1);
    Dataset d;
    std::vector<double> xs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(row, cell, ',')) cells.push_back(cell);
        if (cells.size() != k + 2) {
            throw IoError(path + ": row has " + std::to_string(cells.size()) + " fields");
        }
        try {
            d.s1.push_back(std::stoi(cells[0]));
            d.s2.push_back(std::stoi(cells[1]));
            for (std::size_t j = 0; j < k; ++j) xs.push_back(std::stod(cells[j + 2]));
        } catch (const std::exception&) {
            throw IoError(path + ": malformed number in row " + std::to_string(d.s1.size()));
        }
    }
    d.x = Tensor::from({d.s1.size(), k}, std::move(xs));
    return d;
}

} // namespace deepscm
